//! Evaluation protocols: similarity ICP alignment, radius cropping around
//! the nose tip, point-to-point RMSE, point-to-plane distance and min-max
//! scaled depth error.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::Mesh;

/// Nose tip within the standard 68-point landmark convention.
pub const NOSE_TIP_LANDMARK: usize = 30;

/// Isotropic scale + rotation + translation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * p) + self.translation
    }

    pub fn apply_all(&self, points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        points.iter().map(|p| self.apply(p)).collect()
    }
}

fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

fn check_nondegenerate(points: &[Vector3<f64>], what: &str) -> Result<()> {
    if points.len() < 4 {
        return Err(Error::Degenerate(format!(
            "{what}: need at least 4 points, got {}",
            points.len()
        )));
    }
    let mu = centroid(points);
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mu;
        cov += d * d.transpose();
    }
    cov /= points.len() as f64;
    let svd = cov.svd(false, false);
    let smax = svd.singular_values[0];
    let smin = svd.singular_values[2];
    if smax <= 0.0 || smin < 1e-12 * smax {
        return Err(Error::Degenerate(format!(
            "{what}: points are coplanar or collinear"
        )));
    }
    Ok(())
}

/// Closed-form least-squares similarity (Umeyama) mapping `source` onto
/// `target` under known correspondence.
pub fn umeyama(source: &[Vector3<f64>], target: &[Vector3<f64>]) -> Result<SimilarityTransform> {
    if source.len() != target.len() || source.is_empty() {
        return Err(Error::dims("umeyama point sets", source.len(), target.len()));
    }
    let n = source.len() as f64;
    let mu_s = centroid(source);
    let mu_t = centroid(target);
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, t) in source.iter().zip(target) {
        let ds = s - mu_s;
        let dt = t - mu_t;
        cov += dt * ds.transpose();
        var_s += ds.norm_squared();
    }
    cov /= n;
    var_s /= n;
    if var_s <= 0.0 {
        return Err(Error::Degenerate("umeyama: source has zero variance".into()));
    }
    let svd = cov.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Degenerate("umeyama: SVD failed".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::Degenerate("umeyama: SVD failed".into()))?;
    let mut s_diag = Vector3::new(1.0, 1.0, 1.0);
    if (u.determinant() * vt.determinant()) < 0.0 {
        s_diag.z = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&s_diag) * vt;
    let d = svd.singular_values;
    let trace_ds = d.x * s_diag.x + d.y * s_diag.y + d.z * s_diag.z;
    let scale = trace_ds / var_s;
    let translation = mu_t - scale * (rotation * mu_s);
    Ok(SimilarityTransform {
        scale,
        rotation,
        translation,
    })
}

/// Exact nearest-neighbor structure over a uniform grid.
struct PointGrid {
    points: Vec<Vector3<f64>>,
    origin: Vector3<f64>,
    cell: f64,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl PointGrid {
    fn build(points: &[Vector3<f64>]) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let extent = hi - lo;
        let target = (points.len() as f64).cbrt().ceil().max(1.0);
        let cell = (extent.x.max(extent.y).max(extent.z) / target).max(1e-9);
        let dim = |e: f64| ((e / cell).floor() as usize + 1).min(256);
        let dims = [dim(extent.x), dim(extent.y), dim(extent.z)];
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let grid = PointGrid {
            points: points.to_vec(),
            origin: lo,
            cell,
            dims,
            cells: Vec::new(),
        };
        for (i, p) in points.iter().enumerate() {
            let c = grid.cell_of(p);
            cells[grid.cell_index(c)].push(i as u32);
        }
        PointGrid { cells, ..grid }
    }

    fn cell_of(&self, p: &Vector3<f64>) -> [usize; 3] {
        let f = |x: f64, o: f64, d: usize| {
            (((x - o) / self.cell).floor().max(0.0) as usize).min(d - 1)
        };
        [
            f(p.x, self.origin.x, self.dims[0]),
            f(p.y, self.origin.y, self.dims[1]),
            f(p.z, self.origin.z, self.dims[2]),
        ]
    }

    fn cell_index(&self, c: [usize; 3]) -> usize {
        (c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]
    }

    /// Exact nearest neighbor: expands Chebyshev rings until no unsearched
    /// cell can contain a closer point.
    fn nearest(&self, q: &Vector3<f64>) -> (usize, f64) {
        let qc = self.cell_of(q);
        let max_ring = *self.dims.iter().max().unwrap();
        let mut best = (usize::MAX, f64::INFINITY);
        for ring in 0..=max_ring {
            // Any point in an unsearched cell is at least (ring-1)*cell away.
            if ring > 0 && best.1.sqrt() <= (ring as f64 - 1.0) * self.cell {
                break;
            }
            let lo = |c: usize, r: usize| c.saturating_sub(r);
            let hi = |c: usize, r: usize, d: usize| (c + r).min(d - 1);
            for z in lo(qc[2], ring)..=hi(qc[2], ring, self.dims[2]) {
                for y in lo(qc[1], ring)..=hi(qc[1], ring, self.dims[1]) {
                    for x in lo(qc[0], ring)..=hi(qc[0], ring, self.dims[0]) {
                        // Only the shell of the ring is new.
                        let cheb = (x as isize - qc[0] as isize)
                            .abs()
                            .max((y as isize - qc[1] as isize).abs())
                            .max((z as isize - qc[2] as isize).abs())
                            as usize;
                        if cheb != ring {
                            continue;
                        }
                        for &i in &self.cells[self.cell_index([x, y, z])] {
                            let d2 = (self.points[i as usize] - q).norm_squared();
                            if d2 < best.1 || (d2 == best.1 && (i as usize) < best.0) {
                                best = (i as usize, d2);
                            }
                        }
                    }
                }
            }
        }
        (best.0, best.1.sqrt())
    }
}

/// Result of [`icp_align`].
#[derive(Debug, Clone)]
pub struct IcpResult {
    pub transform: SimilarityTransform,
    /// RMS correspondence residual after the final update.
    pub residual: f64,
    pub iterations: usize,
    /// RMS residual after each iteration; non-increasing.
    pub residual_trace: Vec<f64>,
}

/// Iterative closest point with an isotropic-scale similarity solved in
/// closed form each iteration. Deterministic. Initialized by matching
/// centroids and RMS spreads, which removes the gross scale/translation
/// offset before the first correspondence search.
pub fn icp_align(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    iters: usize,
    tol: f64,
) -> Result<IcpResult> {
    check_nondegenerate(source, "icp source")?;
    check_nondegenerate(target, "icp target")?;
    let grid = PointGrid::build(target);

    let mu_s = centroid(source);
    let mu_t = centroid(target);
    let spread = |pts: &[Vector3<f64>], mu: &Vector3<f64>| {
        (pts.iter().map(|p| (p - mu).norm_squared()).sum::<f64>() / pts.len() as f64).sqrt()
    };
    let s0 = (spread(target, &mu_t) / spread(source, &mu_s)).max(1e-12);
    let mut transform = SimilarityTransform {
        scale: s0,
        rotation: Matrix3::identity(),
        translation: mu_t - s0 * mu_s,
    };

    let mut prev_residual = f64::INFINITY;
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..iters {
        let moved = transform.apply_all(source);
        let matched: Vec<Vector3<f64>> = moved
            .par_iter()
            .map(|p| target[grid.nearest(p).0])
            .collect();
        transform = umeyama(source, &matched)?;
        let moved = transform.apply_all(source);
        // RMS of the nearest-neighbor distances: monotonically
        // non-increasing because both the re-matching and the closed-form
        // solve reduce the underlying sum of squares.
        let residual = (moved
            .par_iter()
            .map(|p| grid.nearest(p).1.powi(2))
            .sum::<f64>()
            / source.len() as f64)
            .sqrt();
        iterations += 1;
        trace.push(residual);
        if (prev_residual - residual).abs() < tol {
            prev_residual = residual;
            break;
        }
        prev_residual = residual;
    }
    Ok(IcpResult {
        transform,
        residual: prev_residual,
        iterations,
        residual_trace: trace,
    })
}

/// Keeps vertices within `radius` of `center`, dropping triangles that lose
/// a vertex; the result is reindexed. An empty crop is a valid result.
pub fn crop_radius(mesh: &Mesh, center: &Vector3<f64>, radius: f64) -> Mesh {
    let keep: Vec<bool> = mesh
        .vertices
        .iter()
        .map(|v| (v - center).norm() <= radius)
        .collect();
    let mut remap = vec![u32::MAX; mesh.vertices.len()];
    let mut vertices = Vec::new();
    let mut uv = Vec::new();
    for (i, &k) in keep.iter().enumerate() {
        if k {
            remap[i] = vertices.len() as u32;
            vertices.push(mesh.vertices[i]);
            if !mesh.uv.is_empty() {
                uv.push(mesh.uv[i]);
            }
        }
    }
    let triangles = mesh
        .triangles
        .iter()
        .filter(|t| t.iter().all(|&i| keep[i as usize]))
        .map(|t| [remap[t[0] as usize], remap[t[1] as usize], remap[t[2] as usize]])
        .collect();
    Mesh {
        vertices,
        uv,
        triangles,
    }
}

/// RMSE over corresponding points.
pub fn point_to_point_rmse(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dims("correspondent point sets", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::EmptyResult("point_to_point_rmse on empty sets".into()));
    }
    let ms = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p - q).norm_squared())
        .sum::<f64>()
        / a.len() as f64;
    Ok(ms.sqrt())
}

/// Closest point on a triangle (Ericson, Real-Time Collision Detection),
/// together with whether it lies in the face interior.
fn closest_point_on_triangle(
    p: &Vector3<f64>,
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> (Vector3<f64>, bool) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, false);
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, false);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return (a + v * ab, false);
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, false);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return (a + w * ac, false);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + w * (c - b), false);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, true)
}

/// Mean point-to-plane distance from `source` points to the `target` mesh,
/// plus the per-point values. The distance is measured along the face
/// normal at the closest surface point; closest points on edges or vertices
/// fall back to the point-to-point distance.
pub fn point_to_plane(source: &[Vector3<f64>], target: &Mesh) -> Result<(f64, Vec<f64>)> {
    if target.triangles.is_empty() {
        return Err(Error::EmptyResult("point_to_plane target has no triangles".into()));
    }
    if source.is_empty() {
        return Err(Error::EmptyResult("point_to_plane on empty source".into()));
    }
    // Bin triangle centroids; candidate triangles are taken from expanding
    // rings, then tested exactly.
    let centroids: Vec<Vector3<f64>> = target
        .triangles
        .iter()
        .map(|t| {
            (target.vertices[t[0] as usize]
                + target.vertices[t[1] as usize]
                + target.vertices[t[2] as usize])
                / 3.0
        })
        .collect();
    let grid = PointGrid::build(&centroids);
    // The largest triangle circumradius bounds how far a triangle's surface
    // can reach beyond its centroid.
    let mut reach: f64 = 0.0;
    for t in &target.triangles {
        let c = (target.vertices[t[0] as usize]
            + target.vertices[t[1] as usize]
            + target.vertices[t[2] as usize])
            / 3.0;
        for &i in t {
            reach = reach.max((target.vertices[i as usize] - c).norm());
        }
    }

    let per_point: Vec<f64> = source
        .par_iter()
        .map(|p| {
            // Nearest centroid gives an upper bound on the surface distance.
            let (_, d_centroid) = grid.nearest(p);
            let bound = d_centroid + reach;
            let mut best = (f64::INFINITY, 0usize, Vector3::zeros(), false);
            for (ti, tri) in target.triangles.iter().enumerate() {
                if (centroids[ti] - p).norm() > bound + reach {
                    continue;
                }
                let (q, interior) = closest_point_on_triangle(
                    p,
                    &target.vertices[tri[0] as usize],
                    &target.vertices[tri[1] as usize],
                    &target.vertices[tri[2] as usize],
                );
                let d = (p - q).norm();
                if d < best.0 {
                    best = (d, ti, q, interior);
                }
            }
            let (d, ti, q, interior) = best;
            if interior {
                let tri = target.triangles[ti];
                let n = (target.vertices[tri[1] as usize] - target.vertices[tri[0] as usize])
                    .cross(&(target.vertices[tri[2] as usize] - target.vertices[tri[0] as usize]));
                let len = n.norm();
                if len > 1e-20 {
                    return ((p - q).dot(&(n / len))).abs();
                }
            }
            d
        })
        .collect();
    let mean = per_point.iter().sum::<f64>() / per_point.len() as f64;
    Ok((mean, per_point))
}

/// Mean absolute depth difference after min-max rescaling the prediction to
/// the ground-truth range over the valid mask. Exactly invariant to positive
/// affine maps of the prediction.
pub fn depth_error(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() || pred.len() != mask.len() {
        return Err(Error::dims("depth images", gt.len(), pred.len()));
    }
    let mut p_min = f64::INFINITY;
    let mut p_max = f64::NEG_INFINITY;
    let mut g_min = f64::INFINITY;
    let mut g_max = f64::NEG_INFINITY;
    let mut count = 0usize;
    for i in 0..pred.len() {
        if mask[i] {
            p_min = p_min.min(pred[i]);
            p_max = p_max.max(pred[i]);
            g_min = g_min.min(gt[i]);
            g_max = g_max.max(gt[i]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyResult("depth_error mask is empty".into()));
    }
    if p_max - p_min <= 0.0 {
        return Err(Error::Undefined(
            "depth_error: prediction is constant over the mask".into(),
        ));
    }
    let scale = (g_max - g_min) / (p_max - p_min);
    let mut sum = 0.0;
    for i in 0..pred.len() {
        if mask[i] {
            let rescaled = (pred[i] - p_min) * scale + g_min;
            sum += (rescaled - gt[i]).abs();
        }
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::icosphere;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn cloud(rng: &mut StdRng, n: usize, spread: f64) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-spread..spread),
                    rng.gen_range(-spread..spread),
                    rng.gen_range(-spread..spread),
                )
            })
            .collect()
    }

    #[test]
    fn grid_nearest_matches_brute_force() {
        let mut rng = StdRng::seed_from_u64(41);
        let pts = cloud(&mut rng, 300, 10.0);
        let grid = PointGrid::build(&pts);
        for _ in 0..100 {
            let q = Vector3::new(
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
            );
            let (gi, gd) = grid.nearest(&q);
            let (bi, bd) = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - q).norm()))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            assert_eq!(gi, bi);
            assert!((gd - bd).abs() < 1e-12);
        }
    }

    #[test]
    fn umeyama_recovers_known_similarity() {
        let mut rng = StdRng::seed_from_u64(42);
        let src = cloud(&mut rng, 50, 5.0);
        let t = SimilarityTransform {
            scale: 2.0,
            rotation: crate::camera::rotation_matrix(0.0, 15.0_f64.to_radians(), 0.0),
            translation: Vector3::new(5.0, 0.0, 0.0),
        };
        let dst = t.apply_all(&src);
        let est = umeyama(&src, &dst).unwrap();
        assert!((est.scale - 2.0).abs() < 1e-9);
        assert!((est.rotation - t.rotation).abs().max() < 1e-9);
        assert!((est.translation - t.translation).norm() < 1e-9);
    }

    #[test]
    fn icp_identity_for_identical_sets() {
        let mut rng = StdRng::seed_from_u64(43);
        let pts = cloud(&mut rng, 200, 8.0);
        let res = icp_align(&pts, &pts, 30, 1e-12).unwrap();
        assert!((res.transform.scale - 1.0).abs() < 1e-9);
        assert!((res.transform.rotation - Matrix3::identity()).abs().max() < 1e-9);
        assert!(res.transform.translation.norm() < 1e-9);
        assert!(res.residual < 1e-9);
    }

    #[test]
    fn icp_recovers_known_transform() {
        // Dense sphere samples so nearest neighbors are informative.
        let sphere = icosphere(3, 10.0);
        let t = SimilarityTransform {
            scale: 2.0,
            rotation: crate::camera::rotation_matrix(0.0, 15.0_f64.to_radians(), 0.0),
            translation: Vector3::new(5.0, 0.0, 0.0),
        };
        // Bumpy sphere (not rotation symmetric) so the yaw is observable.
        let src: Vec<Vector3<f64>> = sphere
            .vertices
            .iter()
            .map(|v| {
                let bump = 1.0
                    + 0.15 * (3.0 * v.x / 10.0).sin() * (2.0 * v.y / 10.0).cos()
                    + 0.1 * (v.z / 10.0).sin();
                v * bump
            })
            .collect();
        let dst = t.apply_all(&src);
        let res = icp_align(&src, &dst, 100, 1e-12).unwrap();
        assert!((res.transform.scale - 2.0).abs() < 1e-3, "scale {}", res.transform.scale);
        assert!(
            (res.transform.rotation - t.rotation).abs().max() < 1e-3,
            "rotation error {}",
            (res.transform.rotation - t.rotation).abs().max()
        );
        assert!((res.transform.translation - t.translation).norm() < 1e-3);
    }

    #[test]
    fn icp_residual_is_non_increasing() {
        let mut rng = StdRng::seed_from_u64(44);
        let sphere = icosphere(2, 10.0);
        let src: Vec<Vector3<f64>> = sphere
            .vertices
            .iter()
            .map(|v| v + Vector3::new(rng.gen_range(-0.1..0.1), 0.0, 0.0))
            .collect();
        let t = SimilarityTransform {
            scale: 1.3,
            rotation: crate::camera::rotation_matrix(0.1, -0.2, 0.15),
            translation: Vector3::new(2.0, -1.0, 3.0),
        };
        let dst = t.apply_all(&src);
        let res = icp_align(&src, &dst, 50, 0.0).unwrap();
        for w in res.residual_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "residual increased: {w:?}");
        }
    }

    #[test]
    fn icp_rejects_degenerate_input() {
        // Coplanar points.
        let flat: Vec<Vector3<f64>> = (0..20)
            .map(|i| Vector3::new(i as f64, (i * 7 % 5) as f64, 0.0))
            .collect();
        assert!(icp_align(&flat, &flat, 10, 1e-9).is_err());
    }

    #[test]
    fn crop_radius_extremes() {
        let sphere = icosphere(1, 5.0);
        let center = Vector3::zeros();
        let all = crop_radius(&sphere, &center, f64::INFINITY);
        assert_eq!(all.vertices.len(), sphere.vertices.len());
        assert_eq!(all.triangles.len(), sphere.triangles.len());
        let none = crop_radius(&sphere, &center, 0.0);
        assert!(none.is_empty());
    }

    #[test]
    fn crop_radius_on_toy_face_is_a_proper_subset() {
        let model = crate::facemodel::generate_toy_model(3, 16, 2, 2, 2).unwrap();
        let vs = model.mean_vertices();
        let nose = vs[model.landmark_indices[NOSE_TIP_LANDMARK] as usize];
        let mesh = Mesh::new(vs, model.triangles.clone());
        let cropped = crop_radius(&mesh, &nose, 95.0);
        assert!(!cropped.vertices.is_empty());
        assert!(cropped.vertices.len() < mesh.vertices.len());
        // Reindexed triangles stay valid.
        for t in &cropped.triangles {
            for &i in t {
                assert!((i as usize) < cropped.vertices.len());
            }
        }
    }

    #[test]
    fn rmse_basics_and_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(45);
        let a = cloud(&mut rng, 64, 5.0);
        assert_eq!(point_to_point_rmse(&a, &a).unwrap(), 0.0);
        let b: Vec<Vector3<f64>> = a.iter().map(|p| p + Vector3::new(1.0, 0.0, 0.0)).collect();
        assert!((point_to_point_rmse(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = cloud(&mut rng, 64, 5.0);
        let mut acc = 0.0;
        for k in 0..64 {
            acc += (a[k] - c[k]).norm_squared();
        }
        let expected = (acc / 64.0).sqrt();
        assert!((point_to_point_rmse(&a, &c).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn rmse_is_a_metric_on_random_triples() {
        let mut rng = StdRng::seed_from_u64(46);
        for _ in 0..20 {
            let a = cloud(&mut rng, 16, 3.0);
            let b = cloud(&mut rng, 16, 3.0);
            let c = cloud(&mut rng, 16, 3.0);
            let dab = point_to_point_rmse(&a, &b).unwrap();
            let dba = point_to_point_rmse(&b, &a).unwrap();
            let dac = point_to_point_rmse(&a, &c).unwrap();
            let dcb = point_to_point_rmse(&c, &b).unwrap();
            assert!((dab - dba).abs() < 1e-12);
            assert!(dab <= dac + dcb + 1e-12, "triangle inequality violated");
        }
    }

    #[test]
    fn point_to_plane_on_surface_is_zero() {
        let sphere = icosphere(2, 5.0);
        // Sample points on triangle interiors.
        let pts: Vec<Vector3<f64>> = sphere
            .triangles
            .iter()
            .step_by(3)
            .map(|t| {
                (sphere.vertices[t[0] as usize] * 0.5
                    + sphere.vertices[t[1] as usize] * 0.25
                    + sphere.vertices[t[2] as usize] * 0.25)
            })
            .collect();
        let (mean, _) = point_to_plane(&pts, &sphere).unwrap();
        assert!(mean < 1e-9, "mean {mean}");
    }

    #[test]
    fn point_to_plane_against_flat_target() {
        let plane = Mesh {
            vertices: vec![
                Vector3::new(-10.0, -10.0, 0.0),
                Vector3::new(10.0, -10.0, 0.0),
                Vector3::new(10.0, 10.0, 0.0),
                Vector3::new(-10.0, 10.0, 0.0),
            ],
            uv: vec![],
            triangles: vec![[0, 1, 2], [0, 2, 3]],
        };
        let (mean, per) = point_to_plane(&[Vector3::new(0.0, 0.0, 2.0)], &plane).unwrap();
        assert!((mean - 2.0).abs() < 1e-12);
        assert_eq!(per.len(), 1);
    }

    #[test]
    fn point_to_plane_matches_analytic_sphere_gap() {
        // Points on a sphere of radius 10.3 against a fine sphere mesh of
        // radius 10: the radial gap is 0.3.
        let target = icosphere(4, 10.0);
        let probe = icosphere(2, 10.3);
        let (mean, _) = point_to_plane(&probe.vertices, &target).unwrap();
        assert!((mean - 0.3).abs() / 0.3 < 0.02, "mean {mean}");
    }

    #[test]
    fn depth_error_basics() {
        let gt = vec![1.0, 2.0, 3.0, 4.0];
        let mask = vec![true; 4];
        assert_eq!(depth_error(&gt, &gt, &mask).unwrap(), 0.0);
        // Positive affine maps are removed exactly.
        let pred: Vec<f64> = gt.iter().map(|d| 2.0 * d + 5.0).collect();
        assert!(depth_error(&pred, &gt, &mask).unwrap() < 1e-12);
        // Constant prediction is undefined.
        let flat = vec![7.0; 4];
        assert!(matches!(
            depth_error(&flat, &gt, &mask),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn depth_error_matches_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(47);
        let n = 100;
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..50.0)).collect();
        let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..50.0)).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
        // Loop oracle.
        let masked: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        let pmin = masked.iter().map(|&i| pred[i]).fold(f64::INFINITY, f64::min);
        let pmax = masked.iter().map(|&i| pred[i]).fold(f64::NEG_INFINITY, f64::max);
        let gmin = masked.iter().map(|&i| gt[i]).fold(f64::INFINITY, f64::min);
        let gmax = masked.iter().map(|&i| gt[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &i in &masked {
            let r = (pred[i] - pmin) / (pmax - pmin) * (gmax - gmin) + gmin;
            sum += (r - gt[i]).abs();
        }
        let expected = sum / masked.len() as f64;
        assert!((depth_error(&pred, &gt, &mask).unwrap() - expected).abs() < 1e-9);
    }
}
