//! Z-buffered triangle rasterization with exact interior gradients, plus the
//! full coarse-face render and its backward pass.
//!
//! Conventions: pixel-center sampling; smaller view-space depth wins the
//! z-test, equal depths go to the lower triangle index; pixels exactly on
//! shared edges are resolved by a top-left fill rule so coverage partitions.
//! Gradients with respect to screen-space positions flow only through the
//! barycentric weights of pixels whose covering triangle is fixed; coverage
//! and occlusion boundary changes contribute zero.

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::camera::{
    self, Pose, PoseGrad, RotationWithGrad,
};
use crate::error::{Error, Result};
use crate::facemodel::{self, FaceModel, ShapeCoeffs, Synthesis};
use crate::lighting::{self, ShLighting};

/// Rendered image plus the per-pixel rasterization record.
#[derive(Debug, Clone)]
pub struct RasterOutput {
    pub width: usize,
    pub height: usize,
    /// H×W×3 linear RGB; background pixels are (0,0,0).
    pub color: Vec<f64>,
    /// H×W covering triangle index, -1 for background.
    pub tri_id: Vec<i32>,
    /// H×W×3 barycentric weights in original vertex order.
    pub bary: Vec<f64>,
    /// H×W interpolated view-space depth (background: +inf).
    pub depth: Vec<f64>,
    /// H×W coverage mask.
    pub mask: Vec<bool>,
}

impl RasterOutput {
    fn background(width: usize, height: usize) -> Self {
        RasterOutput {
            width,
            height,
            color: vec![0.0; width * height * 3],
            tri_id: vec![-1; width * height],
            bary: vec![0.0; width * height * 3],
            depth: vec![f64::INFINITY; width * height],
            mask: vec![false; width * height],
        }
    }

    /// Hash of the tri_id image, used by the coverage-stable gradient
    /// protocol to detect visibility changes.
    pub fn coverage_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.tri_id.hash(&mut h);
        h.finish()
    }
}

/// Converts camera image coordinates (origin center, +y up, pixel units) to
/// row space (x right along columns, y down along rows, pixel centers at
/// half-integers).
#[inline]
pub(crate) fn to_row_space(p: &Vector2<f64>, width: usize, height: usize) -> Vector2<f64> {
    Vector2::new(p.x + width as f64 / 2.0, height as f64 / 2.0 - p.y)
}

#[inline]
pub(crate) fn cross2(a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

#[inline]
fn rot90(v: Vector2<f64>) -> Vector2<f64> {
    Vector2::new(-v.y, v.x)
}

/// Top-left classification of an edge whose interior lies on the positive
/// side of cross2(dir, p - start) in row space (y down).
#[inline]
fn is_top_left(dir: &Vector2<f64>) -> bool {
    dir.y < 0.0 || (dir.y == 0.0 && dir.x > 0.0)
}

struct ScreenTriangle {
    idx: u32,
    // row-space vertex positions
    v: [Vector2<f64>; 3],
    depth: [f64; 3],
    // signed double area in row space
    area2: f64,
}

impl ScreenTriangle {
    /// Coverage test with the top-left fill rule; returns barycentric
    /// weights in original vertex order when the pixel center is covered.
    fn cover(&self, p: &Vector2<f64>) -> Option<[f64; 3]> {
        let s = if self.area2 > 0.0 { 1.0 } else { -1.0 };
        let [a, b, c] = self.v;
        let raw = [
            cross2(&(c - b), &(p - b)),
            cross2(&(a - c), &(p - c)),
            cross2(&(b - a), &(p - a)),
        ];
        let dirs = [c - b, a - c, b - a];
        for k in 0..3 {
            let e = s * raw[k];
            if e < 0.0 || (e == 0.0 && !is_top_left(&(s * dirs[k]))) {
                return None;
            }
        }
        Some([raw[0] / self.area2, raw[1] / self.area2, raw[2] / self.area2])
    }
}

/// Rasterization of `triangles` over projected `points` (camera image
/// coordinates) with per-vertex `attributes` of width `attr_count`,
/// barycentrically interpolated. With `cull_backfaces`, triangles that are
/// clockwise in screen space are skipped.
pub fn rasterize(
    points: &[Vector2<f64>],
    depth: &[f64],
    attributes: &[f64],
    attr_count: usize,
    triangles: &[[u32; 3]],
    width: usize,
    height: usize,
    cull_backfaces: bool,
) -> Result<(RasterOutput, Vec<f64>)> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput("image dimensions must be nonzero".into()));
    }
    if depth.len() != points.len() {
        return Err(Error::dims("depth array", points.len(), depth.len()));
    }
    if attributes.len() != points.len() * attr_count {
        return Err(Error::dims(
            "attribute array",
            points.len() * attr_count,
            attributes.len(),
        ));
    }

    let points_row: Vec<Vector2<f64>> = points
        .iter()
        .map(|p| to_row_space(p, width, height))
        .collect();
    // The y flip makes screen-space clockwise positive in row space.
    let cull = if cull_backfaces {
        CullRowSpace::Positive
    } else {
        CullRowSpace::None
    };
    let out = scan_rowspace(&points_row, depth, triangles, width, height, cull);
    let attrs = interpolate_attributes(&out, triangles, attributes, attr_count);
    Ok((out, attrs))
}

/// Which row-space orientation to skip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum CullRowSpace {
    None,
    Positive,
}

/// Barycentric interpolation of per-vertex attributes over covered pixels.
pub(crate) fn interpolate_attributes(
    out: &RasterOutput,
    triangles: &[[u32; 3]],
    attributes: &[f64],
    attr_count: usize,
) -> Vec<f64> {
    let npix = out.width * out.height;
    let mut attrs = vec![0.0; npix * attr_count];
    for pix in 0..npix {
        if !out.mask[pix] {
            continue;
        }
        let tri = triangles[out.tri_id[pix] as usize];
        let w = &out.bary[3 * pix..3 * pix + 3];
        for a in 0..attr_count {
            let mut v = 0.0;
            for k in 0..3 {
                v += w[k] * attributes[tri[k] as usize * attr_count + a];
            }
            attrs[pix * attr_count + a] = v;
        }
    }
    attrs
}

/// Core scan loop over points already in row space. Parallelizes over rows;
/// each pixel's result depends only on the full triangle list, so the output
/// is identical for any thread count.
pub(crate) fn scan_rowspace(
    points_row: &[Vector2<f64>],
    depth: &[f64],
    triangles: &[[u32; 3]],
    width: usize,
    height: usize,
    cull: CullRowSpace,
) -> RasterOutput {
    let mut out = RasterOutput::background(width, height);
    let mut screen: Vec<ScreenTriangle> = Vec::with_capacity(triangles.len());
    for (t, tri) in triangles.iter().enumerate() {
        let v = [
            points_row[tri[0] as usize],
            points_row[tri[1] as usize],
            points_row[tri[2] as usize],
        ];
        let area2 = cross2(&(v[1] - v[0]), &(v[2] - v[0]));
        if area2 == 0.0 || !area2.is_finite() {
            continue;
        }
        if cull == CullRowSpace::Positive && area2 > 0.0 {
            continue;
        }
        screen.push(ScreenTriangle {
            idx: t as u32,
            v,
            depth: [
                depth[tri[0] as usize],
                depth[tri[1] as usize],
                depth[tri[2] as usize],
            ],
            area2,
        });
    }

    // Bin triangle references per row.
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); height];
    for (i, st) in screen.iter().enumerate() {
        let ymin = st.v[0].y.min(st.v[1].y).min(st.v[2].y);
        let ymax = st.v[0].y.max(st.v[1].y).max(st.v[2].y);
        let r0 = (ymin - 0.5).ceil().max(0.0) as usize;
        let r1 = (ymax - 0.5).floor().min(height as f64 - 1.0);
        if r1 < 0.0 {
            continue;
        }
        for r in r0..=r1 as usize {
            rows[r].push(i as u32);
        }
    }

    let tri_rows: Vec<_> = out
        .tri_id
        .chunks_mut(width)
        .zip(out.bary.chunks_mut(width * 3))
        .zip(out.depth.chunks_mut(width))
        .zip(out.mask.chunks_mut(width))
        .enumerate()
        .collect();

    tri_rows.into_par_iter().for_each(
        |(r, (((tri_row, bary_row), depth_row), mask_row))| {
            let py = r as f64 + 0.5;
            for &si in &rows[r] {
                let st = &screen[si as usize];
                let xmin = st.v[0].x.min(st.v[1].x).min(st.v[2].x);
                let xmax = st.v[0].x.max(st.v[1].x).max(st.v[2].x);
                let c0 = (xmin - 0.5).ceil().max(0.0) as usize;
                let c1f = (xmax - 0.5).floor().min(width as f64 - 1.0);
                if c1f < 0.0 {
                    continue;
                }
                for c in c0..=c1f as usize {
                    let p = Vector2::new(c as f64 + 0.5, py);
                    if let Some(w) = st.cover(&p) {
                        let d = w[0] * st.depth[0] + w[1] * st.depth[1] + w[2] * st.depth[2];
                        // Strict inequality keeps the lower index on ties
                        // because triangles are visited in index order.
                        if d < depth_row[c] {
                            depth_row[c] = d;
                            tri_row[c] = st.idx as i32;
                            mask_row[c] = true;
                            bary_row[3 * c] = w[0];
                            bary_row[3 * c + 1] = w[1];
                            bary_row[3 * c + 2] = w[2];
                        }
                    }
                }
            }
        },
    );
    out
}

/// Per-vertex screen-position cotangents for one pixel, from cotangents on
/// its barycentric weights. `p` and the triangle vertices are in row space;
/// the result is converted back to camera image coordinates.
pub(crate) fn bary_backward(
    v: &[Vector2<f64>; 3],
    area2: f64,
    w: &[f64; 3],
    p: &Vector2<f64>,
    d_w: &[f64; 3],
) -> [Vector2<f64>; 3] {
    let [a, b, c] = *v;
    let s = d_w[0] * w[0] + d_w[1] * w[1] + d_w[2] * w[2];
    let d_a = (rot90(c - *p) * d_w[1] + rot90(*p - b) * d_w[2] - rot90(c - b) * s) / area2;
    let d_b = (rot90(*p - c) * d_w[0] + rot90(a - *p) * d_w[2] - rot90(a - c) * s) / area2;
    let d_c = (rot90(b - *p) * d_w[0] + rot90(*p - a) * d_w[1] - rot90(b - a) * s) / area2;
    // Row space -> camera coordinates: x unchanged, y negated.
    let flip = |v: Vector2<f64>| Vector2::new(v.x, -v.y);
    [flip(d_a), flip(d_b), flip(d_c)]
}

/// Everything saved from a forward render that the backward pass needs.
pub struct RenderState {
    pub width: usize,
    pub height: usize,
    pub model_tris: Vec<[u32; 3]>,
    pub synthesis: Synthesis,
    pub normals_model: Vec<Vector3<f64>>,
    pub rotation: RotationWithGrad,
    pub pose: Pose,
    pub points: Vec<Vector2<f64>>,
    pub normals_view: Vec<Vector3<f64>>,
    pub lighting: ShLighting,
    pub raster: RasterOutput,
    /// Interpolated (un-normalized) view normals per covered pixel.
    pub pixel_normal_raw: Vec<Vector3<f64>>,
    /// Interpolated albedo per covered pixel.
    pub pixel_albedo: Vec<[f64; 3]>,
}

/// Gradients of a scalar with respect to the full scene parameter block.
#[derive(Debug, Clone)]
pub struct SceneGrad {
    pub coeffs: ShapeCoeffs,
    pub pose: PoseGrad,
    pub lighting: [[f64; 3]; 9],
}

impl SceneGrad {
    pub fn zeros(model: &FaceModel) -> Self {
        SceneGrad {
            coeffs: ShapeCoeffs::zeros(model),
            pose: PoseGrad::default(),
            lighting: [[0.0; 3]; 9],
        }
    }

    pub fn add_assign(&mut self, other: &SceneGrad) {
        let add = |a: &mut Vec<f64>, b: &[f64]| {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        };
        add(&mut self.coeffs.x_id, &other.coeffs.x_id);
        add(&mut self.coeffs.x_exp, &other.coeffs.x_exp);
        add(&mut self.coeffs.x_tex, &other.coeffs.x_tex);
        self.pose.add_assign(&other.pose);
        for k in 0..9 {
            for c in 0..3 {
                self.lighting[k][c] += other.lighting[k][c];
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for x in self
            .coeffs
            .x_id
            .iter_mut()
            .chain(&mut self.coeffs.x_exp)
            .chain(&mut self.coeffs.x_tex)
        {
            *x *= s;
        }
        self.pose.scale(s);
        for k in 0..9 {
            for c in 0..3 {
                self.lighting[k][c] *= s;
            }
        }
    }
}

/// Renders the coarse face: synthesize, vertex normals (rotated into view
/// space for shading), orthographic projection, rasterization and SH
/// shading. Background is black.
pub fn render_face(
    model: &FaceModel,
    coeffs: &ShapeCoeffs,
    pose: &Pose,
    light: &ShLighting,
    width: usize,
    height: usize,
) -> Result<RasterOutput> {
    Ok(render_face_with_state(model, coeffs, pose, light, width, height)?.raster)
}

/// As [`render_face`], but keeps the intermediate state for
/// [`render_backward`].
pub fn render_face_with_state(
    model: &FaceModel,
    coeffs: &ShapeCoeffs,
    pose: &Pose,
    light: &ShLighting,
    width: usize,
    height: usize,
) -> Result<RenderState> {
    pose.validate()?;
    light.validate()?;
    let synthesis = facemodel::synthesize(model, coeffs)?;
    let normals_model = facemodel::vertex_normals(&synthesis.vertices, &model.triangles);
    let rotation = camera::rotation_with_grad(pose.rx, pose.ry, pose.rz);
    let projection = camera::transform_project(pose, &synthesis.vertices);
    let normals_view: Vec<Vector3<f64>> =
        normals_model.iter().map(|n| rotation.r * n).collect();

    // Per-vertex attributes: rgb albedo + view normal.
    let v_count = synthesis.vertices.len();
    let mut attributes = vec![0.0; v_count * 6];
    for i in 0..v_count {
        attributes[i * 6..i * 6 + 3].copy_from_slice(&synthesis.albedo[i]);
        attributes[i * 6 + 3] = normals_view[i].x;
        attributes[i * 6 + 4] = normals_view[i].y;
        attributes[i * 6 + 5] = normals_view[i].z;
    }
    let (mut raster, attrs) = rasterize(
        &projection.points,
        &projection.depth,
        &attributes,
        6,
        &model.triangles,
        width,
        height,
        true,
    )?;

    let mut pixel_normal_raw = vec![Vector3::zeros(); width * height];
    let mut pixel_albedo = vec![[0.0; 3]; width * height];
    for pix in 0..width * height {
        if !raster.mask[pix] {
            continue;
        }
        let a = &attrs[pix * 6..pix * 6 + 6];
        let albedo = [a[0], a[1], a[2]];
        let n_raw = Vector3::new(a[3], a[4], a[5]);
        let n = if n_raw.norm() < 1e-20 {
            Vector3::new(0.0, 0.0, 1.0)
        } else {
            n_raw.normalize()
        };
        let shaded = lighting::shade(&albedo, &n, light);
        raster.color[3 * pix..3 * pix + 3].copy_from_slice(&shaded);
        pixel_normal_raw[pix] = n_raw;
        pixel_albedo[pix] = albedo;
    }

    Ok(RenderState {
        width,
        height,
        model_tris: model.triangles.clone(),
        synthesis,
        normals_model,
        rotation,
        pose: *pose,
        points: projection.points,
        normals_view,
        lighting: *light,
        raster,
        pixel_normal_raw,
        pixel_albedo,
    })
}

/// Reverse-mode accumulation from an image cotangent to scene-parameter
/// cotangents, through shading, interpolation, projection, normals and
/// synthesis. Runs over pixels in row-major order, so the reduction is
/// deterministic.
pub fn render_backward(
    model: &FaceModel,
    state: &RenderState,
    image_cotangent: &[f64],
) -> Result<SceneGrad> {
    let (w, h) = (state.width, state.height);
    if image_cotangent.len() != w * h * 3 {
        return Err(Error::dims("image cotangent", w * h * 3, image_cotangent.len()));
    }

    let v_count = state.synthesis.vertices.len();
    let mut d_albedo_v = vec![[0.0; 3]; v_count];
    let mut d_nview_v = vec![Vector3::zeros(); v_count];
    let mut d_points = vec![Vector2::zeros(); v_count];
    let mut d_light = [[0.0; 3]; 9];

    for pix in 0..w * h {
        if !state.raster.mask[pix] {
            continue;
        }
        let d_out = [
            image_cotangent[3 * pix],
            image_cotangent[3 * pix + 1],
            image_cotangent[3 * pix + 2],
        ];
        if d_out == [0.0; 3] {
            continue;
        }
        // Shade backward at this pixel.
        let n_raw = state.pixel_normal_raw[pix];
        let len = n_raw.norm();
        let n_unit = if len < 1e-20 {
            Vector3::new(0.0, 0.0, 1.0)
        } else {
            n_raw / len
        };
        let sg = lighting::shade_backward(
            &state.pixel_albedo[pix],
            &n_unit,
            &state.lighting,
            &d_out,
            &mut d_light,
        );
        // Normalization backward.
        let d_n_raw = if len < 1e-20 {
            Vector3::zeros()
        } else {
            (sg.normal - n_unit * n_unit.dot(&sg.normal)) / len
        };

        // Interpolation backward: attribute values to vertices, plus the
        // barycentric-weight path to screen positions.
        let t = state.raster.tri_id[pix] as usize;
        let tri = state.model_tris[t];
        let wts = [
            state.raster.bary[3 * pix],
            state.raster.bary[3 * pix + 1],
            state.raster.bary[3 * pix + 2],
        ];
        let mut d_w = [0.0; 3];
        for k in 0..3 {
            let vi = tri[k] as usize;
            for c in 0..3 {
                d_albedo_v[vi][c] += wts[k] * sg.albedo[c];
                d_w[k] += state.synthesis.albedo[vi][c] * sg.albedo[c];
            }
            d_nview_v[vi] += wts[k] * d_n_raw;
            d_w[k] += state.normals_view[vi].dot(&d_n_raw);
        }

        let row_p = Vector2::new(
            (pix % w) as f64 + 0.5,
            (pix / w) as f64 + 0.5,
        );
        let rv = [
            to_row_space(&state.points[tri[0] as usize], w, h),
            to_row_space(&state.points[tri[1] as usize], w, h),
            to_row_space(&state.points[tri[2] as usize], w, h),
        ];
        let area2 = cross2(&(rv[1] - rv[0]), &(rv[2] - rv[0]));
        let d_v = bary_backward(&rv, area2, &wts, &row_p, &d_w);
        for k in 0..3 {
            d_points[tri[k] as usize] += d_v[k];
        }
    }

    // View normals: n_view = R n_model.
    let mut d_rot = Matrix3::zeros();
    let rt = state.rotation.r.transpose();
    let mut d_nmodel = vec![Vector3::zeros(); v_count];
    for i in 0..v_count {
        d_rot += d_nview_v[i] * state.normals_model[i].transpose();
        d_nmodel[i] = rt * d_nview_v[i];
    }

    // Normals backward into model-space vertices.
    let mut d_vertices = facemodel::vertex_normals_backward(
        &state.synthesis.vertices,
        &state.model_tris,
        &d_nmodel,
    );

    // Projection backward (depth carries no gradient: it only selects
    // coverage, which is held fixed).
    let zero_depth = vec![0.0; v_count];
    let (mut pose_grad, d_verts_proj) = camera::transform_project_backward(
        &state.pose,
        &state.synthesis.vertices,
        &d_points,
        &zero_depth,
    );
    for i in 0..v_count {
        d_vertices[i] += d_verts_proj[i];
    }

    // Rotation gradient from the normal-rotation path.
    let [drx, dry, drz] = camera::rotation_backward(&state.rotation, &d_rot);
    pose_grad.rx += drx;
    pose_grad.ry += dry;
    pose_grad.rz += drz;

    let coeff_grad =
        facemodel::synthesize_backward(model, &state.synthesis, &d_vertices, &d_albedo_v);

    Ok(SceneGrad {
        coeffs: coeff_grad,
        pose: pose_grad,
        lighting: d_light,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facemodel::generate_toy_model;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn full_cover_triangle(width: usize, height: usize) -> (Vec<Vector2<f64>>, Vec<f64>) {
        let s = (width + height) as f64 * 2.0;
        (
            vec![
                Vector2::new(-s, -s),
                Vector2::new(s, -s),
                Vector2::new(0.0, s),
            ],
            vec![1.0, 1.0, 1.0],
        )
    }

    #[test]
    fn single_triangle_covers_whole_image_with_constant_attribute() {
        let (pts, depth) = full_cover_triangle(16, 12);
        let attrs = vec![1.0; 3];
        let (out, interp) =
            rasterize(&pts, &depth, &attrs, 1, &[[0, 1, 2]], 16, 12, false).unwrap();
        assert!(out.mask.iter().all(|&m| m));
        for pix in 0..16 * 12 {
            assert_eq!(out.tri_id[pix], 0);
            assert!((interp[pix] - 1.0).abs() < 1e-12);
            let wsum: f64 = out.bary[3 * pix..3 * pix + 3].iter().sum();
            assert!((wsum - 1.0).abs() < 1e-6);
            assert!(out.bary[3 * pix..3 * pix + 3].iter().all(|&w| w >= -1e-6));
        }
    }

    #[test]
    fn centroid_pixel_gets_equal_barycentrics() {
        // Put the centroid exactly on the pixel (8,8) center for a 17x17
        // image: camera coords of that center are (0,0).
        let pts = vec![
            Vector2::new(-3.0, -3.0),
            Vector2::new(6.0, -3.0),
            Vector2::new(-3.0, 6.0),
        ];
        let depth = vec![1.0; 3];
        let (out, _) = rasterize(&pts, &depth, &[], 0, &[[0, 1, 2]], 17, 17, false).unwrap();
        let pix = 8 * 17 + 8;
        assert!(out.mask[pix]);
        for k in 0..3 {
            assert!((out.bary[3 * pix + k] - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn nearer_triangle_wins_overlap() {
        let (mut pts, _) = full_cover_triangle(8, 8);
        let (pts2, _) = full_cover_triangle(8, 8);
        pts.extend(pts2);
        // Triangle 0 at depth 2, triangle 1 at depth 1.
        let depth = vec![2.0, 2.0, 2.0, 1.0, 1.0, 1.0];
        let (out, _) =
            rasterize(&pts, &depth, &[], 0, &[[0, 1, 2], [3, 4, 5]], 8, 8, false).unwrap();
        assert!(out.tri_id.iter().all(|&t| t == 1));
        assert!(out.depth.iter().all(|&d| (d - 1.0).abs() < 1e-12));
    }

    #[test]
    fn equal_depth_tie_goes_to_lower_index() {
        let (mut pts, _) = full_cover_triangle(8, 8);
        let (pts2, _) = full_cover_triangle(8, 8);
        pts.extend(pts2);
        let depth = vec![1.0; 6];
        let (out, _) =
            rasterize(&pts, &depth, &[], 0, &[[0, 1, 2], [3, 4, 5]], 8, 8, false).unwrap();
        assert!(out.tri_id.iter().all(|&t| t == 0));
    }

    #[test]
    fn shared_edges_cover_each_pixel_exactly_once() {
        // A quad split along its diagonal, with edges passing exactly
        // through pixel centers of an 8x8 image.
        let pts = vec![
            Vector2::new(-3.5, -3.5),
            Vector2::new(3.5, -3.5),
            Vector2::new(3.5, 3.5),
            Vector2::new(-3.5, 3.5),
        ];
        let depth = vec![1.0; 4];
        let tris = [[0u32, 1, 2], [0, 2, 3]];
        let (out, _) = rasterize(&pts, &depth, &[], 0, &tris, 8, 8, false).unwrap();
        // The quad boundary passes exactly through the border pixel
        // centers; the top-left rule keeps the top and left edges and drops
        // the bottom and right ones, leaving a 7x7 block with no hole or
        // double cover along the shared diagonal.
        let covered = out.mask.iter().filter(|&&m| m).count();
        assert_eq!(covered, 49);
        for r in 0..7 {
            for c in 0..7 {
                assert!(out.mask[r * 8 + c], "hole at ({r},{c})");
            }
        }
        // Diagonal pixels decide between the two triangles deterministically.
        for k in 0..7 {
            assert!(out.tri_id[k * 8 + k] >= 0);
        }
        // Also check with a fan around a shared center vertex.
        let fan_pts = vec![
            Vector2::new(0.5, 0.5), // exactly on the (4,3)-ish pixel center grid? center camera coords
            Vector2::new(30.0, 0.0),
            Vector2::new(0.0, 30.0),
            Vector2::new(-30.0, 0.0),
            Vector2::new(0.0, -30.0),
        ];
        let fan_depth = vec![1.0; 5];
        let fan = [[0u32, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 1]];
        let (fo, _) = rasterize(&fan_pts, &fan_depth, &[], 0, &fan, 8, 8, false).unwrap();
        let interior = fo.mask.iter().filter(|&&m| m).count();
        assert!(interior > 0);
        // Partition property: background xor exactly one triangle id, which
        // the single-buffer z-test guarantees structurally; spot-check that
        // all covered pixels carry a valid id and normalized weights.
        for pix in 0..64 {
            if fo.mask[pix] {
                assert!(fo.tri_id[pix] >= 0 && fo.tri_id[pix] < 4);
                let wsum: f64 = fo.bary[3 * pix..3 * pix + 3].iter().sum();
                assert!((wsum - 1.0).abs() < 1e-6);
            } else {
                assert_eq!(fo.tri_id[pix], -1);
            }
        }
    }

    #[test]
    fn backfaces_are_culled_when_requested() {
        // Clockwise in screen space (y up).
        let pts = vec![
            Vector2::new(-10.0, -10.0),
            Vector2::new(0.0, 10.0),
            Vector2::new(10.0, -10.0),
        ];
        let depth = vec![1.0; 3];
        let (out, _) = rasterize(&pts, &depth, &[], 0, &[[0, 1, 2]], 8, 8, true).unwrap();
        assert!(out.mask.iter().all(|&m| !m));
        let (out2, _) = rasterize(&pts, &depth, &[], 0, &[[0, 1, 2]], 8, 8, false).unwrap();
        assert!(out2.mask.iter().any(|&m| m));
    }

    #[test]
    fn zero_dimensions_rejected() {
        let (pts, depth) = full_cover_triangle(8, 8);
        assert!(rasterize(&pts, &depth, &[], 0, &[[0, 1, 2]], 0, 8, false).is_err());
    }

    fn toy_scene() -> (FaceModel, ShapeCoeffs, Pose, ShLighting) {
        let model = generate_toy_model(5, 16, 3, 2, 2).unwrap();
        let mut coeffs = ShapeCoeffs::zeros(&model);
        coeffs.x_id[0] = 0.4;
        coeffs.x_exp[1] = -0.3;
        coeffs.x_tex[0] = 0.2;
        let pose = Pose {
            f: 0.4,
            rx: 0.1,
            ry: -0.15,
            rz: 0.05,
            tx: 2.0,
            ty: -1.0,
            tz: 10.0,
        };
        let mut light = ShLighting::band0_gray(2.2);
        light.coeffs[1] = [0.25, 0.2, 0.18];
        light.coeffs[2] = [0.6, 0.55, 0.5];
        light.coeffs[3] = [-0.2, -0.15, -0.1];
        light.coeffs[6] = [0.1, 0.1, 0.1];
        (model, coeffs, pose, light)
    }

    #[test]
    fn toy_render_has_coverage_inside_bounds() {
        let (model, coeffs, _, light) = toy_scene();
        let pose = Pose {
            f: 0.4,
            tz: 5.0,
            ..Pose::identity()
        };
        let out = render_face(&model, &coeffs, &pose, &light, 96, 96).unwrap();
        let covered = out.mask.iter().filter(|&&m| m).count();
        assert!(covered > 1000, "only {covered} pixels covered");
        // Coverage partition invariant.
        for pix in 0..96 * 96 {
            if out.mask[pix] {
                assert!(out.tri_id[pix] >= 0);
            } else {
                assert_eq!(out.tri_id[pix], -1);
                assert_eq!(&out.color[3 * pix..3 * pix + 3], &[0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn zero_lighting_renders_black_with_coverage() {
        let (model, coeffs, pose, _) = toy_scene();
        let out = render_face(&model, &coeffs, &pose, &ShLighting::zeros(), 64, 64).unwrap();
        assert!(out.mask.iter().any(|&m| m));
        assert!(out.color.iter().all(|&c| c == 0.0));
    }

    #[test]
    fn render_is_deterministic() {
        let (model, coeffs, pose, light) = toy_scene();
        let a = render_face(&model, &coeffs, &pose, &light, 64, 64).unwrap();
        let b = render_face(&model, &coeffs, &pose, &light, 64, 64).unwrap();
        assert_eq!(a.color, b.color);
        assert_eq!(a.tri_id, b.tri_id);
        assert_eq!(a.depth, b.depth);
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let (model, coeffs, pose, light) = toy_scene();
        let state = render_face_with_state(&model, &coeffs, &pose, &light, 48, 48).unwrap();
        let grad = render_backward(&model, &state, &vec![0.0; 48 * 48 * 3]).unwrap();
        assert!(grad.coeffs.x_id.iter().all(|&g| g == 0.0));
        assert!(grad.lighting.iter().flatten().all(|&g| g == 0.0));
        assert_eq!(grad.pose, PoseGrad::default());
    }

    #[test]
    fn background_cotangent_gives_zero_gradients() {
        let (model, coeffs, pose, light) = toy_scene();
        let state = render_face_with_state(&model, &coeffs, &pose, &light, 48, 48).unwrap();
        let mut cot = vec![0.0; 48 * 48 * 3];
        for pix in 0..48 * 48 {
            if !state.raster.mask[pix] {
                cot[3 * pix] = 1.0;
                cot[3 * pix + 1] = -0.5;
                cot[3 * pix + 2] = 0.25;
            }
        }
        let grad = render_backward(&model, &state, &cot).unwrap();
        assert!(grad.coeffs.x_id.iter().all(|&g| g == 0.0));
        assert!(grad.lighting.iter().flatten().all(|&g| g == 0.0));
        assert_eq!(grad.pose, PoseGrad::default());
    }

    /// Coverage-stable finite-difference check of the full render backward
    /// against a fixed random image functional.
    #[test]
    fn render_gradients_match_finite_differences() {
        let (model, coeffs, pose, light) = toy_scene();
        let (w, h) = (48, 48);
        let mut rng = StdRng::seed_from_u64(99);
        let probe: Vec<f64> = (0..w * h * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |coeffs: &ShapeCoeffs, pose: &Pose, light: &ShLighting| {
            let out = render_face(&model, coeffs, pose, light, w, h).unwrap();
            (
                out.color.iter().zip(&probe).map(|(c, p)| c * p).sum::<f64>(),
                out.coverage_signature(),
            )
        };
        let state = render_face_with_state(&model, &coeffs, &pose, &light, w, h).unwrap();
        let grad = render_backward(&model, &state, &probe).unwrap();
        let (_, sig0) = eval(&coeffs, &pose, &light);
        let eps = 1e-4;
        let mut checked = 0;
        let mut check = |analytic: f64, hi: f64, lo: f64, sig_hi: u64, sig_lo: u64, name: &str| {
            if sig_hi != sig0 || sig_lo != sig0 {
                return; // coverage changed; excluded by protocol
            }
            let fd = (hi - lo) / (2.0 * eps);
            let rel = (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-6);
            assert!(rel < 1e-3, "{name}: analytic {analytic} vs fd {fd}");
            checked += 1;
        };

        // Lighting coefficients (always coverage stable).
        for k in 0..9 {
            let mut hi = light;
            hi.coeffs[k][1] += eps;
            let mut lo = light;
            lo.coeffs[k][1] -= eps;
            let (vh, sh) = eval(&coeffs, &pose, &hi);
            let (vl, sl) = eval(&coeffs, &pose, &lo);
            check(grad.lighting[k][1], vh, vl, sh, sl, "sh");
        }
        // Shape/texture coefficients.
        for j in 0..model.k_id() {
            let mut hi = coeffs.clone();
            hi.x_id[j] += eps;
            let mut lo = coeffs.clone();
            lo.x_id[j] -= eps;
            let (vh, sh) = eval(&hi, &pose, &light);
            let (vl, sl) = eval(&lo, &pose, &light);
            check(grad.coeffs.x_id[j], vh, vl, sh, sl, "x_id");
        }
        for j in 0..model.k_tex() {
            let mut hi = coeffs.clone();
            hi.x_tex[j] += eps;
            let mut lo = coeffs.clone();
            lo.x_tex[j] -= eps;
            let (vh, sh) = eval(&hi, &pose, &light);
            let (vl, sl) = eval(&lo, &pose, &light);
            check(grad.coeffs.x_tex[j], vh, vl, sh, sl, "x_tex");
        }
        // Pose.
        let fields: [(&str, f64, Box<dyn Fn(&mut Pose, f64)>); 7] = [
            ("f", grad.pose.f, Box::new(|p: &mut Pose, e| p.f += e)),
            ("rx", grad.pose.rx, Box::new(|p, e| p.rx += e)),
            ("ry", grad.pose.ry, Box::new(|p, e| p.ry += e)),
            ("rz", grad.pose.rz, Box::new(|p, e| p.rz += e)),
            ("tx", grad.pose.tx, Box::new(|p, e| p.tx += e)),
            ("ty", grad.pose.ty, Box::new(|p, e| p.ty += e)),
            ("tz", grad.pose.tz, Box::new(|p, e| p.tz += e)),
        ];
        for (name, analytic, bump) in fields {
            let mut hi = pose;
            bump(&mut hi, eps);
            let mut lo = pose;
            bump(&mut lo, -eps);
            let (vh, sh) = eval(&coeffs, &hi, &light);
            let (vl, sl) = eval(&coeffs, &lo, &light);
            check(analytic, vh, vl, sh, sl, name);
        }
        assert!(checked > 15, "too few coverage-stable checks ({checked})");
    }
}
