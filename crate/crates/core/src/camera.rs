//! 7-DoF pose and orthographic projection.
//!
//! Image coordinates are pixels with the origin at the image center,
//! +x right and +y up. The rasterizer converts to row/column storage.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scale, Euler angles (radians) and translation of the orthographic camera.
///
/// Angles are stored unwrapped; no modular reduction is applied anywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub f: f64,
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            f: 1.0,
            rx: 0.0,
            ry: 0.0,
            rz: 0.0,
            tx: 0.0,
            ty: 0.0,
            tz: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.f, self.rx, self.ry, self.rz, self.tx, self.ty, self.tz,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("pose contains non-finite values".into()));
        }
        if self.f <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "pose scale must be positive, got {}",
                self.f
            )));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        rotation_matrix(self.rx, self.ry, self.rz)
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.tx, self.ty, self.tz)
    }
}

/// Gradient of a scalar with respect to the seven pose parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PoseGrad {
    pub f: f64,
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
}

impl PoseGrad {
    pub fn add_assign(&mut self, other: &PoseGrad) {
        self.f += other.f;
        self.rx += other.rx;
        self.ry += other.ry;
        self.rz += other.rz;
        self.tx += other.tx;
        self.ty += other.ty;
        self.tz += other.tz;
    }

    pub fn scale(&mut self, s: f64) {
        self.f *= s;
        self.rx *= s;
        self.ry *= s;
        self.rz *= s;
        self.tx *= s;
        self.ty *= s;
        self.tz *= s;
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn drot_y(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drot_z(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// Rotation matrix R = Rz(rz) * Ry(ry) * Rx(rx).
pub fn rotation_matrix(rx: f64, ry: f64, rz: f64) -> Matrix3<f64> {
    rot_z(rz) * rot_y(ry) * rot_x(rx)
}

/// Rotation matrix together with its partial derivatives per angle.
#[derive(Debug, Clone)]
pub struct RotationWithGrad {
    pub r: Matrix3<f64>,
    /// d R / d(rx, ry, rz)
    pub dr: [Matrix3<f64>; 3],
}

pub fn rotation_with_grad(rx: f64, ry: f64, rz: f64) -> RotationWithGrad {
    let (mx, my, mz) = (rot_x(rx), rot_y(ry), rot_z(rz));
    RotationWithGrad {
        r: mz * my * mx,
        dr: [mz * my * drot_x(rx), mz * drot_y(ry) * mx, drot_z(rz) * my * mx],
    }
}

/// Maps a cotangent on R to cotangents on the three angles.
pub fn rotation_backward(rot: &RotationWithGrad, cot: &Matrix3<f64>) -> [f64; 3] {
    let inner = |m: &Matrix3<f64>| m.component_mul(cot).sum();
    [inner(&rot.dr[0]), inner(&rot.dr[1]), inner(&rot.dr[2])]
}

/// Projected points (image coordinates) and their view-space depth.
#[derive(Debug, Clone)]
pub struct Projection {
    pub points: Vec<Vector2<f64>>,
    pub depth: Vec<f64>,
}

/// v' = f * R * v + t; returns (v'_x, v'_y) and depth v'_z per vertex.
pub fn transform_project(pose: &Pose, vertices: &[Vector3<f64>]) -> Projection {
    let r = pose.rotation();
    let t = pose.translation();
    let mut points = Vec::with_capacity(vertices.len());
    let mut depth = Vec::with_capacity(vertices.len());
    for v in vertices {
        let vp = pose.f * (r * v) + t;
        points.push(Vector2::new(vp.x, vp.y));
        depth.push(vp.z);
    }
    Projection { points, depth }
}

/// Backward companion of [`transform_project`].
///
/// `d_points` and `d_depth` are cotangents on the projected coordinates and
/// depths; returns cotangents for the pose and the input vertices.
pub fn transform_project_backward(
    pose: &Pose,
    vertices: &[Vector3<f64>],
    d_points: &[Vector2<f64>],
    d_depth: &[f64],
) -> (PoseGrad, Vec<Vector3<f64>>) {
    assert_eq!(vertices.len(), d_points.len());
    assert_eq!(vertices.len(), d_depth.len());
    let rot = rotation_with_grad(pose.rx, pose.ry, pose.rz);
    let r = rot.r;
    let rt = r.transpose();

    let mut grad = PoseGrad::default();
    let mut d_r = Matrix3::zeros();
    let mut d_vertices = Vec::with_capacity(vertices.len());
    for i in 0..vertices.len() {
        let dv = Vector3::new(d_points[i].x, d_points[i].y, d_depth[i]);
        let rv = r * vertices[i];
        grad.f += dv.dot(&rv);
        grad.tx += dv.x;
        grad.ty += dv.y;
        grad.tz += dv.z;
        d_r += dv * vertices[i].transpose();
        d_vertices.push(pose.f * (rt * dv));
    }
    d_r *= pose.f;
    let [drx, dry, drz] = rotation_backward(&rot, &d_r);
    grad.rx = drx;
    grad.ry = dry;
    grad.rz = drz;
    (grad, d_vertices)
}

/// Gathers the landmark vertices and projects them.
pub fn project_landmarks(
    pose: &Pose,
    vertices: &[Vector3<f64>],
    landmark_indices: &[u32],
) -> Result<Projection> {
    let mut gathered = Vec::with_capacity(landmark_indices.len());
    for &idx in landmark_indices {
        let v = vertices.get(idx as usize).ok_or(Error::IndexOutOfRange {
            what: "landmark vertex index".into(),
            index: idx as usize,
            limit: vertices.len(),
        })?;
        gathered.push(*v);
    }
    Ok(transform_project(pose, &gathered))
}

/// Backward companion of [`project_landmarks`]: scatters vertex cotangents
/// back to the full vertex array.
pub fn project_landmarks_backward(
    pose: &Pose,
    vertices: &[Vector3<f64>],
    landmark_indices: &[u32],
    d_points: &[Vector2<f64>],
    d_depth: &[f64],
) -> (PoseGrad, Vec<Vector3<f64>>) {
    let gathered: Vec<Vector3<f64>> = landmark_indices
        .iter()
        .map(|&i| vertices[i as usize])
        .collect();
    let (pose_grad, d_gathered) = transform_project_backward(pose, &gathered, d_points, d_depth);
    let mut d_vertices = vec![Vector3::zeros(); vertices.len()];
    for (k, &i) in landmark_indices.iter().enumerate() {
        d_vertices[i as usize] += d_gathered[k];
    }
    (pose_grad, d_vertices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_rotation_is_identity() {
        let r = rotation_matrix(0.0, 0.0, 0.0);
        assert!((r - Matrix3::identity()).abs().max() < 1e-15);
    }

    #[test]
    fn quarter_turn_about_z_maps_x_to_y() {
        let r = rotation_matrix(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let p = r * Vector3::new(1.0, 0.0, 0.0);
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn rotation_is_orthonormal_with_unit_det() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..100 {
            let r = rotation_matrix(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            );
            let err = (r.transpose() * r - Matrix3::identity()).abs().max();
            assert!(err < 1e-12, "RtR deviates from I by {err}");
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_pose_projects_coordinates() {
        let pose = Pose::identity();
        let proj = transform_project(&pose, &[Vector3::new(1.0, 2.0, 3.0)]);
        assert_eq!(proj.points[0], Vector2::new(1.0, 2.0));
        assert_eq!(proj.depth[0], 3.0);
    }

    #[test]
    fn affine_pose_arithmetic() {
        let pose = Pose {
            f: 2.0,
            tx: 10.0,
            ..Pose::identity()
        };
        let proj = transform_project(&pose, &[Vector3::new(1.0, 2.0, 3.0)]);
        assert_eq!(proj.points[0], Vector2::new(12.0, 4.0));
        assert_eq!(proj.depth[0], 6.0);
    }

    fn random_pose(rng: &mut StdRng) -> Pose {
        Pose {
            f: rng.gen_range(0.5..3.0),
            rx: rng.gen_range(-1.0..1.0),
            ry: rng.gen_range(-1.0..1.0),
            rz: rng.gen_range(-1.0..1.0),
            tx: rng.gen_range(-5.0..5.0),
            ty: rng.gen_range(-5.0..5.0),
            tz: rng.gen_range(-5.0..5.0),
        }
    }

    #[test]
    fn projection_matches_matrix_oracle() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..50 {
            let pose = random_pose(&mut rng);
            let v = Vector3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            );
            let proj = transform_project(&pose, &[v]);
            // Independent oracle: explicit matrix product.
            let r = rot_z(pose.rz) * rot_y(pose.ry) * rot_x(pose.rx);
            let vp = r * v * pose.f + Vector3::new(pose.tx, pose.ty, pose.tz);
            assert!((proj.points[0] - Vector2::new(vp.x, vp.y)).norm() < 1e-12);
            assert!((proj.depth[0] - vp.z).abs() < 1e-12);
        }
    }

    #[test]
    fn translation_equivariance() {
        let mut rng = StdRng::seed_from_u64(3);
        let pose = random_pose(&mut rng);
        let mut shifted = pose;
        shifted.tx += 2.75;
        let vs: Vec<Vector3<f64>> = (0..20)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                )
            })
            .collect();
        let a = transform_project(&pose, &vs);
        let b = transform_project(&shifted, &vs);
        for i in 0..vs.len() {
            assert!((b.points[i].x - a.points[i].x - 2.75).abs() < 1e-12);
            assert_eq!(a.points[i].y, b.points[i].y);
        }
    }

    #[test]
    fn depth_order_preserved_for_positive_scale() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut pose = random_pose(&mut rng);
        let vs: Vec<Vector3<f64>> = (0..16)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                )
            })
            .collect();
        let base = transform_project(&pose, &vs);
        let mut order: Vec<usize> = (0..vs.len()).collect();
        order.sort_by(|&a, &b| base.depth[a].partial_cmp(&base.depth[b]).unwrap());
        for f in [0.1, 1.0, 7.5] {
            pose.f = f;
            // t_z shifts all depths equally, so ordering only depends on f * (Rv)_z.
            let p = transform_project(&pose, &vs);
            for w in order.windows(2) {
                assert!(p.depth[w[0]] <= p.depth[w[1]]);
            }
        }
    }

    #[test]
    fn landmark_projection_is_gather_then_project() {
        let mut rng = StdRng::seed_from_u64(13);
        let pose = random_pose(&mut rng);
        let vs: Vec<Vector3<f64>> = (0..30)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                    rng.gen_range(-10.0..10.0),
                )
            })
            .collect();
        let idx = [3u32, 17, 0, 29, 8];
        let lm = project_landmarks(&pose, &vs, &idx).unwrap();
        let full = transform_project(&pose, &vs);
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!(lm.points[k], full.points[i as usize]);
            assert_eq!(lm.depth[k], full.depth[i as usize]);
        }
    }

    #[test]
    fn landmark_index_out_of_range_is_error() {
        let pose = Pose::identity();
        let vs = vec![Vector3::new(0.0, 0.0, 0.0)];
        assert!(project_landmarks(&pose, &vs, &[1]).is_err());
    }

    /// Central-difference check of the projection backward against a scalar
    /// functional of points and depths.
    #[test]
    fn projection_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(17);
        let pose = random_pose(&mut rng);
        let vs: Vec<Vector3<f64>> = (0..12)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                    rng.gen_range(-5.0..5.0),
                )
            })
            .collect();
        // Fixed random linear functional L = sum(a_i . p_i) + sum(b_i d_i).
        let a: Vec<Vector2<f64>> = (0..vs.len())
            .map(|_| Vector2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let b: Vec<f64> = (0..vs.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eval = |p: &Pose| {
            let proj = transform_project(p, &vs);
            proj.points
                .iter()
                .zip(&a)
                .map(|(p, a)| p.dot(a))
                .sum::<f64>()
                + proj.depth.iter().zip(&b).map(|(d, b)| d * b).sum::<f64>()
        };
        let (grad, _) = transform_project_backward(&pose, &vs, &a, &b);
        let eps = 1e-5;
        let fields: [(&str, f64, Box<dyn Fn(&mut Pose, f64)>); 7] = [
            ("f", grad.f, Box::new(|p, e| p.f += e)),
            ("rx", grad.rx, Box::new(|p, e| p.rx += e)),
            ("ry", grad.ry, Box::new(|p, e| p.ry += e)),
            ("rz", grad.rz, Box::new(|p, e| p.rz += e)),
            ("tx", grad.tx, Box::new(|p, e| p.tx += e)),
            ("ty", grad.ty, Box::new(|p, e| p.ty += e)),
            ("tz", grad.tz, Box::new(|p, e| p.tz += e)),
        ];
        for (name, analytic, bump) in fields {
            let mut hi = pose;
            bump(&mut hi, eps);
            let mut lo = pose;
            bump(&mut lo, -eps);
            let fd = (eval(&hi) - eval(&lo)) / (2.0 * eps);
            let rel = (analytic - fd).abs() / fd.abs().max(analytic.abs()).max(1e-9);
            assert!(rel < 1e-4, "pose.{name}: analytic {analytic} vs fd {fd}");
        }
    }
}
