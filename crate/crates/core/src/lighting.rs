//! Spherical-harmonics illumination (3 bands, 9 coefficients per channel)
//! and Lambertian per-point shading.

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Number of SH basis functions (bands 0..=2).
pub const SH_COUNT: usize = 9;

/// SH lighting coefficients, one 9-vector per RGB channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShLighting {
    /// `coeffs[k][c]`: coefficient of basis function `k` for channel `c`.
    pub coeffs: [[f64; 3]; 9],
}

impl ShLighting {
    pub fn zeros() -> Self {
        ShLighting {
            coeffs: [[0.0; 3]; 9],
        }
    }

    /// Gray band-0 lighting with the given constant coefficient.
    pub fn band0_gray(c0: f64) -> Self {
        let mut l = Self::zeros();
        l.coeffs[0] = [c0; 3];
        l
    }

    /// Band-0 value that shades any albedo to exactly itself.
    pub fn neutral_band0() -> f64 {
        1.0 / sh_y0()
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .coeffs
            .iter()
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidInput(
                "lighting coefficients contain non-finite values".into(),
            ));
        }
        Ok(())
    }

    /// Channel-major flat layout: `[r0..r8, g0..g8, b0..b8]`.
    pub fn to_channel_major(&self) -> [f64; 27] {
        let mut out = [0.0; 27];
        for c in 0..3 {
            for k in 0..SH_COUNT {
                out[c * SH_COUNT + k] = self.coeffs[k][c];
            }
        }
        out
    }

    pub fn from_channel_major(flat: &[f64]) -> Result<Self> {
        if flat.len() != 27 {
            return Err(Error::dims("sh coefficient vector", 27, flat.len()));
        }
        let mut coeffs = [[0.0; 3]; 9];
        for c in 0..3 {
            for k in 0..SH_COUNT {
                coeffs[k][c] = flat[c * SH_COUNT + k];
            }
        }
        Ok(ShLighting { coeffs })
    }
}

fn sh_y0() -> f64 {
    0.5 * (1.0 / std::f64::consts::PI).sqrt()
}

fn sh_c1() -> f64 {
    (3.0 / (4.0 * std::f64::consts::PI)).sqrt()
}

fn sh_c2() -> f64 {
    (15.0 / (4.0 * std::f64::consts::PI)).sqrt()
}

fn sh_c3() -> f64 {
    (5.0 / (16.0 * std::f64::consts::PI)).sqrt()
}

fn sh_c4() -> f64 {
    (15.0 / (16.0 * std::f64::consts::PI)).sqrt()
}

/// Real SH basis up to band 2 at a unit direction, ordered
/// (0,0), (1,-1), (1,0), (1,1), (2,-2), (2,-1), (2,0), (2,1), (2,2).
pub fn sh_basis(n: &Vector3<f64>) -> Result<[f64; 9]> {
    if (n.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "sh_basis requires a unit direction, |n| = {}",
            n.norm()
        )));
    }
    Ok(sh_basis_unchecked(n))
}

/// Basis evaluation without the unit-length check, for interior loops that
/// normalize beforehand.
pub fn sh_basis_unchecked(n: &Vector3<f64>) -> [f64; 9] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        sh_y0(),
        sh_c1() * y,
        sh_c1() * z,
        sh_c1() * x,
        sh_c2() * x * y,
        sh_c2() * y * z,
        sh_c3() * (3.0 * z * z - 1.0),
        sh_c2() * x * z,
        sh_c4() * (x * x - y * y),
    ]
}

/// Jacobian of the SH basis with respect to the direction components.
pub fn sh_basis_jacobian(n: &Vector3<f64>) -> [Vector3<f64>; 9] {
    let (x, y, z) = (n.x, n.y, n.z);
    let (c1, c2, c3, c4) = (sh_c1(), sh_c2(), sh_c3(), sh_c4());
    [
        Vector3::zeros(),
        Vector3::new(0.0, c1, 0.0),
        Vector3::new(0.0, 0.0, c1),
        Vector3::new(c1, 0.0, 0.0),
        Vector3::new(c2 * y, c2 * x, 0.0),
        Vector3::new(0.0, c2 * z, c2 * y),
        Vector3::new(0.0, 0.0, 6.0 * c3 * z),
        Vector3::new(c2 * z, 0.0, c2 * x),
        Vector3::new(2.0 * c4 * x, -2.0 * c4 * y, 0.0),
    ]
}

/// Shades an albedo under SH lighting: `out_c = albedo_c * sum_k L[k][c] Y_k(n)`,
/// clamped to non-negative radiance. The final clamp to [0,1] happens at
/// image write time, not here.
pub fn shade(albedo: &[f64; 3], n: &Vector3<f64>, light: &ShLighting) -> [f64; 3] {
    let basis = sh_basis_unchecked(n);
    let mut out = [0.0; 3];
    for c in 0..3 {
        let mut irr = 0.0;
        for k in 0..SH_COUNT {
            irr += light.coeffs[k][c] * basis[k];
        }
        out[c] = (albedo[c] * irr).max(0.0);
    }
    out
}

/// Gradients produced by [`shade_backward`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ShadeGrad {
    pub albedo: [f64; 3],
    pub normal: Vector3<f64>,
}

/// Backward companion of [`shade`]. Accumulates the lighting cotangent into
/// `d_light`; channels clamped at zero radiance pass no gradient.
pub fn shade_backward(
    albedo: &[f64; 3],
    n: &Vector3<f64>,
    light: &ShLighting,
    d_out: &[f64; 3],
    d_light: &mut [[f64; 3]; 9],
) -> ShadeGrad {
    let basis = sh_basis_unchecked(n);
    let jac = sh_basis_jacobian(n);
    let mut grad = ShadeGrad::default();
    for c in 0..3 {
        let mut irr = 0.0;
        for k in 0..SH_COUNT {
            irr += light.coeffs[k][c] * basis[k];
        }
        if albedo[c] * irr <= 0.0 {
            continue;
        }
        let g = d_out[c];
        grad.albedo[c] = g * irr;
        for k in 0..SH_COUNT {
            d_light[k][c] += g * albedo[c] * basis[k];
            grad.normal += g * albedo[c] * light.coeffs[k][c] * jac[k];
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_unit(rng: &mut StdRng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 {
                return v / n;
            }
        }
    }

    #[test]
    fn band0_component_value() {
        let mut rng = StdRng::seed_from_u64(1);
        let n = random_unit(&mut rng);
        let b = sh_basis(&n).unwrap();
        // 1 / (2 sqrt(pi))
        let expected = 1.0 / (2.0 * std::f64::consts::PI.sqrt());
        assert!((b[0] - expected).abs() < 1e-12);
        assert!((expected - 0.2820948).abs() < 1e-7);
    }

    #[test]
    fn north_pole_kills_xy_components() {
        let b = sh_basis(&Vector3::new(0.0, 0.0, 1.0)).unwrap();
        for k in [1, 3, 4, 5, 7, 8] {
            assert_eq!(b[k], 0.0, "component {k} should vanish at +z");
        }
        assert!(b[2] > 0.0);
        assert!(b[6] > 0.0);
    }

    #[test]
    fn parity_under_negation() {
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..20 {
            let n = random_unit(&mut rng);
            let a = sh_basis(&n).unwrap();
            let b = sh_basis(&(-n)).unwrap();
            for k in [1, 2, 3] {
                assert!((a[k] + b[k]).abs() < 1e-12, "band 1 must negate");
            }
            for k in [0, 4, 5, 6, 7, 8] {
                assert!((a[k] - b[k]).abs() < 1e-12, "bands 0 and 2 are even");
            }
        }
    }

    #[test]
    fn non_unit_direction_is_rejected() {
        assert!(sh_basis(&Vector3::new(0.0, 0.0, 2.0)).is_err());
    }

    #[test]
    fn zero_light_shades_black() {
        let out = shade(
            &[0.5, 0.7, 0.2],
            &Vector3::new(0.0, 0.0, 1.0),
            &ShLighting::zeros(),
        );
        assert_eq!(out, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn band0_shading_is_normal_independent() {
        let mut rng = StdRng::seed_from_u64(3);
        let light = ShLighting::band0_gray(2.0);
        let albedo = [0.4, 0.5, 0.6];
        let expected = 2.0 * 1.0 / (2.0 * std::f64::consts::PI.sqrt());
        for _ in 0..10 {
            let n = random_unit(&mut rng);
            let out = shade(&albedo, &n, &light);
            for c in 0..3 {
                assert!((out[c] - albedo[c] * expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn neutral_band0_reproduces_albedo() {
        let light = ShLighting::band0_gray(ShLighting::neutral_band0());
        let out = shade(&[0.5, 0.25, 0.8], &Vector3::new(0.0, 0.0, 1.0), &light);
        assert!((out[0] - 0.5).abs() < 1e-12);
        assert!((out[1] - 0.25).abs() < 1e-12);
        assert!((out[2] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn shading_is_bilinear_before_clamp() {
        let mut rng = StdRng::seed_from_u64(4);
        let n = random_unit(&mut rng);
        let mut la = ShLighting::zeros();
        let mut lb = ShLighting::zeros();
        for k in 0..SH_COUNT {
            for c in 0..3 {
                // Keep band 0 dominant so nothing clamps.
                la.coeffs[k][c] = if k == 0 { 3.0 } else { rng.gen_range(-0.2..0.2) };
                lb.coeffs[k][c] = if k == 0 { 2.0 } else { rng.gen_range(-0.2..0.2) };
            }
        }
        let albedo = [0.3, 0.6, 0.9];
        let mut lsum = ShLighting::zeros();
        for k in 0..SH_COUNT {
            for c in 0..3 {
                lsum.coeffs[k][c] = 2.0 * la.coeffs[k][c] + 0.5 * lb.coeffs[k][c];
            }
        }
        let sa = shade(&albedo, &n, &la);
        let sb = shade(&albedo, &n, &lb);
        let ssum = shade(&albedo, &n, &lsum);
        for c in 0..3 {
            let lin = 2.0 * sa[c] + 0.5 * sb[c];
            assert!((ssum[c] - lin).abs() / lin.abs().max(1.0) < 1e-9);
        }
        // Linear in albedo as well.
        let s2 = shade(&[0.6, 1.2, 1.8], &n, &la);
        for c in 0..3 {
            assert!((s2[c] - 2.0 * sa[c]).abs() / sa[c].abs().max(1.0) < 1e-9);
        }
    }

    #[test]
    fn shade_gradients_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(5);
        let n = random_unit(&mut rng);
        let mut light = ShLighting::zeros();
        for k in 0..SH_COUNT {
            for c in 0..3 {
                light.coeffs[k][c] = if k == 0 { 3.5 } else { rng.gen_range(-0.3..0.3) };
            }
        }
        let albedo = [0.5, 0.6, 0.7];
        let w = [0.3, -1.1, 0.7]; // fixed cotangent
        let mut d_light = [[0.0; 3]; 9];
        let grad = shade_backward(&albedo, &n, &light, &w, &mut d_light);

        let eval = |al: &[f64; 3], nn: &Vector3<f64>, li: &ShLighting| {
            let s = shade(al, nn, li);
            s[0] * w[0] + s[1] * w[1] + s[2] * w[2]
        };
        let eps = 1e-6;
        for k in 0..SH_COUNT {
            for c in 0..3 {
                let mut hi = light;
                hi.coeffs[k][c] += eps;
                let mut lo = light;
                lo.coeffs[k][c] -= eps;
                let fd = (eval(&albedo, &n, &hi) - eval(&albedo, &n, &lo)) / (2.0 * eps);
                let rel = (d_light[k][c] - fd).abs() / fd.abs().max(1e-5);
                assert!(rel < 1e-5, "coeff ({k},{c}): {} vs {fd}", d_light[k][c]);
            }
        }
        for c in 0..3 {
            let mut hi = albedo;
            hi[c] += eps;
            let mut lo = albedo;
            lo[c] -= eps;
            let fd = (eval(&hi, &n, &light) - eval(&lo, &n, &light)) / (2.0 * eps);
            assert!((grad.albedo[c] - fd).abs() < 1e-6);
        }
        // Normal treated as a free 3-vector; the upstream normalization owns
        // the tangent projection.
        for axis in 0..3 {
            let mut hi = n;
            hi[axis] += eps;
            let mut lo = n;
            lo[axis] -= eps;
            let fd = (eval(&albedo, &hi, &light) - eval(&albedo, &lo, &light)) / (2.0 * eps);
            assert!((grad.normal[axis] - fd).abs() < 1e-6);
        }
    }
}
