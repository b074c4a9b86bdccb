//! Synthetic geometry and detail fields used by tests, benchmarks and the
//! `synth` CLI subcommand.

use std::collections::HashMap;

use nalgebra::Vector3;

use crate::mesh::Mesh;
use crate::uvspace::{UvMap, UvSpace};

/// Unit icosahedron subdivided `subdivisions` times and projected onto the
/// sphere of the given radius.
pub fn icosphere(subdivisions: usize, radius: f64) -> Mesh {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vector3<f64>> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vector3::new(x, y, z).normalize())
    .collect();
    let mut triangles: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoint: HashMap<(u32, u32), u32> = HashMap::new();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for tri in &triangles {
            let mut mid = [0u32; 3];
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                mid[k] = *midpoint.entry(key).or_insert_with(|| {
                    let m = (vertices[a as usize] + vertices[b as usize]).normalize();
                    vertices.push(m);
                    (vertices.len() - 1) as u32
                });
            }
            next.push([tri[0], mid[0], mid[2]]);
            next.push([tri[1], mid[1], mid[0]]);
            next.push([tri[2], mid[2], mid[1]]);
            next.push([mid[0], mid[1], mid[2]]);
        }
        triangles = next;
    }

    for v in &mut vertices {
        *v *= radius;
    }
    Mesh::new(vertices, triangles)
}

/// Smooth zero-mean-ish displacement field: a positive and a negative
/// Gaussian lobe with peak magnitude `amplitude`, masked like `like`.
///
/// The two opposite lobes keep the field mean near zero, so the absolute
/// depth level is pinned by the displacement regularizer rather than fought
/// over by it.
pub fn bump_field(like: &UvMap, amplitude: f64) -> UvMap {
    assert_eq!(like.channels, 1, "bump field masks a scalar map");
    let (w, h) = (like.width, like.height);
    let mut data = vec![0.0; w * h];
    let lobe = |u: f64, v: f64, cu: f64, cv: f64| {
        let du = (u - cu) / 0.13;
        let dv = (v - cv) / 0.13;
        (-0.5 * (du * du + dv * dv)).exp()
    };
    for r in 0..h {
        for c in 0..w {
            let u = (c as f64 + 0.5) / w as f64;
            let v = (r as f64 + 0.5) / h as f64;
            data[r * w + c] = amplitude * (lobe(u, v, 0.38, 0.42) - lobe(u, v, 0.64, 0.58));
        }
    }
    UvMap {
        width: w,
        height: h,
        channels: 1,
        data,
        mask: like.mask.clone(),
        space: UvSpace::Scalar,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts_match_subdivision() {
        let m = icosphere(2, 1.0);
        assert_eq!(m.triangles.len(), 20 * 4 * 4);
        for v in &m.vertices {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn icosphere_winding_is_outward() {
        let m = icosphere(1, 2.0);
        for tri in &m.triangles {
            let [a, b, c] = [
                m.vertices[tri[0] as usize],
                m.vertices[tri[1] as usize],
                m.vertices[tri[2] as usize],
            ];
            let n = (b - a).cross(&(c - a));
            let centroid = (a + b + c) / 3.0;
            assert!(n.dot(&centroid) > 0.0, "inward-facing triangle");
        }
    }

    #[test]
    fn bump_field_peak_and_mean() {
        let like = UvMap::filled(64, 64, 1, UvSpace::Scalar, 0.0);
        let bump = bump_field(&like, 4.0);
        let peak = bump.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
        assert!(peak > 3.5 && peak <= 4.0, "peak {peak}");
        let mean = bump.data.iter().sum::<f64>() / bump.data.len() as f64;
        assert!(mean.abs() < 0.05 * 4.0, "mean {mean}");
    }
}
