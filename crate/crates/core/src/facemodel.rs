//! Linear 3D morphable face model: synthesis from coefficients, vertex
//! normals, a synthetic toy-model generator, and the FMM1 container format.
//!
//! Geometry lives in model space, nominally millimeters. Toy models are
//! generated with a roughly 200 mm extent so radius-based evaluation crops
//! are meaningful.

use std::io::Read;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of facial landmarks carried by every model.
pub const LANDMARK_COUNT: usize = 68;

/// Dense column-major basis matrix (rows = 3V, one column per coefficient).
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Basis {
    pub fn from_data(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("basis data", rows * cols, data.len()));
        }
        Ok(Basis { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.rows..(j + 1) * self.rows]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// out += B * coeffs
    pub fn accumulate(&self, coeffs: &[f64], out: &mut [f64]) {
        debug_assert_eq!(coeffs.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (j, &c) in coeffs.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            for (o, b) in out.iter_mut().zip(self.column(j)) {
                *o += c * b;
            }
        }
    }

    /// Bᵀ * v, the cotangent map of [`Basis::accumulate`].
    pub fn transpose_apply(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.rows);
        (0..self.cols)
            .map(|j| self.column(j).iter().zip(v).map(|(b, v)| b * v).sum())
            .collect()
    }
}

/// The linear face model: mean shape and albedo plus identity, expression
/// and texture bases, mesh topology, UV parameterization and landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceModel {
    /// 3V interleaved xyz, millimeters.
    pub mean_shape: Vec<f64>,
    pub basis_id: Basis,
    pub basis_exp: Basis,
    /// 3V interleaved linear RGB in [0,1].
    pub mean_albedo: Vec<f64>,
    pub basis_tex: Basis,
    pub triangles: Vec<[u32; 3]>,
    /// V entries in [0,1]².
    pub uv_coords: Vec<[f64; 2]>,
    /// Exactly [`LANDMARK_COUNT`] distinct vertex indices.
    pub landmark_indices: Vec<u32>,
}

impl FaceModel {
    pub fn vertex_count(&self) -> usize {
        self.mean_shape.len() / 3
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn k_id(&self) -> usize {
        self.basis_id.cols()
    }

    pub fn k_exp(&self) -> usize {
        self.basis_exp.cols()
    }

    pub fn k_tex(&self) -> usize {
        self.basis_tex.cols()
    }

    /// Mean-shape vertex positions as 3-vectors.
    pub fn mean_vertices(&self) -> Vec<Vector3<f64>> {
        self.mean_shape
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect()
    }

    /// Longest axis-aligned extent of the mean shape, used as the model
    /// diameter for tolerances expressed in texel lengths.
    pub fn diameter(&self) -> f64 {
        let vs = self.mean_vertices();
        if vs.is_empty() {
            return 0.0;
        }
        let mut lo = vs[0];
        let mut hi = vs[0];
        for v in &vs {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        let e = hi - lo;
        e.x.max(e.y).max(e.z)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vertex_count();
        if self.mean_shape.len() % 3 != 0 || v == 0 {
            return Err(Error::InvalidInput("mean shape length must be 3V".into()));
        }
        if self.mean_albedo.len() != 3 * v {
            return Err(Error::dims("mean albedo", 3 * v, self.mean_albedo.len()));
        }
        for (name, basis) in [
            ("identity basis", &self.basis_id),
            ("expression basis", &self.basis_exp),
            ("texture basis", &self.basis_tex),
        ] {
            if basis.rows() != 3 * v {
                return Err(Error::dims(name, 3 * v, basis.rows()));
            }
            if basis.cols() == 0 {
                return Err(Error::InvalidInput(format!(
                    "{name} must have at least one column"
                )));
            }
        }
        if self.uv_coords.len() != v {
            return Err(Error::dims("uv coordinates", v, self.uv_coords.len()));
        }
        for uv in &self.uv_coords {
            if !(0.0..=1.0).contains(&uv[0]) || !(0.0..=1.0).contains(&uv[1]) {
                return Err(Error::InvalidInput(format!(
                    "uv coordinate ({}, {}) outside [0,1]²",
                    uv[0], uv[1]
                )));
            }
        }
        for (t, tri) in self.triangles.iter().enumerate() {
            for &i in tri {
                if i as usize >= v {
                    return Err(Error::IndexOutOfRange {
                        what: format!("triangle {t} vertex index"),
                        index: i as usize,
                        limit: v,
                    });
                }
            }
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::InvalidInput(format!(
                    "triangle {t} repeats a vertex index"
                )));
            }
        }
        if self.landmark_indices.len() != LANDMARK_COUNT {
            return Err(Error::dims(
                "landmark indices",
                LANDMARK_COUNT,
                self.landmark_indices.len(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for &i in &self.landmark_indices {
            if i as usize >= v {
                return Err(Error::IndexOutOfRange {
                    what: "landmark index".into(),
                    index: i as usize,
                    limit: v,
                });
            }
            if !seen.insert(i) {
                return Err(Error::InvalidInput(format!(
                    "landmark index {i} appears twice"
                )));
            }
        }
        if self
            .mean_shape
            .iter()
            .chain(self.mean_albedo.iter())
            .chain(self.basis_id.data())
            .chain(self.basis_exp.data())
            .chain(self.basis_tex.data())
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite("face model arrays".into()));
        }
        Ok(())
    }
}

/// Identity, expression and texture coefficients for one face.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeCoeffs {
    pub x_id: Vec<f64>,
    pub x_exp: Vec<f64>,
    pub x_tex: Vec<f64>,
}

impl ShapeCoeffs {
    pub fn zeros(model: &FaceModel) -> Self {
        ShapeCoeffs {
            x_id: vec![0.0; model.k_id()],
            x_exp: vec![0.0; model.k_exp()],
            x_tex: vec![0.0; model.k_tex()],
        }
    }

    pub fn validate_for(&self, model: &FaceModel) -> Result<()> {
        for (name, got, expected) in [
            ("identity basis coefficients", self.x_id.len(), model.k_id()),
            (
                "expression basis coefficients",
                self.x_exp.len(),
                model.k_exp(),
            ),
            ("texture basis coefficients", self.x_tex.len(), model.k_tex()),
        ] {
            if got != expected {
                return Err(Error::dims(name, expected, got));
            }
        }
        if self
            .x_id
            .iter()
            .chain(&self.x_exp)
            .chain(&self.x_tex)
            .any(|x| !x.is_finite())
        {
            return Err(Error::NonFinite("shape coefficients".into()));
        }
        Ok(())
    }
}

/// Result of [`synthesize`]: geometry, albedo, and the clamp mask needed by
/// the backward pass.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub vertices: Vec<Vector3<f64>>,
    pub albedo: Vec<[f64; 3]>,
    /// Channels whose albedo saturated at 0 or 1; those pass no gradient.
    pub albedo_clamped: Vec<[bool; 3]>,
}

/// vertices = mean + B_id x_id + B_exp x_exp, albedo = clamp_[0,1](mean + B_tex x_tex).
pub fn synthesize(model: &FaceModel, coeffs: &ShapeCoeffs) -> Result<Synthesis> {
    coeffs.validate_for(model)?;
    let v = model.vertex_count();

    let mut shape = model.mean_shape.clone();
    model.basis_id.accumulate(&coeffs.x_id, &mut shape);
    model.basis_exp.accumulate(&coeffs.x_exp, &mut shape);

    let mut albedo_flat = model.mean_albedo.clone();
    model.basis_tex.accumulate(&coeffs.x_tex, &mut albedo_flat);

    let vertices = shape
        .chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect();
    let mut albedo = Vec::with_capacity(v);
    let mut albedo_clamped = Vec::with_capacity(v);
    for c in albedo_flat.chunks_exact(3) {
        let mut col = [0.0; 3];
        let mut clamped = [false; 3];
        for k in 0..3 {
            clamped[k] = !(0.0..=1.0).contains(&c[k]);
            col[k] = c[k].clamp(0.0, 1.0);
        }
        albedo.push(col);
        albedo_clamped.push(clamped);
    }
    Ok(Synthesis {
        vertices,
        albedo,
        albedo_clamped,
    })
}

/// Backward companion of [`synthesize`]: the basis transpose applied to the
/// output cotangents, with saturated albedo channels zeroed.
pub fn synthesize_backward(
    model: &FaceModel,
    synthesis: &Synthesis,
    d_vertices: &[Vector3<f64>],
    d_albedo: &[[f64; 3]],
) -> ShapeCoeffs {
    let v = model.vertex_count();
    assert_eq!(d_vertices.len(), v);
    assert_eq!(d_albedo.len(), v);

    let mut d_shape = vec![0.0; 3 * v];
    for (i, d) in d_vertices.iter().enumerate() {
        d_shape[3 * i] = d.x;
        d_shape[3 * i + 1] = d.y;
        d_shape[3 * i + 2] = d.z;
    }
    let mut d_alb = vec![0.0; 3 * v];
    for (i, d) in d_albedo.iter().enumerate() {
        for k in 0..3 {
            if !synthesis.albedo_clamped[i][k] {
                d_alb[3 * i + k] = d[k];
            }
        }
    }
    ShapeCoeffs {
        x_id: model.basis_id.transpose_apply(&d_shape),
        x_exp: model.basis_exp.transpose_apply(&d_shape),
        x_tex: model.basis_tex.transpose_apply(&d_alb),
    }
}

/// Area-weighted vertex normals. Vertices with no incident triangle area get
/// the fallback normal (0,0,1).
pub fn vertex_normals(vertices: &[Vector3<f64>], triangles: &[[u32; 3]]) -> Vec<Vector3<f64>> {
    let mut acc = vec![Vector3::zeros(); vertices.len()];
    for tri in triangles {
        let [a, b, c] = [tri[0] as usize, tri[1] as usize, tri[2] as usize];
        let face = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
        acc[a] += face;
        acc[b] += face;
        acc[c] += face;
    }
    acc.into_iter()
        .map(|n| {
            let len = n.norm();
            if len < 1e-20 {
                Vector3::new(0.0, 0.0, 1.0)
            } else {
                n / len
            }
        })
        .collect()
}

/// Backward companion of [`vertex_normals`].
pub fn vertex_normals_backward(
    vertices: &[Vector3<f64>],
    triangles: &[[u32; 3]],
    d_normals: &[Vector3<f64>],
) -> Vec<Vector3<f64>> {
    assert_eq!(vertices.len(), d_normals.len());
    // Recompute the un-normalized accumulators.
    let mut acc = vec![Vector3::zeros(); vertices.len()];
    for tri in triangles {
        let [a, b, c] = [tri[0] as usize, tri[1] as usize, tri[2] as usize];
        let face = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
        acc[a] += face;
        acc[b] += face;
        acc[c] += face;
    }
    // Normalization backward: d_acc = (I - n nᵀ) d_n / |acc|.
    let mut d_acc = vec![Vector3::zeros(); vertices.len()];
    for i in 0..vertices.len() {
        let len = acc[i].norm();
        if len < 1e-20 {
            continue; // fallback normal is constant
        }
        let n = acc[i] / len;
        d_acc[i] = (d_normals[i] - n * n.dot(&d_normals[i])) / len;
    }
    // Cross-product backward per triangle.
    let mut d_vertices = vec![Vector3::zeros(); vertices.len()];
    for tri in triangles {
        let [a, b, c] = [tri[0] as usize, tri[1] as usize, tri[2] as usize];
        let e1 = vertices[b] - vertices[a];
        let e2 = vertices[c] - vertices[a];
        let g = d_acc[a] + d_acc[b] + d_acc[c];
        let d_e1 = e2.cross(&g);
        let d_e2 = g.cross(&e1);
        d_vertices[b] += d_e1;
        d_vertices[c] += d_e2;
        d_vertices[a] -= d_e1 + d_e2;
    }
    d_vertices
}

/// Smooth low-frequency scalar field used for toy bases: a small sum of
/// cosine modes over the unit square.
struct CosField {
    // (amplitude, p, q, phase_u, phase_v)
    modes: Vec<(f64, f64, f64, f64, f64)>,
}

impl CosField {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut modes = Vec::new();
        for p in 0..3 {
            for q in 0..3 {
                modes.push((
                    rng.gen_range(-1.0..1.0),
                    p as f64,
                    q as f64,
                    rng.gen_range(0.0..std::f64::consts::PI),
                    rng.gen_range(0.0..std::f64::consts::PI),
                ));
            }
        }
        CosField { modes }
    }

    fn eval(&self, u: f64, v: f64) -> f64 {
        self.modes
            .iter()
            .map(|(a, p, q, pu, pv)| {
                a * (std::f64::consts::PI * p * u + pu).cos()
                    * (std::f64::consts::PI * q * v + pv).cos()
            })
            .sum()
    }
}

fn as_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Generates a deterministic synthetic face model: a smooth dome height
/// field over a regular UV grid with low-frequency random bases.
///
/// `grid` is the number of vertices per UV axis. Unit coefficients displace
/// at most 5% of the model diameter. All array values are exactly
/// f32-representable so FMM1 round-trips are bit-exact.
pub fn generate_toy_model(
    seed: u64,
    grid: usize,
    k_id: usize,
    k_exp: usize,
    k_tex: usize,
) -> Result<FaceModel> {
    // 68 distinct interior landmarks need this many vertices per side.
    if !(12..=1024).contains(&grid) {
        return Err(Error::InvalidInput(format!(
            "toy model grid must be in [12, 1024], got {grid}"
        )));
    }
    if k_id == 0 || k_exp == 0 || k_tex == 0 {
        return Err(Error::InvalidInput(
            "basis column counts must be at least 1".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid;
    let v_count = n * n;
    let extent = 200.0; // mm across x and y
    let dome_height = 60.0;

    let mut mean_shape = Vec::with_capacity(3 * v_count);
    let mut uv_coords = Vec::with_capacity(v_count);
    for i in 0..n {
        for j in 0..n {
            let u = j as f64 / (n - 1) as f64;
            let v = i as f64 / (n - 1) as f64;
            let du = (u - 0.5) / 0.5;
            let dv = (v - 0.5) / 0.5;
            let r2 = (du * du + dv * dv).min(1.0);
            let z = dome_height * (1.0 - r2) * (1.0 - r2);
            mean_shape.push(as_f32((u - 0.5) * extent));
            mean_shape.push(as_f32((v - 0.5) * extent));
            mean_shape.push(as_f32(z));
            uv_coords.push([as_f32(u), as_f32(v)]);
        }
    }

    // Counter-clockwise in (u,v) so computed normals point toward +z.
    let mut triangles = Vec::with_capacity(2 * (n - 1) * (n - 1));
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            let a = (i * n + j) as u32;
            let b = (i * n + j + 1) as u32;
            let c = ((i + 1) * n + j + 1) as u32;
            let d = ((i + 1) * n + j) as u32;
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }

    let gen_basis = |rng: &mut ChaCha8Rng, cols: usize, max_norm: f64| -> Basis {
        let mut data = Vec::with_capacity(3 * v_count * cols);
        for _ in 0..cols {
            let fields = [CosField::random(rng), CosField::random(rng), CosField::random(rng)];
            let mut col = Vec::with_capacity(3 * v_count);
            let mut peak: f64 = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let u = j as f64 / (n - 1) as f64;
                    let v = i as f64 / (n - 1) as f64;
                    let d = [fields[0].eval(u, v), fields[1].eval(u, v), fields[2].eval(u, v)];
                    peak = peak.max((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
                    col.extend_from_slice(&d);
                }
            }
            let scale = if peak > 0.0 { max_norm / peak } else { 0.0 };
            data.extend(col.into_iter().map(|x| as_f32(x * scale)));
        }
        Basis::from_data(3 * v_count, cols, data).expect("constructed consistently")
    };

    // 4% of the 200 mm diameter per unit coefficient, inside the 5% bound.
    let basis_id = gen_basis(&mut rng, k_id, 8.0);
    let basis_exp = gen_basis(&mut rng, k_exp, 8.0);

    let albedo_fields = [
        CosField::random(&mut rng),
        CosField::random(&mut rng),
        CosField::random(&mut rng),
    ];
    let base_color = [0.62, 0.45, 0.36];
    let mut mean_albedo = Vec::with_capacity(3 * v_count);
    for i in 0..n {
        for j in 0..n {
            let u = j as f64 / (n - 1) as f64;
            let v = i as f64 / (n - 1) as f64;
            for c in 0..3 {
                let val = base_color[c] + 0.06 * albedo_fields[c].eval(u, v);
                mean_albedo.push(as_f32(val.clamp(0.08, 0.92)));
            }
        }
    }
    let basis_tex = gen_basis(&mut rng, k_tex, 0.12);

    // Landmarks: evenly spread over the interior vertices, row-major.
    let margin = (n / 10).max(1);
    let interior: Vec<u32> = (margin..n - margin)
        .flat_map(|i| (margin..n - margin).map(move |j| (i * n + j) as u32))
        .collect();
    debug_assert!(interior.len() >= LANDMARK_COUNT);
    let landmark_indices: Vec<u32> = (0..LANDMARK_COUNT)
        .map(|t| interior[t * (interior.len() - 1) / (LANDMARK_COUNT - 1)])
        .collect();

    let model = FaceModel {
        mean_shape,
        basis_id,
        basis_exp,
        mean_albedo,
        basis_tex,
        triangles,
        uv_coords,
        landmark_indices,
    };
    model.validate()?;
    Ok(model)
}

// ---------------------------------------------------------------------------
// FMM1 container format
// ---------------------------------------------------------------------------

const FMM_MAGIC: &[u8; 8] = b"FACEMDL1";

#[derive(Serialize, Deserialize)]
struct FmmHeader {
    #[serde(rename = "V")]
    v: usize,
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "K_id")]
    k_id: usize,
    #[serde(rename = "K_exp")]
    k_exp: usize,
    #[serde(rename = "K_tex")]
    k_tex: usize,
    landmark_count: usize,
}

fn push_f32s(buf: &mut Vec<u8>, values: impl IntoIterator<Item = f64>) {
    for v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn push_u32s(buf: &mut Vec<u8>, values: impl IntoIterator<Item = u32>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a model to the FMM1 byte layout.
pub fn encode_model(model: &FaceModel) -> Result<Vec<u8>> {
    model.validate()?;
    let header = FmmHeader {
        v: model.vertex_count(),
        t: model.triangle_count(),
        k_id: model.k_id(),
        k_exp: model.k_exp(),
        k_tex: model.k_tex(),
        landmark_count: model.landmark_indices.len(),
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut payload = Vec::new();
    payload.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    payload.extend_from_slice(&header_json);
    push_f32s(&mut payload, model.mean_shape.iter().copied());
    push_f32s(&mut payload, model.basis_id.data().iter().copied());
    push_f32s(&mut payload, model.basis_exp.data().iter().copied());
    push_f32s(&mut payload, model.mean_albedo.iter().copied());
    push_f32s(&mut payload, model.basis_tex.data().iter().copied());
    push_f32s(
        &mut payload,
        model.uv_coords.iter().flat_map(|uv| uv.iter().copied()),
    );
    push_u32s(
        &mut payload,
        model.triangles.iter().flat_map(|t| t.iter().copied()),
    );
    push_u32s(&mut payload, model.landmark_indices.iter().copied());

    let crc = crc32fast::hash(&payload);
    let mut out = Vec::with_capacity(8 + payload.len() + 4);
    out.extend_from_slice(FMM_MAGIC);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    context: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::TruncatedPayload(self.context.to_string()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f64>> {
        let raw = self.take(count * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }

    fn u32s(&mut self, count: usize) -> Result<Vec<u32>> {
        let raw = self.take(count * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

/// Parses the FMM1 byte layout back into a model.
pub fn decode_model(bytes: &[u8], context: &str) -> Result<FaceModel> {
    if bytes.len() < 12 || &bytes[..8] != FMM_MAGIC {
        return Err(Error::MalformedHeader(context.to_string()));
    }
    let payload = &bytes[8..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(payload) != stored_crc {
        return Err(Error::ChecksumMismatch(context.to_string()));
    }

    let mut cur = Cursor {
        bytes: payload,
        pos: 0,
        context,
    };
    let header_len =
        u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
    if header_len > payload.len() {
        return Err(Error::MalformedHeader(context.to_string()));
    }
    let header: FmmHeader = serde_json::from_slice(cur.take(header_len)?)
        .map_err(|_| Error::MalformedHeader(context.to_string()))?;

    let v = header.v;
    let mean_shape = cur.f32s(3 * v)?;
    let basis_id = Basis::from_data(3 * v, header.k_id, cur.f32s(3 * v * header.k_id)?)?;
    let basis_exp = Basis::from_data(3 * v, header.k_exp, cur.f32s(3 * v * header.k_exp)?)?;
    let mean_albedo = cur.f32s(3 * v)?;
    let basis_tex = Basis::from_data(3 * v, header.k_tex, cur.f32s(3 * v * header.k_tex)?)?;
    let uv_flat = cur.f32s(2 * v)?;
    let uv_coords = uv_flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    let tri_flat = cur.u32s(3 * header.t)?;
    let triangles = tri_flat
        .chunks_exact(3)
        .map(|c| [c[0], c[1], c[2]])
        .collect();
    let landmark_indices = cur.u32s(header.landmark_count)?;

    let model = FaceModel {
        mean_shape,
        basis_id,
        basis_exp,
        mean_albedo,
        basis_tex,
        triangles,
        uv_coords,
        landmark_indices,
    };
    model.validate()?;
    Ok(model)
}

/// Writes a model to disk in the FMM1 format.
pub fn write_model(path: impl AsRef<Path>, model: &FaceModel) -> Result<()> {
    let bytes = encode_model(model)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads a model from an FMM1 file.
pub fn read_model(path: impl AsRef<Path>) -> Result<FaceModel> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_model(&bytes, &path.display().to_string())
}
