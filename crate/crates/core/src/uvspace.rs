//! UV-space machinery: position/normal maps, unwrapping images into UV
//! space, displacement application, detail-mesh extraction, the UV render
//! layer and multi-view blending.
//!
//! Texel (r, c) of a W×H map corresponds to uv = ((c+0.5)/W, (r+0.5)/H).
//! Position maps are produced in model space, converted to view space with
//! the pose (v' = f·R·v + t) before displacement and rendering, and blended
//! in model space.

use nalgebra::{Vector2, Vector3};

use crate::camera::Pose;
use crate::error::{Error, Result};
use crate::facemodel::{self, FaceModel};
use crate::io::ImageBuffer;
use crate::lighting::{self, ShLighting};
use crate::mesh::Mesh;
use crate::rasterizer::{self, CullRowSpace, RasterOutput};

/// Coordinate space carried by a [`UvMap`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UvSpace {
    Model,
    View,
    Scalar,
    Color,
}

impl UvSpace {
    pub fn name(&self) -> &'static str {
        match self {
            UvSpace::Model => "model",
            UvSpace::View => "view",
            UvSpace::Scalar => "scalar",
            UvSpace::Color => "color",
        }
    }

    pub fn tag(&self) -> u8 {
        match self {
            UvSpace::Model => 0,
            UvSpace::View => 1,
            UvSpace::Scalar => 2,
            UvSpace::Color => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => UvSpace::Model,
            1 => UvSpace::View,
            2 => UvSpace::Scalar,
            3 => UvSpace::Color,
            _ => return Err(Error::InvalidInput(format!("unknown UV space tag {tag}"))),
        })
    }
}

/// A W×H grid of texels with a validity mask and a coordinate-space tag.
#[derive(Debug, Clone, PartialEq)]
pub struct UvMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// H×W×C row-major.
    pub data: Vec<f64>,
    pub mask: Vec<bool>,
    pub space: UvSpace,
}

impl UvMap {
    pub fn filled(width: usize, height: usize, channels: usize, space: UvSpace, value: f64) -> Self {
        UvMap {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
            mask: vec![true; width * height],
            space,
        }
    }

    pub fn zeros_masked(width: usize, height: usize, channels: usize, space: UvSpace) -> Self {
        UvMap {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            mask: vec![false; width * height],
            space,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("UV map has zero size".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidInput(format!(
                "UV map channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.space == UvSpace::Scalar && self.channels != 1 {
            return Err(Error::SpaceMismatch {
                expected: "scalar (1 channel)",
                got: "scalar with 3 channels",
            });
        }
        if self.data.len() != self.width * self.height * self.channels {
            return Err(Error::dims(
                "UV map data",
                self.width * self.height * self.channels,
                self.data.len(),
            ));
        }
        if self.mask.len() != self.width * self.height {
            return Err(Error::dims(
                "UV map mask",
                self.width * self.height,
                self.mask.len(),
            ));
        }
        for (i, &m) in self.mask.iter().enumerate() {
            if m {
                let base = i * self.channels;
                if self.data[base..base + self.channels]
                    .iter()
                    .any(|v| !v.is_finite())
                {
                    return Err(Error::NonFinite(format!("UV map texel {i}")));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn idx(&self, r: usize, c: usize) -> usize {
        r * self.width + c
    }

    #[inline]
    pub fn get3(&self, i: usize) -> Vector3<f64> {
        let b = i * 3;
        Vector3::new(self.data[b], self.data[b + 1], self.data[b + 2])
    }

    #[inline]
    pub fn set3(&mut self, i: usize, v: Vector3<f64>) {
        let b = i * 3;
        self.data[b] = v.x;
        self.data[b + 1] = v.y;
        self.data[b + 2] = v.z;
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    fn same_resolution(&self, other: &UvMap) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::dims(
                "UV map resolution",
                self.width * self.height,
                other.width * other.height,
            ));
        }
        Ok(())
    }
}

/// Rasterizes per-vertex attributes over the model's UV chart.
///
/// With the vertex positions as the attribute this produces the coarse UV
/// position map. The mask is the UV coverage of the chart.
pub fn rasterize_to_uv(
    model: &FaceModel,
    vertices: &[Vector3<f64>],
    attributes: &[f64],
    attr_count: usize,
    res: usize,
    space: UvSpace,
) -> Result<UvMap> {
    if res == 0 {
        return Err(Error::InvalidInput("UV resolution must be nonzero".into()));
    }
    if vertices.len() != model.vertex_count() {
        return Err(Error::dims("vertices", model.vertex_count(), vertices.len()));
    }
    if attributes.len() != vertices.len() * attr_count {
        return Err(Error::dims(
            "UV attributes",
            vertices.len() * attr_count,
            attributes.len(),
        ));
    }
    let points_row: Vec<Vector2<f64>> = model
        .uv_coords
        .iter()
        .map(|uv| Vector2::new(uv[0] * res as f64, uv[1] * res as f64))
        .collect();
    let depth = vec![0.0; vertices.len()];
    let raster = rasterizer::scan_rowspace(
        &points_row,
        &depth,
        &model.triangles,
        res,
        res,
        CullRowSpace::None,
    );
    let attrs = rasterizer::interpolate_attributes(&raster, &model.triangles, attributes, attr_count);
    Ok(UvMap {
        width: res,
        height: res,
        channels: attr_count,
        data: attrs,
        mask: raster.mask,
        space,
    })
}

/// Coarse model-space UV position map for the given synthesized vertices.
pub fn uv_position_map(model: &FaceModel, vertices: &[Vector3<f64>], res: usize) -> Result<UvMap> {
    let mut flat = Vec::with_capacity(vertices.len() * 3);
    for v in vertices {
        flat.extend_from_slice(&[v.x, v.y, v.z]);
    }
    rasterize_to_uv(model, vertices, &flat, 3, res, UvSpace::Model)
}

/// Converts a position map between model and view space using the pose.
pub fn transform_positions(map: &UvMap, pose: &Pose, to: UvSpace) -> Result<UvMap> {
    if map.channels != 3 {
        return Err(Error::InvalidInput(
            "position transform requires a 3-channel map".into(),
        ));
    }
    let r = pose.rotation();
    let t = pose.translation();
    let mut out = map.clone();
    match (map.space, to) {
        (UvSpace::Model, UvSpace::View) => {
            for i in 0..map.width * map.height {
                if map.mask[i] {
                    out.set3(i, pose.f * (r * map.get3(i)) + t);
                }
            }
        }
        (UvSpace::View, UvSpace::Model) => {
            let rt = r.transpose();
            for i in 0..map.width * map.height {
                if map.mask[i] {
                    out.set3(i, rt * (map.get3(i) - t) / pose.f);
                }
            }
        }
        (from, to) => {
            return Err(Error::SpaceMismatch {
                expected: "model<->view position map",
                got: if from == to { "no-op transform" } else { from.name() },
            })
        }
    }
    out.space = to;
    Ok(out)
}

/// How a scalar displacement moves the coarse surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DisplacementMode {
    /// Along the view z axis (displacement depth map).
    #[default]
    ViewZ,
    /// Along the coarse per-texel normal.
    Normal,
}

/// detail = coarse + d * direction, texel-wise. The output mask is the
/// intersection of the input masks.
pub fn apply_displacement(
    coarse_pos: &UvMap,
    disp: &UvMap,
    mode: DisplacementMode,
) -> Result<UvMap> {
    coarse_pos.same_resolution(disp)?;
    if coarse_pos.space != UvSpace::View {
        return Err(Error::SpaceMismatch {
            expected: "view",
            got: coarse_pos.space.name(),
        });
    }
    if disp.channels != 1 {
        return Err(Error::InvalidInput(
            "displacement map must be scalar".into(),
        ));
    }
    let mut out = coarse_pos.clone();
    match mode {
        DisplacementMode::ViewZ => {
            for i in 0..out.width * out.height {
                out.mask[i] = coarse_pos.mask[i] && disp.mask[i];
                if out.mask[i] {
                    out.data[3 * i + 2] += disp.data[i];
                }
            }
        }
        DisplacementMode::Normal => {
            let normals = uv_normals(coarse_pos)?;
            for i in 0..out.width * out.height {
                out.mask[i] = coarse_pos.mask[i] && disp.mask[i] && normals.mask[i];
                if out.mask[i] {
                    let p = coarse_pos.get3(i) + disp.data[i] * normals.get3(i);
                    out.set3(i, p);
                }
            }
        }
    }
    Ok(out)
}

/// Finite-difference axis derivative used by [`uv_normals`]: central where
/// both neighbors are valid, one-sided at mask boundaries. Returns the
/// (minus, plus) texel indices and the scale factor of (P[plus]-P[minus]).
fn axis_stencil(
    mask: &[bool],
    width: usize,
    height: usize,
    r: usize,
    c: usize,
    along_u: bool,
) -> Option<(usize, usize, f64)> {
    let idx = |r: usize, c: usize| r * width + c;
    let (prev, next) = if along_u {
        (
            (c > 0).then(|| idx(r, c - 1)).filter(|&i| mask[i]),
            (c + 1 < width).then(|| idx(r, c + 1)).filter(|&i| mask[i]),
        )
    } else {
        (
            (r > 0).then(|| idx(r - 1, c)).filter(|&i| mask[i]),
            (r + 1 < height).then(|| idx(r + 1, c)).filter(|&i| mask[i]),
        )
    };
    let me = idx(r, c);
    match (prev, next) {
        (Some(p), Some(n)) => Some((p, n, 0.5)),
        (None, Some(n)) => Some((me, n, 1.0)),
        (Some(p), None) => Some((p, me, 1.0)),
        (None, None) => None,
    }
}

/// Unit normals of a position map: n = normalize(∂P/∂u × ∂P/∂v) with
/// texel-unit spacing. Texels without a valid neighbor along either axis
/// are invalidated.
pub fn uv_normals(pos: &UvMap) -> Result<UvMap> {
    if pos.channels != 3 {
        return Err(Error::InvalidInput("uv_normals needs a 3-channel map".into()));
    }
    let (w, h) = (pos.width, pos.height);
    let mut out = UvMap::zeros_masked(w, h, 3, pos.space);
    for r in 0..h {
        for c in 0..w {
            let i = pos.idx(r, c);
            if !pos.mask[i] {
                continue;
            }
            let (Some(su), Some(sv)) = (
                axis_stencil(&pos.mask, w, h, r, c, true),
                axis_stencil(&pos.mask, w, h, r, c, false),
            ) else {
                continue;
            };
            let du = (pos.get3(su.1) - pos.get3(su.0)) * su.2;
            let dv = (pos.get3(sv.1) - pos.get3(sv.0)) * sv.2;
            let n = du.cross(&dv);
            let len = n.norm();
            if len < 1e-20 {
                continue;
            }
            out.mask[i] = true;
            out.set3(i, n / len);
        }
    }
    Ok(out)
}

/// Backward companion of [`uv_normals`]: maps normal cotangents (flat 3ch,
/// only texels valid in `normals` contribute) to position cotangents.
pub fn uv_normals_backward(pos: &UvMap, normals: &UvMap, d_normals: &[f64]) -> Vec<f64> {
    let (w, h) = (pos.width, pos.height);
    assert_eq!(d_normals.len(), w * h * 3);
    let mut d_pos = vec![0.0; w * h * 3];
    let mut add = |i: usize, v: Vector3<f64>| {
        d_pos[3 * i] += v.x;
        d_pos[3 * i + 1] += v.y;
        d_pos[3 * i + 2] += v.z;
    };
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !normals.mask[i] {
                continue;
            }
            let d_n = Vector3::new(d_normals[3 * i], d_normals[3 * i + 1], d_normals[3 * i + 2]);
            if d_n == Vector3::zeros() {
                continue;
            }
            let (Some(su), Some(sv)) = (
                axis_stencil(&pos.mask, w, h, r, c, true),
                axis_stencil(&pos.mask, w, h, r, c, false),
            ) else {
                continue;
            };
            let du = (pos.get3(su.1) - pos.get3(su.0)) * su.2;
            let dv = (pos.get3(sv.1) - pos.get3(sv.0)) * sv.2;
            let raw = du.cross(&dv);
            let len = raw.norm();
            if len < 1e-20 {
                continue;
            }
            let n = raw / len;
            // Normalization backward, then cross-product backward.
            let d_raw = (d_n - n * n.dot(&d_n)) / len;
            let d_du = dv.cross(&d_raw);
            let d_dv = d_raw.cross(&du);
            add(su.1, d_du * su.2);
            add(su.0, -d_du * su.2);
            add(sv.1, d_dv * sv.2);
            add(sv.0, -d_dv * sv.2);
        }
    }
    d_pos
}

/// Connects valid 2×2 texel quads into two triangles each. Returns the mesh
/// together with the texel index of every mesh vertex.
pub fn uv_to_mesh_indexed(pos: &UvMap) -> Result<(Mesh, Vec<u32>)> {
    if pos.channels != 3 {
        return Err(Error::InvalidInput("uv_to_mesh needs a 3-channel map".into()));
    }
    let (w, h) = (pos.width, pos.height);
    let mut vertex_of_texel = vec![u32::MAX; w * h];
    let mut vertices = Vec::new();
    let mut uv = Vec::new();
    let mut texel_of_vertex = Vec::new();
    let mut triangles = Vec::new();
    let vertex_for = |i: usize,
                          vertices: &mut Vec<Vector3<f64>>,
                          uv: &mut Vec<[f64; 2]>,
                          texel_of_vertex: &mut Vec<u32>,
                          vertex_of_texel: &mut Vec<u32>|
     -> u32 {
        if vertex_of_texel[i] == u32::MAX {
            vertex_of_texel[i] = vertices.len() as u32;
            vertices.push(pos.get3(i));
            uv.push([
                ((i % w) as f64 + 0.5) / w as f64,
                ((i / w) as f64 + 0.5) / h as f64,
            ]);
            texel_of_vertex.push(i as u32);
        }
        vertex_of_texel[i]
    };
    for r in 0..h.saturating_sub(1) {
        for c in 0..w.saturating_sub(1) {
            let a = r * w + c;
            let b = r * w + c + 1;
            let d = (r + 1) * w + c + 1;
            let e = (r + 1) * w + c;
            if pos.mask[a] && pos.mask[b] && pos.mask[d] && pos.mask[e] {
                let va = vertex_for(a, &mut vertices, &mut uv, &mut texel_of_vertex, &mut vertex_of_texel);
                let vb = vertex_for(b, &mut vertices, &mut uv, &mut texel_of_vertex, &mut vertex_of_texel);
                let vd = vertex_for(d, &mut vertices, &mut uv, &mut texel_of_vertex, &mut vertex_of_texel);
                let ve = vertex_for(e, &mut vertices, &mut uv, &mut texel_of_vertex, &mut vertex_of_texel);
                triangles.push([va, vb, vd]);
                triangles.push([va, vd, ve]);
            }
        }
    }
    Ok((
        Mesh {
            vertices,
            uv,
            triangles,
        },
        texel_of_vertex,
    ))
}

/// Detail mesh from a position map (empty mask yields an empty mesh).
pub fn uv_to_mesh(pos: &UvMap) -> Result<Mesh> {
    Ok(uv_to_mesh_indexed(pos)?.0)
}

/// Unwraps an input image into UV space under the given pose.
///
/// A texel is visible when its surface point faces the camera (view-space
/// normal with positive z under this crate's front-facing convention), is
/// not occluded per the coarse depth buffer (1-texel tolerance), and
/// projects inside the image.
pub fn unwrap_image(
    image: &ImageBuffer,
    model: &FaceModel,
    vertices: &[Vector3<f64>],
    pose: &Pose,
    res: usize,
) -> Result<UvMap> {
    pose.validate()?;
    let pos_model = uv_position_map(model, vertices, res)?;
    let normals_model = facemodel::vertex_normals(vertices, &model.triangles);
    let mut nflat = Vec::with_capacity(vertices.len() * 3);
    for n in &normals_model {
        nflat.extend_from_slice(&[n.x, n.y, n.z]);
    }
    let normal_map = rasterize_to_uv(model, vertices, &nflat, 3, res, UvSpace::Model)?;

    // Depth buffer of the posed coarse mesh at image resolution.
    let projection = crate::camera::transform_project(pose, vertices);
    let depth_raster = rasterizer::scan_rowspace(
        &projection
            .points
            .iter()
            .map(|p| rasterizer::to_row_space(p, image.width, image.height))
            .collect::<Vec<_>>(),
        &projection.depth,
        &model.triangles,
        image.width,
        image.height,
        CullRowSpace::Positive,
    );

    let r = pose.rotation();
    let t = pose.translation();
    let tol = pose.f * model.diameter() / res as f64;
    let (w_img, h_img) = (image.width as f64, image.height as f64);

    let mut out = UvMap::zeros_masked(res, res, 3, UvSpace::Color);
    for i in 0..res * res {
        if !pos_model.mask[i] {
            continue;
        }
        // Backfacing under the pose?
        if normal_map.mask[i] {
            let n_view = r * normal_map.get3(i);
            if n_view.z <= 0.0 {
                continue;
            }
        } else {
            continue;
        }
        let p_view = pose.f * (r * pos_model.get3(i)) + t;
        // Outside the image?
        if p_view.x < -w_img / 2.0
            || p_view.x > w_img / 2.0
            || p_view.y < -h_img / 2.0
            || p_view.y > h_img / 2.0
        {
            continue;
        }
        // Occluded per the depth buffer (nearest pixel)?
        let row_p = rasterizer::to_row_space(&Vector2::new(p_view.x, p_view.y), image.width, image.height);
        let pc = (row_p.x - 0.5).round().clamp(0.0, w_img - 1.0) as usize;
        let pr = (row_p.y - 0.5).round().clamp(0.0, h_img - 1.0) as usize;
        let buf_depth = depth_raster.depth[pr * image.width + pc];
        if buf_depth.is_finite() && p_view.z > buf_depth + tol {
            continue;
        }
        let rgb = image.sample_bilinear(p_view.x, p_view.y);
        out.mask[i] = true;
        out.set3(i, Vector3::new(rgb[0], rgb[1], rgb[2]));
    }
    Ok(out)
}

/// Forward state of the UV render layer kept for its backward pass.
pub struct UvRenderState {
    pub width: usize,
    pub height: usize,
    pub mesh: Mesh,
    pub texel_of_vertex: Vec<u32>,
    pub normals_map: UvMap,
    pub vertex_albedo: Vec<[f64; 3]>,
    pub vertex_normal: Vec<Vector3<f64>>,
    pub points: Vec<Vector2<f64>>,
    pub lighting: ShLighting,
    pub raster: RasterOutput,
    pub pixel_albedo: Vec<[f64; 3]>,
    pub pixel_normal_raw: Vec<Vector3<f64>>,
    pub map_width: usize,
    pub map_height: usize,
}

/// Renders the detail surface defined by a view-space position map: builds
/// the detail mesh, recomputes normals from the displaced map, projects
/// orthographically (positions are already in view space) and shades with
/// SH lighting.
pub fn render_from_uv(
    detail_pos: &UvMap,
    albedo_uv: &UvMap,
    light: &ShLighting,
    width: usize,
    height: usize,
) -> Result<RasterOutput> {
    Ok(render_from_uv_with_state(detail_pos, albedo_uv, light, width, height)?.raster)
}

/// As [`render_from_uv`], keeping the state for [`render_from_uv_backward`].
pub fn render_from_uv_with_state(
    detail_pos: &UvMap,
    albedo_uv: &UvMap,
    light: &ShLighting,
    width: usize,
    height: usize,
) -> Result<UvRenderState> {
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput("image dimensions must be nonzero".into()));
    }
    detail_pos.same_resolution(albedo_uv)?;
    if detail_pos.space != UvSpace::View {
        return Err(Error::SpaceMismatch {
            expected: "view",
            got: detail_pos.space.name(),
        });
    }
    if albedo_uv.channels != 3 {
        return Err(Error::InvalidInput("albedo map must have 3 channels".into()));
    }
    light.validate()?;

    let normals_map = uv_normals(detail_pos)?;
    // Mesh over texels that have geometry, a normal and an albedo.
    let mut pos = detail_pos.clone();
    for i in 0..pos.mask.len() {
        pos.mask[i] = pos.mask[i] && normals_map.mask[i] && albedo_uv.mask[i];
    }
    let (mesh, texel_of_vertex) = uv_to_mesh_indexed(&pos)?;

    let nverts = mesh.vertices.len();
    let mut vertex_albedo = Vec::with_capacity(nverts);
    let mut vertex_normal = Vec::with_capacity(nverts);
    let mut attributes = vec![0.0; nverts * 6];
    let mut points = Vec::with_capacity(nverts);
    let mut depth = Vec::with_capacity(nverts);
    for (v, &texel) in texel_of_vertex.iter().enumerate() {
        let t = texel as usize;
        let albedo = [
            albedo_uv.data[3 * t],
            albedo_uv.data[3 * t + 1],
            albedo_uv.data[3 * t + 2],
        ];
        let normal = normals_map.get3(t);
        attributes[v * 6..v * 6 + 3].copy_from_slice(&albedo);
        attributes[v * 6 + 3] = normal.x;
        attributes[v * 6 + 4] = normal.y;
        attributes[v * 6 + 5] = normal.z;
        vertex_albedo.push(albedo);
        vertex_normal.push(normal);
        let p = mesh.vertices[v];
        points.push(Vector2::new(p.x, p.y));
        depth.push(p.z);
    }

    let (mut raster, attrs) = rasterizer::rasterize(
        &points,
        &depth,
        &attributes,
        6,
        &mesh.triangles,
        width,
        height,
        true,
    )?;
    let mut pixel_albedo = vec![[0.0; 3]; width * height];
    let mut pixel_normal_raw = vec![Vector3::zeros(); width * height];
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
        pixel_albedo[pix] = albedo;
        pixel_normal_raw[pix] = n_raw;
    }

    Ok(UvRenderState {
        width,
        height,
        mesh,
        texel_of_vertex,
        normals_map,
        vertex_albedo,
        vertex_normal,
        points,
        lighting: *light,
        raster,
        pixel_albedo,
        pixel_normal_raw,
        map_width: detail_pos.width,
        map_height: detail_pos.height,
    })
}

/// Gradients produced by the UV render backward pass.
pub struct UvRenderGrad {
    /// Cotangent on the detail position map (flat 3ch per texel).
    pub d_positions: Vec<f64>,
    /// Cotangent on the albedo map (flat 3ch per texel).
    pub d_albedo: Vec<f64>,
    pub d_lighting: [[f64; 3]; 9],
}

/// Reverse-mode pass of the UV render layer. Gradients with respect to
/// screen positions flow only through barycentric weights of pixels whose
/// covering triangle is fixed, matching the coarse rasterizer contract.
pub fn render_from_uv_backward(
    detail_pos: &UvMap,
    state: &UvRenderState,
    image_cotangent: &[f64],
) -> Result<UvRenderGrad> {
    let (w, h) = (state.width, state.height);
    if image_cotangent.len() != w * h * 3 {
        return Err(Error::dims("image cotangent", w * h * 3, image_cotangent.len()));
    }
    let nverts = state.mesh.vertices.len();
    let mut d_vertex_albedo = vec![[0.0; 3]; nverts];
    let mut d_vertex_normal = vec![Vector3::zeros(); nverts];
    let mut d_points = vec![Vector2::zeros(); nverts];
    let mut d_lighting = [[0.0; 3]; 9];

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
            &mut d_lighting,
        );
        let d_n_raw = if len < 1e-20 {
            Vector3::zeros()
        } else {
            (sg.normal - n_unit * n_unit.dot(&sg.normal)) / len
        };

        let t = state.raster.tri_id[pix] as usize;
        let tri = state.mesh.triangles[t];
        let wts = [
            state.raster.bary[3 * pix],
            state.raster.bary[3 * pix + 1],
            state.raster.bary[3 * pix + 2],
        ];
        let mut d_w = [0.0; 3];
        for k in 0..3 {
            let vi = tri[k] as usize;
            for c in 0..3 {
                d_vertex_albedo[vi][c] += wts[k] * sg.albedo[c];
                d_w[k] += state.vertex_albedo[vi][c] * sg.albedo[c];
            }
            d_vertex_normal[vi] += wts[k] * d_n_raw;
            d_w[k] += state.vertex_normal[vi].dot(&d_n_raw);
        }
        let row_p = Vector2::new((pix % w) as f64 + 0.5, (pix / w) as f64 + 0.5);
        let rv = [
            rasterizer::to_row_space(&state.points[tri[0] as usize], w, h),
            rasterizer::to_row_space(&state.points[tri[1] as usize], w, h),
            rasterizer::to_row_space(&state.points[tri[2] as usize], w, h),
        ];
        let area2 = rasterizer::cross2(&(rv[1] - rv[0]), &(rv[2] - rv[0]));
        let d_v = rasterizer::bary_backward(&rv, area2, &wts, &row_p, &d_w);
        for k in 0..3 {
            d_points[tri[k] as usize] += d_v[k];
        }
    }

    // Scatter vertex cotangents back onto the texel grid.
    let npix_map = state.map_width * state.map_height;
    let mut d_positions = vec![0.0; npix_map * 3];
    let mut d_normal_map = vec![0.0; npix_map * 3];
    let mut d_albedo = vec![0.0; npix_map * 3];
    for v in 0..nverts {
        let t = state.texel_of_vertex[v] as usize;
        // Screen-position path: the projected point is (x, y) of the texel.
        d_positions[3 * t] += d_points[v].x;
        d_positions[3 * t + 1] += d_points[v].y;
        for c in 0..3 {
            d_albedo[3 * t + c] += d_vertex_albedo[v][c];
        }
        d_normal_map[3 * t] += d_vertex_normal[v].x;
        d_normal_map[3 * t + 1] += d_vertex_normal[v].y;
        d_normal_map[3 * t + 2] += d_vertex_normal[v].z;
    }
    // Normal-map path back to positions.
    let d_pos_from_normals = uv_normals_backward(detail_pos, &state.normals_map, &d_normal_map);
    for (a, b) in d_positions.iter_mut().zip(&d_pos_from_normals) {
        *a += b;
    }

    Ok(UvRenderGrad {
        d_positions,
        d_albedo,
        d_lighting,
    })
}

/// Blends two UV maps: copy where one mask is set, average where both are.
pub fn blend_uv_maps(a: &UvMap, b: &UvMap) -> Result<UvMap> {
    blend_impl(a, b, None)
}

/// Confidence-weighted blend; weights are scalar maps, used where both
/// inputs are valid.
pub fn blend_uv_maps_weighted(
    a: &UvMap,
    b: &UvMap,
    weight_a: &UvMap,
    weight_b: &UvMap,
) -> Result<UvMap> {
    if weight_a.channels != 1 || weight_b.channels != 1 {
        return Err(Error::InvalidInput("blend weights must be scalar maps".into()));
    }
    a.same_resolution(weight_a)?;
    a.same_resolution(weight_b)?;
    blend_impl(a, b, Some((weight_a, weight_b)))
}

fn blend_impl(a: &UvMap, b: &UvMap, weights: Option<(&UvMap, &UvMap)>) -> Result<UvMap> {
    a.same_resolution(b)?;
    if a.space != b.space {
        return Err(Error::SpaceMismatch {
            expected: a.space.name(),
            got: b.space.name(),
        });
    }
    if a.channels != b.channels {
        return Err(Error::dims("blend channels", a.channels, b.channels));
    }
    // View-space maps from different poses must not be merged; the pose is
    // not recoverable from the map, so refuse view space outright.
    if a.space == UvSpace::View {
        return Err(Error::SpaceMismatch {
            expected: "model, scalar or color",
            got: "view",
        });
    }
    let mut out = UvMap::zeros_masked(a.width, a.height, a.channels, a.space);
    for i in 0..a.width * a.height {
        let base = i * a.channels;
        match (a.mask[i], b.mask[i]) {
            (true, true) => {
                let (wa, wb) = match weights {
                    Some((wa, wb)) => {
                        let (x, y) = (wa.data[i].max(0.0), wb.data[i].max(0.0));
                        if x + y > 0.0 {
                            (x / (x + y), y / (x + y))
                        } else {
                            (0.5, 0.5)
                        }
                    }
                    None => (0.5, 0.5),
                };
                for c in 0..a.channels {
                    out.data[base + c] = wa * a.data[base + c] + wb * b.data[base + c];
                }
                out.mask[i] = true;
            }
            (true, false) => {
                out.data[base..base + a.channels]
                    .copy_from_slice(&a.data[base..base + a.channels]);
                out.mask[i] = true;
            }
            (false, true) => {
                out.data[base..base + a.channels]
                    .copy_from_slice(&b.data[base..base + a.channels]);
                out.mask[i] = true;
            }
            (false, false) => {}
        }
    }
    Ok(out)
}
