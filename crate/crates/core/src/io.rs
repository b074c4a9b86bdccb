//! File codecs: PNG images (sRGB on disk, linear in memory), Wavefront OBJ
//! meshes, landmark text files, UVM1 UV maps and FPJ1 parameter files.

use std::io::Read;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lighting::ShLighting;
use crate::mesh::Mesh;
use crate::optim::SceneParams;
use crate::uvspace::{UvMap, UvSpace};

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

/// Linear-light RGB image, H×W×3 in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuffer {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::dims("image data", width * height * 3, data.len()));
        }
        Ok(ImageBuffer {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn pixel(&self, r: usize, c: usize) -> [f64; 3] {
        let b = 3 * (r * self.width + c);
        [self.data[b], self.data[b + 1], self.data[b + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, r: usize, c: usize, rgb: [f64; 3]) {
        let b = 3 * (r * self.width + c);
        self.data[b..b + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at camera image coordinates (origin center, +y up),
    /// clamping to the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f64; 3] {
        let col_f = x + self.width as f64 / 2.0 - 0.5;
        let row_f = self.height as f64 / 2.0 - y - 0.5;
        let c0 = col_f.floor();
        let r0 = row_f.floor();
        let fc = col_f - c0;
        let fr = row_f - r0;
        let clamp_c = |c: f64| (c.max(0.0) as usize).min(self.width - 1);
        let clamp_r = |r: f64| (r.max(0.0) as usize).min(self.height - 1);
        let (c0i, c1i) = (clamp_c(c0), clamp_c(c0 + 1.0));
        let (r0i, r1i) = (clamp_r(r0), clamp_r(r0 + 1.0));
        let mut out = [0.0; 3];
        let p00 = self.pixel(r0i, c0i);
        let p01 = self.pixel(r0i, c1i);
        let p10 = self.pixel(r1i, c0i);
        let p11 = self.pixel(r1i, c1i);
        for k in 0..3 {
            let top = p00[k] * (1.0 - fc) + p01[k] * fc;
            let bot = p10[k] * (1.0 - fc) + p11[k] * fc;
            out[k] = top * (1.0 - fr) + bot * fr;
        }
        out
    }
}

/// IEC 61966-2-1 sRGB decode to linear light.
pub fn srgb_to_linear(s: f64) -> f64 {
    if s <= 0.04045 {
        s / 12.92
    } else {
        ((s + 0.055) / 1.055).powf(2.4)
    }
}

/// IEC 61966-2-1 linear light to sRGB encode.
pub fn linear_to_srgb(l: f64) -> f64 {
    if l <= 0.0031308 {
        12.92 * l
    } else {
        1.055 * l.powf(1.0 / 2.4) - 0.055
    }
}

/// Writes an image as 8-bit sRGB PNG; values are clamped to [0,1].
pub fn write_image(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let mut out = image::RgbImage::new(img.width as u32, img.height as u32);
    for r in 0..img.height {
        for c in 0..img.width {
            let rgb = img.pixel(r, c);
            let px = [
                (linear_to_srgb(rgb[0].clamp(0.0, 1.0)) * 255.0).round() as u8,
                (linear_to_srgb(rgb[1].clamp(0.0, 1.0)) * 255.0).round() as u8,
                (linear_to_srgb(rgb[2].clamp(0.0, 1.0)) * 255.0).round() as u8,
            ];
            out.put_pixel(c as u32, r as u32, image::Rgb(px));
        }
    }
    out.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
    Ok(())
}

/// Reads an 8-bit sRGB PNG into linear light.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let dynimg = image::ImageReader::open(path.as_ref())?
        .decode()?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = ImageBuffer::new(w, h);
    for r in 0..h {
        for c in 0..w {
            let px = rgb.get_pixel(c as u32, r as u32);
            img.set_pixel(
                r,
                c,
                [
                    srgb_to_linear(px[0] as f64 / 255.0),
                    srgb_to_linear(px[1] as f64 / 255.0),
                    srgb_to_linear(px[2] as f64 / 255.0),
                ],
            );
        }
    }
    Ok(img)
}

/// Millimeter scale of 16-bit depth PNGs: stored value = mm * 10.
pub const DEPTH_PNG_DIVISOR: f64 = 10.0;

/// Reads a single-channel 16-bit PNG as a depth image in millimeters.
pub fn read_depth_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let dynimg = image::ImageReader::open(path.as_ref())?.decode()?;
    let gray = match dynimg {
        image::DynamicImage::ImageLuma16(g) => g,
        other => other.to_luma16(),
    };
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let data = gray
        .pixels()
        .map(|p| p[0] as f64 / DEPTH_PNG_DIVISOR)
        .collect();
    Ok((w, h, data))
}

/// Writes a depth image (millimeters) as a 16-bit PNG.
pub fn write_depth_png(
    path: impl AsRef<Path>,
    width: usize,
    height: usize,
    depth_mm: &[f64],
) -> Result<()> {
    if depth_mm.len() != width * height {
        return Err(Error::dims("depth image", width * height, depth_mm.len()));
    }
    let mut out = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        width as u32,
        height as u32,
    );
    for r in 0..height {
        for c in 0..width {
            let v = (depth_mm[r * width + c] * DEPTH_PNG_DIVISOR)
                .round()
                .clamp(0.0, u16::MAX as f64) as u16;
            out.put_pixel(c as u32, r as u32, image::Luma([v]));
        }
    }
    out.save_with_format(path.as_ref(), image::ImageFormat::Png)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Wavefront OBJ (v / vt / f subset)
// ---------------------------------------------------------------------------

/// Writes a mesh as OBJ with 9-decimal coordinates.
pub fn write_obj(path: impl AsRef<Path>, mesh: &Mesh) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::new();
    for v in &mesh.vertices {
        writeln!(out, "v {:.9} {:.9} {:.9}", v.x, v.y, v.z).unwrap();
    }
    let has_uv = !mesh.uv.is_empty();
    if has_uv {
        for uv in &mesh.uv {
            writeln!(out, "vt {:.9} {:.9}", uv[0], uv[1]).unwrap();
        }
    }
    for t in &mesh.triangles {
        if has_uv {
            writeln!(
                out,
                "f {}/{} {}/{} {}/{}",
                t[0] + 1,
                t[0] + 1,
                t[1] + 1,
                t[1] + 1,
                t[2] + 1,
                t[2] + 1
            )
            .unwrap();
        } else {
            writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads the v/vt/f OBJ subset; face indices are 1-based and may carry
/// optional /vt and /vn slots.
pub fn read_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    parse_obj(&text, &file)
}

fn parse_obj(text: &str, file: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut uv_pool: Vec<[f64; 2]> = Vec::new();
    let mut uv_of_vertex: Vec<Option<usize>> = Vec::new();
    let mut triangles = Vec::new();
    let parse_err = |line: usize, msg: String| Error::Parse {
        file: file.to_string(),
        line,
        msg,
    };
    for (ln, raw) in text.lines().enumerate() {
        let line_no = ln + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut coord = [0.0; 3];
                for item in coord.iter_mut() {
                    *item = parts
                        .next()
                        .ok_or_else(|| parse_err(line_no, "vertex needs 3 coordinates".into()))?
                        .parse::<f64>()
                        .map_err(|e| parse_err(line_no, format!("bad vertex coordinate: {e}")))?;
                }
                vertices.push(Vector3::new(coord[0], coord[1], coord[2]));
                uv_of_vertex.push(None);
            }
            Some("vt") => {
                let mut coord = [0.0; 2];
                for item in coord.iter_mut() {
                    *item = parts
                        .next()
                        .ok_or_else(|| parse_err(line_no, "vt needs 2 coordinates".into()))?
                        .parse::<f64>()
                        .map_err(|e| parse_err(line_no, format!("bad uv coordinate: {e}")))?;
                }
                uv_pool.push(coord);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for slot in parts {
                    let mut fields = slot.split('/');
                    let vi: i64 = fields
                        .next()
                        .unwrap()
                        .parse()
                        .map_err(|e| parse_err(line_no, format!("bad face index: {e}")))?;
                    if vi < 1 || vi as usize > vertices.len() {
                        return Err(parse_err(
                            line_no,
                            format!("face vertex index {vi} out of range (1-based)"),
                        ));
                    }
                    let v = (vi - 1) as usize;
                    if let Some(ti_str) = fields.next() {
                        if !ti_str.is_empty() {
                            let ti: i64 = ti_str.parse().map_err(|e| {
                                parse_err(line_no, format!("bad texture index: {e}"))
                            })?;
                            if ti < 1 || ti as usize > uv_pool.len() {
                                return Err(parse_err(
                                    line_no,
                                    format!("face uv index {ti} out of range"),
                                ));
                            }
                            uv_of_vertex[v] = Some((ti - 1) as usize);
                        }
                    }
                    idx.push(v as u32);
                }
                if idx.len() != 3 {
                    return Err(parse_err(
                        line_no,
                        format!("face must have 3 vertices, got {}", idx.len()),
                    ));
                }
                triangles.push([idx[0], idx[1], idx[2]]);
            }
            _ => {} // ignore normals, objects, materials
        }
    }
    let uv = if uv_of_vertex.iter().any(|u| u.is_some()) {
        uv_of_vertex
            .iter()
            .map(|u| u.map(|i| uv_pool[i]).unwrap_or([0.0, 0.0]))
            .collect()
    } else {
        Vec::new()
    };
    Ok(Mesh {
        vertices,
        uv,
        triangles,
    })
}

// ---------------------------------------------------------------------------
// Landmarks (68 lines of "x y" in camera image coordinates)
// ---------------------------------------------------------------------------

pub fn write_landmarks(path: impl AsRef<Path>, points: &[[f64; 2]]) -> Result<()> {
    use std::fmt::Write as _;
    if points.len() != crate::facemodel::LANDMARK_COUNT {
        return Err(Error::dims(
            "landmarks",
            crate::facemodel::LANDMARK_COUNT,
            points.len(),
        ));
    }
    let mut out = String::new();
    for p in points {
        writeln!(out, "{:.9} {:.9}", p[0], p[1]).unwrap();
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_landmarks(path: impl AsRef<Path>) -> Result<Vec<[f64; 2]>> {
    let path = path.as_ref();
    let file = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let mut points = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let mut p = [0.0; 2];
        for item in p.iter_mut() {
            *item = parts
                .next()
                .ok_or_else(|| Error::Parse {
                    file: file.clone(),
                    line: ln + 1,
                    msg: "expected two coordinates".into(),
                })?
                .parse::<f64>()
                .map_err(|e| Error::Parse {
                    file: file.clone(),
                    line: ln + 1,
                    msg: format!("bad coordinate: {e}"),
                })?;
        }
        points.push(p);
    }
    if points.len() != crate::facemodel::LANDMARK_COUNT {
        return Err(Error::Parse {
            file,
            line: 0,
            msg: format!(
                "expected {} landmarks, found {}",
                crate::facemodel::LANDMARK_COUNT,
                points.len()
            ),
        });
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// UVM1 (binary UV map container)
// ---------------------------------------------------------------------------

const UVM_MAGIC: &[u8; 8] = b"UVMAP1\0\0";

pub fn encode_uvmap(map: &UvMap) -> Result<Vec<u8>> {
    map.validate()?;
    let mut payload = Vec::new();
    payload.extend_from_slice(&(map.width as u32).to_le_bytes());
    payload.extend_from_slice(&(map.height as u32).to_le_bytes());
    payload.extend_from_slice(&(map.channels as u32).to_le_bytes());
    payload.push(map.space.tag());
    for &v in &map.data {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
    payload.extend(map.mask.iter().map(|&m| m as u8));
    let crc = crc32fast::hash(&payload);
    let mut out = Vec::with_capacity(8 + payload.len() + 4);
    out.extend_from_slice(UVM_MAGIC);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn decode_uvmap(bytes: &[u8], context: &str) -> Result<UvMap> {
    if bytes.len() < 12 || &bytes[..8] != UVM_MAGIC {
        return Err(Error::MalformedHeader(context.to_string()));
    }
    let payload = &bytes[8..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(payload) != stored {
        return Err(Error::ChecksumMismatch(context.to_string()));
    }
    if payload.len() < 13 {
        return Err(Error::TruncatedPayload(context.to_string()));
    }
    let width = u32::from_le_bytes(payload[0..4].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(payload[4..8].try_into().unwrap()) as usize;
    let channels = u32::from_le_bytes(payload[8..12].try_into().unwrap()) as usize;
    let space = UvSpace::from_tag(payload[12])?;
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput(format!(
            "{context}: zero-size UV map"
        )));
    }
    let n = width * height;
    let expected = 13 + n * channels * 4 + n;
    if payload.len() != expected {
        return Err(Error::TruncatedPayload(context.to_string()));
    }
    let mut data = Vec::with_capacity(n * channels);
    let mut off = 13;
    for _ in 0..n * channels {
        data.push(f32::from_le_bytes(payload[off..off + 4].try_into().unwrap()) as f64);
        off += 4;
    }
    let mask = payload[off..off + n].iter().map(|&b| b != 0).collect();
    let map = UvMap {
        width,
        height,
        channels,
        data,
        mask,
        space,
    };
    map.validate()?;
    Ok(map)
}

pub fn write_uvmap(path: impl AsRef<Path>, map: &UvMap) -> Result<()> {
    std::fs::write(path, encode_uvmap(map)?)?;
    Ok(())
}

pub fn read_uvmap(path: impl AsRef<Path>) -> Result<UvMap> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_uvmap(&bytes, &path.display().to_string())
}

// ---------------------------------------------------------------------------
// FPJ1 (scene parameter JSON)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsMeta {
    pub model_hash: String,
    pub image_size: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct ParamsJson {
    x_id: Vec<f64>,
    x_exp: Vec<f64>,
    x_tex: Vec<f64>,
    pose: crate::camera::Pose,
    sh: Vec<f64>,
    meta: ParamsMeta,
}

pub fn encode_params(scene: &SceneParams, meta: &ParamsMeta) -> Result<String> {
    let json = ParamsJson {
        x_id: scene.coeffs.x_id.clone(),
        x_exp: scene.coeffs.x_exp.clone(),
        x_tex: scene.coeffs.x_tex.clone(),
        pose: scene.pose,
        sh: scene.lighting.to_channel_major().to_vec(),
        meta: meta.clone(),
    };
    Ok(serde_json::to_string_pretty(&json)?)
}

pub fn decode_params(text: &str) -> Result<(SceneParams, ParamsMeta)> {
    let json: ParamsJson = serde_json::from_str(text)?;
    let lighting = ShLighting::from_channel_major(&json.sh)?;
    let scene = SceneParams {
        coeffs: crate::facemodel::ShapeCoeffs {
            x_id: json.x_id,
            x_exp: json.x_exp,
            x_tex: json.x_tex,
        },
        pose: json.pose,
        lighting,
    };
    scene.pose.validate()?;
    Ok((scene, json.meta))
}

pub fn write_params(
    path: impl AsRef<Path>,
    scene: &SceneParams,
    meta: &ParamsMeta,
) -> Result<()> {
    std::fs::write(path, encode_params(scene, meta)?)?;
    Ok(())
}

pub fn read_params(path: impl AsRef<Path>) -> Result<(SceneParams, ParamsMeta)> {
    let text = std::fs::read_to_string(path.as_ref())?;
    decode_params(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Pose;
    use crate::facemodel::ShapeCoeffs;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn mid_gray_png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let mut img = ImageBuffer::new(8, 6);
        for r in 0..6 {
            for c in 0..8 {
                img.set_pixel(r, c, [0.5, 0.5, 0.5]);
            }
        }
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!(back.width, 8);
        assert_eq!(back.height, 6);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
    }

    #[test]
    fn one_pixel_image_round_trips_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.png");
        let img = ImageBuffer::from_data(1, 1, vec![0.2, 0.4, 0.9]).unwrap();
        write_image(&path, &img).unwrap();
        let back = read_image(&path).unwrap();
        assert_eq!((back.width, back.height), (1, 1));
    }

    #[test]
    fn corrupt_png_magic_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"not a png at all").unwrap();
        assert!(read_image(&path).is_err());
    }

    #[test]
    fn srgb_conversion_round_trips() {
        for i in 0..=255u32 {
            let s = i as f64 / 255.0;
            let l = srgb_to_linear(s);
            let back = linear_to_srgb(l);
            assert!((back - s).abs() < 1e-12);
        }
    }

    #[test]
    fn depth_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("depth.png");
        let depth = vec![0.0, 12.3, 95.0, 6553.5];
        write_depth_png(&path, 2, 2, &depth).unwrap();
        let (w, h, back) = read_depth_png(&path).unwrap();
        assert_eq!((w, h), (2, 2));
        for (a, b) in depth.iter().zip(&back) {
            assert!((a - b).abs() <= 0.05, "{a} vs {b}");
        }
    }

    fn sample_mesh() -> Mesh {
        Mesh {
            vertices: vec![
                Vector3::new(0.0, 0.0, 0.0),
                Vector3::new(10.5, 0.25, -3.0),
                Vector3::new(0.125, 7.75, 2.5),
            ],
            uv: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            triangles: vec![[0, 1, 2]],
        }
    }

    #[test]
    fn obj_round_trip_preserves_mesh() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.obj");
        let mesh = sample_mesh();
        write_obj(&path, &mesh).unwrap();
        let back = read_obj(&path).unwrap();
        assert_eq!(back.triangles, mesh.triangles);
        for (a, b) in mesh.vertices.iter().zip(&back.vertices) {
            assert!((a - b).norm() < 1e-9);
        }
        for (a, b) in mesh.uv.iter().zip(&back.uv) {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn obj_face_with_slashes_parses() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvt 1 0\nvt 0 1\nf 1/1 2/2 3/3\n";
        let mesh = parse_obj(text, "inline").unwrap();
        assert_eq!(mesh.triangles, vec![[0, 1, 2]]);
        assert_eq!(mesh.uv.len(), 3);
    }

    #[test]
    fn obj_rejects_zero_index() {
        let text = "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n";
        match parse_obj(text, "inline") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn landmarks_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.txt");
        let pts: Vec<[f64; 2]> = (0..68).map(|i| [i as f64 * 0.5, -(i as f64)]).collect();
        write_landmarks(&path, &pts).unwrap();
        let back = read_landmarks(&path).unwrap();
        for (a, b) in pts.iter().zip(&back) {
            assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn landmarks_wrong_count_names_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm67.txt");
        let text: String = (0..67).map(|i| format!("{i} {i}\n")).collect();
        std::fs::write(&path, text).unwrap();
        let err = read_landmarks(&path).unwrap_err().to_string();
        assert!(err.contains("67"), "{err}");
    }

    #[test]
    fn landmarks_bad_token_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lmbad.txt");
        let mut text: String = (0..30).map(|i| format!("{i} {i}\n")).collect();
        text.push_str("oops 3\n");
        for i in 31..68 {
            text.push_str(&format!("{i} {i}\n"));
        }
        std::fs::write(&path, text).unwrap();
        match read_landmarks(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 31),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn random_uvmap(rng: &mut StdRng) -> UvMap {
        let (w, h) = (6, 5);
        let mut map = UvMap::zeros_masked(w, h, 3, UvSpace::Model);
        for i in 0..w * h {
            map.mask[i] = rng.gen_bool(0.8);
            for c in 0..3 {
                // f32-representable payloads round-trip bit-exactly.
                map.data[3 * i + c] = rng.gen_range(-100.0f32..100.0) as f64;
            }
        }
        map
    }

    #[test]
    fn uvmap_round_trip_is_bit_identical() {
        let mut rng = StdRng::seed_from_u64(21);
        let dir = tempfile::tempdir().unwrap();
        for k in 0..8 {
            let map = random_uvmap(&mut rng);
            let path = dir.path().join(format!("m{k}.uvm"));
            write_uvmap(&path, &map).unwrap();
            let back = read_uvmap(&path).unwrap();
            assert_eq!(map, back);
        }
    }

    #[test]
    fn uvmap_rejects_flipped_crc() {
        let mut rng = StdRng::seed_from_u64(22);
        let map = random_uvmap(&mut rng);
        let mut bytes = encode_uvmap(&map).unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 0x01;
        match decode_uvmap(&bytes, "test") {
            Err(Error::ChecksumMismatch(_)) => {}
            other => panic!("expected checksum mismatch, got {other:?}"),
        }
    }

    #[test]
    fn uvmap_rejects_zero_size() {
        let map = UvMap {
            width: 0,
            height: 4,
            channels: 1,
            data: vec![],
            mask: vec![],
            space: UvSpace::Scalar,
        };
        assert!(encode_uvmap(&map).is_err());
    }

    fn sample_scene() -> SceneParams {
        let mut rng = StdRng::seed_from_u64(23);
        let mut lighting = ShLighting::zeros();
        for k in 0..9 {
            for c in 0..3 {
                lighting.coeffs[k][c] = rng.gen_range(-1.0..1.0);
            }
        }
        SceneParams {
            coeffs: ShapeCoeffs {
                x_id: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                x_exp: (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                x_tex: (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            },
            pose: Pose {
                f: 0.73,
                rx: 0.1,
                ry: -0.2,
                rz: 0.3,
                tx: 1.5,
                ty: -2.5,
                tz: 10.0,
            },
            lighting,
        }
    }

    #[test]
    fn params_round_trip_to_last_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.fpj");
        let scene = sample_scene();
        let meta = ParamsMeta {
            model_hash: "abc123".into(),
            image_size: [128, 128],
        };
        write_params(&path, &scene, &meta).unwrap();
        let (back, back_meta) = read_params(&path).unwrap();
        assert_eq!(scene.coeffs, back.coeffs);
        assert_eq!(scene.pose, back.pose);
        assert_eq!(scene.lighting, back.lighting);
        assert_eq!(meta, back_meta);
    }

    #[test]
    fn params_missing_sh_key_is_error() {
        let scene = sample_scene();
        let meta = ParamsMeta {
            model_hash: "h".into(),
            image_size: [64, 64],
        };
        let text = encode_params(&scene, &meta).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut obj = v.as_object().unwrap().clone();
        obj.remove("sh");
        let bad = serde_json::to_string(&obj).unwrap();
        assert!(decode_params(&bad).is_err());
    }

    #[test]
    fn params_wrong_sh_length_is_error() {
        let scene = sample_scene();
        let meta = ParamsMeta {
            model_hash: "h".into(),
            image_size: [64, 64],
        };
        let text = encode_params(&scene, &meta).unwrap();
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let sh = v["sh"].as_array_mut().unwrap();
        sh.pop();
        let bad = serde_json::to_string(&v).unwrap();
        assert!(decode_params(&bad).is_err());
    }
}
