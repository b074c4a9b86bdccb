//! Objective terms for the two fitting stages: photometric, landmark,
//! perceptual and regularizer terms for the coarse stage; photometric,
//! smoothness and displacement regularizer terms for the detail stage.
//! Every term returns its scalar value and exposes a backward companion.

use nalgebra::Vector2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camera;
use crate::error::{Error, Result};
use crate::facemodel::{self, FaceModel, ShapeCoeffs};
use crate::io::ImageBuffer;
use crate::lighting::ShLighting;
use crate::optim::SceneParams;
use crate::rasterizer::{self, SceneGrad};
use crate::uvspace::{self, DisplacementMode, UvMap, UvSpace};

/// Smoothing constant inside the square root of the photometric gradient;
/// the subgradient at exactly-equal pixels is 0.
const L21_GRAD_EPS: f64 = 1e-8;

/// Coarse-stage loss weights. Defaults are the published constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseWeights {
    pub pixel: f64,
    pub landmark: f64,
    pub identity: f64,
    pub regularizer: f64,
    pub reg_id: f64,
    pub reg_exp: f64,
    pub reg_tex: f64,
}

impl Default for CoarseWeights {
    fn default() -> Self {
        CoarseWeights {
            pixel: 1.3,
            landmark: 1.0,
            identity: 1.5,
            regularizer: 20.0,
            reg_id: 1.3,
            reg_exp: 1.0,
            reg_tex: 1.3,
        }
    }
}

/// Detail-stage loss weights. Defaults are the published constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineWeights {
    pub pixel: f64,
    pub smooth: f64,
    pub disp: f64,
    pub smooth_normal: f64,
    pub smooth_depth: f64,
    pub disp_normal: f64,
    pub disp_depth: f64,
}

impl Default for FineWeights {
    fn default() -> Self {
        FineWeights {
            pixel: 1.0,
            smooth: 10.0,
            disp: 10.0,
            smooth_normal: 20.0,
            smooth_depth: 10.0,
            disp_normal: 0.5,
            disp_depth: 0.01,
        }
    }
}

// ---------------------------------------------------------------------------
// Photometric (L2,1)
// ---------------------------------------------------------------------------

fn check_image_shapes(i: &[f64], i_r: &[f64], mask: &[bool]) -> Result<()> {
    if i.len() != i_r.len() {
        return Err(Error::dims("photometric images", i.len(), i_r.len()));
    }
    if mask.len() * 3 != i.len() {
        return Err(Error::dims("photometric mask", i.len() / 3, mask.len()));
    }
    Ok(())
}

/// Mean over masked pixels of the per-pixel RGB Euclidean norm of I - I_R.
pub fn photometric_loss(i: &[f64], i_r: &[f64], mask: &[bool]) -> Result<f64> {
    check_image_shapes(i, i_r, mask)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pix, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let b = 3 * pix;
        let mut ssq = 0.0;
        for c in 0..3 {
            let r = i[b + c] - i_r[b + c];
            ssq += r * r;
        }
        sum += ssq.sqrt();
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Photometric loss plus its gradient with respect to I_R (flat image).
pub fn photometric_loss_grad(i: &[f64], i_r: &[f64], mask: &[bool]) -> Result<(f64, Vec<f64>)> {
    check_image_shapes(i, i_r, mask)?;
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![0.0; i.len()];
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for (pix, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let b = 3 * pix;
        let mut ssq = 0.0;
        for c in 0..3 {
            let r = i[b + c] - i_r[b + c];
            ssq += r * r;
        }
        sum += ssq.sqrt();
        let denom = (ssq + L21_GRAD_EPS).sqrt();
        for c in 0..3 {
            // d/dI_R of ||I - I_R|| is (I_R - I) / ||.||, smoothed.
            grad[b + c] = inv * (i_r[b + c] - i[b + c]) / denom;
        }
    }
    Ok((sum * inv, grad))
}

// ---------------------------------------------------------------------------
// Landmarks
// ---------------------------------------------------------------------------

/// Mean squared distance between corresponding landmark positions.
pub fn landmark_loss(target: &[Vector2<f64>], predicted: &[Vector2<f64>]) -> Result<f64> {
    if target.len() != predicted.len() {
        return Err(Error::dims("landmark sets", target.len(), predicted.len()));
    }
    let n = target.len().max(1);
    Ok(target
        .iter()
        .zip(predicted)
        .map(|(t, p)| (t - p).norm_squared())
        .sum::<f64>()
        / n as f64)
}

/// Landmark loss plus its gradient with respect to the predictions.
pub fn landmark_loss_grad(
    target: &[Vector2<f64>],
    predicted: &[Vector2<f64>],
) -> Result<(f64, Vec<Vector2<f64>>)> {
    let loss = landmark_loss(target, predicted)?;
    let n = target.len().max(1) as f64;
    let grad = target
        .iter()
        .zip(predicted)
        .map(|(t, p)| 2.0 / n * (p - t))
        .collect();
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Perceptual identity
// ---------------------------------------------------------------------------

/// Deterministic differentiable image feature extractor.
pub trait FeatureExtractor: Send + Sync {
    fn feature_len(&self) -> usize;
    fn features(&self, img: &ImageBuffer) -> Vec<f64>;
    /// Maps a feature cotangent back to an image cotangent (flat H×W×3).
    fn backward(&self, img: &ImageBuffer, d_features: &[f64]) -> Vec<f64>;
}

const EXTRACTOR_GRID: usize = 32;
const EXTRACTOR_FEATURES: usize = 128;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Default extractor: area-average the grayscale image to 32×32 and apply a
/// fixed seeded linear projection to 128 features.
pub struct LinearFeatureExtractor {
    // EXTRACTOR_FEATURES × (EXTRACTOR_GRID²), row-major
    weights: Vec<f64>,
}

impl LinearFeatureExtractor {
    pub fn standard() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0xFACE_F0_0D);
        let n_in = EXTRACTOR_GRID * EXTRACTOR_GRID;
        let scale = 1.0 / (n_in as f64).sqrt();
        let weights = (0..EXTRACTOR_FEATURES * n_in)
            .map(|_| rng.gen_range(-1.0..1.0) * scale)
            .collect();
        LinearFeatureExtractor { weights }
    }

    /// Area-average downsample of the luma channel to the extractor grid.
    /// Returns the cell values; `backward` redistributes cotangents with the
    /// same fractional-overlap weights.
    fn downsample(&self, img: &ImageBuffer) -> Vec<f64> {
        let g = EXTRACTOR_GRID;
        let mut cells = vec![0.0; g * g];
        let sy = img.height as f64 / g as f64;
        let sx = img.width as f64 / g as f64;
        for gr in 0..g {
            for gc in 0..g {
                let y0 = gr as f64 * sy;
                let y1 = (gr + 1) as f64 * sy;
                let x0 = gc as f64 * sx;
                let x1 = (gc + 1) as f64 * sx;
                let mut acc = 0.0;
                let r0 = y0.floor() as usize;
                let r1 = (y1.ceil() as usize).min(img.height);
                let c0 = x0.floor() as usize;
                let c1 = (x1.ceil() as usize).min(img.width);
                for r in r0..r1 {
                    let oy = (y1.min(r as f64 + 1.0) - y0.max(r as f64)).max(0.0);
                    for c in c0..c1 {
                        let ox = (x1.min(c as f64 + 1.0) - x0.max(c as f64)).max(0.0);
                        let px = img.pixel(r, c);
                        let gray = LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2];
                        acc += gray * oy * ox;
                    }
                }
                cells[gr * g + gc] = acc / (sx * sy);
            }
        }
        cells
    }
}

impl FeatureExtractor for LinearFeatureExtractor {
    fn feature_len(&self) -> usize {
        EXTRACTOR_FEATURES
    }

    fn features(&self, img: &ImageBuffer) -> Vec<f64> {
        let cells = self.downsample(img);
        let n_in = cells.len();
        (0..EXTRACTOR_FEATURES)
            .map(|f| {
                self.weights[f * n_in..(f + 1) * n_in]
                    .iter()
                    .zip(&cells)
                    .map(|(w, c)| w * c)
                    .sum()
            })
            .collect()
    }

    fn backward(&self, img: &ImageBuffer, d_features: &[f64]) -> Vec<f64> {
        let g = EXTRACTOR_GRID;
        let n_in = g * g;
        // Feature cotangent -> cell cotangent (transpose of the projection).
        let mut d_cells = vec![0.0; n_in];
        for f in 0..EXTRACTOR_FEATURES {
            let w = &self.weights[f * n_in..(f + 1) * n_in];
            let df = d_features[f];
            if df == 0.0 {
                continue;
            }
            for (dc, wi) in d_cells.iter_mut().zip(w) {
                *dc += df * wi;
            }
        }
        // Cell cotangent -> pixel cotangent (transpose of the area average).
        let mut d_img = vec![0.0; img.width * img.height * 3];
        let sy = img.height as f64 / g as f64;
        let sx = img.width as f64 / g as f64;
        for gr in 0..g {
            for gc in 0..g {
                let dcell = d_cells[gr * g + gc] / (sx * sy);
                if dcell == 0.0 {
                    continue;
                }
                let y0 = gr as f64 * sy;
                let y1 = (gr + 1) as f64 * sy;
                let x0 = gc as f64 * sx;
                let x1 = (gc + 1) as f64 * sx;
                let r0 = y0.floor() as usize;
                let r1 = (y1.ceil() as usize).min(img.height);
                let c0 = x0.floor() as usize;
                let c1 = (x1.ceil() as usize).min(img.width);
                for r in r0..r1 {
                    let oy = (y1.min(r as f64 + 1.0) - y0.max(r as f64)).max(0.0);
                    for c in c0..c1 {
                        let ox = (x1.min(c as f64 + 1.0) - x0.max(c as f64)).max(0.0);
                        let b = 3 * (r * img.width + c);
                        for k in 0..3 {
                            d_img[b + k] += dcell * oy * ox * LUMA[k];
                        }
                    }
                }
            }
        }
        d_img
    }
}

/// Squared feature distance between the two images.
pub fn perceptual_loss(
    i: &ImageBuffer,
    i_r: &ImageBuffer,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    let fa = extractor.features(i);
    let fb = extractor.features(i_r);
    if fa.len() != fb.len() || fa.len() != extractor.feature_len() {
        return Err(Error::dims("feature vectors", fa.len(), fb.len()));
    }
    Ok(fa.iter().zip(&fb).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Perceptual loss plus its gradient with respect to I_R.
pub fn perceptual_loss_grad(
    i: &ImageBuffer,
    i_r: &ImageBuffer,
    extractor: &dyn FeatureExtractor,
) -> Result<(f64, Vec<f64>)> {
    let fa = extractor.features(i);
    let fb = extractor.features(i_r);
    if fa.len() != fb.len() || fa.len() != extractor.feature_len() {
        return Err(Error::dims("feature vectors", fa.len(), fb.len()));
    }
    let loss = fa.iter().zip(&fb).map(|(a, b)| (a - b) * (a - b)).sum();
    let d_features: Vec<f64> = fa.iter().zip(&fb).map(|(a, b)| 2.0 * (b - a)).collect();
    Ok((loss, extractor.backward(i_r, &d_features)))
}

// ---------------------------------------------------------------------------
// Coefficient regularizer
// ---------------------------------------------------------------------------

/// w_s ||x_id||² + w_e ||x_exp||² + w_t ||x_tex||².
pub fn param_regularizer(c: &ShapeCoeffs, w_s: f64, w_e: f64, w_t: f64) -> f64 {
    let nsq = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    w_s * nsq(&c.x_id) + w_e * nsq(&c.x_exp) + w_t * nsq(&c.x_tex)
}

pub fn param_regularizer_grad(c: &ShapeCoeffs, w_s: f64, w_e: f64, w_t: f64) -> (f64, ShapeCoeffs) {
    let grad = ShapeCoeffs {
        x_id: c.x_id.iter().map(|x| 2.0 * w_s * x).collect(),
        x_exp: c.x_exp.iter().map(|x| 2.0 * w_e * x).collect(),
        x_tex: c.x_tex.iter().map(|x| 2.0 * w_t * x).collect(),
    };
    (param_regularizer(c, w_s, w_e, w_t), grad)
}

// ---------------------------------------------------------------------------
// Coarse total
// ---------------------------------------------------------------------------

/// Individual coarse-stage terms (unweighted).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseTerms {
    pub pixel: f64,
    pub landmark: f64,
    pub identity: f64,
    pub regularizer: f64,
}

impl CoarseTerms {
    pub fn total(&self, w: &CoarseWeights) -> f64 {
        w.pixel * self.pixel
            + w.landmark * self.landmark
            + w.identity * self.identity
            + w.regularizer * self.regularizer
    }
}

/// Forward evaluation of the coarse loss; also returns the coverage
/// signature of the underlying render for the gradient-check protocol.
pub fn coarse_loss(
    model: &FaceModel,
    scene: &SceneParams,
    image: &ImageBuffer,
    landmarks: &[Vector2<f64>],
    extractor: &dyn FeatureExtractor,
    weights: &CoarseWeights,
) -> Result<(f64, CoarseTerms, u64)> {
    let state = rasterizer::render_face_with_state(
        model,
        &scene.coeffs,
        &scene.pose,
        &scene.lighting,
        image.width,
        image.height,
    )?;
    let pixel = photometric_loss(&image.data, &state.raster.color, &state.raster.mask)?;
    let lm = camera::project_landmarks(
        &scene.pose,
        &state.synthesis.vertices,
        &model.landmark_indices,
    )?;
    let landmark = landmark_loss(landmarks, &lm.points)?;
    let rendered = ImageBuffer::from_data(image.width, image.height, state.raster.color.clone())?;
    let identity = perceptual_loss(image, &rendered, extractor)?;
    let regularizer = param_regularizer(&scene.coeffs, weights.reg_id, weights.reg_exp, weights.reg_tex);
    let terms = CoarseTerms {
        pixel,
        landmark,
        identity,
        regularizer,
    };
    Ok((terms.total(weights), terms, state.raster.coverage_signature()))
}

/// Coarse loss with gradients for the full scene parameter block.
pub fn coarse_loss_grad(
    model: &FaceModel,
    scene: &SceneParams,
    image: &ImageBuffer,
    landmarks: &[Vector2<f64>],
    extractor: &dyn FeatureExtractor,
    weights: &CoarseWeights,
) -> Result<(f64, CoarseTerms, SceneGrad)> {
    let state = rasterizer::render_face_with_state(
        model,
        &scene.coeffs,
        &scene.pose,
        &scene.lighting,
        image.width,
        image.height,
    )?;

    let (pixel, d_pixel) =
        photometric_loss_grad(&image.data, &state.raster.color, &state.raster.mask)?;
    let rendered = ImageBuffer::from_data(image.width, image.height, state.raster.color.clone())?;
    let (identity, d_identity) = perceptual_loss_grad(image, &rendered, extractor)?;

    // One backward pass through the renderer for both image-space terms.
    let mut image_cot = vec![0.0; image.data.len()];
    for (k, cot) in image_cot.iter_mut().enumerate() {
        *cot = weights.pixel * d_pixel[k] + weights.identity * d_identity[k];
    }
    // The perceptual path also touches background pixels, which carry no
    // geometry gradient; render_backward ignores them by construction.
    let mut grad = rasterizer::render_backward(model, &state, &image_cot)?;

    // Landmark path.
    let lm = camera::project_landmarks(
        &scene.pose,
        &state.synthesis.vertices,
        &model.landmark_indices,
    )?;
    let (landmark, d_lm_points) = landmark_loss_grad(landmarks, &lm.points)?;
    let zero_depth = vec![0.0; d_lm_points.len()];
    let (mut lm_pose_grad, d_vertices) = camera::project_landmarks_backward(
        &scene.pose,
        &state.synthesis.vertices,
        &model.landmark_indices,
        &d_lm_points,
        &zero_depth,
    );
    let zero_albedo = vec![[0.0; 3]; d_vertices.len()];
    let mut lm_coeff_grad =
        facemodel::synthesize_backward(model, &state.synthesis, &d_vertices, &zero_albedo);
    lm_pose_grad.scale(weights.landmark);
    for g in lm_coeff_grad
        .x_id
        .iter_mut()
        .chain(&mut lm_coeff_grad.x_exp)
        .chain(&mut lm_coeff_grad.x_tex)
    {
        *g *= weights.landmark;
    }
    grad.pose.add_assign(&lm_pose_grad);
    for (a, b) in grad.coeffs.x_id.iter_mut().zip(&lm_coeff_grad.x_id) {
        *a += b;
    }
    for (a, b) in grad.coeffs.x_exp.iter_mut().zip(&lm_coeff_grad.x_exp) {
        *a += b;
    }
    for (a, b) in grad.coeffs.x_tex.iter_mut().zip(&lm_coeff_grad.x_tex) {
        *a += b;
    }

    // Regularizer path.
    let (regularizer, reg_grad) =
        param_regularizer_grad(&scene.coeffs, weights.reg_id, weights.reg_exp, weights.reg_tex);
    for (a, b) in grad.coeffs.x_id.iter_mut().zip(&reg_grad.x_id) {
        *a += weights.regularizer * b;
    }
    for (a, b) in grad.coeffs.x_exp.iter_mut().zip(&reg_grad.x_exp) {
        *a += weights.regularizer * b;
    }
    for (a, b) in grad.coeffs.x_tex.iter_mut().zip(&reg_grad.x_tex) {
        *a += weights.regularizer * b;
    }

    let terms = CoarseTerms {
        pixel,
        landmark,
        identity,
        regularizer,
    };
    Ok((terms.total(weights), terms, grad))
}

// ---------------------------------------------------------------------------
// Smoothness and displacement regularizer (detail stage)
// ---------------------------------------------------------------------------

fn combined_mask(n_coarse: &UvMap, n_detail: &UvMap, d: &UvMap) -> Result<Vec<bool>> {
    if n_coarse.width != n_detail.width
        || n_coarse.height != n_detail.height
        || n_coarse.width != d.width
        || n_coarse.height != d.height
    {
        return Err(Error::dims(
            "smoothness map resolution",
            n_coarse.width * n_coarse.height,
            d.width * d.height,
        ));
    }
    Ok((0..n_coarse.mask.len())
        .map(|i| n_coarse.mask[i] && n_detail.mask[i] && d.mask[i])
        .collect())
}

const N4: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

/// Radius-1 neighborhood smoothness over normal deltas and displacement
/// depths; both ordered pairs of the double sum are counted.
pub fn smoothness_loss(
    n_coarse: &UvMap,
    n_detail: &UvMap,
    d: &UvMap,
    w_sn: f64,
    w_sz: f64,
) -> Result<f64> {
    let mask = combined_mask(n_coarse, n_detail, d)?;
    let (w, h) = (d.width, d.height);
    let delta_n = |i: usize| n_detail.get3(i) - n_coarse.get3(i);
    let mut loss = 0.0;
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !mask[i] {
                continue;
            }
            for (dr, dc) in N4 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if !mask[j] {
                    continue;
                }
                let dn = delta_n(i) - delta_n(j);
                let dz = d.data[i] - d.data[j];
                loss += w_sn * dn.norm_squared() + w_sz * dz * dz;
            }
        }
    }
    Ok(loss)
}

/// Smoothness loss plus cotangents for the detail normal map (flat 3ch) and
/// the displacement map.
pub fn smoothness_loss_grad(
    n_coarse: &UvMap,
    n_detail: &UvMap,
    d: &UvMap,
    w_sn: f64,
    w_sz: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mask = combined_mask(n_coarse, n_detail, d)?;
    let (w, h) = (d.width, d.height);
    let delta_n = |i: usize| n_detail.get3(i) - n_coarse.get3(i);
    let mut loss = 0.0;
    let mut d_n = vec![0.0; w * h * 3];
    let mut d_d = vec![0.0; w * h];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !mask[i] {
                continue;
            }
            for (dr, dc) in N4 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if !mask[j] {
                    continue;
                }
                let dn = delta_n(i) - delta_n(j);
                let dz = d.data[i] - d.data[j];
                loss += w_sn * dn.norm_squared() + w_sz * dz * dz;
                let gn = 2.0 * w_sn * dn;
                for axis in 0..3 {
                    d_n[3 * i + axis] += gn[axis];
                    d_n[3 * j + axis] -= gn[axis];
                }
                let gz = 2.0 * w_sz * dz;
                d_d[i] += gz;
                d_d[j] -= gz;
            }
        }
    }
    Ok((loss, d_n, d_d))
}

/// Per-texel magnitude regularizer on normal deltas and displacement depth.
pub fn displacement_regularizer(
    n_coarse: &UvMap,
    n_detail: &UvMap,
    d: &UvMap,
    w_dn: f64,
    w_dz: f64,
) -> Result<f64> {
    let mask = combined_mask(n_coarse, n_detail, d)?;
    let mut loss = 0.0;
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let dn = n_detail.get3(i) - n_coarse.get3(i);
        loss += w_dn * dn.norm_squared() + w_dz * d.data[i] * d.data[i];
    }
    Ok(loss)
}

pub fn displacement_regularizer_grad(
    n_coarse: &UvMap,
    n_detail: &UvMap,
    d: &UvMap,
    w_dn: f64,
    w_dz: f64,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let mask = combined_mask(n_coarse, n_detail, d)?;
    let n = mask.len();
    let mut loss = 0.0;
    let mut d_n = vec![0.0; n * 3];
    let mut d_d = vec![0.0; n];
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        let dn = n_detail.get3(i) - n_coarse.get3(i);
        loss += w_dn * dn.norm_squared() + w_dz * d.data[i] * d.data[i];
        for axis in 0..3 {
            d_n[3 * i + axis] = 2.0 * w_dn * dn[axis];
        }
        d_d[i] = 2.0 * w_dz * d.data[i];
    }
    Ok((loss, d_n, d_d))
}

// ---------------------------------------------------------------------------
// Fine total
// ---------------------------------------------------------------------------

/// Frozen coarse-stage context for the detail fit: view-space coarse
/// positions, unwrapped albedo, coarse UV normals, lighting and the target
/// image.
pub struct FineContext {
    pub coarse_view_pos: UvMap,
    pub albedo_uv: UvMap,
    pub n_coarse: UvMap,
    pub lighting: ShLighting,
    pub image: ImageBuffer,
    pub mode: DisplacementMode,
}

impl FineContext {
    /// Builds the frozen context from a coarse scene.
    pub fn from_scene(
        model: &FaceModel,
        scene: &SceneParams,
        image: &ImageBuffer,
        uv_res: usize,
        mode: DisplacementMode,
    ) -> Result<Self> {
        let synthesis = facemodel::synthesize(model, &scene.coeffs)?;
        let pos_model = uvspace::uv_position_map(model, &synthesis.vertices, uv_res)?;
        let coarse_view_pos = uvspace::transform_positions(&pos_model, &scene.pose, UvSpace::View)?;
        let mut albedo_flat = Vec::with_capacity(synthesis.albedo.len() * 3);
        for a in &synthesis.albedo {
            albedo_flat.extend_from_slice(a);
        }
        let albedo_uv = uvspace::rasterize_to_uv(
            model,
            &synthesis.vertices,
            &albedo_flat,
            3,
            uv_res,
            UvSpace::Color,
        )?;
        let n_coarse = uvspace::uv_normals(&coarse_view_pos)?;
        Ok(FineContext {
            coarse_view_pos,
            albedo_uv,
            n_coarse,
            lighting: scene.lighting,
            image: image.clone(),
            mode,
        })
    }

    /// Displacement map shaped like this context with the given data.
    pub fn displacement_from_vec(&self, data: Vec<f64>) -> UvMap {
        UvMap {
            width: self.coarse_view_pos.width,
            height: self.coarse_view_pos.height,
            channels: 1,
            data,
            mask: self.coarse_view_pos.mask.clone(),
            space: UvSpace::Scalar,
        }
    }
}

/// Individual detail-stage terms (unweighted).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineTerms {
    pub pixel: f64,
    pub smooth: f64,
    pub disp: f64,
}

impl FineTerms {
    pub fn total(&self, w: &FineWeights) -> f64 {
        w.pixel * self.pixel + w.smooth * self.smooth + w.disp * self.disp
    }
}

/// Forward evaluation of the detail loss; returns the coverage signature of
/// the UV render.
pub fn fine_loss(
    ctx: &FineContext,
    disp: &UvMap,
    weights: &FineWeights,
) -> Result<(f64, FineTerms, u64)> {
    let detail = uvspace::apply_displacement(&ctx.coarse_view_pos, disp, ctx.mode)?;
    let state = uvspace::render_from_uv_with_state(
        &detail,
        &ctx.albedo_uv,
        &ctx.lighting,
        ctx.image.width,
        ctx.image.height,
    )?;
    let pixel = photometric_loss(&ctx.image.data, &state.raster.color, &state.raster.mask)?;
    let smooth = smoothness_loss(
        &ctx.n_coarse,
        &state.normals_map,
        disp,
        weights.smooth_normal,
        weights.smooth_depth,
    )?;
    let disp_term = displacement_regularizer(
        &ctx.n_coarse,
        &state.normals_map,
        disp,
        weights.disp_normal,
        weights.disp_depth,
    )?;
    let terms = FineTerms {
        pixel,
        smooth,
        disp: disp_term,
    };
    Ok((terms.total(weights), terms, state.raster.coverage_signature()))
}

/// Detail loss plus its gradient with respect to the displacement texels.
pub fn fine_loss_grad(
    ctx: &FineContext,
    disp: &UvMap,
    weights: &FineWeights,
) -> Result<(f64, FineTerms, Vec<f64>)> {
    let detail = uvspace::apply_displacement(&ctx.coarse_view_pos, disp, ctx.mode)?;
    let state = uvspace::render_from_uv_with_state(
        &detail,
        &ctx.albedo_uv,
        &ctx.lighting,
        ctx.image.width,
        ctx.image.height,
    )?;

    let (pixel, d_color) =
        photometric_loss_grad(&ctx.image.data, &state.raster.color, &state.raster.mask)?;
    let image_cot: Vec<f64> = d_color.iter().map(|g| weights.pixel * g).collect();
    let render_grad = uvspace::render_from_uv_backward(&detail, &state, &image_cot)?;

    let (smooth, d_n_smooth, d_d_smooth) = smoothness_loss_grad(
        &ctx.n_coarse,
        &state.normals_map,
        disp,
        weights.smooth_normal,
        weights.smooth_depth,
    )?;
    let (disp_term, d_n_disp, d_d_disp) = displacement_regularizer_grad(
        &ctx.n_coarse,
        &state.normals_map,
        disp,
        weights.disp_normal,
        weights.disp_depth,
    )?;

    // Normal-map cotangents from the regularizers flow back through
    // uv_normals into positions.
    let npix = detail.width * detail.height;
    let mut d_n_total = vec![0.0; npix * 3];
    for i in 0..npix * 3 {
        d_n_total[i] = weights.smooth * d_n_smooth[i] + weights.disp * d_n_disp[i];
    }
    let d_pos_from_normals =
        uvspace::uv_normals_backward(&detail, &state.normals_map, &d_n_total);

    // Total position cotangent: render path plus regularizer-normal path.
    let mut d_positions = render_grad.d_positions;
    for (a, b) in d_positions.iter_mut().zip(&d_pos_from_normals) {
        *a += b;
    }

    // Positions -> displacement along the displacement direction.
    let mut d_disp = vec![0.0; npix];
    match ctx.mode {
        DisplacementMode::ViewZ => {
            for i in 0..npix {
                if detail.mask[i] {
                    d_disp[i] = d_positions[3 * i + 2];
                }
            }
        }
        DisplacementMode::Normal => {
            let dirs = uvspace::uv_normals(&ctx.coarse_view_pos)?;
            for i in 0..npix {
                if detail.mask[i] && dirs.mask[i] {
                    let dir = dirs.get3(i);
                    d_disp[i] = d_positions[3 * i] * dir.x
                        + d_positions[3 * i + 1] * dir.y
                        + d_positions[3 * i + 2] * dir.z;
                }
            }
        }
    }
    // Direct displacement terms from the regularizers.
    for i in 0..npix {
        d_disp[i] += weights.smooth * d_d_smooth[i] + weights.disp * d_d_disp[i];
    }

    let terms = FineTerms {
        pixel,
        smooth,
        disp: disp_term,
    };
    Ok((terms.total(weights), terms, d_disp))
}
