//! Adam optimizer, coverage-stable gradient checking, and the two-stage
//! per-image fitting drivers that minimize the coarse and detail objectives
//! directly.

use nalgebra::Vector2;

use crate::camera::Pose;
use crate::error::{Error, Result};
use crate::facemodel::{FaceModel, ShapeCoeffs};
use crate::io::ImageBuffer;
use crate::lighting::{ShLighting, SH_COUNT};
use crate::losses::{self, CoarseWeights, FeatureExtractor, FineContext, FineWeights};
use crate::mesh::Mesh;
use crate::rasterizer::SceneGrad;
use crate::uvspace::{self, DisplacementMode, UvMap};

/// The full latent block a coarse fit optimizes: shape/expression/texture
/// coefficients, 7-DoF pose and 27 SH lighting coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub coeffs: ShapeCoeffs,
    pub pose: Pose,
    pub lighting: ShLighting,
}

impl SceneParams {
    pub fn param_len(model: &FaceModel) -> usize {
        model.k_id() + model.k_exp() + model.k_tex() + 7 + 27
    }

    /// Flat layout: x_id, x_exp, x_tex, (f, rx, ry, rz, tx, ty, tz),
    /// sh channel-major.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(
            self.coeffs.x_id.len() + self.coeffs.x_exp.len() + self.coeffs.x_tex.len() + 34,
        );
        v.extend_from_slice(&self.coeffs.x_id);
        v.extend_from_slice(&self.coeffs.x_exp);
        v.extend_from_slice(&self.coeffs.x_tex);
        v.extend_from_slice(&[
            self.pose.f,
            self.pose.rx,
            self.pose.ry,
            self.pose.rz,
            self.pose.tx,
            self.pose.ty,
            self.pose.tz,
        ]);
        v.extend_from_slice(&self.lighting.to_channel_major());
        v
    }

    pub fn from_vec(model: &FaceModel, v: &[f64]) -> Result<Self> {
        if v.len() != Self::param_len(model) {
            return Err(Error::dims("scene parameter vector", Self::param_len(model), v.len()));
        }
        let (k_id, k_exp, k_tex) = (model.k_id(), model.k_exp(), model.k_tex());
        let mut off = 0;
        let x_id = v[off..off + k_id].to_vec();
        off += k_id;
        let x_exp = v[off..off + k_exp].to_vec();
        off += k_exp;
        let x_tex = v[off..off + k_tex].to_vec();
        off += k_tex;
        let pose = Pose {
            f: v[off],
            rx: v[off + 1],
            ry: v[off + 2],
            rz: v[off + 3],
            tx: v[off + 4],
            ty: v[off + 5],
            tz: v[off + 6],
        };
        off += 7;
        let lighting = ShLighting::from_channel_major(&v[off..off + 27])?;
        Ok(SceneParams {
            coeffs: ShapeCoeffs {
                x_id,
                x_exp,
                x_tex,
            },
            pose,
            lighting,
        })
    }

    pub fn validate(&self, model: &FaceModel) -> Result<()> {
        self.coeffs.validate_for(model)?;
        self.pose.validate()?;
        self.lighting.validate()
    }
}

impl SceneGrad {
    /// Same flat layout as [`SceneParams::to_vec`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(&self.coeffs.x_id);
        v.extend_from_slice(&self.coeffs.x_exp);
        v.extend_from_slice(&self.coeffs.x_tex);
        v.extend_from_slice(&[
            self.pose.f,
            self.pose.rx,
            self.pose.ry,
            self.pose.rz,
            self.pose.tx,
            self.pose.ty,
            self.pose.tz,
        ]);
        for c in 0..3 {
            for k in 0..SH_COUNT {
                v.push(self.lighting[k][c]);
            }
        }
        v
    }
}

/// Default initialization: zero coefficients, frontal pose scaled so the
/// mean shape's projected bounding box spans 80% of the image, band-0 gray
/// lighting that shades albedo to itself.
pub fn init_scene(model: &FaceModel, width: usize, height: usize) -> SceneParams {
    let vs = model.mean_vertices();
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for v in &vs {
        lo_x = lo_x.min(v.x);
        hi_x = hi_x.max(v.x);
        lo_y = lo_y.min(v.y);
        hi_y = hi_y.max(v.y);
    }
    let extent = (hi_x - lo_x).max(hi_y - lo_y).max(1e-9);
    let f = 0.8 * width.min(height) as f64 / extent;
    SceneParams {
        coeffs: ShapeCoeffs::zeros(model),
        pose: Pose {
            f,
            ..Pose::identity()
        },
        lighting: ShLighting::band0_gray(ShLighting::neutral_band0()),
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(dim: usize) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam step with bias correction; `step_index` starts at 1.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step_index: usize,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dims("adam parameter/gradient", params.len(), grads.len()));
    }
    let t = step_index as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for k in 0..params.len() {
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * grads[k];
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * grads[k] * grads[k];
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        params[k] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Gradient checking (coverage-stable central differences)
// ---------------------------------------------------------------------------

/// A scalar loss with an analytic backward pass and a discrete coverage key
/// (hash of the rasterized tri_id image) for the stability protocol.
pub trait CheckedLoss {
    fn dim(&self) -> usize;
    fn value(&self, params: &[f64]) -> Result<f64>;
    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
    /// Discrete visibility signature; coordinates whose perturbation changes
    /// it are excluded from the check. Constant by default.
    fn coverage_key(&self, _params: &[f64]) -> Result<u64> {
        Ok(0)
    }
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// (coordinate, analytic, finite-difference, relative error) for every
    /// coverage-stable coordinate.
    pub checked: Vec<(usize, f64, f64, f64)>,
    /// Coordinates excluded because their perturbation changed coverage.
    pub excluded: Vec<usize>,
    pub max_rel_error: f64,
    pub fraction_within_tol: f64,
    pub passed: bool,
}

fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central-difference check of `loss` at `params`. Coordinates whose ±eps
/// perturbation changes the coverage key are excluded and reported
/// separately. Passing means ≥95% of included coordinates are within `tol`
/// and none exceed 10×`tol`.
pub fn gradient_check(
    loss: &dyn CheckedLoss,
    params: &[f64],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let (value, grad) = loss.value_and_grad(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("loss value in gradient check".into()));
    }
    let key0 = loss.coverage_key(params)?;
    let mut checked = Vec::new();
    let mut excluded = Vec::new();
    let mut work = params.to_vec();
    for k in 0..loss.dim() {
        let orig = work[k];
        work[k] = orig + eps;
        let hi = loss.value(&work)?;
        let key_hi = loss.coverage_key(&work)?;
        work[k] = orig - eps;
        let lo = loss.value(&work)?;
        let key_lo = loss.coverage_key(&work)?;
        work[k] = orig;
        if key_hi != key0 || key_lo != key0 {
            excluded.push(k);
            continue;
        }
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::NonFinite(format!("perturbed loss at coordinate {k}")));
        }
        let fd = (hi - lo) / (2.0 * eps);
        checked.push((k, grad[k], fd, rel_error(grad[k], fd)));
    }
    let max_rel_error = checked.iter().map(|c| c.3).fold(0.0, f64::max);
    let within = checked.iter().filter(|c| c.3 <= tol).count();
    let fraction_within_tol = if checked.is_empty() {
        1.0
    } else {
        within as f64 / checked.len() as f64
    };
    let passed = fraction_within_tol >= 0.95 && max_rel_error <= 10.0 * tol;
    Ok(GradCheckReport {
        checked,
        excluded,
        max_rel_error,
        fraction_within_tol,
        passed,
    })
}

/// Coarse loss as a checkable function over the flat scene vector.
pub struct CoarseLossFn<'a> {
    pub model: &'a FaceModel,
    pub image: &'a ImageBuffer,
    pub landmarks: &'a [Vector2<f64>],
    pub extractor: &'a dyn FeatureExtractor,
    pub weights: CoarseWeights,
}

impl CheckedLoss for CoarseLossFn<'_> {
    fn dim(&self) -> usize {
        SceneParams::param_len(self.model)
    }

    fn value(&self, params: &[f64]) -> Result<f64> {
        let scene = SceneParams::from_vec(self.model, params)?;
        let (loss, _, _) = losses::coarse_loss(
            self.model,
            &scene,
            self.image,
            self.landmarks,
            self.extractor,
            &self.weights,
        )?;
        Ok(loss)
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let scene = SceneParams::from_vec(self.model, params)?;
        let (loss, _, grad) = losses::coarse_loss_grad(
            self.model,
            &scene,
            self.image,
            self.landmarks,
            self.extractor,
            &self.weights,
        )?;
        Ok((loss, grad.to_vec()))
    }

    fn coverage_key(&self, params: &[f64]) -> Result<u64> {
        let scene = SceneParams::from_vec(self.model, params)?;
        let (_, _, key) = losses::coarse_loss(
            self.model,
            &scene,
            self.image,
            self.landmarks,
            self.extractor,
            &self.weights,
        )?;
        Ok(key)
    }
}

/// Fine loss as a checkable function over the flat displacement texels.
pub struct FineLossFn<'a> {
    pub ctx: &'a FineContext,
    pub weights: FineWeights,
}

impl FineLossFn<'_> {
    fn disp(&self, params: &[f64]) -> UvMap {
        self.ctx.displacement_from_vec(params.to_vec())
    }
}

impl CheckedLoss for FineLossFn<'_> {
    fn dim(&self) -> usize {
        self.ctx.coarse_view_pos.width * self.ctx.coarse_view_pos.height
    }

    fn value(&self, params: &[f64]) -> Result<f64> {
        let (loss, _, _) = losses::fine_loss(self.ctx, &self.disp(params), &self.weights)?;
        Ok(loss)
    }

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (loss, _, grad) = losses::fine_loss_grad(self.ctx, &self.disp(params), &self.weights)?;
        Ok((loss, grad))
    }

    fn coverage_key(&self, params: &[f64]) -> Result<u64> {
        let (_, _, key) = losses::fine_loss(self.ctx, &self.disp(params), &self.weights)?;
        Ok(key)
    }
}

// ---------------------------------------------------------------------------
// Fitting drivers
// ---------------------------------------------------------------------------

/// Schedule and stopping parameters for one fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub decay_every: usize,
    pub decay_rate: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub convergence_tol: f64,
}

impl FitConfig {
    /// Per-image coarse fitting default: larger steps than the published
    /// encoder-training rate, same decay style.
    pub fn coarse_default() -> Self {
        FitConfig {
            learning_rate: 1e-2,
            decay_every: 5000,
            decay_rate: 0.9,
            max_steps: 2000,
            seed: 0,
            convergence_tol: 1e-7,
        }
    }

    /// Detail-stage default: the published schedule (0.002, decaying every
    /// 5000 steps at rate 0.98).
    pub fn fine_default() -> Self {
        FitConfig {
            learning_rate: 2e-3,
            decay_every: 5000,
            decay_rate: 0.98,
            max_steps: 2000,
            seed: 0,
            convergence_tol: 1e-7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidInput("learning rate must be positive".into()));
        }
        if !(0.0 < self.decay_rate && self.decay_rate <= 1.0) {
            return Err(Error::InvalidInput("decay rate must be in (0,1]".into()));
        }
        if self.decay_every == 0 {
            return Err(Error::InvalidInput("decay_every must be nonzero".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        self.learning_rate * self.decay_rate.powi((step / self.decay_every) as i32)
    }
}

/// Loss trace of one fit: loss per step plus the running best.
#[derive(Debug, Clone, Default)]
pub struct FitTrace {
    pub loss: Vec<f64>,
    pub best: Vec<f64>,
}

/// Result of [`fit_coarse`].
pub struct CoarseFit {
    pub params: SceneParams,
    pub best_loss: f64,
    pub trace: FitTrace,
    pub steps: usize,
}

const CONVERGENCE_WINDOW: usize = 200;

/// Generic best-iterate Adam loop over a flat parameter vector.
fn adam_minimize(
    mut eval: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    mut project: impl FnMut(&mut [f64]),
    init: Vec<f64>,
    cfg: &FitConfig,
) -> Result<(Vec<f64>, f64, FitTrace, usize)> {
    cfg.validate()?;
    let mut params = init.clone();
    let mut best_params = init;
    let mut trace = FitTrace::default();
    let mut state = AdamState::new(params.len());
    let mut best_loss = f64::INFINITY;
    let mut last_improvement = 0usize;
    let mut steps_done = 0usize;

    for step in 0..cfg.max_steps {
        let (loss, grad) = eval(&params)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss diverged at step {step}")));
        }
        if loss < best_loss {
            if best_loss.is_finite() && (best_loss - loss) > cfg.convergence_tol * best_loss.abs().max(1e-12) {
                last_improvement = step;
            } else if !best_loss.is_finite() {
                last_improvement = step;
            }
            best_loss = loss;
            best_params.copy_from_slice(&params);
        }
        trace.loss.push(loss);
        trace.best.push(best_loss);
        adam_step(
            &mut state,
            &mut params,
            &grad,
            cfg.lr_at(step),
            ADAM_BETA1,
            ADAM_BETA2,
            ADAM_EPS,
            step + 1,
        )?;
        project(&mut params);
        steps_done = step + 1;
        if step >= last_improvement + CONVERGENCE_WINDOW {
            break;
        }
    }
    // Evaluate the final iterate so a closing improvement is not lost.
    if cfg.max_steps > 0 {
        let (loss, _) = eval(&params)?;
        if loss.is_finite() && loss < best_loss {
            best_loss = loss;
            best_params.copy_from_slice(&params);
        }
        trace.loss.push(loss);
        trace.best.push(best_loss);
    }
    Ok((best_params, best_loss, trace, steps_done))
}

/// Stage one: Adam over the full scene block against the coarse loss.
/// Returns the best-loss iterate.
pub fn fit_coarse(
    image: &ImageBuffer,
    landmarks: &[Vector2<f64>],
    model: &FaceModel,
    init: &SceneParams,
    extractor: &dyn FeatureExtractor,
    weights: &CoarseWeights,
    cfg: &FitConfig,
) -> Result<CoarseFit> {
    init.validate(model)?;
    if cfg.max_steps == 0 {
        return Ok(CoarseFit {
            params: init.clone(),
            best_loss: f64::NAN,
            trace: FitTrace::default(),
            steps: 0,
        });
    }
    // Reject a diverged starting point up front.
    {
        let (loss, _, _) = losses::coarse_loss(model, init, image, landmarks, extractor, weights)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("coarse loss at initialization".into()));
        }
    }
    let k = model.k_id() + model.k_exp() + model.k_tex();
    let (best_vec, best_loss, trace, steps) = adam_minimize(
        |p| {
            let scene = SceneParams::from_vec(model, p)?;
            let (loss, _, grad) =
                losses::coarse_loss_grad(model, &scene, image, landmarks, extractor, weights)?;
            Ok((loss, grad.to_vec()))
        },
        |p| {
            // Keep the pose scale positive; Adam knows nothing about the
            // f > 0 invariant.
            if p[k] < 1e-6 {
                p[k] = 1e-6;
            }
        },
        init.to_vec(),
        cfg,
    )?;
    Ok(CoarseFit {
        params: SceneParams::from_vec(model, &best_vec)?,
        best_loss,
        trace,
        steps,
    })
}

/// Result of [`fit_detail`].
pub struct DetailFit {
    pub displacement: UvMap,
    pub detail_mesh: Mesh,
    pub best_loss: f64,
    pub trace: FitTrace,
    pub steps: usize,
}

/// Stage two: the coarse scene is frozen; Adam runs over all displacement
/// texels starting from zero.
pub fn fit_detail(
    image: &ImageBuffer,
    coarse: &SceneParams,
    model: &FaceModel,
    weights: &FineWeights,
    cfg: &FitConfig,
    uv_res: usize,
    mode: DisplacementMode,
) -> Result<DetailFit> {
    coarse.validate(model)?;
    let ctx = FineContext::from_scene(model, coarse, image, uv_res, mode)?;
    let npix = uv_res * uv_res;
    if cfg.max_steps == 0 {
        let displacement = ctx.displacement_from_vec(vec![0.0; npix]);
        let detail = uvspace::apply_displacement(&ctx.coarse_view_pos, &displacement, mode)?;
        let detail_mesh = uvspace::uv_to_mesh(&detail)?;
        return Ok(DetailFit {
            displacement,
            detail_mesh,
            best_loss: f64::NAN,
            trace: FitTrace::default(),
            steps: 0,
        });
    }
    let (best_vec, best_loss, trace, steps) = adam_minimize(
        |p| {
            let disp = ctx.displacement_from_vec(p.to_vec());
            let (loss, _, grad) = losses::fine_loss_grad(&ctx, &disp, weights)?;
            Ok((loss, grad))
        },
        |_| {},
        vec![0.0; npix],
        cfg,
    )?;
    let displacement = ctx.displacement_from_vec(best_vec);
    let detail = uvspace::apply_displacement(&ctx.coarse_view_pos, &displacement, mode)?;
    let detail_mesh = uvspace::uv_to_mesh(&detail)?;
    Ok(DetailFit {
        displacement,
        detail_mesh,
        best_loss,
        trace,
        steps,
    })
}
