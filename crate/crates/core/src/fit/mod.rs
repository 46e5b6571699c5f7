//! Recovery of body parameters and camera from 2D keypoints.
//!
//! Damped Gauss-Newton (Levenberg-Marquardt) on the weighted loss, with the
//! L1 reprojection term handled by iteratively reweighted least squares. A
//! step is kept only when the true loss decreases; otherwise damping grows.
//! Stage 1 frees the camera and the global rotation from several start
//! orientations about the vertical axis, stage 2 frees everything.

mod loss;
mod sweep;

pub use loss::{loss_gradient, loss_total, rationality_penalty, LossBreakdown, LossWeights, Targets, DEFAULT_LAMBDA_BETA};
pub use sweep::{body_joint_error, fit_sweep, fit_sweep_with_results, Bucketing, SweepRecord, SweepReport, SweepRow};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bodymodel::BodyModel;
use crate::error::{Error, Result};
use crate::params::{FullParams, ParamLayout};
use crate::projection::{CameraKind, CameraModel, D2s, Keypoints2D, Part, Perspective, WeakPerspective};
use crate::rng::rng_from;
use loss::{residual_blocks, summarize, Penalty};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub camera_kind: CameraKind,
    pub weights: LossWeights,
    pub lambda_beta: f64,
    pub stage1_iterations: usize,
    pub stage2_iterations: usize,
    /// Stop when an accepted step lowers the loss by less than this fraction.
    pub tolerance: f64,
    /// Damping increases allowed per iteration before giving up.
    pub max_rejections: usize,
    pub initial_damping: f64,
    /// Residual magnitude (pixels) below which the L1 reweighting saturates.
    pub l1_floor: f64,
    /// Start orientations about the vertical axis tried in stage 1.
    pub orientation_starts: usize,
    /// Standard deviation of the random perturbation of the initial body pose.
    pub init_jitter: f64,
    pub hands_pca: bool,
    pub min_body_keypoints: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            camera_kind: CameraKind::D2s,
            weights: LossWeights::default(),
            lambda_beta: DEFAULT_LAMBDA_BETA,
            stage1_iterations: 60,
            stage2_iterations: 300,
            tolerance: 1e-6,
            max_rejections: 20,
            initial_damping: 1e-3,
            l1_floor: 1e-3,
            orientation_starts: 4,
            init_jitter: 0.0,
            hands_pca: true,
            min_body_keypoints: 6,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.stage1_iterations == 0 || self.stage2_iterations == 0 {
            return bad("iteration counts must be at least 1");
        }
        if self.orientation_starts == 0 {
            return bad("at least one start orientation is needed");
        }
        if !(self.lambda_beta >= 0.0 && self.tolerance >= 0.0 && self.init_jitter >= 0.0) {
            return bad("lambda_beta, tolerance and init_jitter must be non-negative");
        }
        if !(self.initial_damping > 0.0 && self.l1_floor > 0.0) {
            return bad("initial_damping and l1_floor must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params: FullParams,
    pub losses: LossBreakdown,
    pub iterations: usize,
    pub converged: bool,
    /// Total loss at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub diagnostics: Vec<String>,
}

/// Camera parameters as optimized: logarithms of the positive quantities.
/// Perspective uses a single focal length for both axes.
fn camera_to_internal(cam: &CameraModel) -> Vec<f64> {
    match *cam {
        CameraModel::Weak(c) => vec![c.s.ln(), c.t[0], c.t[1]],
        CameraModel::D2s(c) => vec![c.s.ln(), c.t[0], c.t[1], c.d.ln()],
        CameraModel::Perspective(c) => vec![(0.5 * (c.fx + c.fy)).ln(), c.tc[0], c.tc[1], c.tc[2].ln()],
    }
}

/// Camera and the derivative of its natural parameters w.r.t. the internal ones.
fn camera_from_internal(kind: CameraKind, x: &[f64]) -> (CameraModel, DMatrix<f64>) {
    match kind {
        CameraKind::Weak => {
            let s = x[0].exp();
            let cam = CameraModel::Weak(WeakPerspective { s, t: [x[1], x[2]] });
            (cam, DMatrix::from_diagonal(&DVector::from_vec(vec![s, 1.0, 1.0])))
        }
        CameraKind::D2s => {
            let (s, d) = (x[0].exp(), x[3].exp());
            let cam = CameraModel::D2s(D2s { s, t: [x[1], x[2]], d });
            (cam, DMatrix::from_diagonal(&DVector::from_vec(vec![s, 1.0, 1.0, d])))
        }
        CameraKind::Perspective => {
            let (f, d) = (x[0].exp(), x[3].exp());
            let cam = CameraModel::Perspective(Perspective { fx: f, fy: f, tc: [x[1], x[2], d] });
            let mut c = DMatrix::zeros(5, 4);
            c[(0, 0)] = f;
            c[(1, 0)] = f;
            c[(2, 1)] = 1.0;
            c[(3, 2)] = 1.0;
            c[(4, 3)] = d;
            (cam, c)
        }
    }
}

/// Camera guess from the bounding box of the visible body keypoints.
fn initial_camera(model: &BodyModel, j2d: &Keypoints2D, kind: CameraKind) -> CameraModel {
    let body: Vec<[f64; 2]> =
        (0..j2d.len()).filter(|&i| j2d.visible[i] && j2d.parts[i] == Part::Body).map(|i| j2d.points[i]).collect();
    let bbox = |pts: &mut dyn Iterator<Item = [f64; 2]>| {
        pts.fold([f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY], |b, p| {
            [b[0].min(p[0]), b[1].max(p[0]), b[2].min(p[1]), b[3].max(p[1])]
        })
    };
    let img = bbox(&mut body.iter().copied());
    let rest = bbox(&mut model.rest_joints()[model.body_range()].iter().map(|p| [p.x, p.y]));
    let height = img[3] - img[2];
    let s = if height > 1e-9 { height / model.rest_body_height() } else { 1.0 };
    let t = [
        0.5 * (img[0] + img[1]) - s * 0.5 * (rest[0] + rest[1]),
        0.5 * (img[2] + img[3]) - s * 0.5 * (rest[2] + rest[3]),
    ];
    let d = 4.0 * model.rest_extent();
    match kind {
        CameraKind::Weak => CameraModel::Weak(WeakPerspective { s, t }),
        CameraKind::D2s => CameraModel::D2s(D2s { s, t, d }),
        CameraKind::Perspective => {
            CameraModel::Perspective(Perspective { fx: s * d, fy: s * d, tc: [t[0] / s, t[1] / s, d] })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stop {
    Tolerance,
    Stalled,
    IterationCap,
}

struct Outcome {
    x: Vec<f64>,
    loss: f64,
    iterations: usize,
    accepted: usize,
    stop: Stop,
}

struct Objective<'a> {
    model: &'a BodyModel,
    j2d: &'a Keypoints2D,
    cfg: &'a FitConfig,
    layout: ParamLayout,
}

impl Objective<'_> {
    fn unpack(&self, x: &[f64]) -> Result<(FullParams, DMatrix<f64>)> {
        let np = self.layout.len();
        let (camera, chain) = camera_from_internal(self.cfg.camera_kind, &x[np..]);
        Ok((FullParams::from_vec(self.layout, &x[..np], camera)?, chain))
    }

    fn targets(&self) -> Targets<'_> {
        Targets { j2d: Some(self.j2d), ..Default::default() }
    }

    /// Total loss, or `None` where it is undefined (points behind the camera).
    fn loss(&self, x: &[f64]) -> Option<f64> {
        let (p, _) = self.unpack(x).ok()?;
        let blocks = residual_blocks(self.model, &p, self.targets(), &self.cfg.weights, self.cfg.lambda_beta, false).ok()?;
        let total = summarize(&blocks, &self.cfg.weights, self.cfg.lambda_beta).total;
        total.is_finite().then_some(total)
    }

    /// Reweighted normal equations `(H, g)` restricted to `active` columns.
    fn linearize(&self, x: &[f64], active: &[usize]) -> Result<(DMatrix<f64>, DVector<f64>)> {
        let (p, chain) = self.unpack(x)?;
        let blocks = residual_blocks(self.model, &p, self.targets(), &self.cfg.weights, self.cfg.lambda_beta, true)?;
        let np = self.layout.len();
        let n = active.len();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        for b in &blocks {
            let jac = b.jac.as_ref().expect("jacobian requested");
            let cam_cols = jac.columns(np, jac.ncols() - np) * &chain;
            let mut full = DMatrix::zeros(jac.nrows(), np + chain.ncols());
            full.columns_mut(0, np).copy_from(&jac.columns(0, np));
            full.columns_mut(np, chain.ncols()).copy_from(&cam_cols);
            let ja = if n == full.ncols() { full } else { full.select_columns(active) };
            let scale = b.weight * b.norm;
            let (w, psi): (Vec<f64>, Vec<f64>) = b
                .r
                .iter()
                .map(|&r| match b.penalty {
                    Penalty::L2 => (2.0, 2.0 * r),
                    Penalty::L1 => {
                        let a = r.abs().max(self.cfg.l1_floor);
                        (1.0 / a, r / a)
                    }
                })
                .unzip();
            let mut wj = ja.clone();
            for (i, wi) in w.iter().enumerate() {
                wj.row_mut(i).scale_mut(*wi);
            }
            h += ja.tr_mul(&wj) * scale;
            g += ja.tr_mul(&DVector::from_vec(psi)) * scale;
        }
        Ok((h, g))
    }

    fn minimize(&self, mut x: Vec<f64>, active: &[usize], max_iter: usize, trace: &mut Vec<f64>) -> Result<Outcome> {
        let mut loss = self
            .loss(&x)
            .ok_or_else(|| Error::NumericInput("the initial fit state has points behind the camera".into()))?;
        let mut mu = self.cfg.initial_damping;
        let mut accepted = 0;
        for iter in 0..max_iter {
            let (h, g) = self.linearize(&x, active)?;
            let max_diag = h.diagonal().iter().fold(0.0f64, |a, b| a.max(*b));
            let floor = 1e-12 * max_diag.max(1e-12);
            let mut step_taken = None;
            for _ in 0..=self.cfg.max_rejections {
                let mut a = h.clone();
                for i in 0..a.nrows() {
                    a[(i, i)] += mu * h[(i, i)].max(floor);
                }
                let Some(chol) = a.cholesky() else {
                    mu *= 4.0;
                    continue;
                };
                let dx = chol.solve(&(-&g));
                let mut trial = x.clone();
                for (k, &c) in active.iter().enumerate() {
                    trial[c] += dx[k];
                }
                match self.loss(&trial) {
                    Some(l) if l < loss => {
                        step_taken = Some((trial, l));
                        mu = (mu / 3.0).max(1e-12);
                        break;
                    }
                    _ => mu *= 4.0,
                }
            }
            let Some((trial, new_loss)) = step_taken else {
                return Ok(Outcome { x, loss, iterations: iter + 1, accepted, stop: Stop::Stalled });
            };
            let decrease = loss - new_loss;
            x = trial;
            loss = new_loss;
            accepted += 1;
            trace.push(loss);
            if decrease <= self.cfg.tolerance * loss.max(f64::MIN_POSITIVE) || loss < 1e-14 {
                return Ok(Outcome { x, loss, iterations: iter + 1, accepted, stop: Stop::Tolerance });
            }
        }
        Ok(Outcome { x, loss, iterations: max_iter, accepted, stop: Stop::IterationCap })
    }
}

pub fn fit_frame(j2d: &Keypoints2D, model: &BodyModel, cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    if j2d.len() != model.n_keypoints() {
        return Err(Error::Shape(format!("expected {} keypoints, got {}", model.n_keypoints(), j2d.len())));
    }
    if j2d.points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NumericInput("2D keypoints must be finite".into()));
    }
    let visible = j2d.visible_count(Some(Part::Body));
    if visible < cfg.min_body_keypoints {
        return Err(Error::InsufficientKeypoints { visible, required: cfg.min_body_keypoints });
    }
    let layout = model.layout(cfg.hands_pca);
    let obj = Objective { model, j2d, cfg, layout };
    let np = layout.len();
    let cam0 = camera_to_internal(&initial_camera(model, j2d, cfg.camera_kind));
    let nx = np + cam0.len();

    let mut x0 = vec![0.0; np];
    if cfg.init_jitter > 0.0 {
        let mut rng = rng_from(cfg.seed);
        for v in &mut x0[layout.body()] {
            *v = cfg.init_jitter * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    x0.extend(cam0);

    let stage1: Vec<usize> = (0..3).chain(np..nx).collect();
    let mut best: Option<(Outcome, Vec<f64>)> = None;
    for k in 0..cfg.orientation_starts {
        let mut x = x0.clone();
        x[1] = std::f64::consts::TAU * k as f64 / cfg.orientation_starts as f64;
        let mut trace = Vec::new();
        let Some(start) = obj.loss(&x) else { continue };
        trace.push(start);
        let out = obj.minimize(x, &stage1, cfg.stage1_iterations, &mut trace)?;
        if best.as_ref().is_none_or(|(b, _)| out.loss < b.loss) {
            best = Some((out, trace));
        }
    }
    let (s1, mut trace) =
        best.ok_or_else(|| Error::NumericInput("every start orientation puts points behind the camera".into()))?;

    let all: Vec<usize> = (0..nx).collect();
    let s2 = obj.minimize(s1.x, &all, cfg.stage2_iterations, &mut trace)?;

    let (params, _) = obj.unpack(&s2.x)?;
    let losses = loss_total(model, &params, obj.targets(), &cfg.weights, cfg.lambda_beta)?;
    let mut diagnostics = vec![
        format!("stage 1: {} iterations, {} accepted, {:?}", s1.iterations, s1.accepted, s1.stop),
        format!("stage 2: {} iterations, {} accepted, {:?}", s2.iterations, s2.accepted, s2.stop),
    ];
    let no_progress = s1.accepted + s2.accepted == 0 && trace[0] > 1e-14;
    if no_progress {
        diagnostics.push("no step decreased the loss from the initialization".into());
    }
    Ok(FitResult {
        params,
        losses,
        iterations: s1.iterations + s2.iterations,
        converged: !no_progress && s2.stop != Stop::IterationCap,
        trace,
        diagnostics,
    })
}

#[cfg(test)]
mod tests;
