//! Training by consistency with the generating parameters and keypoints.

use std::io::Write;

use nalgebra::{DVector, Vector3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::layers::{Adam, DenseTape, GraphTape};
use super::{flatten, part_features, sigmoid, unflatten, Regressor, RegressorConfig};
use crate::bodymodel::BodyModel;
use crate::error::{Error, Result};
use crate::fit::{loss_gradient, loss_total, LossWeights, Targets};
use crate::metrics::{mean, sample_error};
use crate::params::{FullParams, HandParams};
use crate::projection::{CameraModel, Part};
use crate::rng::{derive_seed, derive_seed_str, rng_from};
use crate::synth::{scale_normalize, SyntheticSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub betas: (f64, f64),
    /// Epochs training the hand and face branches alone.
    pub phase1_epochs: usize,
    /// Epochs training both branches.
    pub phase2_epochs: usize,
    pub seed: u64,
    /// In phase 2, every `sts_cadence`-th step is a whole-body step; the
    /// others supervise each branch with the other's parameters at ground truth.
    pub sts_cadence: usize,
    pub w_pm: f64,
    pub w_3d: f64,
    /// Trailing fraction of the dataset held out for validation.
    pub val_fraction: f64,
    pub regressor: RegressorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 16,
            betas: (0.9, 0.999),
            phase1_epochs: 10,
            phase2_epochs: 10,
            seed: 0,
            sts_cadence: 5,
            w_pm: 20.0,
            w_3d: 60.0,
            val_fraction: 0.1,
            regressor: RegressorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 || self.sts_cadence == 0 {
            return bad("batch_size and sts_cadence must be at least 1");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("moment decays must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if !(self.w_pm >= 0.0 && self.w_3d >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        Ok(())
    }

    fn weights(&self) -> LossWeights {
        LossWeights { w_pm: self.w_pm, w_3d: self.w_3d, w_2d: 0.0, w_r: 0.0 }
    }
}

/// Which network outputs replace the ground truth in the prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Hands and face predicted, everything else at ground truth.
    Partial,
    /// Body pose, shape, rotation and camera predicted.
    Global,
    Full,
}

impl Objective {
    fn uses_global(self) -> bool {
        matches!(self, Objective::Global | Objective::Full)
    }

    fn uses_partial(self) -> bool {
        matches!(self, Objective::Partial | Objective::Full)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub phase: u8,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub regressor: Regressor,
    pub curve: Vec<CurvePoint>,
    pub steps: usize,
}

impl TrainOutcome {
    /// Columns `epoch,phase,train_loss,val_loss`.
    pub fn write_curve_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "phase", "train_loss", "val_loss"])?;
        for p in &self.curve {
            w.write_record([p.epoch.to_string(), p.phase.to_string(), p.train_loss.to_string(), p.val_loss.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `w_pm · L_pm + w_3D · L_3D` of a prediction against a synthetic sample.
pub fn sts_training_loss(pred: &FullParams, sample: &SyntheticSample, model: &BodyModel, w_pm: f64, w_3d: f64) -> Result<f64> {
    let weights = LossWeights { w_pm, w_3d, w_2d: 0.0, w_r: 0.0 };
    let t = Targets { j3d: Some(&sample.j3d), params: Some(&sample.params), ..Default::default() };
    Ok(loss_total(model, pred, t, &weights, 0.0)?.total)
}

struct HandTape {
    part: Part,
    flat: DVector<f64>,
    gcn: GraphTape,
}

struct FaceTape {
    gcn: GraphTape,
    head: DenseTape,
}

struct Forward {
    pred: FullParams,
    global: Option<(DVector<f64>, DenseTape)>,
    hands: Vec<HandTape>,
    face: Option<FaceTape>,
}

fn pca_of(model: &BodyModel, hands: &HandParams) -> (Vec<f64>, Vec<f64>) {
    match hands {
        HandParams::Pca { left, right } => (left.clone(), right.clone()),
        HandParams::Full { left, right } => {
            (model.project_hand(Part::LeftHand, left), model.project_hand(Part::RightHand, right))
        }
    }
}

fn forward(reg: &Regressor, model: &BodyModel, sample: &SyntheticSample, obj: Objective) -> Result<Forward> {
    let norm = scale_normalize(&sample.j2d);
    let (left, right) = pca_of(model, &sample.params.hands);
    let mut pred = FullParams { hands: HandParams::Pca { left, right }, ..sample.params.clone() };
    let mut out = Forward { pred: pred.clone(), global: None, hands: Vec::new(), face: None };
    if obj.uses_global() {
        let (y, tape) = reg.global.forward_taped(&Regressor::global_input(&norm)?);
        let g = Regressor::decode_global(model, &y);
        pred.theta_global = g.theta_global;
        pred.theta_body = g.theta_body;
        pred.beta = g.beta;
        pred.camera = CameraModel::D2s(g.camera);
        out.global = Some((y, tape));
    }
    if obj.uses_partial() {
        let present = |p: Part| norm.record(p).is_some_and(|r| !r.absent);
        for part in [Part::LeftHand, Part::RightHand] {
            if !present(part) {
                continue;
            }
            let (h, gcn) = reg.hand.gcn.forward_taped(&part_features(&norm, part, part == Part::RightHand));
            let flat = flatten(&h);
            let coeffs: Vec<f64> = reg.hand.readout.forward(&flat).iter().copied().collect();
            if let HandParams::Pca { left, right } = &mut pred.hands {
                *(if part == Part::LeftHand { left } else { right }) = coeffs;
            }
            out.hands.push(HandTape { part, flat, gcn });
        }
        if present(Part::Face) {
            let (h, gcn) = reg.face.gcn.forward_taped(&part_features(&norm, Part::Face, false));
            let (y, head) = reg.face.head.forward_taped(&flatten(&h));
            pred.psi_face = y.iter().copied().collect();
            out.face = Some(FaceTape { gcn, head });
        }
    }
    out.pred = pred;
    Ok(out)
}

/// Loss of one sample; with `grad`, accumulates `∂loss/∂weights` into it.
fn sample_loss(
    reg: &Regressor,
    model: &BodyModel,
    sample: &SyntheticSample,
    obj: Objective,
    cfg: &TrainConfig,
    grad: Option<&mut Regressor>,
) -> Result<f64> {
    let fw = forward(reg, model, sample, obj)?;
    let t = Targets { j3d: Some(&sample.j3d), params: Some(&sample.params), ..Default::default() };
    let Some(grad) = grad else {
        return Ok(loss_total(model, &fw.pred, t, &cfg.weights(), 0.0)?.total);
    };
    let (loss, g) = loss_gradient(model, &fw.pred, t, &cfg.weights(), 0.0)?;
    let layout = fw.pred.layout(model.dims());
    let np = layout.len();
    if let Some((y, tape)) = &fw.global {
        let d = model.dims();
        let gl = 3 * (d.body_joints - 1);
        let mut dy = DVector::zeros(y.len());
        dy.rows_mut(0, d.shape).copy_from(&g.rows(layout.shape().start, d.shape));
        dy.rows_mut(d.shape, gl).copy_from(&g.rows(layout.body().start, gl));
        let o = d.shape + gl;
        dy.rows_mut(o, 3).copy_from(&g.rows(0, 3));
        dy[o + 3] = g[np] * sigmoid(y[o + 3]);
        dy[o + 4] = g[np + 1];
        dy[o + 5] = g[np + 2];
        dy[o + 6] = g[np + 3] * sigmoid(y[o + 6]);
        reg.global.backward(tape, &dy, &mut grad.global);
    }
    for h in &fw.hands {
        let range = if h.part == Part::LeftHand { layout.left_hand() } else { layout.right_hand() };
        let dy = DVector::from_column_slice(&g.as_slice()[range]);
        let d_flat = reg.hand.readout.backward(&h.flat, &dy, &mut grad.hand.readout);
        let n = reg.hand.gcn.n_nodes;
        let dh = unflatten(&d_flat, n, d_flat.len() / n);
        reg.hand.gcn.backward(&h.gcn, &dh, &mut grad.hand.gcn);
    }
    if let Some(f) = &fw.face {
        let dy = DVector::from_column_slice(&g.as_slice()[layout.face()]);
        let d_flat = reg.face.head.backward(&f.head, &dy, &mut grad.face.head);
        let n = reg.face.gcn.n_nodes;
        let dh = unflatten(&d_flat, n, d_flat.len() / n);
        reg.face.gcn.backward(&f.gcn, &dh, &mut grad.face.gcn);
    }
    Ok(loss.total)
}

/// Mean loss and gradient of a batch under each objective in `objs`.
pub fn batch_gradient(
    reg: &Regressor,
    model: &BodyModel,
    batch: &[&SyntheticSample],
    objs: &[Objective],
    cfg: &TrainConfig,
) -> Result<(f64, Regressor)> {
    let mut grad = reg.zeros_like();
    let mut total = 0.0;
    for s in batch {
        for &o in objs {
            total += sample_loss(reg, model, s, o, cfg, Some(&mut grad))?;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    grad.slices_mut().into_iter().flatten().for_each(|v| *v *= scale);
    let loss = total * scale;
    if !loss.is_finite() || grad.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(Error::Divergence(format!("non-finite loss or gradient (batch loss {loss})")));
    }
    Ok((loss, grad))
}

/// Mean loss over `samples` under one objective.
pub(crate) fn mean_loss(reg: &Regressor, model: &BodyModel, samples: &[SyntheticSample], obj: Objective, cfg: &TrainConfig) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let losses = samples.iter().map(|s| sample_loss(reg, model, s, obj, cfg, None)).collect::<Result<Vec<_>>>()?;
    Ok(mean(&losses))
}

/// Two-phase training from a seeded initialization.
pub fn train(model: &BodyModel, samples: &[SyntheticSample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Configuration("training needs at least one sample".into()));
    }
    let n_val = ((cfg.val_fraction * samples.len() as f64).floor() as usize).min(samples.len() - 1);
    let (train_set, val_set) = samples.split_at(samples.len() - n_val);
    let mut reg = Regressor::new(model, &cfg.regressor, cfg.seed)?;
    let shapes: Vec<usize> = reg.slices().iter().map(|s| s.len()).collect();
    let mut adam = Adam::new(cfg.lr, cfg.betas, &shapes);
    let shuffle_seed = derive_seed_str(cfg.seed, "shuffle");
    let mut curve = Vec::new();
    let mut steps = 0;
    let mut phase2_step = 0;
    for epoch in 0..cfg.phase1_epochs + cfg.phase2_epochs {
        let phase = if epoch < cfg.phase1_epochs { 1 } else { 2 };
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng_from(derive_seed(shuffle_seed, epoch as u64)));
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SyntheticSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let objs: &[Objective] = if phase == 1 {
                &[Objective::Partial]
            } else if phase2_step % cfg.sts_cadence == 0 {
                &[Objective::Full]
            } else {
                &[Objective::Global, Objective::Partial]
            };
            let (_, grad) = batch_gradient(&reg, model, &batch, objs, cfg)?;
            adam.step(reg.slices_mut(), grad.slices());
            steps += 1;
            if phase == 2 {
                phase2_step += 1;
            }
        }
        let obj = if phase == 1 { Objective::Partial } else { Objective::Full };
        curve.push(CurvePoint {
            epoch: epoch + 1,
            phase,
            train_loss: mean_loss(&reg, model, train_set, obj, cfg)?,
            val_loss: mean_loss(&reg, model, val_set, obj, cfg)?,
        });
    }
    Ok(TrainOutcome { regressor: reg, curve, steps })
}

/// Mean MPJPE (mm) of both hands, wrist-relative, with hand poses from the
/// partial branch and everything else at ground truth.
pub fn hand_mpjpe(reg: &Regressor, model: &BodyModel, samples: &[SyntheticSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut errors = Vec::new();
    for s in samples {
        let pred = model.keypoints(&forward(reg, model, s, Objective::Partial)?.pred)?;
        for part in [Part::LeftHand, Part::RightHand] {
            let range = model.hand_range(part);
            let wrist = model.joint_tree.parents[range.start].expect("hand attaches to the body");
            let idx: Vec<usize> = std::iter::once(wrist).chain(range).collect();
            let p: Vec<Vector3<f64>> = idx.iter().map(|&i| pred[i]).collect();
            let g: Vec<Vector3<f64>> = idx.iter().map(|&i| Vector3::from(s.j3d.points[i])).collect();
            errors.push(sample_error(&p, &g, 0, true, None)?.mpjpe);
        }
    }
    Ok(mean(&errors))
}
