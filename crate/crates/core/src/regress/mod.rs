//! Two-branch keypoint-to-parameter regressor.
//!
//! The global branch (dense stack) maps normalized body keypoints to shape,
//! body pose, global rotation and a depth-to-scale camera. The partial branch
//! runs graph convolutions over hand and face keypoints: one hand network is
//! shared by both hands (right-hand inputs are mirrored in `u`, which the
//! mirrored right-hand PCA basis undoes), and the face network ends in a dense
//! head producing expression plus jaw rotation.

mod layers;
mod train;

pub use layers::{normalized_adjacency, Adam, Dense, DenseLayerStack, DenseTape, GraphConvStack, GraphTape};
pub use train::{batch_gradient, hand_mpjpe, sts_training_loss, train, CurvePoint, Objective, TrainConfig, TrainOutcome};

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bodymodel::BodyModel;
use crate::error::{Error, Result};
use crate::fit::{body_joint_error, Bucketing};
use crate::metrics::{bucketed_report, EvalReport};
use crate::params::{FullParams, HandParams};
use crate::projection::{CameraModel, D2s, Keypoints2D, Part};
use crate::rng::{derive_seed_str, rng_from};
use crate::synth::{scale_normalize, NormalizedKeypoints, SyntheticSample};

pub const WEIGHTS_FORMAT: &str = "sts-regressor";
pub const WEIGHTS_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorConfig {
    pub global_hidden: Vec<usize>,
    pub gcn_widths: Vec<usize>,
    pub face_hidden: Vec<usize>,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        RegressorConfig { global_hidden: vec![256, 256], gcn_widths: vec![32, 32, 32, 16], face_hidden: vec![64] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandBranch {
    pub gcn: GraphConvStack,
    pub readout: Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaceBranch {
    pub gcn: GraphConvStack,
    pub head: DenseLayerStack,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub config: RegressorConfig,
    pub global: DenseLayerStack,
    pub hand: HandBranch,
    pub face: FaceBranch,
}

/// Decoded global-branch output.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalOutput {
    pub beta: Vec<f64>,
    pub theta_body: Vec<[f64; 3]>,
    pub theta_global: [f64; 3],
    /// Camera in normalized body-keypoint units.
    pub camera: D2s,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Skeleton edges among one hand's joints, local indices. Finger bases are
/// chained across the palm.
pub fn hand_edges(model: &BodyModel) -> Vec<(usize, usize)> {
    let range = model.hand_range(Part::LeftHand);
    let mut edges = Vec::new();
    let mut bases = Vec::new();
    for j in range.clone() {
        match model.joint_tree.parents[j] {
            Some(p) if range.contains(&p) => edges.push((p - range.start, j - range.start)),
            _ => bases.push(j - range.start),
        }
    }
    edges.extend(bases.windows(2).map(|w| (w[0], w[1])));
    edges
}

/// Face graph: node 0 is the jaw joint, then the landmarks ring by ring.
/// Rings are cycles, consecutive rings are joined vertex to vertex and the
/// jaw joint links to the first ring.
pub fn face_edges(model: &BodyModel) -> Result<Vec<(usize, usize)>> {
    let n_landmarks = model.part_indices(Part::Face).len() - 1;
    let vpr = model.vertices_per_ring;
    if vpr < 3 || n_landmarks % vpr != 0 {
        return Err(Error::Shape(format!("{n_landmarks} landmarks do not form rings of {vpr}")));
    }
    let rings = n_landmarks / vpr;
    let node = |r: usize, m: usize| 1 + r * vpr + m;
    let mut edges: Vec<(usize, usize)> = (0..vpr).map(|m| (0, node(0, m))).collect();
    for r in 0..rings {
        for m in 0..vpr {
            edges.push((node(r, m), node(r, (m + 1) % vpr)));
            if r + 1 < rings {
                edges.push((node(r, m), node(r + 1, m)));
            }
        }
    }
    Ok(edges)
}

/// Node-feature matrix (`nodes × 2`) of one part, `u` negated when `mirror`.
fn part_features(norm: &NormalizedKeypoints, part: Part, mirror: bool) -> DMatrix<f64> {
    let pts = norm.part_points(part);
    let sign = if mirror { -1.0 } else { 1.0 };
    DMatrix::from_fn(pts.len(), 2, |i, c| if c == 0 { sign * pts[i][0] } else { pts[i][1] })
}

/// Row-major (node-major) flattening of a node-feature matrix.
fn flatten(h: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(h.transpose().as_slice())
}

fn unflatten(v: &DVector<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v.as_slice())
}

impl Regressor {
    pub fn new(model: &BodyModel, config: &RegressorConfig, seed: u64) -> Result<Regressor> {
        let dims = model.dims();
        let nb = model.part_indices(Part::Body).len();
        let nh = model.hand_range(Part::LeftHand).len();
        let nf = model.part_indices(Part::Face).len();
        if config.gcn_widths.len() != GraphConvStack::LAYERS {
            return Err(Error::InvalidConfig(format!("gcn_widths needs {} entries", GraphConvStack::LAYERS)));
        }
        if config.global_hidden.iter().chain(&config.gcn_widths).chain(&config.face_hidden).any(|w| *w == 0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let mut rng = rng_from(derive_seed_str(seed, "regressor"));
        let mut widths = vec![2 * nb];
        widths.extend(&config.global_hidden);
        widths.push(Self::global_dim(model));
        let global = DenseLayerStack::new(&mut rng, &widths);

        let gw: Vec<usize> = std::iter::once(2).chain(config.gcn_widths.iter().copied()).collect();
        let out = *gw.last().expect("widths");
        let hand_gcn = GraphConvStack::new(&mut rng, nh, hand_edges(model), &gw)?;
        let readout = Dense::new(&mut rng, nh * out, dims.hand_pca);
        let face_gcn = GraphConvStack::new(&mut rng, nf, face_edges(model)?, &gw)?;
        let mut fw = vec![nf * out];
        fw.extend(&config.face_hidden);
        fw.push(dims.face());
        let head = DenseLayerStack::new(&mut rng, &fw);
        Ok(Regressor {
            config: config.clone(),
            global,
            hand: HandBranch { gcn: hand_gcn, readout },
            face: FaceBranch { gcn: face_gcn, head },
        })
    }

    /// `[β | θ_body | θ_global | s_raw | t_u | t_v | d_raw]`.
    pub fn global_dim(model: &BodyModel) -> usize {
        let d = model.dims();
        d.shape + 3 * (d.body_joints - 1) + 3 + 4
    }

    pub fn zeros_like(&self) -> Regressor {
        Regressor {
            config: self.config.clone(),
            global: self.global.zeros_like(),
            hand: HandBranch { gcn: self.hand.gcn.zeros_like(), readout: self.hand.readout.zeros_like() },
            face: FaceBranch { gcn: self.face.gcn.zeros_like(), head: self.face.head.zeros_like() },
        }
    }

    /// Every weight array in a fixed order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v = self.global.slices();
        v.extend(self.hand.gcn.slices());
        v.push(self.hand.readout.w.as_slice());
        v.push(self.hand.readout.b.as_slice());
        v.extend(self.face.gcn.slices());
        v.extend(self.face.head.slices());
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.global.slices_mut();
        v.extend(self.hand.gcn.slices_mut());
        v.push(self.hand.readout.w.as_mut_slice());
        v.push(self.hand.readout.b.as_mut_slice());
        v.extend(self.face.gcn.slices_mut());
        v.extend(self.face.head.slices_mut());
        v
    }

    /// Checks shapes against `model` and that every weight is finite.
    pub fn validate(&self, model: &BodyModel) -> Result<()> {
        self.global.validate()?;
        self.hand.gcn.validate()?;
        self.face.gcn.validate()?;
        self.face.head.validate()?;
        let nb = model.part_indices(Part::Body).len();
        let nh = model.hand_range(Part::LeftHand).len();
        let nf = model.part_indices(Part::Face).len();
        let d = model.dims();
        let ok = self.global.input_dim() == 2 * nb
            && self.global.output_dim() == Self::global_dim(model)
            && self.hand.gcn.n_nodes == nh
            && self.hand.readout.w.shape() == (d.hand_pca, nh * self.hand.gcn.output_width())
            && self.face.gcn.n_nodes == nf
            && self.face.head.input_dim() == nf * self.face.gcn.output_width()
            && self.face.head.output_dim() == d.face();
        if !ok {
            return Err(Error::Shape("regressor dimensions do not match the body model".into()));
        }
        Ok(())
    }

    pub fn global_input(norm: &NormalizedKeypoints) -> Result<DVector<f64>> {
        match norm.record(Part::Body) {
            Some(r) if !r.absent => {}
            _ => return Err(Error::AbsentPart("body".into())),
        }
        Ok(DVector::from_iterator(
            2 * norm.part_points(Part::Body).len(),
            norm.part_points(Part::Body).into_iter().flatten(),
        ))
    }

    pub fn decode_global(model: &BodyModel, y: &DVector<f64>) -> GlobalOutput {
        let d = model.dims();
        let s = d.shape;
        let nb = d.body_joints - 1;
        let triple = |o: usize| [y[o], y[o + 1], y[o + 2]];
        let g = s + 3 * nb;
        GlobalOutput {
            beta: y.rows(0, s).iter().copied().collect(),
            theta_body: (0..nb).map(|i| triple(s + 3 * i)).collect(),
            theta_global: triple(g),
            camera: D2s { s: softplus(y[g + 3]), t: [y[g + 4], y[g + 5]], d: softplus(y[g + 6]) },
        }
    }

    pub fn forward_global(&self, model: &BodyModel, norm: &NormalizedKeypoints) -> Result<GlobalOutput> {
        Ok(Self::decode_global(model, &self.global.forward(&Self::global_input(norm)?)))
    }

    /// Hand PCA coefficients or face parameters (expression then jaw).
    pub fn forward_partial(&self, norm: &NormalizedKeypoints, part: Part) -> Result<Vec<f64>> {
        if part == Part::Body {
            return Err(Error::InvalidConfig("the partial branch handles hands and face".into()));
        }
        match norm.record(part) {
            Some(r) if !r.absent => {}
            _ => return Err(Error::AbsentPart(part.name().into())),
        }
        let x = part_features(norm, part, part == Part::RightHand);
        let out = if part == Part::Face {
            self.face.head.forward(&flatten(&self.face.gcn.forward(&x)))
        } else {
            self.hand.readout.forward(&flatten(&self.hand.gcn.forward(&x)))
        };
        Ok(out.iter().copied().collect())
    }

    /// Full parameter set. Absent hands or face fall back to the rest pose.
    pub fn predict_params(&self, model: &BodyModel, j2d: &Keypoints2D) -> Result<FullParams> {
        let norm = scale_normalize(j2d);
        let g = self.forward_global(model, &norm)?;
        let d = model.dims();
        let part = |p: Part, n: usize| match self.forward_partial(&norm, p) {
            Err(Error::AbsentPart(_)) => Ok(vec![0.0; n]),
            other => other,
        };
        Ok(FullParams {
            theta_global: g.theta_global,
            theta_body: g.theta_body,
            hands: HandParams::Pca { left: part(Part::LeftHand, d.hand_pca)?, right: part(Part::RightHand, d.hand_pca)? },
            psi_face: part(Part::Face, d.face())?,
            beta: g.beta,
            camera: CameraModel::D2s(g.camera),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = WeightsFile { format: WEIGHTS_FORMAT.into(), version: WEIGHTS_VERSION, regressor: self.clone() };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str, model: &BodyModel) -> Result<Regressor> {
        let raw: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        if raw.get("format").and_then(|v| v.as_str()) != Some(WEIGHTS_FORMAT) {
            return Err(Error::Malformed(format!("not an {WEIGHTS_FORMAT} file")));
        }
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(WEIGHTS_VERSION) => {}
            Some(found) => return Err(Error::Version { found, expected: WEIGHTS_VERSION }),
            None => return Err(Error::Malformed("missing version".into())),
        }
        let file: WeightsFile = serde_json::from_value(raw).map_err(|e| Error::Malformed(e.to_string()))?;
        file.regressor.validate(model)?;
        Ok(file.regressor)
    }
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    format: String,
    version: u64,
    regressor: Regressor,
}

pub fn save_weights(reg: &Regressor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, reg.to_json()?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>, model: &BodyModel) -> Result<Regressor> {
    Regressor::from_json(&std::fs::read_to_string(path)?, model)
}

/// Anything that turns 2D keypoints into body parameters.
pub trait ParamPredictor {
    fn predict(&self, model: &BodyModel, j2d: &Keypoints2D) -> Result<FullParams>;
}

impl ParamPredictor for Regressor {
    fn predict(&self, model: &BodyModel, j2d: &Keypoints2D) -> Result<FullParams> {
        self.predict_params(model, j2d)
    }
}

/// Root-relative body-joint MPJPE / PA-MPJPE (mm) of predictions against the
/// samples' ground-truth keypoints.
pub fn evaluate(
    predictor: &dyn ParamPredictor,
    model: &BodyModel,
    samples: &[SyntheticSample],
    bucketing: Option<Bucketing>,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let errors = samples
        .iter()
        .map(|s| body_joint_error(model, &predictor.predict(model, &s.j2d)?, s, bucketing.map(|b| b.label(s))))
        .collect::<Result<Vec<_>>>()?;
    bucketed_report(&errors, bucketing.is_some())
}

/// Same report for predictions computed elsewhere, aligned with `samples`.
/// `None` entries (failed predictions) are skipped and counted.
pub fn evaluate_params(
    model: &BodyModel,
    samples: &[SyntheticSample],
    preds: &[Option<FullParams>],
    bucketing: Option<Bucketing>,
) -> Result<(EvalReport, usize)> {
    if preds.len() != samples.len() {
        return Err(Error::Shape(format!("{} predictions for {} samples", preds.len(), samples.len())));
    }
    let errors = samples
        .iter()
        .zip(preds)
        .filter_map(|(s, p)| p.as_ref().map(|p| body_joint_error(model, p, s, bucketing.map(|b| b.label(s)))))
        .collect::<Result<Vec<_>>>()?;
    let skipped = preds.iter().filter(|p| p.is_none()).count();
    Ok((bucketed_report(&errors, bucketing.is_some())?, skipped))
}

#[cfg(test)]
mod tests;
