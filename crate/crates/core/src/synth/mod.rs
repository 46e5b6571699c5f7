//! Synthetic training data: parameter banks, sampling, mesh-to-2D pairing,
//! keypoint degradation and per-part scale normalization.

mod dataset;
mod normalize;

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bodymodel::{AngleLimit, BodyModel};
use crate::error::{Error, Result};
use crate::params::{FullParams, HandParams};
use crate::projection::{CameraModel, Keypoints2D, Keypoints3D, Part, Perspective};
use crate::rng::{derive_seed, derive_seed_str, rng_from};
use crate::rotation::{axis_angle_from_matrix, rodrigues};

pub use dataset::{read_dataset, write_dataset, DatasetHeader, DATASET_FORMAT, DATASET_VERSION};
pub use normalize::{denormalize, scale_normalize, NormalizedKeypoints, PartRecord, BBOX_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyPoseEntry {
    pub theta_global: [f64; 3],
    pub theta_body: Vec<[f64; 3]>,
    pub provenance: String,
}

/// PCA coefficients of one hand pose in left-hand convention; the right hand
/// uses the same coefficients against the mirrored basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandPoseEntry {
    pub pca: Vec<f64>,
    pub provenance: String,
}

/// Expression coefficients followed by the jaw rotation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionEntry {
    pub psi_face: Vec<f64>,
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub beta: Vec<f64>,
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterBank {
    pub body_poses: Vec<BodyPoseEntry>,
    pub hand_poses: Vec<HandPoseEntry>,
    pub expressions: Vec<ExpressionEntry>,
    pub shapes: Vec<ShapeEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BankConfig {
    pub body_poses: usize,
    pub hand_poses: usize,
    pub expressions: usize,
    pub shapes: usize,
    /// Fraction of each joint's angle range used for sampling.
    pub angle_fraction: f64,
    /// Hand PCA coefficients are drawn from `±hand_pca_range` and then
    /// shrunk towards zero until the pose respects the scaled limits.
    pub hand_pca_range: f64,
    pub expression_range: f64,
    pub shape_range: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            body_poses: 200,
            hand_poses: 200,
            expressions: 100,
            shapes: 100,
            angle_fraction: 0.5,
            hand_pca_range: 2.0,
            expression_range: 1.0,
            shape_range: 2.0,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [self.angle_fraction, self.hand_pca_range, self.expression_range, self.shape_range];
        if ranges.iter().any(|r| !r.is_finite() || *r < 0.0) || self.angle_fraction > 1.0 {
            return Err(Error::InvalidConfig("bank ranges must be finite, nonnegative, angle_fraction ≤ 1".into()));
        }
        if self.shape_range > crate::params::BETA_BOUND {
            return Err(Error::InvalidConfig(format!("shape_range exceeds {}", crate::params::BETA_BOUND)));
        }
        Ok(())
    }
}

fn uniform_in(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn sample_in_limit(rng: &mut impl Rng, limit: Option<AngleLimit>) -> [f64; 3] {
    match limit {
        Some(l) => std::array::from_fn(|i| uniform_in(rng, l.min[i], l.max[i])),
        None => [0.0; 3],
    }
}

/// Largest `t ∈ [0, 1]` with `t · pose` inside the (zero-containing) limits.
fn shrink_into(pose: &[[f64; 3]], limits: &[Option<AngleLimit>]) -> f64 {
    let mut t: f64 = 1.0;
    for (w, lim) in pose.iter().zip(limits) {
        let Some(l) = lim else { continue };
        for i in 0..3 {
            if w[i] > 0.0 && w[i] > l.max[i] {
                t = t.min(l.max[i].max(0.0) / w[i]);
            } else if w[i] < 0.0 && w[i] < l.min[i] {
                t = t.min(l.min[i].min(0.0) / w[i]);
            }
        }
    }
    t.max(0.0)
}

impl ParameterBank {
    /// Procedural bank; deterministic in `(model, cfg, seed)`.
    pub fn procedural(model: &BodyModel, cfg: &BankConfig, seed: u64) -> Result<ParameterBank> {
        cfg.validate()?;
        let dims = model.dims();
        let frac = cfg.angle_fraction;
        let limits: Vec<Option<AngleLimit>> = model.angle_limits.iter().map(|l| l.map(|l| l.scaled(frac))).collect();
        let body = model.body_range();

        let mut rng = rng_from(derive_seed_str(seed, "bank/body"));
        let body_poses = (0..cfg.body_poses)
            .map(|i| BodyPoseEntry {
                theta_global: [0.0; 3],
                theta_body: (body.start + 1..body.end).map(|j| sample_in_limit(&mut rng, limits[j])).collect(),
                provenance: format!("procedural:body:{i}"),
            })
            .collect();

        let mut rng = rng_from(derive_seed_str(seed, "bank/hand"));
        let hand_limits = &limits[model.hand_range(Part::LeftHand)];
        let hand_poses = (0..cfg.hand_poses)
            .map(|i| {
                let mut pca: Vec<f64> =
                    (0..dims.hand_pca).map(|_| uniform_in(&mut rng, -cfg.hand_pca_range, cfg.hand_pca_range)).collect();
                let t = shrink_into(&model.expand_hand(Part::LeftHand, &pca), hand_limits);
                pca.iter_mut().for_each(|c| *c *= t);
                HandPoseEntry { pca, provenance: format!("procedural:hand:{i}") }
            })
            .collect();

        let mut rng = rng_from(derive_seed_str(seed, "bank/expression"));
        let jaw_limit = limits[model.jaw_joint()];
        let expressions = (0..cfg.expressions)
            .map(|i| {
                let mut psi: Vec<f64> = (0..dims.expression)
                    .map(|_| uniform_in(&mut rng, -cfg.expression_range, cfg.expression_range))
                    .collect();
                psi.extend(sample_in_limit(&mut rng, jaw_limit));
                ExpressionEntry { psi_face: psi, provenance: format!("procedural:expression:{i}") }
            })
            .collect();

        let mut rng = rng_from(derive_seed_str(seed, "bank/shape"));
        let shapes = (0..cfg.shapes)
            .map(|i| ShapeEntry {
                beta: (0..dims.shape).map(|_| uniform_in(&mut rng, -cfg.shape_range, cfg.shape_range)).collect(),
                provenance: format!("procedural:shape:{i}"),
            })
            .collect();

        Ok(ParameterBank { body_poses, hand_poses, expressions, shapes })
    }

    /// A bank holding only the rest pose, zero face and mean shape.
    pub fn rest(model: &BodyModel) -> ParameterBank {
        let d = model.dims();
        ParameterBank {
            body_poses: vec![BodyPoseEntry {
                theta_global: [0.0; 3],
                theta_body: vec![[0.0; 3]; d.body_joints - 1],
                provenance: "rest".into(),
            }],
            hand_poses: vec![HandPoseEntry { pca: vec![0.0; d.hand_pca], provenance: "rest".into() }],
            expressions: vec![ExpressionEntry { psi_face: vec![0.0; d.face()], provenance: "rest".into() }],
            shapes: vec![ShapeEntry { beta: vec![0.0; d.shape], provenance: "rest".into() }],
        }
    }

    /// Checks sizes and angle limits. In strict mode the first violation is an
    /// error; otherwise violators are removed and described in the returned report.
    pub fn validate(mut self, model: &BodyModel, strict: bool) -> Result<(ParameterBank, Vec<String>)> {
        let dims = model.dims();
        let body = model.body_range();
        let hand = model.hand_range(Part::LeftHand);
        let jaw = model.jaw_joint();
        let limits = &model.angle_limits;
        let mut report = Vec::new();

        let check = |category: &str, index: usize, provenance: &str, problem: Option<String>| -> Result<bool> {
            match problem {
                None => Ok(true),
                Some(detail) if strict => Err(Error::LimitViolation {
                    category: category.into(),
                    index,
                    provenance: provenance.into(),
                    detail,
                }),
                Some(_) => Ok(false),
            }
        };
        let joint_problem = |j: usize, w: [f64; 3]| -> Option<String> {
            if !w.iter().all(|v| v.is_finite()) {
                return Some(format!("joint {} is not finite", model.joint_tree.names[j]));
            }
            let lim = limits[j]?;
            (!lim.contains(w)).then(|| format!("joint {} = {:?} outside {:?}..{:?}", model.joint_tree.names[j], w, lim.min, lim.max))
        };

        let mut keep = Vec::new();
        for (i, e) in self.body_poses.iter().enumerate() {
            let problem = if e.theta_body.len() != dims.body_joints - 1 {
                Some(format!("expected {} body joints", dims.body_joints - 1))
            } else {
                std::iter::once((0, e.theta_global))
                    .chain(e.theta_body.iter().enumerate().map(|(k, w)| (body.start + 1 + k, *w)))
                    .find_map(|(j, w)| joint_problem(j, w))
            };
            let ok = check("body_poses", i, &e.provenance, problem.clone())?;
            if !ok {
                report.push(format!("body_poses[{i}] ({}): {}", e.provenance, problem.unwrap_or_default()));
            }
            keep.push(ok);
        }
        let mut it = keep.iter();
        self.body_poses.retain(|_| *it.next().unwrap());

        let mut keep = Vec::new();
        for (i, e) in self.hand_poses.iter().enumerate() {
            let problem = if e.pca.len() != dims.hand_pca {
                Some(format!("expected {} PCA coefficients", dims.hand_pca))
            } else {
                model
                    .expand_hand(Part::LeftHand, &e.pca)
                    .into_iter()
                    .enumerate()
                    .find_map(|(k, w)| joint_problem(hand.start + k, w))
            };
            let ok = check("hand_poses", i, &e.provenance, problem.clone())?;
            if !ok {
                report.push(format!("hand_poses[{i}] ({}): {}", e.provenance, problem.unwrap_or_default()));
            }
            keep.push(ok);
        }
        let mut it = keep.iter();
        self.hand_poses.retain(|_| *it.next().unwrap());

        let mut keep = Vec::new();
        for (i, e) in self.expressions.iter().enumerate() {
            let problem = if e.psi_face.len() != dims.face() {
                Some(format!("expected {} face values", dims.face()))
            } else if !e.psi_face.iter().all(|v| v.is_finite()) {
                Some("non-finite expression".into())
            } else {
                let n = e.psi_face.len();
                joint_problem(jaw, [e.psi_face[n - 3], e.psi_face[n - 2], e.psi_face[n - 1]])
            };
            let ok = check("expressions", i, &e.provenance, problem.clone())?;
            if !ok {
                report.push(format!("expressions[{i}] ({}): {}", e.provenance, problem.unwrap_or_default()));
            }
            keep.push(ok);
        }
        let mut it = keep.iter();
        self.expressions.retain(|_| *it.next().unwrap());

        let mut keep = Vec::new();
        for (i, e) in self.shapes.iter().enumerate() {
            let problem = if e.beta.len() != dims.shape {
                Some(format!("expected {} shape coefficients", dims.shape))
            } else {
                e.beta
                    .iter()
                    .find(|b| !b.is_finite() || b.abs() > crate::params::BETA_BOUND)
                    .map(|b| format!("shape coefficient {b} outside ±{}", crate::params::BETA_BOUND))
            };
            let ok = check("shapes", i, &e.provenance, problem.clone())?;
            if !ok {
                report.push(format!("shapes[{i}] ({}): {}", e.provenance, problem.unwrap_or_default()));
            }
            keep.push(ok);
        }
        let mut it = keep.iter();
        self.shapes.retain(|_| *it.next().unwrap());

        Ok((self, report))
    }

    pub fn check_nonempty(&self) -> Result<()> {
        for (name, len) in [
            ("body_poses", self.body_poses.len()),
            ("hand_poses", self.hand_poses.len()),
            ("expressions", self.expressions.len()),
            ("shapes", self.shapes.len()),
        ] {
            if len == 0 {
                return Err(Error::EmptyCategory(name.into()));
            }
        }
        Ok(())
    }

    /// Loads a bank file (JSON) and validates it against `model`.
    pub fn load(path: impl AsRef<Path>, model: &BodyModel, strict: bool) -> Result<(ParameterBank, Vec<String>)> {
        let text = std::fs::read_to_string(path)?;
        let bank: ParameterBank =
            serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("parameter bank: {e}")))?;
        bank.validate(model, strict)
    }
}

/// How the generating perspective camera is drawn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSamplerConfig {
    /// Camera distances as multiples of the rest body extent; one is drawn uniformly.
    pub distance_factors: Vec<f64>,
    /// Number of evenly spaced azimuths about the vertical axis.
    pub azimuths: usize,
    /// Apparent body size: `f = scale · d / extent`, scale drawn from this range (pixels).
    pub scale_px: [f64; 2],
    /// Lateral camera offset, as a fraction of the extent.
    pub offset_fraction: f64,
    pub max_retries: usize,
}

impl Default for CameraSamplerConfig {
    fn default() -> Self {
        CameraSamplerConfig {
            distance_factors: vec![2.0, 5.0, 30.0],
            azimuths: 30,
            scale_px: [400.0, 600.0],
            offset_fraction: 0.05,
            max_retries: 10,
        }
    }
}

impl CameraSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.distance_factors.is_empty() || self.distance_factors.iter().any(|d| !d.is_finite() || *d <= 0.0) {
            return bad("distance_factors must be a nonempty list of positive numbers");
        }
        if self.azimuths == 0 {
            return bad("azimuths must be at least 1");
        }
        if !(self.scale_px[0] > 0.0 && self.scale_px[1] >= self.scale_px[0] && self.scale_px[1].is_finite()) {
            return bad("scale_px must be a positive range");
        }
        if !(self.offset_fraction >= 0.0 && self.offset_fraction.is_finite()) {
            return bad("offset_fraction must be nonnegative");
        }
        if self.max_retries == 0 {
            return bad("max_retries must be at least 1");
        }
        Ok(())
    }
}

/// Label of a distance factor (shortest round-trip decimal).
pub fn distance_label(factor: f64) -> String {
    format!("{factor}")
}

/// Sampled parameters together with the camera draw.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub params: FullParams,
    pub camera: Perspective,
    pub distance_bucket: String,
    pub viewpoint_bucket: usize,
    /// Indices into the bank: body, left hand, right hand, expression, shape.
    pub picks: [usize; 5],
}

fn draw_camera(
    rng: &mut impl Rng,
    cfg: &CameraSamplerConfig,
    extent: f64,
) -> (Perspective, String) {
    let factor = cfg.distance_factors[rng.random_range(0..cfg.distance_factors.len())];
    let d = factor * extent;
    let scale = uniform_in(rng, cfg.scale_px[0], cfg.scale_px[1]);
    let f = scale * d / extent;
    let off = cfg.offset_fraction * extent;
    let tx = uniform_in(rng, -off, off);
    let ty = uniform_in(rng, -off, off);
    (Perspective { fx: f, fy: f, tc: [tx, ty, d] }, distance_label(factor))
}

/// Independent draws from each bank category plus a camera and azimuth.
pub fn sample_full_params(
    model: &BodyModel,
    bank: &ParameterBank,
    cfg: &CameraSamplerConfig,
    seed: u64,
) -> Result<Draw> {
    bank.check_nonempty()?;
    cfg.validate()?;
    let mut rng = rng_from(seed);
    let picks = [
        rng.random_range(0..bank.body_poses.len()),
        rng.random_range(0..bank.hand_poses.len()),
        rng.random_range(0..bank.hand_poses.len()),
        rng.random_range(0..bank.expressions.len()),
        rng.random_range(0..bank.shapes.len()),
    ];
    let view = rng.random_range(0..cfg.azimuths);
    let azimuth = 2.0 * PI * view as f64 / cfg.azimuths as f64;
    let body = &bank.body_poses[picks[0]];
    let global = rodrigues(&Vector3::new(0.0, azimuth, 0.0)) * rodrigues(&Vector3::from(body.theta_global));
    let g = axis_angle_from_matrix(&global);
    let (camera, distance_bucket) = draw_camera(&mut rng, cfg, model.rest_extent());
    let params = FullParams {
        theta_global: [g.x, g.y, g.z],
        theta_body: body.theta_body.clone(),
        hands: HandParams::Pca {
            left: bank.hand_poses[picks[1]].pca.clone(),
            right: bank.hand_poses[picks[2]].pca.clone(),
        },
        psi_face: bank.expressions[picks[3]].psi_face.clone(),
        beta: bank.shapes[picks[4]].beta.clone(),
        camera: CameraModel::Perspective(camera),
    };
    Ok(Draw { params, camera, distance_bucket, viewpoint_bucket: view, picks })
}

/// One paired record of the synthetic training scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub params: FullParams,
    pub j3d: Keypoints3D,
    pub j2d: Keypoints2D,
    pub camera: CameraModel,
    pub distance_bucket: String,
    pub viewpoint_bucket: usize,
    pub rng_seed: u64,
}

/// Skins the drawn parameters, regresses keypoints and projects them with the
/// generating perspective camera. Cameras are redrawn while any keypoint is
/// at or behind the camera plane.
pub fn generate_sample(
    model: &BodyModel,
    bank: &ParameterBank,
    cfg: &CameraSamplerConfig,
    seed: u64,
) -> Result<SyntheticSample> {
    let mut draw = sample_full_params(model, bank, cfg, seed)?;
    let verts = model.skin(&draw.params)?;
    let points: Vec<[f64; 3]> =
        model.regress_keypoints(&verts)?.iter().map(|p| [p.x, p.y, p.z]).collect();
    let j3d = Keypoints3D::new(points, model.keypoint_parts().to_vec());
    let mut retry_rng = rng_from(derive_seed_str(seed, "camera-retry"));
    for attempt in 0..cfg.max_retries {
        if attempt > 0 {
            let (camera, bucket) = draw_camera(&mut retry_rng, cfg, model.rest_extent());
            draw.camera = camera;
            draw.distance_bucket = bucket;
            draw.params.camera = CameraModel::Perspective(camera);
        }
        match draw.params.camera.project(&j3d) {
            Ok(j2d) => {
                return Ok(SyntheticSample {
                    camera: draw.params.camera.clone(),
                    params: draw.params,
                    j3d,
                    j2d,
                    distance_bucket: draw.distance_bucket,
                    viewpoint_bucket: draw.viewpoint_bucket,
                    rng_seed: seed,
                });
            }
            Err(Error::BehindCamera { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::GenerationExhausted(cfg.max_retries))
}

/// `n` samples with per-sample seeds derived from `dataset_seed`.
pub fn generate_dataset(
    model: &BodyModel,
    bank: &ParameterBank,
    cfg: &CameraSamplerConfig,
    n: usize,
    dataset_seed: u64,
) -> Result<Vec<SyntheticSample>> {
    (0..n).map(|i| generate_sample(model, bank, cfg, derive_seed(dataset_seed, i as u64))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartDropout {
    pub body: f64,
    pub left_hand: f64,
    pub right_hand: f64,
    pub face: f64,
}

impl Default for PartDropout {
    fn default() -> Self {
        PartDropout { body: 0.0, left_hand: 0.0, right_hand: 0.0, face: 0.0 }
    }
}

impl PartDropout {
    pub fn get(&self, part: Part) -> f64 {
        match part {
            Part::Body => self.body,
            Part::LeftHand => self.left_hand,
            Part::RightHand => self.right_hand,
            Part::Face => self.face,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DegradeConfig {
    pub keypoint_noise_sigma: f64,
    pub dropout_prob: PartDropout,
    pub seed: u64,
}

impl DegradeConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [self.dropout_prob.body, self.dropout_prob.left_hand, self.dropout_prob.right_hand, self.dropout_prob.face];
        if !(self.keypoint_noise_sigma >= 0.0 && self.keypoint_noise_sigma.is_finite())
            || probs.iter().any(|p| !(0.0..=1.0).contains(p))
        {
            return Err(Error::InvalidConfig("noise sigma must be ≥ 0 and dropout probabilities in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Gaussian pixel noise on visible keypoints and per-part visibility dropout.
pub fn degrade(j2d: &Keypoints2D, cfg: &DegradeConfig) -> Result<Keypoints2D> {
    cfg.validate()?;
    let mut out = j2d.clone();
    let mut rng = rng_from(derive_seed_str(cfg.seed, "degrade"));
    let noise = Normal::new(0.0, cfg.keypoint_noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    for i in 0..out.len() {
        let drop = rng.random::<f64>() < cfg.dropout_prob.get(out.parts[i]);
        let (nx, ny) = (noise.sample(&mut rng), noise.sample(&mut rng));
        if !out.visible[i] {
            continue;
        }
        if drop {
            out.visible[i] = false;
        } else if cfg.keypoint_noise_sigma > 0.0 {
            out.points[i][0] += nx;
            out.points[i][1] += ny;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
