//! Weighted loss terms shared by the fitter and the regressor.
//!
//! Every term is assembled as residual blocks carrying an optional Jacobian
//! over `[pose/face/shape parameters | camera parameters]`, where the camera
//! part uses the natural order of [`CameraModel::params`].

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::bodymodel::BodyModel;
use crate::error::{Error, Result};
use crate::params::FullParams;
use crate::projection::{CameraModel, Keypoints2D, Keypoints3D};
use crate::rotation::{rodrigues, rodrigues_with_jacobian};

pub const DEFAULT_LAMBDA_BETA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_pm: f64,
    pub w_r: f64,
    pub w_2d: f64,
    pub w_3d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_pm: 20.0, w_r: 0.5, w_2d: 6.0, w_3d: 60.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_pm, self.w_r, self.w_2d, self.w_3d];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("loss weights must be finite and non-negative: {all:?}")))
        }
    }
}

/// Supervision available for one frame. At least one entry must be set.
#[derive(Clone, Copy, Debug, Default)]
pub struct Targets<'a> {
    pub j2d: Option<&'a Keypoints2D>,
    pub j3d: Option<&'a Keypoints3D>,
    pub params: Option<&'a FullParams>,
}

impl Targets<'_> {
    pub fn is_empty(&self) -> bool {
        self.j2d.is_none() && self.j3d.is_none() && self.params.is_none()
    }
}

/// Unweighted terms, their weighted sum and the weights used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pm: f64,
    pub l_3d: f64,
    pub l_2d: f64,
    pub l_r: f64,
    pub total: f64,
    pub weights: LossWeights,
    pub lambda_beta: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Term {
    Pm,
    ThreeD,
    TwoD,
    Rationality,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Penalty {
    L1,
    L2,
}

/// `weight · norm · Σ φ(r)` with `φ` the absolute value or the square.
pub(crate) struct Block {
    pub term: Term,
    pub penalty: Penalty,
    pub weight: f64,
    pub norm: f64,
    pub r: DVector<f64>,
    pub jac: Option<DMatrix<f64>>,
}

impl Block {
    fn value(&self) -> f64 {
        let s: f64 = match self.penalty {
            Penalty::L1 => self.r.iter().map(|v| v.abs()).sum(),
            Penalty::L2 => self.r.norm_squared(),
        };
        self.norm * s
    }
}

/// Squared hinge on the joint-angle limits plus `λ_β‖β‖²`.
pub fn rationality_penalty(model: &BodyModel, params: &FullParams, lambda_beta: f64) -> f64 {
    let hinge: f64 = model.limit_excess(params).iter().flat_map(|(_, e)| e.iter()).map(|e| e * e).sum();
    hinge + lambda_beta * params.beta.iter().map(|b| b * b).sum::<f64>()
}

pub fn loss_total(
    model: &BodyModel,
    params: &FullParams,
    targets: Targets<'_>,
    weights: &LossWeights,
    lambda_beta: f64,
) -> Result<LossBreakdown> {
    let blocks = residual_blocks(model, params, targets, weights, lambda_beta, false)?;
    Ok(summarize(&blocks, weights, lambda_beta))
}

/// Loss and its gradient over `[params.to_vec() | params.camera.params()]`.
/// The L1 term uses `sign(0) = 0`.
pub fn loss_gradient(
    model: &BodyModel,
    params: &FullParams,
    targets: Targets<'_>,
    weights: &LossWeights,
    lambda_beta: f64,
) -> Result<(LossBreakdown, DVector<f64>)> {
    let blocks = residual_blocks(model, params, targets, weights, lambda_beta, true)?;
    let n = params.layout(model.dims()).len() + params.camera.params().len();
    let mut g = DVector::zeros(n);
    for b in &blocks {
        let jac = b.jac.as_ref().expect("jacobian requested");
        let psi = b.r.map(|v| match b.penalty {
            Penalty::L1 => v.signum() * (v != 0.0) as u8 as f64,
            Penalty::L2 => 2.0 * v,
        });
        g += jac.tr_mul(&psi) * (b.weight * b.norm);
    }
    Ok((summarize(&blocks, weights, lambda_beta), g))
}

pub(crate) fn summarize(blocks: &[Block], weights: &LossWeights, lambda_beta: f64) -> LossBreakdown {
    let term = |t: Term| blocks.iter().filter(|b| b.term == t).map(Block::value).sum::<f64>();
    let (l_pm, l_3d, l_2d, l_r) = (term(Term::Pm), term(Term::ThreeD), term(Term::TwoD), term(Term::Rationality));
    let total = weights.w_pm * l_pm + weights.w_3d * l_3d + weights.w_2d * l_2d + weights.w_r * l_r;
    LossBreakdown { l_pm, l_3d, l_2d, l_r, total, weights: *weights, lambda_beta }
}

pub(crate) fn residual_blocks(
    model: &BodyModel,
    params: &FullParams,
    targets: Targets<'_>,
    weights: &LossWeights,
    lambda_beta: f64,
    with_jac: bool,
) -> Result<Vec<Block>> {
    if targets.is_empty() {
        return Err(Error::Configuration("the loss needs at least one target".into()));
    }
    let dims = model.dims();
    params.check(dims)?;
    let layout = params.layout(dims);
    let np = layout.len();
    let cam = &params.camera;
    let nc = cam.params().len();
    let width = np + nc;
    let m = model.n_keypoints();
    let mut blocks = Vec::new();

    let (q, jq) = if targets.j2d.is_some() || targets.j3d.is_some() {
        if with_jac {
            let (q, j) = model.keypoints_with_jacobian(params)?;
            (q, Some(j))
        } else {
            (model.keypoints(params)?, None)
        }
    } else {
        (Vec::new(), None)
    };

    if let Some(t) = targets.j2d {
        check_len(t.points.len(), m, "2D target")?;
        blocks.extend(two_d_block(cam, &q, jq.as_ref(), t, weights.w_2d, np, width)?);
    }

    if let Some(t) = targets.j3d {
        check_len(t.points.len(), m, "3D target")?;
        let vis: Vec<usize> = (0..m).filter(|&i| t.visible[i]).collect();
        if !vis.is_empty() {
            let mut r = DVector::zeros(3 * vis.len());
            let mut jac = jq.as_ref().map(|_| DMatrix::zeros(3 * vis.len(), width));
            for (k, &i) in vis.iter().enumerate() {
                let d = q[i] - Vector3::from(t.points[i]);
                r.fixed_rows_mut::<3>(3 * k).copy_from(&d);
                if let (Some(jac), Some(jq)) = (jac.as_mut(), jq.as_ref()) {
                    jac.view_mut((3 * k, 0), (3, np)).copy_from(&jq.rows(3 * i, 3));
                }
            }
            blocks.push(Block {
                term: Term::ThreeD,
                penalty: Penalty::L2,
                weight: weights.w_3d,
                norm: 1.0 / r.len() as f64,
                r,
                jac,
            });
        }
    }

    let map = with_jac.then(|| model.axis_angle_map(&layout));
    let angles = model.joint_axis_angles(params);

    if let Some(gt) = targets.params {
        gt.check(dims)?;
        let k = model.n_joints();
        let gt_angles = model.joint_axis_angles(gt);
        let (ne, ns) = (dims.expression, dims.shape);
        let rows = 9 * k + ne + ns;
        let mut r = DVector::zeros(rows);
        let mut jac = map.as_ref().map(|_| DMatrix::zeros(rows, width));
        for j in 0..k {
            let w = Vector3::from(angles[j]);
            let r_gt = rodrigues(&Vector3::from(gt_angles[j]));
            let (rot, d) = rodrigues_with_jacobian(&w);
            for c in 0..3 {
                for a in 0..3 {
                    r[9 * j + 3 * a + c] = rot[(a, c)] - r_gt[(a, c)];
                }
            }
            if let (Some(jac), Some(map)) = (jac.as_mut(), map.as_ref()) {
                for (i, di) in d.iter().enumerate() {
                    let arow = map.row(3 * j + i);
                    for (col, coef) in arow.iter().enumerate().filter(|(_, v)| **v != 0.0) {
                        for c in 0..3 {
                            for a in 0..3 {
                                jac[(9 * j + 3 * a + c, col)] += coef * di[(a, c)];
                            }
                        }
                    }
                }
            }
        }
        let (e0, s0) = (layout.expression().start, layout.shape().start);
        for i in 0..ne {
            r[9 * k + i] = params.psi_face[i] - gt.psi_face[i];
            if let Some(jac) = jac.as_mut() {
                jac[(9 * k + i, e0 + i)] = 1.0;
            }
        }
        for i in 0..ns {
            r[9 * k + ne + i] = params.beta[i] - gt.beta[i];
            if let Some(jac) = jac.as_mut() {
                jac[(9 * k + ne + i, s0 + i)] = 1.0;
            }
        }
        blocks.push(Block { term: Term::Pm, penalty: Penalty::L2, weight: weights.w_pm, norm: 1.0 / rows as f64, r, jac });
    }

    // rationality: one squared-hinge residual per violated axis, then the shape term
    let mut violated = Vec::new();
    for j in 0..model.n_joints() {
        if let Some(lim) = model.angle_limits[j] {
            let e = lim.excess(angles[j]);
            violated.extend((0..3).filter(|&i| e[i] != 0.0).map(|i| (3 * j + i, e[i])));
        }
    }
    let r = DVector::from_iterator(violated.len(), violated.iter().map(|v| v.1));
    let jac = map.as_ref().map(|map| {
        let mut jac = DMatrix::zeros(violated.len(), width);
        for (k, (row, _)) in violated.iter().enumerate() {
            jac.row_mut(k).columns_mut(0, np).copy_from(&map.row(*row));
        }
        jac
    });
    blocks.push(Block { term: Term::Rationality, penalty: Penalty::L2, weight: weights.w_r, norm: 1.0, r, jac });
    let beta = DVector::from_column_slice(&params.beta);
    let jac = with_jac.then(|| {
        let mut j = DMatrix::zeros(beta.len(), width);
        for i in 0..beta.len() {
            j[(i, layout.shape().start + i)] = 1.0;
        }
        j
    });
    blocks.push(Block {
        term: Term::Rationality,
        penalty: Penalty::L2,
        weight: weights.w_r,
        norm: lambda_beta,
        r: beta,
        jac,
    });
    Ok(blocks)
}

fn check_len(got: usize, want: usize, what: &str) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: expected {want} keypoints, got {got}")))
    }
}

/// Per-coordinate L1 block over visible keypoints. Visible keypoints at or
/// behind the camera plane are an error.
fn two_d_block(
    cam: &CameraModel,
    q: &[Vector3<f64>],
    jq: Option<&DMatrix<f64>>,
    t: &Keypoints2D,
    weight: f64,
    np: usize,
    width: usize,
) -> Result<Option<Block>> {
    let vis: Vec<usize> = (0..q.len()).filter(|&i| t.visible[i]).collect();
    if vis.is_empty() {
        return Ok(None);
    }
    let mut r = DVector::zeros(2 * vis.len());
    let mut jac = jq.map(|_| DMatrix::zeros(2 * vis.len(), width));
    let mut behind = Vec::new();
    for (k, &i) in vis.iter().enumerate() {
        if let Some(jac) = jac.as_mut() {
            let Some(pj) = cam.point_jacobian(&q[i]) else {
                behind.push(i);
                continue;
            };
            r[2 * k] = pj.uv.x - t.points[i][0];
            r[2 * k + 1] = pj.uv.y - t.points[i][1];
            let jq = jq.expect("keypoint jacobian");
            let rows = pj.wrt_point * jq.rows(3 * i, 3);
            jac.view_mut((2 * k, 0), (2, np)).copy_from(&rows);
            jac.view_mut((2 * k, np), (2, width - np)).copy_from(&pj.wrt_camera);
        } else {
            let Some(uv) = cam.project_point(&q[i]) else {
                behind.push(i);
                continue;
            };
            r[2 * k] = uv.x - t.points[i][0];
            r[2 * k + 1] = uv.y - t.points[i][1];
        }
    }
    if !behind.is_empty() {
        return Err(Error::BehindCamera { indices: behind });
    }
    let norm = 1.0 / r.len() as f64;
    Ok(Some(Block { term: Term::TwoD, penalty: Penalty::L1, weight, norm, r, jac }))
}
