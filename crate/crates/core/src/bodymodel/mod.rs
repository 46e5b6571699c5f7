//! Articulated body model: kinematic tree, linear blend skinning and the
//! linear joint regressor.
//!
//! Keypoints are the `K` joints followed by the face landmarks. Both are
//! linear in the skinned vertices, so for fitting and training they are
//! evaluated through a precomputed sparse form
//! `q = Σ_k R_k (a_qk - c_qk J̃_k) + c_qk p_k`
//! (`a_qk`, `c_qk` = regressor × skin weights, affine in shape and expression),
//! which matches `regress(skin(θ, β, ψ))` to rounding and has a cheap
//! analytic Jacobian.

mod io;
mod toy;

use std::collections::BTreeMap;
use std::ops::{Deref, Range};

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{FullParams, HandParams, ModelDims, ParamLayout};
use crate::projection::{Keypoints3D, Part};
use crate::rotation::{rodrigues, rodrigues_with_jacobian};

pub use io::{load_model, save_model, MODEL_FORMAT_VERSION};
pub use toy::{ToyModelConfig, MIN_VERTICES_PER_RING};

/// Tolerance on the regressor's rest-pose error.
pub const DEFAULT_EPSILON_MODEL: f64 = 1e-2;

const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    Body,
    LeftHand,
    RightHand,
    Jaw,
}

impl JointKind {
    pub fn part(self) -> Part {
        match self {
            JointKind::Body => Part::Body,
            JointKind::LeftHand => Part::LeftHand,
            JointKind::RightHand => Part::RightHand,
            JointKind::Jaw => Part::Face,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointTree {
    pub names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub kinds: Vec<JointKind>,
    /// Offset from the parent's rest position (the root's is absolute).
    pub rest_offsets: Vec<[f64; 3]>,
}

impl JointTree {
    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.len();
        let bad = |m: String| Err(Error::Malformed(format!("joint tree: {m}")));
        if k == 0 || self.names.len() != k || self.kinds.len() != k || self.rest_offsets.len() != k {
            return bad("inconsistent or empty joint arrays".into());
        }
        if self.parents[0].is_some() || self.parents.iter().filter(|p| p.is_none()).count() != 1 {
            return bad("expected exactly one root at index 0".into());
        }
        for (i, p) in self.parents.iter().enumerate().skip(1) {
            if p.is_none_or(|p| p >= i) {
                return bad(format!("joint {i} is not in topological order"));
            }
        }
        for kind in [JointKind::Body, JointKind::LeftHand, JointKind::RightHand, JointKind::Jaw] {
            let members: Vec<usize> = (0..k).filter(|&i| self.kinds[i] == kind).collect();
            let Some((&first, &last)) = members.first().zip(members.last()) else {
                continue;
            };
            if last - first + 1 != members.len() {
                return bad(format!("{kind:?} joints are not contiguous"));
            }
            // Every group hangs off a single attachment joint (fingers all
            // start at the wrist).
            let mut attachments: Vec<Option<usize>> = members
                .iter()
                .filter(|&&i| self.parents[i].is_none_or(|p| self.kinds[p] != kind))
                .map(|&i| self.parents[i])
                .collect();
            attachments.dedup();
            if attachments.len() != 1 {
                return bad(format!("{kind:?} joints are not attached at a single joint"));
            }
        }
        if self.rest_offsets.iter().flatten().any(|v| !v.is_finite()) {
            return bad("non-finite rest offset".into());
        }
        Ok(())
    }

    pub fn rest_positions(&self) -> Vec<Vector3<f64>> {
        let mut out: Vec<Vector3<f64>> = Vec::with_capacity(self.len());
        for (i, o) in self.rest_offsets.iter().enumerate() {
            let o = Vector3::from(*o);
            out.push(match self.parents[i] {
                Some(p) => out[p] + o,
                None => o,
            });
        }
        out
    }

    pub fn range_of(&self, kind: JointKind) -> Range<usize> {
        let first = self.kinds.iter().position(|&k| k == kind);
        match first {
            Some(f) => f..f + self.kinds.iter().filter(|&&k| k == kind).count(),
            None => 0..0,
        }
    }
}

/// Per-axis bounds on a joint's axis-angle components, radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleLimit {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl AngleLimit {
    /// Signed excess beyond the bounds per axis (0 inside).
    pub fn excess(&self, w: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|i| {
            if w[i] > self.max[i] {
                w[i] - self.max[i]
            } else if w[i] < self.min[i] {
                w[i] - self.min[i]
            } else {
                0.0
            }
        })
    }

    pub fn contains(&self, w: [f64; 3]) -> bool {
        (0..3).all(|i| w[i] >= self.min[i] && w[i] <= self.max[i])
    }

    /// Range scaled about zero by `fraction` (0 collapses to the rest pose).
    pub fn scaled(&self, fraction: f64) -> AngleLimit {
        AngleLimit { min: self.min.map(|v| v * fraction), max: self.max.map(|v| v * fraction) }
    }
}

/// Hand pose PCA rows, each of length `3 × hand joints`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandPcaBasis {
    pub left: Vec<Vec<f64>>,
    pub right: Vec<Vec<f64>>,
}

/// Serialized content of a body model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelData {
    pub seed: u64,
    pub config: ToyModelConfig,
    pub joint_tree: JointTree,
    pub template_vertices: Vec<[f64; 3]>,
    pub shape_basis: Vec<Vec<[f64; 3]>>,
    pub expression_basis: Vec<Vec<[f64; 3]>>,
    /// N × K.
    pub skin_weights: Vec<Vec<f64>>,
    /// K × N.
    pub joint_regressor: Vec<Vec<f64>>,
    /// Face landmarks, L × N.
    pub landmark_regressor: Vec<Vec<f64>>,
    pub hand_pca_basis: HandPcaBasis,
    pub angle_limits: Vec<Option<AngleLimit>>,
    /// Only used for mesh export.
    pub triangles: Vec<[u32; 3]>,
    pub vertices_per_ring: usize,
    /// Largest rest-pose distance between regressed and kinematic joints.
    pub epsilon_model: f64,
}

/// One nonzero `(keypoint, joint)` entry of the sparse keypoint form.
#[derive(Clone, Debug)]
struct Term {
    joint: usize,
    c: f64,
    a0: Vector3<f64>,
    a_shape: Vec<Vector3<f64>>,
    a_expr: Vec<Vector3<f64>>,
}

#[derive(Clone, Debug)]
struct Cache {
    dims: ModelDims,
    rest_joints: Vec<Vector3<f64>>,
    /// `P_3D · S_b` per shape mode.
    joint_shape_dirs: Vec<Vec<Vector3<f64>>>,
    ancestors: Vec<Vec<usize>>,
    terms: Vec<Vec<Term>>,
    parts: Vec<Part>,
    left_hand: Range<usize>,
    right_hand: Range<usize>,
    jaw: usize,
    body: Range<usize>,
    skin_sparse: Vec<Vec<(usize, f64)>>,
    regressor_sparse: Vec<Vec<(usize, f64)>>,
}

/// Immutable body model; cheap to share across threads.
#[derive(Clone, Debug)]
pub struct BodyModel {
    data: ModelData,
    cache: Cache,
}

impl PartialEq for BodyModel {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

impl Deref for BodyModel {
    type Target = ModelData;

    fn deref(&self) -> &ModelData {
        &self.data
    }
}

/// Result of forward kinematics.
#[derive(Clone, Debug)]
pub struct Posed {
    /// Local rotation of each joint.
    pub local: Vec<Matrix3<f64>>,
    /// World rotation of each joint.
    pub rotations: Vec<Matrix3<f64>>,
    /// Posed joint positions (`J_3D^fk`).
    pub joints: Vec<Vector3<f64>>,
    /// Rest joints displaced by shape.
    pub shaped_rest: Vec<Vector3<f64>>,
}

impl Posed {
    /// Transform taking a shaped rest-pose point to its posed position under joint `k`.
    pub fn relative(&self, k: usize) -> (Matrix3<f64>, Vector3<f64>) {
        let r = self.rotations[k];
        (r, self.joints[k] - r * self.shaped_rest[k])
    }
}

fn sparse_rows(rows: &[Vec<f64>]) -> Vec<Vec<(usize, f64)>> {
    rows.iter()
        .map(|r| r.iter().enumerate().filter(|(_, w)| **w != 0.0).map(|(i, w)| (i, *w)).collect())
        .collect()
}

fn check_convex_rows(rows: &[Vec<f64>], width: usize, what: &str) -> Result<()> {
    for (i, r) in rows.iter().enumerate() {
        if r.len() != width {
            return Err(Error::Malformed(format!("{what} row {i}: expected {width} columns, got {}", r.len())));
        }
        if r.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Malformed(format!("{what} row {i} has a negative or non-finite weight")));
        }
        let sum: f64 = r.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::Malformed(format!("{what} row {i} sums to {sum}")));
        }
    }
    Ok(())
}

fn check_orthonormal(rows: &[Vec<f64>], width: usize, what: &str) -> Result<()> {
    for (i, a) in rows.iter().enumerate() {
        if a.len() != width {
            return Err(Error::Malformed(format!("{what} row {i}: expected {width} columns")));
        }
        for (j, b) in rows.iter().enumerate().take(i + 1) {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (dot - want).abs() > ROW_SUM_TOL {
                return Err(Error::Malformed(format!("{what} rows {i},{j} are not orthonormal ({dot})")));
            }
        }
    }
    Ok(())
}

impl BodyModel {
    /// Procedurally builds the toy model; deterministic in `(cfg, seed)`.
    pub fn toy(cfg: &ToyModelConfig, seed: u64) -> Result<BodyModel> {
        BodyModel::from_data(toy::build(cfg, seed)?)
    }

    /// Validates model data and precomputes the evaluation caches.
    pub fn from_data(data: ModelData) -> Result<BodyModel> {
        let tree = &data.joint_tree;
        tree.validate()?;
        let k = tree.len();
        let n = data.template_vertices.len();
        let malformed = |m: String| Err(Error::Malformed(m));
        if n == 0 || data.skin_weights.len() != n {
            return malformed(format!("expected {n} skin weight rows, got {}", data.skin_weights.len()));
        }
        if data.joint_regressor.len() != k {
            return malformed(format!("expected {k} joint regressor rows"));
        }
        if data.angle_limits.len() != k {
            return malformed(format!("expected {k} angle limits"));
        }
        for (what, basis) in [("shape", &data.shape_basis), ("expression", &data.expression_basis)] {
            if basis.iter().any(|b| b.len() != n) {
                return malformed(format!("{what} basis rows must have {n} vertices"));
            }
        }
        let all_finite = data
            .template_vertices
            .iter()
            .chain(data.shape_basis.iter().flatten())
            .chain(data.expression_basis.iter().flatten())
            .flatten()
            .all(|v| v.is_finite());
        if !all_finite {
            return malformed("non-finite vertex data".into());
        }
        check_convex_rows(&data.skin_weights, k, "skin weight")?;
        check_convex_rows(&data.joint_regressor, n, "joint regressor")?;
        check_convex_rows(&data.landmark_regressor, n, "landmark regressor")?;

        let left_hand = tree.range_of(JointKind::LeftHand);
        let right_hand = tree.range_of(JointKind::RightHand);
        let body = tree.range_of(JointKind::Body);
        let jaw_range = tree.range_of(JointKind::Jaw);
        if body.start != 0 || jaw_range.len() != 1 || left_hand.is_empty() || left_hand.len() != right_hand.len() {
            return malformed("joint groups must be: body (from the root), one jaw, two equal hands".into());
        }
        let hand_dof = 3 * left_hand.len();
        let pca = &data.hand_pca_basis;
        if pca.left.is_empty() || pca.left.len() != pca.right.len() {
            return malformed("hand PCA bases must be nonempty and of equal size".into());
        }
        check_orthonormal(&pca.left, hand_dof, "left hand PCA")?;
        check_orthonormal(&pca.right, hand_dof, "right hand PCA")?;
        if data.triangles.iter().flatten().any(|&i| i as usize >= n) {
            return malformed("triangle index out of range".into());
        }

        let dims = ModelDims {
            body_joints: body.len(),
            hand_joints: left_hand.len(),
            hand_pca: pca.left.len(),
            expression: data.expression_basis.len(),
            shape: data.shape_basis.len(),
        };
        let skin_sparse = sparse_rows(&data.skin_weights);
        let mut regressor_sparse = sparse_rows(&data.joint_regressor);
        regressor_sparse.extend(sparse_rows(&data.landmark_regressor));

        let joint_shape_dirs = data
            .shape_basis
            .iter()
            .map(|basis| {
                regressor_sparse[..k]
                    .iter()
                    .map(|row| row.iter().map(|&(i, w)| Vector3::from(basis[i]) * w).sum())
                    .collect()
            })
            .collect();

        let terms = regressor_sparse
            .iter()
            .map(|row| {
                let mut acc: BTreeMap<usize, Term> = BTreeMap::new();
                for &(v, p) in row {
                    for &(j, w) in &skin_sparse[v] {
                        let pw = p * w;
                        let t = acc.entry(j).or_insert_with(|| Term {
                            joint: j,
                            c: 0.0,
                            a0: Vector3::zeros(),
                            a_shape: vec![Vector3::zeros(); dims.shape],
                            a_expr: vec![Vector3::zeros(); dims.expression],
                        });
                        t.c += pw;
                        t.a0 += Vector3::from(data.template_vertices[v]) * pw;
                        for (b, basis) in data.shape_basis.iter().enumerate() {
                            t.a_shape[b] += Vector3::from(basis[v]) * pw;
                        }
                        for (e, basis) in data.expression_basis.iter().enumerate() {
                            t.a_expr[e] += Vector3::from(basis[v]) * pw;
                        }
                    }
                }
                acc.into_values().collect()
            })
            .collect();

        let ancestors = (0..k)
            .map(|j| {
                let mut chain = vec![j];
                let mut cur = j;
                while let Some(p) = tree.parents[cur] {
                    chain.push(p);
                    cur = p;
                }
                chain
            })
            .collect();

        let mut parts: Vec<Part> = tree.kinds.iter().map(|k| k.part()).collect();
        parts.extend(std::iter::repeat_n(Part::Face, data.landmark_regressor.len()));

        let cache = Cache {
            dims,
            rest_joints: tree.rest_positions(),
            joint_shape_dirs,
            ancestors,
            terms,
            parts,
            left_hand,
            right_hand,
            jaw: jaw_range.start,
            body,
            skin_sparse,
            regressor_sparse,
        };
        Ok(BodyModel { data, cache })
    }

    pub fn data(&self) -> &ModelData {
        &self.data
    }

    pub fn into_data(self) -> ModelData {
        self.data
    }

    pub fn dims(&self) -> ModelDims {
        self.cache.dims
    }

    pub fn layout(&self, hands_pca: bool) -> ParamLayout {
        ParamLayout::new(self.cache.dims, hands_pca)
    }

    pub fn n_joints(&self) -> usize {
        self.joint_tree.len()
    }

    pub fn n_vertices(&self) -> usize {
        self.template_vertices.len()
    }

    /// Joints plus face landmarks.
    pub fn n_keypoints(&self) -> usize {
        self.cache.terms.len()
    }

    /// Part tag of each keypoint.
    pub fn keypoint_parts(&self) -> &[Part] {
        &self.cache.parts
    }

    /// Keypoint indices belonging to `part`.
    pub fn part_indices(&self, part: Part) -> Vec<usize> {
        (0..self.n_keypoints()).filter(|&i| self.cache.parts[i] == part).collect()
    }

    pub fn body_range(&self) -> Range<usize> {
        self.cache.body.clone()
    }

    pub fn hand_range(&self, part: Part) -> Range<usize> {
        match part {
            Part::LeftHand => self.cache.left_hand.clone(),
            Part::RightHand => self.cache.right_hand.clone(),
            _ => 0..0,
        }
    }

    pub fn jaw_joint(&self) -> usize {
        self.cache.jaw
    }

    pub fn rest_joints(&self) -> &[Vector3<f64>] {
        &self.cache.rest_joints
    }

    pub fn shaped_rest_joints(&self, beta: &[f64]) -> Vec<Vector3<f64>> {
        let mut out = self.cache.rest_joints.clone();
        for (b, dirs) in beta.iter().zip(&self.cache.joint_shape_dirs) {
            if *b != 0.0 {
                out.iter_mut().zip(dirs).for_each(|(j, d)| *j += d * *b);
            }
        }
        out
    }

    /// Diameter of the smallest root-centred sphere holding all rest keypoints.
    pub fn rest_extent(&self) -> f64 {
        let rest = self.rest_keypoints();
        let root = self.cache.rest_joints[0];
        2.0 * rest.iter().map(|p| (p - root).norm()).fold(0.0, f64::max)
    }

    /// Vertical span of the rest body joints.
    pub fn rest_body_height(&self) -> f64 {
        let ys = self.cache.rest_joints[self.cache.body.clone()].iter().map(|p| p.y);
        let (lo, hi) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
        hi - lo
    }

    /// Keypoints of the rest pose with zero shape and expression.
    pub fn rest_keypoints(&self) -> Vec<Vector3<f64>> {
        self.cache
            .terms
            .iter()
            .map(|terms| {
                terms.iter().map(|t| t.a0).sum()
            })
            .collect()
    }

    /// Expands hand PCA coefficients into per-joint axis-angles.
    pub fn expand_hand(&self, part: Part, coeffs: &[f64]) -> Vec<[f64; 3]> {
        let basis = match part {
            Part::RightHand => &self.hand_pca_basis.right,
            _ => &self.hand_pca_basis.left,
        };
        let mut flat = vec![0.0; 3 * self.cache.dims.hand_joints];
        for (c, row) in coeffs.iter().zip(basis) {
            flat.iter_mut().zip(row).for_each(|(f, r)| *f += c * r);
        }
        flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    /// Least-squares PCA coefficients of a full hand pose (orthonormal projection).
    pub fn project_hand(&self, part: Part, pose: &[[f64; 3]]) -> Vec<f64> {
        let basis = match part {
            Part::RightHand => &self.hand_pca_basis.right,
            _ => &self.hand_pca_basis.left,
        };
        basis.iter().map(|row| row.iter().zip(pose.iter().flatten()).map(|(a, b)| a * b).sum()).collect()
    }

    /// Local axis-angle of every joint, hands expanded.
    pub fn joint_axis_angles(&self, params: &FullParams) -> Vec<[f64; 3]> {
        let k = self.n_joints();
        let mut out = vec![[0.0; 3]; k];
        out[0] = params.theta_global;
        for (i, w) in params.theta_body.iter().enumerate() {
            out[self.cache.body.start + 1 + i] = *w;
        }
        out[self.cache.jaw] = params.jaw();
        let (left, right) = match &params.hands {
            HandParams::Pca { left, right } => {
                (self.expand_hand(Part::LeftHand, left), self.expand_hand(Part::RightHand, right))
            }
            HandParams::Full { left, right } => (left.clone(), right.clone()),
        };
        for (i, w) in left.into_iter().enumerate() {
            out[self.cache.left_hand.start + i] = w;
        }
        for (i, w) in right.into_iter().enumerate() {
            out[self.cache.right_hand.start + i] = w;
        }
        out
    }

    /// Parameter-vector column of component 0 of joint `j`'s rotation, when
    /// the joint is directly parameterized (not through hand PCA).
    fn joint_column(&self, layout: &ParamLayout, j: usize) -> Option<usize> {
        let c = &self.cache;
        if j == 0 {
            Some(0)
        } else if c.body.contains(&j) {
            Some(layout.body().start + 3 * (j - c.body.start - 1))
        } else if j == c.jaw {
            Some(layout.jaw().start)
        } else if layout.hands_pca {
            None
        } else if c.left_hand.contains(&j) {
            Some(layout.left_hand().start + 3 * (j - c.left_hand.start))
        } else if c.right_hand.contains(&j) {
            Some(layout.right_hand().start + 3 * (j - c.right_hand.start))
        } else {
            None
        }
    }

    /// Constant linear map (`3K × P`) from the flat parameter vector to the
    /// stacked joint axis-angles.
    pub fn axis_angle_map(&self, layout: &ParamLayout) -> DMatrix<f64> {
        let k = self.n_joints();
        let mut map = DMatrix::zeros(3 * k, layout.len());
        for j in 0..k {
            if let Some(col) = self.joint_column(layout, j) {
                for i in 0..3 {
                    map[(3 * j + i, col + i)] = 1.0;
                }
            } else {
                let (rows, local, start) = if self.cache.left_hand.contains(&j) {
                    (&self.hand_pca_basis.left, j - self.cache.left_hand.start, layout.left_hand().start)
                } else {
                    (&self.hand_pca_basis.right, j - self.cache.right_hand.start, layout.right_hand().start)
                };
                for (r, row) in rows.iter().enumerate() {
                    for i in 0..3 {
                        map[(3 * j + i, start + r)] = row[3 * local + i];
                    }
                }
            }
        }
        map
    }

    pub fn forward_kinematics(&self, params: &FullParams) -> Result<Posed> {
        params.check(self.cache.dims)?;
        let aa = self.joint_axis_angles(params);
        let shaped_rest = self.shaped_rest_joints(&params.beta);
        let local: Vec<Matrix3<f64>> = aa.iter().map(|w| rodrigues(&Vector3::from(*w))).collect();
        let (rotations, joints) = self.chain(&local, &shaped_rest);
        Ok(Posed { local, rotations, joints, shaped_rest })
    }

    fn chain(
        &self,
        local: &[Matrix3<f64>],
        shaped: &[Vector3<f64>],
    ) -> (Vec<Matrix3<f64>>, Vec<Vector3<f64>>) {
        let k = local.len();
        let mut rot: Vec<Matrix3<f64>> = Vec::with_capacity(k);
        let mut pos: Vec<Vector3<f64>> = Vec::with_capacity(k);
        for j in 0..k {
            match self.joint_tree.parents[j] {
                Some(p) => {
                    rot.push(rot[p] * local[j]);
                    pos.push(pos[p] + rot[p] * (shaped[j] - shaped[p]));
                }
                None => {
                    rot.push(local[j]);
                    pos.push(shaped[j]);
                }
            }
        }
        (rot, pos)
    }

    /// Shaped and expression-displaced rest vertices.
    pub fn rest_vertices(&self, beta: &[f64], expression: &[f64]) -> Vec<Vector3<f64>> {
        let mut v: Vec<Vector3<f64>> = self.template_vertices.iter().map(|p| Vector3::from(*p)).collect();
        for (coef, basis) in beta.iter().zip(&self.shape_basis).chain(expression.iter().zip(&self.expression_basis)) {
            if *coef != 0.0 {
                v.iter_mut().zip(basis).for_each(|(v, d)| *v += Vector3::from(*d) * *coef);
            }
        }
        v
    }

    /// Linear blend skinning.
    pub fn skin(&self, params: &FullParams) -> Result<Vec<Vector3<f64>>> {
        let posed = self.forward_kinematics(params)?;
        let transforms: Vec<_> = (0..self.n_joints()).map(|k| posed.relative(k)).collect();
        let rest = self.rest_vertices(&params.beta, params.expression());
        Ok(rest
            .iter()
            .zip(&self.cache.skin_sparse)
            .map(|(v, weights)| {
                let mut out = Vector3::zeros();
                for &(k, w) in weights {
                    let (r, t) = &transforms[k];
                    out += (r * v + t) * w;
                }
                out
            })
            .collect())
    }

    fn regress_rows(&self, rows: &[Vec<(usize, f64)>], vertices: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        if vertices.len() != self.n_vertices() {
            return Err(Error::Shape(format!(
                "expected {} vertices, got {}",
                self.n_vertices(),
                vertices.len()
            )));
        }
        Ok(rows.iter().map(|row| row.iter().map(|&(i, w)| vertices[i] * w).sum()).collect())
    }

    /// `J_3D = P_3D · V` for the `K` joints.
    pub fn regress_joints(&self, vertices: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        self.regress_rows(&self.cache.regressor_sparse[..self.n_joints()], vertices)
    }

    /// Joints followed by face landmarks.
    pub fn regress_keypoints(&self, vertices: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>> {
        self.regress_rows(&self.cache.regressor_sparse, vertices)
    }

    fn term_anchor(&self, t: &Term, beta: &[f64], expression: &[f64]) -> Vector3<f64> {
        let mut a = t.a0;
        for (b, d) in beta.iter().zip(&t.a_shape) {
            a += d * *b;
        }
        for (e, d) in expression.iter().zip(&t.a_expr) {
            a += d * *e;
        }
        a
    }

    /// All keypoints through the sparse path.
    pub fn keypoints(&self, params: &FullParams) -> Result<Vec<Vector3<f64>>> {
        let posed = self.forward_kinematics(params)?;
        Ok(self
            .cache
            .terms
            .iter()
            .map(|terms| {
                terms
                    .iter()
                    .map(|t| {
                        let a = self.term_anchor(t, &params.beta, params.expression());
                        posed.rotations[t.joint] * (a - posed.shaped_rest[t.joint] * t.c) + posed.joints[t.joint] * t.c
                    })
                    .sum()
            })
            .collect())
    }

    /// Keypoints wrapped with all-visible flags and part tags.
    pub fn keypoints3d(&self, params: &FullParams) -> Result<Keypoints3D> {
        let points = self.keypoints(params)?.iter().map(|p| [p.x, p.y, p.z]).collect();
        Ok(Keypoints3D::new(points, self.cache.parts.clone()))
    }

    /// Keypoints and their Jacobian (`3M × P`, row `3q + axis`) with respect to
    /// the flat parameter vector of `params`' layout.
    pub fn keypoints_with_jacobian(&self, params: &FullParams) -> Result<(Vec<Vector3<f64>>, DMatrix<f64>)> {
        params.check(self.cache.dims)?;
        let layout = params.layout(self.cache.dims);
        let k = self.n_joints();
        let aa = self.joint_axis_angles(params);
        let shaped = self.shaped_rest_joints(&params.beta);
        let mut local = Vec::with_capacity(k);
        let mut dlocal = Vec::with_capacity(k);
        for w in &aa {
            let (r, d) = rodrigues_with_jacobian(&Vector3::from(*w));
            local.push(r);
            dlocal.push(d);
        }
        let (rot, pos) = self.chain(&local, &shaped);

        // World-frame rotation generators: ∂R_k/∂w_{j,i} = [ω_{j,i}]× R_k for k below j.
        let omegas: Vec<[Vector3<f64>; 3]> = (0..k)
            .map(|j| {
                let parent_rot = self.joint_tree.parents[j].map_or(Matrix3::identity(), |p| rot[p]);
                std::array::from_fn(|i| {
                    let m = dlocal[j][i] * local[j].transpose();
                    parent_rot * Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
                })
            })
            .collect();

        // ∂p_k/∂β_b
        let nb = self.cache.dims.shape;
        let mut dpos = vec![vec![Vector3::zeros(); k]; nb];
        for (b, dirs) in self.cache.joint_shape_dirs.iter().enumerate() {
            for j in 0..k {
                dpos[b][j] = match self.joint_tree.parents[j] {
                    Some(p) => dpos[b][p] + rot[p] * (dirs[j] - dirs[p]),
                    None => dirs[j],
                };
            }
        }

        let m = self.n_keypoints();
        let mut jac = DMatrix::zeros(3 * m, layout.len());
        let mut points = Vec::with_capacity(m);
        let mut sub_sum = vec![Vector3::zeros(); k];
        let mut sub_c = vec![0.0; k];
        let mut marked = vec![false; k];
        let mut touched: Vec<usize> = Vec::new();
        let expr = params.expression();
        let hand_pca = match &params.hands {
            HandParams::Pca { .. } => Some(&self.hand_pca_basis),
            HandParams::Full { .. } => None,
        };

        for (q, terms) in self.cache.terms.iter().enumerate() {
            let mut point = Vector3::zeros();
            for t in terms {
                let a = self.term_anchor(t, &params.beta, expr);
                let u = rot[t.joint] * (a - shaped[t.joint] * t.c) + pos[t.joint] * t.c;
                point += u;
                for &j in &self.cache.ancestors[t.joint] {
                    if !marked[j] {
                        marked[j] = true;
                        touched.push(j);
                    }
                    sub_sum[j] += u;
                    sub_c[j] += t.c;
                }
                for b in 0..nb {
                    let d = rot[t.joint] * (t.a_shape[b] - self.cache.joint_shape_dirs[b][t.joint] * t.c)
                        + dpos[b][t.joint] * t.c;
                    let col = layout.shape().start + b;
                    for ax in 0..3 {
                        jac[(3 * q + ax, col)] += d[ax];
                    }
                }
                for (e, ae) in t.a_expr.iter().enumerate() {
                    let d = rot[t.joint] * ae;
                    let col = layout.expression().start + e;
                    for ax in 0..3 {
                        jac[(3 * q + ax, col)] += d[ax];
                    }
                }
            }
            points.push(point);

            for &j in &touched {
                let lever = sub_sum[j] - pos[j] * sub_c[j];
                for (i, omega) in omegas[j].iter().enumerate() {
                    let d = omega.cross(&lever);
                    if let Some(col) = self.joint_column(&layout, j) {
                        for ax in 0..3 {
                            jac[(3 * q + ax, col + i)] += d[ax];
                        }
                    } else if let Some(basis) = hand_pca {
                        let (rows, local_j, start) = if self.cache.left_hand.contains(&j) {
                            (&basis.left, j - self.cache.left_hand.start, layout.left_hand().start)
                        } else {
                            (&basis.right, j - self.cache.right_hand.start, layout.right_hand().start)
                        };
                        for (r, row) in rows.iter().enumerate() {
                            let coef = row[3 * local_j + i];
                            if coef != 0.0 {
                                for ax in 0..3 {
                                    jac[(3 * q + ax, start + r)] += coef * d[ax];
                                }
                            }
                        }
                    }
                }
                sub_sum[j] = Vector3::zeros();
                sub_c[j] = 0.0;
                marked[j] = false;
            }
            touched.clear();
        }
        Ok((points, jac))
    }

    /// Joints whose axis-angle lies outside its limits, with the offending excess.
    pub fn limit_excess(&self, params: &FullParams) -> Vec<(usize, [f64; 3])> {
        self.joint_axis_angles(params)
            .into_iter()
            .enumerate()
            .filter_map(|(j, w)| {
                let lim = self.angle_limits[j]?;
                let e = lim.excess(w);
                (e != [0.0; 3]).then_some((j, e))
            })
            .collect()
    }
}
