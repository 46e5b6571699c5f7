//! Procedural construction of the toy whole-body model.
//!
//! The skeleton is a fixed humanoid layout (22 body joints, a jaw and two
//! hands) in metres, y up, body facing -z. Every joint owns one bone (towards
//! its primary child, or a virtual tip for leaves) carrying `rings_per_bone`
//! vertex rings; ring 0 is centred on the joint itself so the joint regressor,
//! which averages that ring, reproduces the rest joints up to rounding.

use std::f64::consts::PI;

use nalgebra::Vector3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AngleLimit, HandPcaBasis, JointKind, JointTree, ModelData};
use crate::error::{Error, Result};
use crate::rng::{derive_seed_str, rng_from};

/// Smallest ring size accepted by the builder.
pub const MIN_VERTICES_PER_RING: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    pub n_vertices: usize,
    pub rings_per_bone: usize,
    pub vertices_per_ring: usize,
    pub fingers_per_hand: usize,
    pub joints_per_finger: usize,
    pub jaw_joints: usize,
    pub n_shape: usize,
    pub n_expression: usize,
    pub hand_pca: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        ToyModelConfig {
            n_vertices: 1024,
            rings_per_bone: 2,
            vertices_per_ring: 8,
            fingers_per_hand: 5,
            joints_per_finger: 3,
            jaw_joints: 1,
            n_shape: 10,
            n_expression: 10,
            hand_pca: 6,
        }
    }
}

impl ToyModelConfig {
    pub fn joint_count(&self) -> usize {
        BODY.len() + self.jaw_joints + 2 * self.fingers_per_hand * self.joints_per_finger
    }

    /// Vertices placed on bone rings; the remaining ones are scattered inside bones.
    pub fn ring_vertices(&self) -> usize {
        self.joint_count() * self.rings_per_bone * self.vertices_per_ring
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.fingers_per_hand == 0 || self.joints_per_finger == 0 {
            return bad("hand groups need at least one joint".into());
        }
        if self.jaw_joints != 1 {
            return bad(format!("exactly one jaw joint is supported, got {}", self.jaw_joints));
        }
        if self.fingers_per_hand > FINGERS.len() {
            return bad(format!("at most {} fingers per hand", FINGERS.len()));
        }
        if self.rings_per_bone == 0 {
            return bad("rings_per_bone must be at least 1".into());
        }
        if self.vertices_per_ring < MIN_VERTICES_PER_RING {
            return bad(format!("vertices_per_ring must be at least {MIN_VERTICES_PER_RING}"));
        }
        let budget = self.ring_vertices();
        if self.n_vertices < budget {
            return bad(format!(
                "n_vertices = {} is below the ring budget {} ({} joints x {} rings x {})",
                self.n_vertices,
                budget,
                self.joint_count(),
                self.rings_per_bone,
                self.vertices_per_ring
            ));
        }
        let hand_dof = 3 * self.fingers_per_hand * self.joints_per_finger;
        if self.hand_pca == 0 || self.hand_pca > hand_dof {
            return bad(format!("hand_pca must lie in 1..={hand_dof}"));
        }
        Ok(())
    }
}

struct BodyJoint {
    name: &'static str,
    parent: Option<usize>,
    position: [f64; 3],
    radius: f64,
    limit: Option<([f64; 3], [f64; 3])>,
}

const fn bj(
    name: &'static str,
    parent: Option<usize>,
    position: [f64; 3],
    radius: f64,
    limit: Option<([f64; 3], [f64; 3])>,
) -> BodyJoint {
    BodyJoint { name, parent, position, radius, limit }
}

const SPINE: Option<([f64; 3], [f64; 3])> = Some(([-0.4, -0.4, -0.3], [0.6, 0.4, 0.3]));

// Left-side limits; right-side joints mirror them (see `mirror_limit`).
const BODY: [BodyJoint; 22] = [
    bj("pelvis", None, [0.0, 0.0, 0.0], 0.14, None),
    bj("l_hip", Some(0), [0.09, -0.09, 0.0], 0.08, Some(([-0.5, -0.6, -0.3], [1.6, 0.6, 0.8]))),
    bj("r_hip", Some(0), [-0.09, -0.09, 0.0], 0.08, Some(([-0.5, -0.6, -0.3], [1.6, 0.6, 0.8]))),
    bj("spine1", Some(0), [0.0, 0.11, 0.01], 0.13, SPINE),
    bj("l_knee", Some(1), [0.10, -0.47, 0.0], 0.055, Some(([-2.3, -0.1, -0.1], [0.0, 0.1, 0.1]))),
    bj("r_knee", Some(2), [-0.10, -0.47, 0.0], 0.055, Some(([-2.3, -0.1, -0.1], [0.0, 0.1, 0.1]))),
    bj("spine2", Some(3), [0.0, 0.24, 0.01], 0.13, SPINE),
    bj("l_ankle", Some(4), [0.10, -0.87, 0.03], 0.04, Some(([-0.5, -0.3, -0.3], [0.6, 0.3, 0.3]))),
    bj("r_ankle", Some(5), [-0.10, -0.87, 0.03], 0.04, Some(([-0.5, -0.3, -0.3], [0.6, 0.3, 0.3]))),
    bj("spine3", Some(6), [0.0, 0.30, 0.0], 0.14, SPINE),
    bj("l_foot", Some(7), [0.11, -0.93, -0.09], 0.03, Some(([-0.3, -0.3, -0.3], [0.3, 0.3, 0.3]))),
    bj("r_foot", Some(8), [-0.11, -0.93, -0.09], 0.03, Some(([-0.3, -0.3, -0.3], [0.3, 0.3, 0.3]))),
    bj("neck", Some(9), [0.0, 0.50, 0.01], 0.05, Some(([-0.5, -0.6, -0.4], [0.5, 0.6, 0.4]))),
    bj("l_collar", Some(9), [0.07, 0.42, 0.0], 0.05, Some(([-0.3, -0.3, -0.2], [0.3, 0.3, 0.4]))),
    bj("r_collar", Some(9), [-0.07, 0.42, 0.0], 0.05, Some(([-0.3, -0.3, -0.2], [0.3, 0.3, 0.4]))),
    bj("head", Some(12), [0.0, 0.58, -0.03], 0.09, Some(([-0.4, -0.5, -0.3], [0.4, 0.5, 0.3]))),
    bj("l_shoulder", Some(13), [0.17, 0.44, 0.0], 0.05, Some(([-1.2, -1.2, -1.4], [1.2, 1.0, 0.9]))),
    bj("r_shoulder", Some(14), [-0.17, 0.44, 0.0], 0.05, Some(([-1.2, -1.2, -1.4], [1.2, 1.0, 0.9]))),
    bj("l_elbow", Some(16), [0.43, 0.44, 0.0], 0.04, Some(([-0.8, 0.0, -0.2], [0.8, 2.4, 0.2]))),
    bj("r_elbow", Some(17), [-0.43, 0.44, 0.0], 0.04, Some(([-0.8, 0.0, -0.2], [0.8, 2.4, 0.2]))),
    bj("l_wrist", Some(18), [0.68, 0.44, 0.0], 0.03, Some(([-0.8, -0.6, -0.8], [0.8, 0.6, 0.8]))),
    bj("r_wrist", Some(19), [-0.68, 0.44, 0.0], 0.03, Some(([-0.8, -0.6, -0.8], [0.8, 0.6, 0.8]))),
];

const HEAD: usize = 15;
const LEFT_WRIST: usize = 20;
const RIGHT_WRIST: usize = 21;

const JAW_POSITION: [f64; 3] = [0.0, 0.56, -0.06];
const JAW_TIP: [f64; 3] = [0.0, -0.05, -0.06];
const JAW_RADIUS: f64 = 0.04;
const JAW_LIMIT: ([f64; 3], [f64; 3]) = ([-0.5, -0.1, -0.1], [0.05, 0.1, 0.1]);

struct Finger {
    name: &'static str,
    base: [f64; 3],
    phalanx: [f64; 3],
    radius: f64,
    thumb: bool,
}

// Left hand, relative to the wrist, in MANO finger order.
const FINGERS: [Finger; 5] = [
    Finger { name: "index", base: [0.095, 0.005, -0.025], phalanx: [0.032, 0.0, 0.0], radius: 0.009, thumb: false },
    Finger { name: "middle", base: [0.10, 0.005, -0.005], phalanx: [0.034, 0.0, 0.0], radius: 0.009, thumb: false },
    Finger { name: "pinky", base: [0.08, -0.005, 0.04], phalanx: [0.025, 0.0, 0.0], radius: 0.008, thumb: false },
    Finger { name: "ring", base: [0.095, 0.0, 0.018], phalanx: [0.031, 0.0, 0.0], radius: 0.009, thumb: false },
    Finger { name: "thumb", base: [0.035, -0.015, -0.035], phalanx: [0.025, -0.005, -0.018], radius: 0.011, thumb: true },
];

const FINGER_LIMIT: ([f64; 3], [f64; 3]) = ([-0.3, -0.35, -1.6], [0.3, 0.35, 0.3]);
const THUMB_LIMIT: ([f64; 3], [f64; 3]) = ([-0.8, -0.8, -0.8], [0.8, 0.8, 0.8]);

/// Limits of the mirrored (right-side) joint: axis-angle vectors mirror as
/// `(x, y, z) -> (x, -y, -z)` under `x -> -x`.
fn mirror_limit((min, max): ([f64; 3], [f64; 3])) -> ([f64; 3], [f64; 3]) {
    ([min[0], -max[1], -max[2]], [max[0], -min[1], -min[2]])
}

fn mirror_point(p: [f64; 3]) -> [f64; 3] {
    [-p[0], p[1], p[2]]
}

/// Skeleton description produced before meshing.
struct Skeleton {
    tree: JointTree,
    positions: Vec<Vector3<f64>>,
    /// Bone vector of each joint (towards its primary child or virtual tip).
    tips: Vec<Vector3<f64>>,
    tip_child: Vec<Option<usize>>,
    radii: Vec<f64>,
    limits: Vec<Option<AngleLimit>>,
    mirror: Vec<usize>,
    jaw: usize,
}

fn skeleton(cfg: &ToyModelConfig) -> Skeleton {
    let mut names = Vec::new();
    let mut parents = Vec::new();
    let mut kinds = Vec::new();
    let mut positions: Vec<Vector3<f64>> = Vec::new();
    let mut radii = Vec::new();
    let mut limits = Vec::new();

    for (i, j) in BODY.iter().enumerate() {
        names.push(j.name.to_string());
        parents.push(j.parent);
        kinds.push(JointKind::Body);
        positions.push(Vector3::from(j.position));
        radii.push(j.radius);
        let lim = j.limit.map(|l| if j.name.starts_with("r_") { mirror_limit(l) } else { l });
        limits.push(lim.map(|(min, max)| AngleLimit { min, max }));
        debug_assert!(j.parent.is_none_or(|p| p < i));
    }

    let jaw = names.len();
    names.push("jaw".into());
    parents.push(Some(HEAD));
    kinds.push(JointKind::Jaw);
    positions.push(Vector3::from(JAW_POSITION));
    radii.push(JAW_RADIUS);
    limits.push(Some(AngleLimit { min: JAW_LIMIT.0, max: JAW_LIMIT.1 }));

    let mut hand_ranges = Vec::new();
    for (side, wrist, kind) in [("l", LEFT_WRIST, JointKind::LeftHand), ("r", RIGHT_WRIST, JointKind::RightHand)] {
        let start = names.len();
        for finger in FINGERS.iter().take(cfg.fingers_per_hand) {
            let (mut base, mut step) = (finger.base, finger.phalanx);
            let mut lim = if finger.thumb { THUMB_LIMIT } else { FINGER_LIMIT };
            if side == "r" {
                base = mirror_point(base);
                step = mirror_point(step);
                lim = mirror_limit(lim);
            }
            let mut parent = wrist;
            let mut pos = positions[wrist] + Vector3::from(base);
            for k in 0..cfg.joints_per_finger {
                names.push(format!("{side}_{}{}", finger.name, k + 1));
                parents.push(Some(parent));
                kinds.push(kind);
                if k > 0 {
                    pos += Vector3::from(step) * 0.85f64.powi(k as i32 - 1);
                }
                positions.push(pos);
                radii.push(finger.radius * 0.9f64.powi(k as i32));
                limits.push(Some(AngleLimit { min: lim.0, max: lim.1 }));
                parent = names.len() - 1;
            }
        }
        hand_ranges.push(start..names.len());
    }

    let k = names.len();
    let rest_offsets: Vec<[f64; 3]> = (0..k)
        .map(|i| {
            let o = match parents[i] {
                Some(p) => positions[i] - positions[p],
                None => positions[i],
            };
            [o.x, o.y, o.z]
        })
        .collect();

    // Primary child for each bone.
    let by_name = |n: &str| names.iter().position(|x| x == n);
    let mut tip_child: Vec<Option<usize>> = vec![None; k];
    let body_primary = [
        ("pelvis", "spine1"),
        ("l_hip", "l_knee"),
        ("r_hip", "r_knee"),
        ("spine1", "spine2"),
        ("l_knee", "l_ankle"),
        ("r_knee", "r_ankle"),
        ("spine2", "spine3"),
        ("l_ankle", "l_foot"),
        ("r_ankle", "r_foot"),
        ("spine3", "neck"),
        ("neck", "head"),
        ("l_collar", "l_shoulder"),
        ("r_collar", "r_shoulder"),
        ("l_shoulder", "l_elbow"),
        ("r_shoulder", "r_elbow"),
        ("l_elbow", "l_wrist"),
        ("r_elbow", "r_wrist"),
        ("l_wrist", "l_middle1"),
        ("r_wrist", "r_middle1"),
    ];
    for (a, b) in body_primary {
        if let (Some(a), Some(b)) = (by_name(a), by_name(b)) {
            tip_child[a] = Some(b);
        }
    }
    // Finger chains: next phalanx.
    for i in 0..k {
        if matches!(kinds[i], JointKind::LeftHand | JointKind::RightHand) {
            tip_child[i] = (0..k).find(|&c| parents[c] == Some(i));
        }
    }
    // Wrists with fewer fingers fall back to the first finger.
    for (w, r) in [(LEFT_WRIST, &hand_ranges[0]), (RIGHT_WRIST, &hand_ranges[1])] {
        if tip_child[w].is_none() {
            tip_child[w] = Some(r.start);
        }
    }

    let tips: Vec<Vector3<f64>> = (0..k)
        .map(|i| match tip_child[i] {
            Some(c) => positions[c] - positions[i],
            None => match names[i].as_str() {
                "head" => Vector3::new(0.0, 0.16, 0.0),
                "jaw" => Vector3::from(JAW_TIP),
                "l_foot" | "r_foot" => Vector3::new(0.0, -0.01, -0.07),
                _ => {
                    // fingertip: continue the last phalanx
                    let p = parents[i].expect("finger joints have parents");
                    (positions[i] - positions[p]) * 0.8
                }
            },
        })
        .collect();

    let mut mirror: Vec<usize> = (0..k).collect();
    for i in 0..k {
        let n = &names[i];
        let twin = if let Some(rest) = n.strip_prefix("l_") {
            by_name(&format!("r_{rest}"))
        } else if let Some(rest) = n.strip_prefix("r_") {
            by_name(&format!("l_{rest}"))
        } else {
            None
        };
        if let Some(t) = twin {
            mirror[i] = t;
        }
    }

    let tree = JointTree { names, parents, kinds, rest_offsets };
    Skeleton { tree, positions, tips, tip_child, radii, limits, mirror, jaw }
}

fn perpendicular_basis(u: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let u = u.normalize();
    let a = if u.x.abs() <= u.y.abs() && u.x.abs() <= u.z.abs() {
        Vector3::x()
    } else if u.y.abs() <= u.z.abs() {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let e1 = u.cross(&a).normalize();
    let e2 = u.cross(&e1);
    (e1, e2)
}

/// Per-mode, per-joint bone-length (`length`) and girth (`girth`, metres)
/// coefficients of the shape space.
struct ShapeModes {
    length: Vec<Vec<f64>>,
    girth: Vec<Vec<f64>>,
}

fn shape_modes(cfg: &ToyModelConfig, sk: &Skeleton, seed: u64) -> ShapeModes {
    let k = sk.tree.len();
    let mut rng = rng_from(derive_seed_str(seed, "shape"));
    let mut length = Vec::with_capacity(cfg.n_shape);
    let mut girth = Vec::with_capacity(cfg.n_shape);
    for b in 0..cfg.n_shape {
        let (mut l, mut g) = (vec![0.0; k], vec![0.0; k]);
        match b {
            // stature
            0 => {
                l.iter_mut().for_each(|x| *x = 0.05);
                g.iter_mut().zip(&sk.radii).for_each(|(x, r)| *x = 0.05 * r);
            }
            // girth
            1 => g.iter_mut().zip(&sk.radii).for_each(|(x, r)| *x = 0.15 * r),
            _ => {
                let nl = Normal::new(0.0, 0.025).unwrap();
                let ng = Normal::new(0.0, 0.05).unwrap();
                for i in 0..k {
                    let m = sk.mirror[i];
                    if m < i {
                        l[i] = l[m];
                        g[i] = g[m];
                    } else {
                        l[i] = nl.sample(&mut rng);
                        g[i] = ng.sample(&mut rng) * sk.radii[i];
                    }
                }
            }
        }
        length.push(l);
        girth.push(g);
    }
    ShapeModes { length, girth }
}

fn hand_pca_basis(cfg: &ToyModelConfig, seed: u64) -> HandPcaBasis {
    let n = cfg.fingers_per_hand * cfg.joints_per_finger;
    let dim = 3 * n;
    let mut rng = rng_from(derive_seed_str(seed, "hand_pca"));
    let unit = Normal::new(0.0, 1.0).unwrap();
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(cfg.hand_pca);
    while rows.len() < cfg.hand_pca {
        let mut row = vec![0.0; dim];
        for f in 0..cfg.fingers_per_hand {
            let c: f64 = unit.sample(&mut rng);
            let thumb = FINGERS[f].thumb;
            for p in 0..cfg.joints_per_finger {
                let j = f * cfg.joints_per_finger + p;
                let fall = 1.0 - 0.2 * p as f64;
                if thumb {
                    row[3 * j] = 0.2 * unit.sample(&mut rng);
                    row[3 * j + 1] = -0.5 * c * fall;
                    row[3 * j + 2] = -0.5 * c * fall;
                } else {
                    row[3 * j] = 0.1 * unit.sample(&mut rng);
                    row[3 * j + 1] = 0.15 * unit.sample(&mut rng);
                    row[3 * j + 2] = -c * fall;
                }
            }
        }
        // modified Gram-Schmidt against the accepted rows
        for r in &rows {
            let dot: f64 = row.iter().zip(r).map(|(a, b)| a * b).sum();
            row.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            row.iter_mut().for_each(|a| *a /= norm);
            rows.push(row);
        }
    }
    // second pass for orthonormality at rounding level
    for i in 0..rows.len() {
        for j in 0..i {
            let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
            let rj = rows[j].clone();
            rows[i].iter_mut().zip(&rj).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = rows[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        rows[i].iter_mut().for_each(|a| *a /= norm);
    }
    let right = rows
        .iter()
        .map(|row| row.chunks_exact(3).flat_map(|c| [c[0], -c[1], -c[2]]).collect())
        .collect();
    HandPcaBasis { left: rows, right }
}

/// Builds the toy model. Deterministic in `(cfg, seed)`.
pub(super) fn build(cfg: &ToyModelConfig, seed: u64) -> Result<ModelData> {
    cfg.validate()?;
    let sk = skeleton(cfg);
    let k = sk.tree.len();
    let rings = cfg.rings_per_bone;
    let vpr = cfg.vertices_per_ring;
    let modes = shape_modes(cfg, &sk, seed);

    // Shape displacement of every rest joint and bone end.
    let mut joint_shift = vec![vec![Vector3::zeros(); k]; cfg.n_shape];
    for b in 0..cfg.n_shape {
        for i in 0..k {
            if let Some(p) = sk.tree.parents[i] {
                let o = Vector3::from(sk.tree.rest_offsets[i]);
                joint_shift[b][i] = joint_shift[b][p] + o * modes.length[b][i];
            }
        }
    }
    let end_shift = |b: usize, i: usize| -> Vector3<f64> {
        let scale_joint = sk.tip_child[i].unwrap_or(i);
        joint_shift[b][i] + sk.tips[i] * modes.length[b][scale_joint]
    };

    let mut template = Vec::with_capacity(cfg.n_vertices);
    let mut shape_basis = vec![Vec::with_capacity(cfg.n_vertices); cfg.n_shape];
    let mut skin_weights = Vec::with_capacity(cfg.n_vertices);

    let mut push_vertex = |j: usize, t: f64, dir: Vector3<f64>, weights: Vec<f64>| {
        let p = sk.positions[j] + sk.tips[j] * t + dir * sk.radii[j];
        template.push([p.x, p.y, p.z]);
        for b in 0..cfg.n_shape {
            let d = joint_shift[b][j] + (end_shift(b, j) - joint_shift[b][j]) * t + dir * modes.girth[b][j];
            shape_basis[b].push([d.x, d.y, d.z]);
        }
        skin_weights.push(weights);
    };

    let mut ring_start = vec![vec![0usize; rings]; k];
    for j in 0..k {
        let (e1, e2) = perpendicular_basis(&sk.tips[j]);
        for r in 0..rings {
            ring_start[j][r] = j * rings * vpr + r * vpr;
            let t = r as f64 / rings as f64;
            let mut w = vec![0.0; k];
            match (r, sk.tree.parents[j]) {
                (0, Some(p)) => {
                    w[p] = 0.5;
                    w[j] = 0.5;
                }
                _ => w[j] = 1.0,
            }
            for m in 0..vpr {
                let phi = 2.0 * PI * m as f64 / vpr as f64;
                let dir = e1 * phi.cos() + e2 * phi.sin();
                push_vertex(j, t, dir, w.clone());
            }
        }
    }
    let mut rng = rng_from(derive_seed_str(seed, "extra_vertices"));
    let extras = cfg.n_vertices - k * rings * vpr;
    for e in 0..extras {
        let j = e % k;
        let (e1, e2) = perpendicular_basis(&sk.tips[j]);
        let t = (0.2 + 0.6 * rng.random::<f64>()) / rings as f64;
        let phi = 2.0 * PI * rng.random::<f64>();
        let mut w = vec![0.0; k];
        w[j] = 1.0;
        push_vertex(j, t, e1 * phi.cos() + e2 * phi.sin(), w);
    }
    let n = template.len();

    // Expression: zero-mean displacements on each jaw ring.
    let mut expression_basis = vec![vec![[0.0; 3]; n]; cfg.n_expression];
    let mut rng = rng_from(derive_seed_str(seed, "expression"));
    let amp = Normal::new(0.0, 0.012).unwrap();
    for basis in expression_basis.iter_mut() {
        for r in 0..rings {
            let start = ring_start[sk.jaw][r];
            let mut disp: Vec<Vector3<f64>> = (0..vpr)
                .map(|_| Vector3::new(amp.sample(&mut rng), amp.sample(&mut rng), amp.sample(&mut rng)))
                .collect();
            let mean = disp.iter().sum::<Vector3<f64>>() / vpr as f64;
            disp.iter_mut().for_each(|d| *d -= mean);
            for (m, d) in disp.iter().enumerate() {
                basis[start + m] = [d.x, d.y, d.z];
            }
        }
    }

    let mut joint_regressor = vec![vec![0.0; n]; k];
    for (j, row) in joint_regressor.iter_mut().enumerate() {
        for m in 0..vpr {
            row[ring_start[j][0] + m] = 1.0 / vpr as f64;
        }
    }
    let mut landmark_regressor = Vec::new();
    for r in 0..rings {
        for m in 0..vpr {
            let mut row = vec![0.0; n];
            row[ring_start[sk.jaw][r] + m] = 1.0;
            landmark_regressor.push(row);
        }
    }

    let mut triangles = Vec::new();
    for starts in ring_start.iter() {
        for r in 0..rings.saturating_sub(1) {
            for m in 0..vpr {
                let a = (starts[r] + m) as u32;
                let b = (starts[r] + (m + 1) % vpr) as u32;
                let c = (starts[r + 1] + (m + 1) % vpr) as u32;
                let d = (starts[r + 1] + m) as u32;
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            }
        }
    }

    let hand_pca_basis = hand_pca_basis(cfg, seed);

    // Regressor accuracy on the rest mesh.
    let mut epsilon_model: f64 = 0.0;
    for j in 0..k {
        let mut acc = Vector3::zeros();
        for (i, w) in joint_regressor[j].iter().enumerate() {
            if *w != 0.0 {
                acc += Vector3::from(template[i]) * *w;
            }
        }
        epsilon_model = epsilon_model.max((acc - sk.positions[j]).norm());
    }

    Ok(ModelData {
        seed,
        config: cfg.clone(),
        joint_tree: sk.tree,
        template_vertices: template,
        shape_basis,
        expression_basis,
        skin_weights,
        joint_regressor,
        landmark_regressor,
        hand_pca_basis,
        angle_limits: sk.limits,
        triangles,
        vertices_per_ring: vpr,
        epsilon_model,
    })
}
