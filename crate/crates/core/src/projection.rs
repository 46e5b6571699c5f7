//! 3D-to-2D camera models.
//!
//! All models take joints expressed relative to the body origin and already
//! rotated by the global body rotation (camera rotation is folded into it).
//! The principal point sits at the image origin.
//!
//! * perspective: `u = f_x (x + t_x) / (d + z)`, `v = f_y (y + t_y) / (d + z)`
//! * weak-perspective: `u = s x + t_u`, `v = s y + t_v`
//! * depth-to-scale (D2S): `u = s_i (s x + t_u)`, `v = s_i (s y + t_v)` with
//!   the per-joint scale `s_i = d / (d + z)`.
//!
//! With `s = f/d` and `t = f t_c / d`, D2S and perspective agree exactly.

use nalgebra::{Matrix2x3, Matrix2xX, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible `d + z` in model units.
pub const DEPTH_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Body,
    LeftHand,
    RightHand,
    Face,
}

impl Part {
    pub const ALL: [Part; 4] = [Part::Body, Part::LeftHand, Part::RightHand, Part::Face];

    pub fn name(self) -> &'static str {
        match self {
            Part::Body => "body",
            Part::LeftHand => "left_hand",
            Part::RightHand => "right_hand",
            Part::Face => "face",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoints3D {
    pub points: Vec<[f64; 3]>,
    pub visible: Vec<bool>,
    pub parts: Vec<Part>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoints2D {
    pub points: Vec<[f64; 2]>,
    pub visible: Vec<bool>,
    pub parts: Vec<Part>,
}

impl Keypoints3D {
    /// All points visible.
    pub fn new(points: Vec<[f64; 3]>, parts: Vec<Part>) -> Self {
        let visible = vec![true; points.len()];
        Keypoints3D { points, visible, parts }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.points[i])
    }

    fn check(&self) -> Result<()> {
        if self.visible.len() != self.points.len() || self.parts.len() != self.points.len() {
            return Err(Error::Shape(format!(
                "keypoints: {} points, {} visibility flags, {} part tags",
                self.points.len(),
                self.visible.len(),
                self.parts.len()
            )));
        }
        for (i, p) in self.points.iter().enumerate() {
            if self.visible[i] && !p.iter().all(|c| c.is_finite()) {
                return Err(Error::NumericInput(format!("keypoint {i} is not finite")));
            }
        }
        Ok(())
    }
}

impl Keypoints2D {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn visible_count(&self, part: Option<Part>) -> usize {
        self.visible
            .iter()
            .zip(&self.parts)
            .filter(|(v, p)| **v && part.is_none_or(|q| **p == q))
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraKind {
    Perspective,
    Weak,
    D2s,
}

impl CameraKind {
    pub fn name(self) -> &'static str {
        match self {
            CameraKind::Perspective => "perspective",
            CameraKind::Weak => "weak",
            CameraKind::D2s => "d2s",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "perspective" | "pp" => Ok(CameraKind::Perspective),
            "weak" | "wpp" => Ok(CameraKind::Weak),
            "d2s" => Ok(CameraKind::D2s),
            other => Err(Error::InvalidConfig(format!("unknown camera kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perspective {
    pub fx: f64,
    pub fy: f64,
    /// `(t_x, t_y, d)`: body-origin to camera translation.
    pub tc: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakPerspective {
    pub s: f64,
    pub t: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct D2s {
    pub s: f64,
    pub t: [f64; 2],
    pub d: f64,
}

impl D2s {
    /// The D2S camera that reproduces a perspective camera with `f_x = f_y = f`.
    pub fn from_perspective(f: f64, tc: [f64; 3]) -> D2s {
        let d = tc[2];
        D2s { s: f / d, t: [f * tc[0] / d, f * tc[1] / d], d }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum CameraModel {
    #[serde(rename = "perspective")]
    Perspective(Perspective),
    #[serde(rename = "weak")]
    Weak(WeakPerspective),
    #[serde(rename = "d2s")]
    D2s(D2s),
}

impl CameraModel {
    pub fn kind(&self) -> CameraKind {
        match self {
            CameraModel::Perspective(_) => CameraKind::Perspective,
            CameraModel::Weak(_) => CameraKind::Weak,
            CameraModel::D2s(_) => CameraKind::D2s,
        }
    }

    /// Parameter vector in natural order: perspective `[f_x, f_y, t_x, t_y, d]`,
    /// weak `[s, t_u, t_v]`, D2S `[s, t_u, t_v, d]`.
    pub fn params(&self) -> Vec<f64> {
        match *self {
            CameraModel::Perspective(c) => vec![c.fx, c.fy, c.tc[0], c.tc[1], c.tc[2]],
            CameraModel::Weak(c) => vec![c.s, c.t[0], c.t[1]],
            CameraModel::D2s(c) => vec![c.s, c.t[0], c.t[1], c.d],
        }
    }

    pub fn param_count(kind: CameraKind) -> usize {
        match kind {
            CameraKind::Perspective => 5,
            CameraKind::Weak => 3,
            CameraKind::D2s => 4,
        }
    }

    pub fn from_params(kind: CameraKind, p: &[f64]) -> Result<CameraModel> {
        if p.len() != Self::param_count(kind) {
            return Err(Error::Shape(format!(
                "{} camera takes {} parameters, got {}",
                kind.name(),
                Self::param_count(kind),
                p.len()
            )));
        }
        Ok(match kind {
            CameraKind::Perspective => CameraModel::Perspective(Perspective {
                fx: p[0],
                fy: p[1],
                tc: [p[2], p[3], p[4]],
            }),
            CameraKind::Weak => CameraModel::Weak(WeakPerspective { s: p[0], t: [p[1], p[2]] }),
            CameraKind::D2s => CameraModel::D2s(D2s { s: p[0], t: [p[1], p[2]], d: p[3] }),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.params().iter().all(|v| v.is_finite());
        if !ok {
            return Err(Error::NumericInput("camera parameters must be finite".into()));
        }
        match *self {
            CameraModel::Perspective(c) if c.tc[2] <= 0.0 => {
                Err(Error::NumericInput("perspective camera needs d > 0".into()))
            }
            CameraModel::D2s(c) if c.d <= 0.0 => Err(Error::NumericInput("D2S camera needs d > 0".into())),
            CameraModel::Weak(c) if c.s <= 0.0 => {
                Err(Error::NumericInput("weak-perspective camera needs s > 0".into()))
            }
            _ => Ok(()),
        }
    }

    /// Projects one point; `None` when the point is at or behind the camera plane.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        match *self {
            CameraModel::Perspective(c) => {
                let depth = c.tc[2] + p.z;
                (depth > DEPTH_EPS).then(|| {
                    Vector2::new(c.fx * (p.x + c.tc[0]) / depth, c.fy * (p.y + c.tc[1]) / depth)
                })
            }
            CameraModel::Weak(c) => Some(Vector2::new(c.s * p.x + c.t[0], c.s * p.y + c.t[1])),
            CameraModel::D2s(c) => {
                let depth = c.d + p.z;
                (depth > DEPTH_EPS).then(|| {
                    let si = c.d / depth;
                    Vector2::new(si * (c.s * p.x + c.t[0]), si * (c.s * p.y + c.t[1]))
                })
            }
        }
    }

    /// Projection of one point with its derivatives w.r.t. the point and the
    /// camera parameters (natural order, see [`CameraModel::params`]).
    pub fn point_jacobian(&self, p: &Vector3<f64>) -> Option<PointJacobian> {
        match *self {
            CameraModel::Perspective(c) => {
                let depth = c.tc[2] + p.z;
                if depth <= DEPTH_EPS {
                    return None;
                }
                let inv = 1.0 / depth;
                let xu = p.x + c.tc[0];
                let yv = p.y + c.tc[1];
                let uv = Vector2::new(c.fx * xu * inv, c.fy * yv * inv);
                let wrt_point = Matrix2x3::new(
                    c.fx * inv,
                    0.0,
                    -uv.x * inv,
                    0.0,
                    c.fy * inv,
                    -uv.y * inv,
                );
                let mut wrt_camera = Matrix2xX::zeros(5);
                wrt_camera[(0, 0)] = xu * inv;
                wrt_camera[(1, 1)] = yv * inv;
                wrt_camera[(0, 2)] = c.fx * inv;
                wrt_camera[(1, 3)] = c.fy * inv;
                wrt_camera[(0, 4)] = -uv.x * inv;
                wrt_camera[(1, 4)] = -uv.y * inv;
                Some(PointJacobian { uv, wrt_point, wrt_camera })
            }
            CameraModel::Weak(c) => {
                let uv = Vector2::new(c.s * p.x + c.t[0], c.s * p.y + c.t[1]);
                let wrt_point = Matrix2x3::new(c.s, 0.0, 0.0, 0.0, c.s, 0.0);
                let mut wrt_camera = Matrix2xX::zeros(3);
                wrt_camera[(0, 0)] = p.x;
                wrt_camera[(1, 0)] = p.y;
                wrt_camera[(0, 1)] = 1.0;
                wrt_camera[(1, 2)] = 1.0;
                Some(PointJacobian { uv, wrt_point, wrt_camera })
            }
            CameraModel::D2s(c) => {
                let depth = c.d + p.z;
                if depth <= DEPTH_EPS {
                    return None;
                }
                let si = c.d / depth;
                let wu = c.s * p.x + c.t[0];
                let wv = c.s * p.y + c.t[1];
                let uv = Vector2::new(si * wu, si * wv);
                // ∂s_i/∂z = -d/(d+z)², ∂s_i/∂d = z/(d+z)²
                let dsi_dz = -c.d / (depth * depth);
                let dsi_dd = p.z / (depth * depth);
                let wrt_point = Matrix2x3::new(si * c.s, 0.0, wu * dsi_dz, 0.0, si * c.s, wv * dsi_dz);
                let mut wrt_camera = Matrix2xX::zeros(4);
                wrt_camera[(0, 0)] = si * p.x;
                wrt_camera[(1, 0)] = si * p.y;
                wrt_camera[(0, 1)] = si;
                wrt_camera[(1, 2)] = si;
                wrt_camera[(0, 3)] = wu * dsi_dd;
                wrt_camera[(1, 3)] = wv * dsi_dd;
                Some(PointJacobian { uv, wrt_point, wrt_camera })
            }
        }
    }

    /// Projects every keypoint. Visible points at or behind the camera plane are
    /// an error; invisible ones project to `(0, 0)`.
    pub fn project(&self, j: &Keypoints3D) -> Result<Keypoints2D> {
        j.check()?;
        let mut points = Vec::with_capacity(j.len());
        let mut behind = Vec::new();
        for i in 0..j.len() {
            match self.project_point(&j.point(i)) {
                Some(uv) => points.push([uv.x, uv.y]),
                None => {
                    if j.visible[i] {
                        behind.push(i);
                    }
                    points.push([0.0, 0.0]);
                }
            }
        }
        if !behind.is_empty() {
            return Err(Error::BehindCamera { indices: behind });
        }
        Ok(Keypoints2D { points, visible: j.visible.clone(), parts: j.parts.clone() })
    }
}

#[derive(Clone, Debug)]
pub struct PointJacobian {
    pub uv: Vector2<f64>,
    pub wrt_point: Matrix2x3<f64>,
    pub wrt_camera: Matrix2xX<f64>,
}

pub fn project_perspective(j: &Keypoints3D, cam: Perspective) -> Result<Keypoints2D> {
    CameraModel::Perspective(cam).project(j)
}

pub fn project_weak(j: &Keypoints3D, cam: WeakPerspective) -> Result<Keypoints2D> {
    CameraModel::Weak(cam).project(j)
}

pub fn project_d2s(j: &Keypoints3D, cam: D2s) -> Result<Keypoints2D> {
    CameraModel::D2s(cam).project(j)
}

/// Per-joint depth-to-scale factor `d / (d + z)`.
pub fn d2s_scale(z: f64, d: f64) -> Result<f64> {
    let depth = d + z;
    if !(depth > DEPTH_EPS) || !d.is_finite() {
        return Err(Error::BehindCamera { indices: vec![0] });
    }
    Ok(d / depth)
}

/// Gap between the weak-perspective factors (`s = f/d`, `t_u = f t_x / d`) and
/// the exact per-joint perspective factors at depth offset `z`.
///
/// Returns `(Δs, Δt_u) = (f/d · z/(d+z), f t_x/d · z/(d+z))`, so that
/// `(s - Δs) x + (t_u - Δt_u)` is the perspective `u`. The factored form is
/// checked against the direct difference `f/d - f/(d+z)` before returning.
pub fn approximation_gap(joint: &Vector3<f64>, fx: f64, tx: f64, d: f64) -> Result<(f64, f64)> {
    let z = joint.z;
    if !(d > DEPTH_EPS) || !(d + z > DEPTH_EPS) {
        return Err(Error::BehindCamera { indices: vec![0] });
    }
    let ratio = z / (d + z);
    let ds = fx / d * ratio;
    let dt = fx * tx / d * ratio;
    let direct = fx / d - fx / (d + z);
    let scale = (fx / d).abs().max(fx / (d + z)).max(1.0);
    if (direct - ds).abs() > 1e-9 * scale {
        return Err(Error::NumericInput(format!(
            "scale gap mismatch: factored {ds} vs direct {direct}"
        )));
    }
    Ok((ds, dt))
}
