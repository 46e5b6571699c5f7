//! The full recovery target: pose, shape, face and camera.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::CameraModel;

/// Largest admissible magnitude of a shape coefficient.
pub const BETA_BOUND: f64 = 5.0;
/// Length of the jaw rotation appended to the expression coefficients.
pub const JAW_DIM: usize = 3;

/// Per-hand pose, either as PCA coefficients or as per-joint axis-angles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HandParams {
    Pca { left: Vec<f64>, right: Vec<f64> },
    Full { left: Vec<[f64; 3]>, right: Vec<[f64; 3]> },
}

impl HandParams {
    pub fn is_pca(&self) -> bool {
        matches!(self, HandParams::Pca { .. })
    }
}

/// Sizes of the parameter groups of a body model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// Body joints including the root.
    pub body_joints: usize,
    pub hand_joints: usize,
    pub hand_pca: usize,
    pub expression: usize,
    pub shape: usize,
}

impl ModelDims {
    pub fn face(&self) -> usize {
        self.expression + JAW_DIM
    }
}

/// Offsets of each parameter group inside a flat parameter vector:
/// `[global | body | left hand | right hand | expression | jaw | shape]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub dims: ModelDims,
    pub hands_pca: bool,
}

impl ParamLayout {
    pub fn new(dims: ModelDims, hands_pca: bool) -> Self {
        ParamLayout { dims, hands_pca }
    }

    pub fn hand_dim(&self) -> usize {
        if self.hands_pca {
            self.dims.hand_pca
        } else {
            3 * self.dims.hand_joints
        }
    }

    pub fn global(&self) -> std::ops::Range<usize> {
        0..3
    }

    pub fn body(&self) -> std::ops::Range<usize> {
        3..3 + 3 * (self.dims.body_joints - 1)
    }

    pub fn left_hand(&self) -> std::ops::Range<usize> {
        let s = self.body().end;
        s..s + self.hand_dim()
    }

    pub fn right_hand(&self) -> std::ops::Range<usize> {
        let s = self.left_hand().end;
        s..s + self.hand_dim()
    }

    pub fn expression(&self) -> std::ops::Range<usize> {
        let s = self.right_hand().end;
        s..s + self.dims.expression
    }

    pub fn jaw(&self) -> std::ops::Range<usize> {
        let s = self.expression().end;
        s..s + JAW_DIM
    }

    /// Expression and jaw together (`ψ_f`).
    pub fn face(&self) -> std::ops::Range<usize> {
        self.expression().start..self.jaw().end
    }

    pub fn shape(&self) -> std::ops::Range<usize> {
        let s = self.jaw().end;
        s..s + self.dims.shape
    }

    pub fn len(&self) -> usize {
        self.shape().end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullParams {
    /// Global body rotation (axis-angle).
    pub theta_global: [f64; 3],
    /// Body joint rotations, root excluded.
    pub theta_body: Vec<[f64; 3]>,
    pub hands: HandParams,
    /// Expression coefficients followed by the 3 jaw rotation components.
    pub psi_face: Vec<f64>,
    pub beta: Vec<f64>,
    pub camera: CameraModel,
}

impl FullParams {
    /// Rest pose, zero shape and face.
    pub fn rest(dims: ModelDims, hands_pca: bool, camera: CameraModel) -> Self {
        let hands = if hands_pca {
            HandParams::Pca { left: vec![0.0; dims.hand_pca], right: vec![0.0; dims.hand_pca] }
        } else {
            HandParams::Full {
                left: vec![[0.0; 3]; dims.hand_joints],
                right: vec![[0.0; 3]; dims.hand_joints],
            }
        };
        FullParams {
            theta_global: [0.0; 3],
            theta_body: vec![[0.0; 3]; dims.body_joints - 1],
            hands,
            psi_face: vec![0.0; dims.face()],
            beta: vec![0.0; dims.shape],
            camera,
        }
    }

    pub fn layout(&self, dims: ModelDims) -> ParamLayout {
        ParamLayout::new(dims, self.hands.is_pca())
    }

    pub fn expression(&self) -> &[f64] {
        &self.psi_face[..self.psi_face.len() - JAW_DIM]
    }

    pub fn jaw(&self) -> [f64; 3] {
        let n = self.psi_face.len();
        [self.psi_face[n - 3], self.psi_face[n - 2], self.psi_face[n - 1]]
    }

    /// Checks group sizes against `dims` and that every entry is finite.
    pub fn check(&self, dims: ModelDims) -> Result<()> {
        let shape_err = |what: &str, got: usize, want: usize| {
            Err(Error::Shape(format!("{what}: expected {want} entries, got {got}")))
        };
        if self.theta_body.len() != dims.body_joints - 1 {
            return shape_err("theta_body", self.theta_body.len(), dims.body_joints - 1);
        }
        match &self.hands {
            HandParams::Pca { left, right } => {
                if left.len() != dims.hand_pca || right.len() != dims.hand_pca {
                    return shape_err("hand pca", left.len().min(right.len()), dims.hand_pca);
                }
            }
            HandParams::Full { left, right } => {
                if left.len() != dims.hand_joints || right.len() != dims.hand_joints {
                    return shape_err("hand pose", left.len().min(right.len()), dims.hand_joints);
                }
            }
        }
        if self.psi_face.len() != dims.face() {
            return shape_err("psi_face", self.psi_face.len(), dims.face());
        }
        if self.beta.len() != dims.shape {
            return shape_err("beta", self.beta.len(), dims.shape);
        }
        if !self.to_vec().iter().all(|v| v.is_finite()) {
            return Err(Error::NumericInput("pose/shape/face parameters must be finite".into()));
        }
        Ok(())
    }

    /// [`FullParams::check`] plus the shape-coefficient bound and camera validity.
    pub fn validate(&self, dims: ModelDims) -> Result<()> {
        self.check(dims)?;
        if let Some(b) = self.beta.iter().find(|b| b.abs() > BETA_BOUND) {
            return Err(Error::NumericInput(format!("|beta| = {} exceeds {BETA_BOUND}", b.abs())));
        }
        self.camera.validate()
    }

    /// Flattens pose, face and shape (not the camera) into the layout order.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(&self.theta_global);
        v.extend(self.theta_body.iter().flatten());
        match &self.hands {
            HandParams::Pca { left, right } => {
                v.extend_from_slice(left);
                v.extend_from_slice(right);
            }
            HandParams::Full { left, right } => {
                v.extend(left.iter().flatten());
                v.extend(right.iter().flatten());
            }
        }
        v.extend_from_slice(&self.psi_face);
        v.extend_from_slice(&self.beta);
        v
    }

    pub fn from_vec(layout: ParamLayout, v: &[f64], camera: CameraModel) -> Result<Self> {
        if v.len() != layout.len() {
            return Err(Error::Shape(format!(
                "parameter vector: expected {} entries, got {}",
                layout.len(),
                v.len()
            )));
        }
        let triples = |r: std::ops::Range<usize>| -> Vec<[f64; 3]> {
            v[r].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
        };
        let hands = if layout.hands_pca {
            HandParams::Pca { left: v[layout.left_hand()].to_vec(), right: v[layout.right_hand()].to_vec() }
        } else {
            HandParams::Full { left: triples(layout.left_hand()), right: triples(layout.right_hand()) }
        };
        Ok(FullParams {
            theta_global: [v[0], v[1], v[2]],
            theta_body: triples(layout.body()),
            hands,
            psi_face: v[layout.face()].to_vec(),
            beta: v[layout.shape()].to_vec(),
            camera,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{CameraModel, WeakPerspective};

    const DIMS: ModelDims = ModelDims { body_joints: 22, hand_joints: 15, hand_pca: 6, expression: 10, shape: 10 };

    fn cam() -> CameraModel {
        CameraModel::Weak(WeakPerspective { s: 1.0, t: [0.0, 0.0] })
    }

    #[test]
    fn layout_is_contiguous() {
        let l = ParamLayout::new(DIMS, true);
        assert_eq!(l.body(), 3..66);
        assert_eq!(l.left_hand(), 66..72);
        assert_eq!(l.face(), 78..91);
        assert_eq!(l.len(), 101);
        assert_eq!(ParamLayout::new(DIMS, false).len(), 3 + 63 + 90 + 13 + 10);
    }

    #[test]
    fn vector_round_trip() {
        let mut p = FullParams::rest(DIMS, false, cam());
        let n = p.to_vec().len();
        let v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        p = FullParams::from_vec(p.layout(DIMS), &v, cam()).unwrap();
        assert_eq!(p.to_vec(), v);
        p.check(DIMS).unwrap();
    }

    #[test]
    fn validation_rejects_large_shape_and_nan() {
        let mut p = FullParams::rest(DIMS, true, cam());
        p.beta[3] = 5.5;
        assert!(matches!(p.validate(DIMS), Err(Error::NumericInput(_))));
        p.beta[3] = 0.0;
        p.theta_body[0][1] = f64::NAN;
        assert!(matches!(p.check(DIMS), Err(Error::NumericInput(_))));
    }
}
