//! Whole-body mesh recovery toolkit.
//!
//! A procedurally generated articulated body model with linear blend
//! skinning, three 3D-to-2D camera models (perspective, weak-perspective and
//! depth-to-scale), a synthetic training-data generator, an optimization
//! based fitter, a small two-branch regressor and MPJPE / PA-MPJPE metrics.

pub mod bodymodel;
pub mod error;
pub mod fit;
pub mod metrics;
pub mod params;
pub mod projection;
pub mod regress;
pub mod rng;
pub mod rotation;
pub mod synth;

pub use bodymodel::{BodyModel, JointKind, JointTree, ToyModelConfig};
pub use error::{Error, Result};
pub use params::{FullParams, HandParams, ParamLayout};
pub use projection::{CameraModel, Keypoints2D, Keypoints3D, Part};
