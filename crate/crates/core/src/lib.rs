//! Object parameter inference from planar pushes.
//!
//! The crate is organized bottom-up:
//!
//! - [`geometry`]: planar shapes, poses, segmentation masks, contact affordances and action maps.
//! - [`pushsim`]: a quasi-static limit-surface push simulator with synthetic vision and tactile
//!   sensors, used as ground truth.
//! - [`gaussmath`]: Gaussian machinery (constrained Monte-Carlo sigma points, weighted moments,
//!   conditioning, KL divergence, unscented transform).
//! - [`tape`]: a small reverse-mode automatic differentiation tape over dense matrices.
//! - [`nets`]: the learned process, tactile, observation-noise, shape-action encoder and vision
//!   networks.
//! - [`dualfilter`]: the dual differentiable filter (parameter particle update with Liu-West
//!   kernel reconstruction, conditional pose UKF update).
//! - [`active`]: push affordance sampling and N-step information-gain action selection.
//! - [`training`]: end-to-end training through the filter with Adam.
//! - [`eval`]: NRMSE metrics, per-object inference, ablation tables and reports.
//! - [`study`]: the multi-seed ablation study that trains and evaluates every filter variant.

pub mod active;
pub mod dualfilter;
pub mod error;
pub mod eval;
pub mod gaussmath;
pub mod geometry;
pub mod nets;
pub mod pushsim;
pub mod rng;
pub mod study;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
pub use gaussmath::{Constraints, JointBelief, SigmaSet};
pub use geometry::{ContactAffordance, Mask, MaskFrame, Pose2D, PushAction, Shape2D};
pub use pushsim::{ObjectParams, PushTrajectory, TactileObs};

/// Dimension of the pose block `(x, y, theta)`.
pub const POSE_DIM: usize = 3;
/// Dimension of the parameter block `(m, mu, com_x, com_y, I_z)`.
pub const PARAM_DIM: usize = 5;
/// Dimension of the joint state.
pub const STATE_DIM: usize = POSE_DIM + PARAM_DIM;
