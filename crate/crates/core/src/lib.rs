//! Joint estimation of object poses, shapes, a shared ground plane and the
//! camera focal length from 2D semantic keypoints in a single image.

// guards are written `!(x > 0.0)` so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cli_io;
pub mod deformable_pose;
pub mod error;
pub mod evaluation;
pub mod joint_solver;
pub mod plane_consensus;
pub mod pnp_init;
pub mod projection;
pub mod rotation;
pub mod scene_model;
pub mod self_calibration;
pub mod synth_oracle;

pub use error::{GroundPoseError, Result};
pub use joint_solver::{solve_scene, IterationDiagnostics, SceneSolution};
pub use scene_model::{
    CameraIntrinsics, Detection, ObjectState, Plane, Scene, SceneEstimate, ShapeAtlas, SolverConfig,
};
