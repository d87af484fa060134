//! Sliding-window estimation of a 15-dimensional UAV state from preintegrated
//! IMU data, odometry pose displacements and body-offset UWB ranges.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchors;
pub mod app;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod factors;
pub mod manifold;
pub mod pipeline;
pub mod preintegration;
pub mod sim;
pub mod solver;
pub mod state;

pub use anchors::{self_localize, survey_from_network, AnchorMap, AnchorRange, AnchorSurvey};
pub use config::EstimatorConfig;
pub use dataset::{Dataset, OslPose, UwbRecord};
pub use error::{Error, Result};
pub use eval::Metrics;
pub use manifold::{Mat3, Quat, RigidTransform, Vec3};
pub use pipeline::{run_dataset, Estimator, Measurement, RunOutput};
pub use preintegration::{ImuBias, ImuNoise, ImuSample, Preintegration};
pub use sim::{simulate, SimConfig, Simulation};
pub use solver::{SlidingWindow, SolveReport, SolverConfig};
pub use state::{NavState, StampedState, StateBlock, StateVector, STATE_DIM};
