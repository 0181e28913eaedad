//! Visual-inertial MSCKF with keyframes, in three flavours.
//!
//! * [`Backend::Full`] updates every state densely.
//! * [`Backend::Schmidt`] treats keyframes as consider states: their means
//!   and marginal covariance never change.
//! * [`Backend::Compressed`] updates only the local partition and folds the
//!   global consequences into an accumulator that is applied in one batch
//!   at each re-centering.
//!
//! [`sim`] produces deterministic ground truth and sensor streams and
//! [`harness`] ties the two together into runs, reports and comparisons.
//!
//! ```no_run
//! use cmsckf_core::{run, Backend, RunConfig, Scenario};
//!
//! let report = run(&RunConfig::new(Backend::Compressed, Scenario::default())).unwrap();
//! println!("{} keyframes, RMSE {:.3} m", report.summary.keyframes, report.summary.rmse_position);
//! ```

pub mod error;
pub mod estimator;
pub mod geom;
pub mod harness;
pub mod propagation;
pub mod sim;
pub mod state;
pub mod update;
pub mod vision;

pub use error::{Error, Result};
pub use estimator::{Backend, Filter};
pub use geom::{Pose, UnitQuaternion, Vec3, Vec6};
pub use harness::{compare_backends, compute_nees, export, run, Event, ExportFormat, RunConfig, RunReport};
pub use propagation::{ImuNoiseParams, ImuSample, TransitionBlock};
pub use sim::{FilterConfig, GroundTruth, Scenario, SensorConfig, TrajectorySpec};
pub use state::{FrameRef, ImuState, Partition, PartitionedCovariance, StateVector};
pub use update::{CompressedAccumulator, UpdateReport};
pub use vision::{FeatureTrack, LinearizedBlock, PinholeCamera};
