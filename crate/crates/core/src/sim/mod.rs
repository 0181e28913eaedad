//! Deterministic ground truth and sensor streams.

mod scenario;
mod sensors;
mod trajectory;

pub use scenario::{export_streams, FilterConfig, Scenario};
pub use sensors::{
    camera_frame_index, gps_update_block, place_landmarks, synthesize_camera, synthesize_gps,
    synthesize_imu, visible_landmarks, CameraConfig, GpsFix, ImuStream, LandmarkRegion,
    SensorConfig,
};
pub(crate) use sensors::{gaussian3, stream, INIT_STREAM};
pub use trajectory::{generate_trajectory, GroundTruth, Kinematics, Landmark, Motion, TrajectorySpec};
