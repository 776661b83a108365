//! Deterministic multi-story building simulator: geometry, trajectories,
//! distorted LiDAR sweeps and IMU streams with ground truth.

pub mod building;
pub mod imu;
pub mod lidar;
pub mod scenario;
pub mod trajectory;

use thiserror::Error;

use crate::geometry::{Pose, Vec3};
use crate::imu::ImuNoiseModel;

pub use building::{generate_building, BuildingModel, BuildingSpec, Patch, PatchBvh};
pub use imu::simulate_imu;
pub use lidar::{simulate_sweep, Scene};
pub use scenario::{make_dataset, Scenario, ScenarioOptions, SimDataset};
pub use trajectory::{CircularTrajectory, Trajectory, TrajectoryState, Waypoint, WaypointTrajectory};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid building spec: {0}")]
    InvalidSpec(String),
    #[error("unknown scenario '{0}' (expected corridor-1f, building-3f-loop or stairwell-only)")]
    UnknownScenario(String),
    #[error("I/O failure writing {path}: {source}")]
    IoFailure { path: String, source: std::io::Error },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarModel {
    pub rings: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub columns: usize,
    pub rate: f64,
    pub range_noise: f64,
    pub min_range: f64,
    pub max_range: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        Self {
            rings: 16,
            elevation_min_deg: -15.0,
            elevation_max_deg: 15.0,
            columns: 1800,
            rate: 10.0,
            range_noise: 0.01,
            min_range: 0.3,
            max_range: 80.0,
        }
    }
}

impl LidarModel {
    pub fn elevation(&self, ring: usize) -> f64 {
        let step = (self.elevation_max_deg - self.elevation_min_deg) / (self.rings - 1) as f64;
        (self.elevation_min_deg + step * ring as f64).to_radians()
    }

    pub fn sweep_period(&self) -> f64 {
        1.0 / self.rate
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuModel {
    pub rate: f64,
    pub noise: ImuNoiseModel,
    /// Bias at t = 0; it then follows the random walk in `noise`.
    pub accel_bias: Vec3,
    pub gyro_bias: Vec3,
}

impl Default for ImuModel {
    fn default() -> Self {
        Self {
            rate: 400.0,
            noise: ImuNoiseModel::default(),
            accel_bias: Vec3::new(0.02, -0.01, 0.03),
            gyro_bias: Vec3::new(0.002, -0.001, 0.0015),
        }
    }
}

impl ImuModel {
    pub fn noise_free() -> Self {
        Self { noise: ImuNoiseModel::zero(), accel_bias: Vec3::zeros(), gyro_bias: Vec3::zeros(), ..Self::default() }
    }
}

/// LiDAR and IMU configuration. `extrinsic` is the LiDAR pose in the body
/// (IMU) frame, so `T^W_L = T^W_I * extrinsic`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorRig {
    pub extrinsic: Pose,
    pub lidar: LidarModel,
    pub imu: ImuModel,
}

impl Default for SensorRig {
    fn default() -> Self {
        Self {
            extrinsic: Pose::from_translation(Vec3::new(0.1, 0.0, 0.15)),
            lidar: LidarModel::default(),
            imu: ImuModel::default(),
        }
    }
}

impl SensorRig {
    pub fn noise_free() -> Self {
        Self {
            lidar: LidarModel { range_noise: 0.0, ..LidarModel::default() },
            imu: ImuModel::noise_free(),
            ..Self::default()
        }
    }
}
