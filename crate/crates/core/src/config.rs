//! Run configuration: every tunable as one flat `key = value` document.
//! Angles are in degrees here and converted when module parameters are built.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frontend::FrontendParams;
use crate::graph::GraphParams;
use crate::imu::ImuNoiseModel;
use crate::matching::MatchParams;
use crate::scan::FeatureParams;
use crate::solver::LmSettings;
use crate::srp::SrpParams;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("{key} = {value} is outside {range}")]
    OutOfRange { key: &'static str, value: String, range: &'static str },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base seed for the RANSAC plane extraction.
    pub seed: u64,
    pub single_thread: bool,

    pub window_size: usize,
    pub edge_voxel: f64,
    pub planar_voxel: f64,
    pub lidar_sigma: f64,
    /// Huber threshold on LiDAR residuals, 0 disables the robust loss.
    pub huber_delta: f64,
    pub outer_iterations: usize,
    pub frontend_max_iterations: usize,
    pub use_imu: bool,
    pub use_edges: bool,
    pub estimate_bias: bool,
    pub init_duration: f64,
    pub init_accel_std_max: f64,
    /// IMU weights used when the dataset declares zero sensor noise.
    pub accel_noise_density: f64,
    pub gyro_noise_density: f64,
    pub accel_bias_walk: f64,
    pub gyro_bias_walk: f64,

    pub curvature_half_window: usize,
    pub feature_sectors: usize,
    pub edges_per_sector: usize,
    pub planar_per_sector: usize,
    pub edge_threshold: f64,
    pub planar_threshold: f64,
    pub match_neighbors: usize,
    pub match_radius: f64,
    pub plane_score_max: f64,
    pub line_score_max: f64,
    /// Correspondence trimming in robust sigmas, 0 disables it.
    pub trim_sigmas: f64,

    pub use_srp: bool,
    pub keyframe_distance: f64,
    pub keyframe_attitude_deg: f64,
    pub ransac_threshold: f64,
    pub ransac_max_iterations: usize,
    pub ransac_confidence: f64,
    pub srp_min_inliers: usize,
    pub srp_consume_fraction: f64,
    pub srp_orthogonality: f64,
    pub srp_angle_gate_deg: f64,
    pub srp_distance_gate: f64,
    pub srp_locality: f64,

    pub odom_translation_sigma: f64,
    pub odom_rotation_sigma_deg: f64,
    pub plane_sigma: f64,
    pub min_plane_distance: f64,
    pub graph_max_iterations: usize,
    pub graph_tolerance: f64,

    /// Odometry drift injected before the back-end, per meter travelled:
    /// translation in the sensor frame (m/m) and yaw (deg/m).
    pub drift_x: f64,
    pub drift_y: f64,
    pub drift_z: f64,
    pub drift_yaw_deg: f64,

    pub map_voxel: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let fe = FrontendParams::default();
        let srp = SrpParams::default();
        let graph = GraphParams::default();
        Self {
            seed: 0,
            single_thread: false,
            window_size: fe.window_size,
            edge_voxel: fe.edge_voxel,
            planar_voxel: fe.planar_voxel,
            lidar_sigma: fe.lidar_sigma,
            huber_delta: fe.huber_delta.unwrap_or(0.0),
            outer_iterations: fe.outer_iterations,
            frontend_max_iterations: fe.lm.max_iterations,
            use_imu: fe.use_imu,
            use_edges: fe.use_edges,
            estimate_bias: fe.estimate_bias,
            init_duration: fe.init_duration,
            init_accel_std_max: fe.init_accel_std_max,
            accel_noise_density: fe.imu_noise.accel_noise_density,
            gyro_noise_density: fe.imu_noise.gyro_noise_density,
            accel_bias_walk: fe.imu_noise.accel_bias_walk,
            gyro_bias_walk: fe.imu_noise.gyro_bias_walk,
            curvature_half_window: fe.features.half_window,
            feature_sectors: fe.features.sectors,
            edges_per_sector: fe.features.edges_per_sector,
            planar_per_sector: fe.features.planar_per_sector,
            edge_threshold: fe.features.edge_threshold,
            planar_threshold: fe.features.planar_threshold,
            match_neighbors: fe.matching.neighbors,
            match_radius: fe.matching.radius,
            plane_score_max: fe.matching.plane_score_max,
            line_score_max: fe.matching.line_score_max,
            trim_sigmas: fe.matching.trim_sigmas.unwrap_or(0.0),
            use_srp: true,
            keyframe_distance: srp.keyframe_distance,
            keyframe_attitude_deg: srp.keyframe_attitude.to_degrees().round(),
            ransac_threshold: srp.ransac_threshold,
            ransac_max_iterations: srp.ransac_max_iterations,
            ransac_confidence: srp.ransac_confidence,
            srp_min_inliers: srp.min_inliers,
            srp_consume_fraction: srp.consume_fraction,
            srp_orthogonality: srp.orthogonality,
            srp_angle_gate_deg: srp.angle_gate.to_degrees().round(),
            srp_distance_gate: srp.distance_gate,
            srp_locality: srp.locality,
            odom_translation_sigma: graph.odometry_translation_sigma,
            odom_rotation_sigma_deg: 0.5,
            plane_sigma: graph.plane_sigma,
            min_plane_distance: graph.min_plane_distance,
            graph_max_iterations: graph.lm.max_iterations,
            graph_tolerance: graph.lm.relative_cost_tolerance,
            drift_x: 0.0,
            drift_y: 0.0,
            drift_z: 0.0,
            drift_yaw_deg: 0.0,
            map_voxel: 0.05,
        }
    }
}

fn check<T: PartialOrd + ToString>(
    key: &'static str,
    value: T,
    ok: impl Fn(&T) -> bool,
    range: &'static str,
) -> Result<(), ConfigError> {
    if ok(&value) {
        Ok(())
    } else {
        Err(ConfigError::OutOfRange { key, value: value.to_string(), range })
    }
}

fn positive(v: &f64) -> bool {
    v.is_finite() && *v > 0.0
}

fn non_negative(v: &f64) -> bool {
    v.is_finite() && *v >= 0.0
}

fn unit_open(v: &f64) -> bool {
    *v > 0.0 && *v < 1.0
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::parse(&text)
    }

    /// One `key = value` line per field. Panics if `seed` is out of range;
    /// [`RunConfig::validate`] rejects such configs.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        // TOML integers are signed 64-bit
        check("seed", self.seed, |v| i64::try_from(*v).is_ok(), "[0, 2^63 - 1]")?;
        check("window_size", self.window_size, |v| (1..=50).contains(v), "[1, 50]")?;
        check("edge_voxel", self.edge_voxel, positive, "(0, inf)")?;
        check("planar_voxel", self.planar_voxel, positive, "(0, inf)")?;
        check("lidar_sigma", self.lidar_sigma, positive, "(0, inf)")?;
        check("huber_delta", self.huber_delta, non_negative, "[0, inf)")?;
        check("outer_iterations", self.outer_iterations, |v| (1..=10).contains(v), "[1, 10]")?;
        check("frontend_max_iterations", self.frontend_max_iterations, |v| (1..=1000).contains(v), "[1, 1000]")?;
        check("init_duration", self.init_duration, positive, "(0, inf)")?;
        check("init_accel_std_max", self.init_accel_std_max, positive, "(0, inf)")?;
        check("accel_noise_density", self.accel_noise_density, positive, "(0, inf)")?;
        check("gyro_noise_density", self.gyro_noise_density, positive, "(0, inf)")?;
        check("accel_bias_walk", self.accel_bias_walk, positive, "(0, inf)")?;
        check("gyro_bias_walk", self.gyro_bias_walk, positive, "(0, inf)")?;
        check("curvature_half_window", self.curvature_half_window, |v| (1..=20).contains(v), "[1, 20]")?;
        check("feature_sectors", self.feature_sectors, |v| (1..=64).contains(v), "[1, 64]")?;
        check("edges_per_sector", self.edges_per_sector, |v| *v <= 1000, "[0, 1000]")?;
        check("planar_per_sector", self.planar_per_sector, |v| (1..=1000).contains(v), "[1, 1000]")?;
        check("edge_threshold", self.edge_threshold, positive, "(0, inf)")?;
        check("planar_threshold", self.planar_threshold, positive, "(0, inf)")?;
        if self.planar_threshold > self.edge_threshold {
            return Err(ConfigError::OutOfRange {
                key: "planar_threshold",
                value: self.planar_threshold.to_string(),
                range: "[0, edge_threshold]",
            });
        }
        check("match_neighbors", self.match_neighbors, |v| (3..=20).contains(v), "[3, 20]")?;
        check("match_radius", self.match_radius, positive, "(0, inf)")?;
        check("plane_score_max", self.plane_score_max, positive, "(0, inf)")?;
        check("line_score_max", self.line_score_max, positive, "(0, inf)")?;
        check("trim_sigmas", self.trim_sigmas, non_negative, "[0, inf)")?;
        check("keyframe_distance", self.keyframe_distance, positive, "(0, inf)")?;
        check("keyframe_attitude_deg", self.keyframe_attitude_deg, |v| *v > 0.0 && *v < 180.0, "(0, 180)")?;
        check("ransac_threshold", self.ransac_threshold, positive, "(0, inf)")?;
        check("ransac_max_iterations", self.ransac_max_iterations, |v| *v >= 1, "[1, inf)")?;
        check("ransac_confidence", self.ransac_confidence, unit_open, "(0, 1)")?;
        check("srp_min_inliers", self.srp_min_inliers, |v| *v >= 3, "[3, inf)")?;
        check("srp_consume_fraction", self.srp_consume_fraction, |v| *v > 0.0 && *v <= 1.0, "(0, 1]")?;
        check("srp_orthogonality", self.srp_orthogonality, |v| *v >= 0.0 && *v <= 1.0, "[0, 1]")?;
        check("srp_angle_gate_deg", self.srp_angle_gate_deg, |v| *v > 0.0 && *v <= 90.0, "(0, 90]")?;
        check("srp_distance_gate", self.srp_distance_gate, positive, "(0, inf)")?;
        check("srp_locality", self.srp_locality, positive, "(0, inf)")?;
        check("odom_translation_sigma", self.odom_translation_sigma, positive, "(0, inf)")?;
        check("odom_rotation_sigma_deg", self.odom_rotation_sigma_deg, positive, "(0, inf)")?;
        check("plane_sigma", self.plane_sigma, positive, "(0, inf)")?;
        check("min_plane_distance", self.min_plane_distance, non_negative, "[0, inf)")?;
        check("graph_max_iterations", self.graph_max_iterations, |v| (1..=1000).contains(v), "[1, 1000]")?;
        check("graph_tolerance", self.graph_tolerance, |v| *v >= 0.0 && *v < 1.0, "[0, 1)")?;
        for (key, v) in [("drift_x", self.drift_x), ("drift_y", self.drift_y), ("drift_z", self.drift_z)] {
            check(key, v, |v| v.abs() <= 0.5, "[-0.5, 0.5]")?;
        }
        check("drift_yaw_deg", self.drift_yaw_deg, |v| v.abs() <= 10.0, "[-10, 10]")?;
        check("map_voxel", self.map_voxel, positive, "(0, inf)")?;
        Ok(())
    }

    /// Front-end parameters. `dataset_noise` replaces the configured IMU
    /// weights when it is non-zero.
    pub fn frontend_params(&self, dataset_noise: &ImuNoiseModel) -> FrontendParams {
        let configured = ImuNoiseModel {
            accel_noise_density: self.accel_noise_density,
            gyro_noise_density: self.gyro_noise_density,
            accel_bias_walk: self.accel_bias_walk,
            gyro_bias_walk: self.gyro_bias_walk,
        };
        let n = dataset_noise;
        let dataset_usable = n.accel_noise_density > 0.0
            && n.gyro_noise_density > 0.0
            && n.accel_bias_walk > 0.0
            && n.gyro_bias_walk > 0.0;
        FrontendParams {
            window_size: self.window_size,
            edge_voxel: self.edge_voxel,
            planar_voxel: self.planar_voxel,
            lidar_sigma: self.lidar_sigma,
            huber_delta: (self.huber_delta > 0.0).then_some(self.huber_delta),
            outer_iterations: self.outer_iterations,
            lm: LmSettings { max_iterations: self.frontend_max_iterations, ..LmSettings::default() },
            features: FeatureParams {
                half_window: self.curvature_half_window,
                sectors: self.feature_sectors,
                edges_per_sector: self.edges_per_sector,
                planar_per_sector: self.planar_per_sector,
                edge_threshold: self.edge_threshold,
                planar_threshold: self.planar_threshold,
                ..FeatureParams::default()
            },
            matching: MatchParams {
                neighbors: self.match_neighbors,
                radius: self.match_radius,
                plane_score_max: self.plane_score_max,
                line_score_max: self.line_score_max,
                trim_sigmas: (self.trim_sigmas > 0.0).then_some(self.trim_sigmas),
                ..MatchParams::default()
            },
            imu_noise: if dataset_usable { *dataset_noise } else { configured },
            use_imu: self.use_imu,
            use_edges: self.use_edges,
            init_duration: self.init_duration,
            init_accel_std_max: self.init_accel_std_max,
            estimate_bias: self.estimate_bias,
        }
    }

    pub fn srp_params(&self) -> SrpParams {
        SrpParams {
            keyframe_distance: self.keyframe_distance,
            keyframe_attitude: self.keyframe_attitude_deg.to_radians(),
            ransac_threshold: self.ransac_threshold,
            ransac_max_iterations: self.ransac_max_iterations,
            ransac_confidence: self.ransac_confidence,
            min_inliers: self.srp_min_inliers,
            consume_fraction: self.srp_consume_fraction,
            orthogonality: self.srp_orthogonality,
            angle_gate: self.srp_angle_gate_deg.to_radians(),
            distance_gate: self.srp_distance_gate,
            locality: self.srp_locality,
        }
    }

    pub fn graph_params(&self) -> GraphParams {
        let defaults = GraphParams::default();
        GraphParams {
            odometry_translation_sigma: self.odom_translation_sigma,
            odometry_rotation_sigma: self.odom_rotation_sigma_deg.to_radians(),
            plane_sigma: self.plane_sigma,
            min_plane_distance: self.min_plane_distance,
            lm: LmSettings {
                max_iterations: self.graph_max_iterations,
                relative_cost_tolerance: self.graph_tolerance,
                ..defaults.lm
            },
            ..defaults
        }
    }
}
