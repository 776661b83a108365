//! Sources of sweeps and IMU samples consumed by the pipeline.

use std::path::{Path, PathBuf};

use crate::geometry::Pose;
use crate::imu::{Gravity, ImuNoiseModel, ImuSample};
use crate::io::{read_imu_csv, read_sweep_csv, read_tum, DatasetError, Manifest};
use crate::scan::Sweep;

/// Sensor metadata shared by all sources.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetInfo {
    pub scenario: String,
    pub seed: u64,
    pub lidar_rate: f64,
    pub imu_rate: f64,
    /// LiDAR pose in the body (IMU) frame.
    pub extrinsic: Pose,
    pub gravity: Gravity,
    pub imu_noise: ImuNoiseModel,
}

pub trait DataSource: Sync {
    fn info(&self) -> &DatasetInfo;
    fn sweep_count(&self) -> usize;
    fn sweep_interval(&self, index: usize) -> (f64, f64);
    fn sweep(&self, index: usize) -> Result<Sweep, DatasetError>;
    fn imu(&self) -> &[ImuSample];
    /// Body poses at sweep end times, when known.
    fn ground_truth(&self) -> Option<&[(f64, Pose)]>;

    /// IMU samples with `t0 <= t <= t1`.
    fn imu_between(&self, t0: f64, t1: f64) -> &[ImuSample] {
        let imu = self.imu();
        let a = imu.partition_point(|s| s.t < t0 - 1e-9);
        let b = imu.partition_point(|s| s.t <= t1 + 1e-9);
        &imu[a..b.max(a)]
    }
}

/// Dataset directory: `manifest.txt`, `imu.csv`, `sweeps/*.csv`, and
/// optionally `ground_truth.tum`. Sweeps are read on demand.
#[derive(Debug)]
pub struct DiskDataset {
    root: PathBuf,
    manifest: Manifest,
    info: DatasetInfo,
    imu: Vec<ImuSample>,
    ground_truth: Option<Vec<(f64, Pose)>>,
}

impl DiskDataset {
    pub fn open(root: &Path) -> Result<Self, DatasetError> {
        let manifest = Manifest::read(&root.join("manifest.txt"))?;
        let imu = read_imu_csv(&root.join("imu.csv"))?;
        let gt_path = root.join("ground_truth.tum");
        let ground_truth = if gt_path.exists() { Some(read_tum(&gt_path)?) } else { None };
        let info = DatasetInfo {
            scenario: manifest.scenario.clone(),
            seed: manifest.seed,
            lidar_rate: manifest.lidar_rate,
            imu_rate: manifest.imu_rate,
            extrinsic: manifest.extrinsic,
            gravity: Gravity(manifest.gravity),
            imu_noise: ImuNoiseModel {
                accel_noise_density: manifest.accel_noise_density,
                gyro_noise_density: manifest.gyro_noise_density,
                accel_bias_walk: manifest.accel_bias_walk,
                gyro_bias_walk: manifest.gyro_bias_walk,
            },
        };
        Ok(Self { root: root.to_path_buf(), manifest, info, imu, ground_truth })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }
}

impl DataSource for DiskDataset {
    fn info(&self) -> &DatasetInfo {
        &self.info
    }

    fn sweep_count(&self) -> usize {
        self.manifest.sweeps.len()
    }

    fn sweep_interval(&self, index: usize) -> (f64, f64) {
        let e = &self.manifest.sweeps[index];
        (e.t_start, e.t_end)
    }

    fn sweep(&self, index: usize) -> Result<Sweep, DatasetError> {
        let e = &self.manifest.sweeps[index];
        let path = self.root.join(&e.file);
        let points = read_sweep_csv(&path)?;
        if let Some(bad) = points.iter().position(|p| p.t < e.t_start || p.t > e.t_end) {
            return Err(DatasetError::Format {
                path,
                line: bad as u64 + 2,
                message: format!("timestamp outside sweep interval [{}, {}]", e.t_start, e.t_end),
            });
        }
        Ok(Sweep::new(points, e.t_start, e.t_end))
    }

    fn imu(&self) -> &[ImuSample] {
        &self.imu
    }

    fn ground_truth(&self) -> Option<&[(f64, Pose)]> {
        self.ground_truth.as_deref()
    }
}
