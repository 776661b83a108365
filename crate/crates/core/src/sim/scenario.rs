//! Named scenarios, in-memory simulated datasets and on-disk dataset export.

use std::f64::consts::PI;
use std::path::Path;

use crate::dataset::{DataSource, DatasetInfo};
use crate::geometry::{Pose, Vec3};
use crate::imu::{Gravity, ImuSample};
use crate::io::{write_imu_csv, write_sweep_csv, write_tum, DatasetError, Manifest, SweepEntry};
use crate::scan::Sweep;

use super::building::{generate_building, BuildingModel, BuildingSpec, LANDING_DEPTH, SHAFT_LENGTH};
use super::imu::simulate_imu;
use super::lidar::{simulate_sweep, Scene};
use super::trajectory::{Trajectory, WaypointTrajectory};
use super::{SensorRig, SimError};

pub const SCENARIOS: [&str; 3] = ["corridor-1f", "building-3f-loop", "stairwell-only"];

/// Height of the body frame above the walking surface.
pub const BODY_HEIGHT: f64 = 0.45;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ScenarioOptions {
    /// Overrides the scenario's natural duration (seconds).
    pub duration: Option<f64>,
    pub noise_free: bool,
    /// Overrides the LiDAR range noise deviation (m).
    pub range_noise: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: String,
    pub building: BuildingModel,
    pub trajectory: Trajectory,
    pub rig: SensorRig,
    pub gravity: Gravity,
    pub duration: f64,
}

impl Scenario {
    pub fn new(name: &str, options: &ScenarioOptions) -> Result<Scenario, SimError> {
        let (spec, trajectory, natural) = match name {
            "corridor-1f" => corridor_1f(),
            "building-3f-loop" => building_3f_loop(),
            "stairwell-only" => stairwell_only(),
            other => return Err(SimError::UnknownScenario(other.to_string())),
        };
        let building = generate_building(&spec)?;
        let mut rig = if options.noise_free { SensorRig::noise_free() } else { SensorRig::default() };
        if let Some(sigma) = options.range_noise {
            rig.lidar.range_noise = sigma;
        }
        Ok(Scenario {
            name: name.to_string(),
            building,
            trajectory: trajectory.into(),
            rig,
            gravity: Gravity::default(),
            duration: options.duration.unwrap_or(natural),
        })
    }

    pub fn sweep_count(&self) -> usize {
        (self.duration * self.rig.lidar.rate + 1e-9).floor() as usize
    }
}

fn corridor_1f() -> (BuildingSpec, WaypointTrajectory, f64) {
    let spec = BuildingSpec { stories: 1, stairwell: false, ..BuildingSpec::default() };
    let mut w = WaypointTrajectory::new(Vec3::new(2.0, 0.0, BODY_HEIGHT), 0.0);
    w.hold(1.0)
        .move_to(Vec3::new(11.0, 0.3, BODY_HEIGHT), 0.0)
        .turn_to(PI)
        .move_to(Vec3::new(5.0, -0.3, BODY_HEIGHT), PI);
    (spec, w, 30.0)
}

const LOOP_CORRIDOR: f64 = 14.0;

/// Climbs one flight of the switchback stair from story `k` to `k + 1`.
/// Starts on the near landing heading +x with yaw `yaw`; ends on the next
/// near landing heading -x with yaw `yaw + pi`.
fn climb(w: &mut WaypointTrajectory, k: usize, yaw: f64, h: f64) {
    let l = LOOP_CORRIDOR;
    let z0 = k as f64 * h + BODY_HEIGHT;
    let mid = z0 + h / 2.0;
    let ramp_lo = l + LANDING_DEPTH;
    let ramp_hi = l + SHAFT_LENGTH - LANDING_DEPTH;
    let far = ramp_hi + 0.5;
    w.move_to(Vec3::new(l + 0.5, -1.0, z0), yaw)
        .move_to(Vec3::new(ramp_lo, -1.0, z0), yaw)
        .move_to(Vec3::new(ramp_hi, -1.0, mid), yaw)
        .move_to(Vec3::new(far, -1.0, mid), yaw)
        .move_to(Vec3::new(far, 1.0, mid), yaw + PI)
        .move_to(Vec3::new(ramp_hi, 1.0, mid), yaw + PI)
        .move_to(Vec3::new(ramp_lo, 1.0, z0 + h), yaw + PI)
        .move_to(Vec3::new(l + 0.5, 1.0, z0 + h), yaw + PI);
}

/// Reverse of [`climb`]: from story `k + 1` down to `k`. Starts on the upper
/// near landing heading +x with yaw `yaw`; ends heading -x with `yaw - pi`.
fn descend(w: &mut WaypointTrajectory, k: usize, yaw: f64, h: f64) {
    let l = LOOP_CORRIDOR;
    let z0 = k as f64 * h + BODY_HEIGHT;
    let mid = z0 + h / 2.0;
    let ramp_lo = l + LANDING_DEPTH;
    let ramp_hi = l + SHAFT_LENGTH - LANDING_DEPTH;
    let far = ramp_hi + 0.5;
    w.move_to(Vec3::new(l + 0.5, 1.0, z0 + h), yaw)
        .move_to(Vec3::new(ramp_lo, 1.0, z0 + h), yaw)
        .move_to(Vec3::new(ramp_hi, 1.0, mid), yaw)
        .move_to(Vec3::new(far, 1.0, mid), yaw)
        .move_to(Vec3::new(far, -1.0, mid), yaw - PI)
        .move_to(Vec3::new(ramp_hi, -1.0, mid), yaw - PI)
        .move_to(Vec3::new(ramp_lo, -1.0, z0), yaw - PI)
        .move_to(Vec3::new(l + 0.5, -1.0, z0), yaw - PI);
}

fn building_3f_loop() -> (BuildingSpec, WaypointTrajectory, f64) {
    let spec = BuildingSpec { stories: 3, corridor_length: LOOP_CORRIDOR, ..BuildingSpec::default() };
    let h = spec.story_height;
    let l = LOOP_CORRIDOR;
    let start = Vec3::new(3.0, 0.0, BODY_HEIGHT);
    let mut w = WaypointTrajectory::new(start, 0.0);
    w.hold(1.0).move_to(Vec3::new(l - 1.0, 0.0, BODY_HEIGHT), 0.0);
    climb(&mut w, 0, 0.0, h);
    climb(&mut w, 1, 2.0 * PI, h);
    let top = 2.0 * h + BODY_HEIGHT;
    w.move_to(Vec3::new(l - 1.0, 0.0, top), 3.0 * PI)
        .move_to(Vec3::new(3.0, 0.0, top), 3.0 * PI)
        .turn_to(4.0 * PI)
        .move_to(Vec3::new(l - 1.0, 0.0, top), 4.0 * PI);
    descend(&mut w, 1, 4.0 * PI, h);
    // heading -x at y = -1; turn right towards lane B of the lower flight
    descend(&mut w, 0, 2.0 * PI, h);
    w.move_to(Vec3::new(l - 1.0, 0.0, BODY_HEIGHT), PI).move_to(start, PI).turn_to(0.0).hold(1.0);
    let duration = w.duration();
    (spec, w, duration)
}

fn stairwell_only() -> (BuildingSpec, WaypointTrajectory, f64) {
    let spec = BuildingSpec { stories: 2, corridor_length: LOOP_CORRIDOR, ..BuildingSpec::default() };
    let h = spec.story_height;
    let mut w = WaypointTrajectory::new(Vec3::new(LOOP_CORRIDOR - 1.5, 0.0, BODY_HEIGHT), 0.0);
    w.hold(1.0);
    climb(&mut w, 0, 0.0, h);
    w.hold(1.0);
    let duration = w.duration();
    (spec, w, duration)
}

/// Scenario with lazily generated sweeps and a precomputed IMU stream.
pub struct SimDataset {
    pub scenario: Scenario,
    scene: Scene,
    seed: u64,
    info: DatasetInfo,
    imu: Vec<ImuSample>,
    ground_truth: Vec<(f64, Pose)>,
}

impl SimDataset {
    pub fn new(name: &str, seed: u64, options: &ScenarioOptions) -> Result<Self, SimError> {
        Ok(Self::from_scenario(Scenario::new(name, options)?, seed))
    }

    pub fn from_scenario(scenario: Scenario, seed: u64) -> Self {
        let scene = Scene::new(scenario.building.clone());
        let rig = &scenario.rig;
        let count = scenario.sweep_count();
        let period = rig.lidar.sweep_period();
        let t_end = count as f64 * period;
        let imu = simulate_imu(&scenario.trajectory, rig, &scenario.gravity, seed, 0.0, t_end);
        let ground_truth =
            (0..count).map(|i| ((i + 1) as f64 * period, scenario.trajectory.pose((i + 1) as f64 * period))).collect();
        let info = DatasetInfo {
            scenario: scenario.name.clone(),
            seed,
            lidar_rate: rig.lidar.rate,
            imu_rate: rig.imu.rate,
            extrinsic: rig.extrinsic,
            gravity: scenario.gravity,
            imu_noise: rig.imu.noise,
        };
        Self { scenario, scene, seed, info, imu, ground_truth }
    }

    pub fn scene(&self) -> &Scene {
        &self.scene
    }

    pub fn manifest(&self) -> Manifest {
        let n = &self.info.imu_noise;
        Manifest {
            scenario: self.info.scenario.clone(),
            seed: self.seed,
            lidar_rate: self.info.lidar_rate,
            imu_rate: self.info.imu_rate,
            extrinsic: self.info.extrinsic,
            gravity: self.info.gravity.0,
            accel_noise_density: n.accel_noise_density,
            gyro_noise_density: n.gyro_noise_density,
            accel_bias_walk: n.accel_bias_walk,
            gyro_bias_walk: n.gyro_bias_walk,
            sweeps: (0..self.sweep_count())
                .map(|i| {
                    let (t_start, t_end) = self.sweep_interval(i);
                    SweepEntry { file: format!("sweeps/sweep_{i:06}.csv"), t_start, t_end }
                })
                .collect(),
        }
    }
}

impl DataSource for SimDataset {
    fn info(&self) -> &DatasetInfo {
        &self.info
    }

    fn sweep_count(&self) -> usize {
        self.ground_truth.len()
    }

    fn sweep_interval(&self, index: usize) -> (f64, f64) {
        let rate = self.scenario.rig.lidar.rate;
        (index as f64 / rate, (index + 1) as f64 / rate)
    }

    fn sweep(&self, index: usize) -> Result<Sweep, DatasetError> {
        let (t0, _) = self.sweep_interval(index);
        Ok(simulate_sweep(&self.scene, &self.scenario.trajectory, t0, &self.scenario.rig, self.seed))
    }

    fn imu(&self) -> &[ImuSample] {
        &self.imu
    }

    fn ground_truth(&self) -> Option<&[(f64, Pose)]> {
        Some(&self.ground_truth)
    }
}

fn io_failure(e: DatasetError) -> SimError {
    match e {
        DatasetError::Io { path, source } => SimError::IoFailure { path: path.display().to_string(), source },
        other => SimError::IoFailure { path: String::new(), source: std::io::Error::other(other.to_string()) },
    }
}

/// Writes `manifest.txt`, `imu.csv`, `sweeps/sweep_%06d.csv` and
/// `ground_truth.tum` under `out_dir`.
pub fn make_dataset(name: &str, seed: u64, out_dir: &Path, options: &ScenarioOptions) -> Result<SimDataset, SimError> {
    let data = SimDataset::new(name, seed, options)?;
    std::fs::create_dir_all(out_dir.join("sweeps"))
        .map_err(|source| SimError::IoFailure { path: out_dir.display().to_string(), source })?;
    let manifest = data.manifest();
    for (i, entry) in manifest.sweeps.iter().enumerate() {
        let sweep = data.sweep(i).map_err(io_failure)?;
        write_sweep_csv(&out_dir.join(&entry.file), &sweep.points).map_err(io_failure)?;
    }
    write_imu_csv(&out_dir.join("imu.csv"), data.imu()).map_err(io_failure)?;
    write_tum(&out_dir.join("ground_truth.tum"), &data.ground_truth).map_err(io_failure)?;
    manifest.write(&out_dir.join("manifest.txt")).map_err(io_failure)?;
    Ok(data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corridor_rates() {
        let s = SimDataset::new("corridor-1f", 1, &ScenarioOptions::default()).unwrap();
        assert_eq!(s.sweep_count(), 300);
        // samples at both ends of the 30 s span
        assert_eq!(s.imu().len(), 12001);
    }

    #[test]
    fn loop_is_closed() {
        let s = Scenario::new("building-3f-loop", &ScenarioOptions::default()).unwrap();
        let a = s.trajectory.pose(0.0);
        let b = s.trajectory.pose(s.duration);
        assert_eq!(a.translation, b.translation);
        assert_eq!(a.rotation, b.rotation);
        let Trajectory::Waypoints(w) = &s.trajectory else { panic!() };
        let length = w.path_length();
        assert!(length > 80.0 && length < 130.0, "path length {length}");
        // the path climbs two stories
        let top = w.waypoints().iter().map(|p| p.position.z).fold(f64::MIN, f64::max);
        assert!((top - (6.0 + BODY_HEIGHT)).abs() < 1e-12);
    }

    #[test]
    fn unknown_scenario() {
        assert!(matches!(Scenario::new("nope", &ScenarioOptions::default()), Err(SimError::UnknownScenario(_))));
    }

    #[test]
    fn dataset_files_deterministic() {
        let opts = ScenarioOptions { duration: Some(0.3), ..Default::default() };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        make_dataset("corridor-1f", 5, a.path(), &opts).unwrap();
        make_dataset("corridor-1f", 5, b.path(), &opts).unwrap();
        for f in ["manifest.txt", "imu.csv", "ground_truth.tum", "sweeps/sweep_000002.csv"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let disk = crate::dataset::DiskDataset::open(a.path()).unwrap();
        assert_eq!(disk.sweep_count(), 3);
        let mem = SimDataset::new("corridor-1f", 5, &opts).unwrap();
        assert_eq!(disk.sweep(1).unwrap(), mem.sweep(1).unwrap());
        assert_eq!(disk.imu(), mem.imu());
    }
}
