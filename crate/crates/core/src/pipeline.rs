//! End-to-end run: front-end odometry, keyframe selection, SRP extraction
//! and matching, pose-graph optimization, and the output artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::dataset::{DataSource, DiskDataset};
use crate::eval::{evaluate_loop_deviation, trajectory_error, DeviationReport, EvalError, TrajectoryError};
use crate::frontend::{Frontend, FrontendError};
use crate::geometry::{Pose, Vec3};
use crate::graph::{GraphError, PoseGraph};
use crate::io::{write_ply, write_srp_csv, write_tum, DatasetError};
use crate::matching::voxel_downsample;
use crate::scan::deskew;
use crate::srp::{extract_srp, is_keyframe, Keyframe, PlaneRegistry};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("front-end failed at sweep {sweep}: {source}")]
    Frontend { sweep: usize, source: FrontendError },
    #[error("pose graph failed at keyframe {keyframe}: {source}")]
    Graph { keyframe: usize, source: GraphError },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("dataset has no sweeps")]
    NoSweeps,
    #[error("I/O error on {}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

/// Wall-clock time per stage.
#[derive(Clone, Debug, Default)]
pub struct Timing {
    stages: BTreeMap<&'static str, (usize, f64)>,
}

impl Timing {
    pub fn record(&mut self, stage: &'static str, seconds: f64) {
        let entry = self.stages.entry(stage).or_default();
        entry.0 += 1;
        entry.1 += seconds;
    }

    fn time<T>(&mut self, stage: &'static str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.record(stage, start.elapsed().as_secs_f64());
        out
    }

    /// `(stage, calls, total seconds)`.
    pub fn stages(&self) -> impl Iterator<Item = (&'static str, usize, f64)> + '_ {
        self.stages.iter().map(|(k, (n, t))| (*k, *n, *t))
    }

    pub fn total(&self, stage: &str) -> f64 {
        self.stages.get(stage).map_or(0.0, |s| s.1)
    }

    fn merge(&mut self, other: &Timing) {
        for (stage, n, t) in other.stages() {
            let entry = self.stages.entry(stage).or_default();
            entry.0 += n;
            entry.1 += t;
        }
    }
}

/// A keyframe as produced by the front-end, before SRP extraction.
#[derive(Clone, Debug)]
pub struct FrontendKeyframe {
    pub sweep: usize,
    pub t: f64,
    /// Odometry LiDAR pose `T^W_K` including injected drift.
    pub pose: Pose,
    pub points: Vec<Vec3>,
    /// Odometry `T^{K_prev}_{K}` and the path length it covers.
    pub relative: Pose,
    pub path_length: f64,
}

#[derive(Clone, Debug)]
pub struct FrontendRun {
    pub keyframes: Vec<FrontendKeyframe>,
    /// Per-sweep body poses including injected drift.
    pub odometry: Vec<(f64, Pose)>,
    pub extrinsic: Pose,
    pub degraded_sweeps: usize,
    pub timing: Timing,
}

#[derive(Clone, Debug)]
pub struct PipelineResult {
    pub frontend: FrontendRun,
    pub keyframes: Vec<Keyframe>,
    pub graph: PoseGraph,
    /// Optimized keyframe body poses.
    pub trajectory: Vec<(f64, Pose)>,
    pub report: DeviationReport,
    /// Keyframe trajectory against ground truth, when the dataset has it.
    pub error: Option<TrajectoryError>,
    pub timing: Timing,
}

/// Odometry drift for a relative motion covering `length` meters.
pub fn drift(config: &RunConfig, length: f64) -> Pose {
    let t = Vec3::new(config.drift_x, config.drift_y, config.drift_z) * length;
    Pose::from_euler_zyx(config.drift_yaw_deg.to_radians() * length, 0.0, 0.0, t)
}

fn in_pool<T: Send>(single_thread: bool, f: impl FnOnce() -> T + Send) -> T {
    if !single_thread {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("one-thread pool");
    pool.install(f)
}

/// Runs the front-end over every sweep, injects the configured drift and
/// selects keyframes. The first and the last sweep are always keyframes.
pub fn run_frontend<D: DataSource + ?Sized>(data: &D, config: &RunConfig) -> Result<FrontendRun, PipelineError> {
    config.validate()?;
    in_pool(config.single_thread, || frontend_stage(data, config))
}

fn frontend_stage<D: DataSource + ?Sized>(data: &D, config: &RunConfig) -> Result<FrontendRun, PipelineError> {
    let n = data.sweep_count();
    if n == 0 {
        return Err(PipelineError::NoSweeps);
    }
    let info = data.info().clone();
    let params = config.frontend_params(&info.imu_noise);
    let srp_params = config.srp_params();
    let (t0, _) = data.sweep_interval(0);
    let mut frontend =
        Frontend::new(params, &info, data.imu(), t0).map_err(|source| PipelineError::Frontend { sweep: 0, source })?;
    let mut timing = Timing::default();
    let mut keyframes: Vec<FrontendKeyframe> = Vec::new();
    let mut odometry = Vec::with_capacity(n);
    let mut degraded = 0;
    let mut prev_t = t0;
    let mut prev_lidar: Option<Pose> = None;
    let mut drifted = Pose::identity();
    let mut since_keyframe = 0.0;
    for i in 0..n {
        let (_, t1) = data.sweep_interval(i);
        let sweep = timing.time("load", || data.sweep(i))?;
        let out = timing
            .time("odometry", || frontend.process_sweep(&sweep, data.imu_between(prev_t, t1)))
            .map_err(|source| PipelineError::Frontend { sweep: i, source })?;
        prev_t = t1;
        degraded += out.degraded as usize;
        let rel = prev_lidar.map_or(Pose::identity(), |p| p.between(&out.lidar_pose));
        let length = rel.translation.norm();
        drifted = match prev_lidar {
            None => out.lidar_pose,
            Some(_) => drifted.compose(&rel).compose(&drift(config, length)),
        };
        prev_lidar = Some(out.lidar_pose);
        since_keyframe += length;
        odometry.push((out.t, drifted.compose(&info.extrinsic.inverse())));

        let select = match keyframes.last() {
            None => true,
            Some(last) => i + 1 == n || is_keyframe(&drifted, &last.pose, &srp_params),
        };
        if select {
            let relative = keyframes.last().map_or(Pose::identity(), |last| last.pose.between(&drifted));
            keyframes.push(FrontendKeyframe {
                sweep: i,
                t: out.t,
                pose: drifted,
                points: out.deskewed.positions(),
                relative,
                path_length: if keyframes.is_empty() { 0.0 } else { since_keyframe },
            });
            since_keyframe = 0.0;
        }
    }
    Ok(FrontendRun { keyframes, odometry, extrinsic: info.extrinsic, degraded_sweeps: degraded, timing })
}

fn srp_seed(base: u64, keyframe: usize) -> u64 {
    base ^ (keyframe as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// SRP extraction, registry matching and graph optimization over the
/// front-end keyframes. With `use_srp = false` the graph holds odometry
/// edges only and is never optimized.
pub fn run_backend(
    front: &FrontendRun,
    config: &RunConfig,
) -> Result<(Vec<Keyframe>, PoseGraph, Timing), PipelineError> {
    config.validate()?;
    in_pool(config.single_thread, || backend_stage(front, config))
}

fn backend_stage(front: &FrontendRun, config: &RunConfig) -> Result<(Vec<Keyframe>, PoseGraph, Timing), PipelineError> {
    let srp_params = config.srp_params();
    let mut graph = PoseGraph::new(config.graph_params());
    let mut registry = PlaneRegistry::new();
    let mut timing = Timing::default();
    let mut keyframes = Vec::with_capacity(front.keyframes.len());
    for (id, fk) in front.keyframes.iter().enumerate() {
        let srps = if config.use_srp {
            timing
                .time("srp_extraction", || extract_srp(&fk.points, &srp_params, srp_seed(config.seed, id)))
                .unwrap_or_default()
        } else {
            Vec::new()
        };
        let estimate = graph.vertices().last().map_or(fk.pose, |v| v.pose.compose(&fk.relative));
        let keyframe = Keyframe { id, t: fk.t, pose: estimate, points: fk.points.clone(), srps };
        let matches = if config.use_srp {
            let mut poses = graph.poses();
            poses.push(estimate);
            timing.time("srp_matching", || registry.register(&keyframe, &poses, &srp_params))
        } else {
            Vec::new()
        };
        let start = Instant::now();
        let ran = graph
            .on_new_keyframe(id, fk.pose, fk.relative, fk.path_length, &matches)
            .map_err(|source| PipelineError::Graph { keyframe: id, source })?;
        if ran.is_some() {
            timing.record("graph_optimization", start.elapsed().as_secs_f64());
        }
        keyframes.push(keyframe);
    }
    for (kf, v) in keyframes.iter_mut().zip(graph.vertices()) {
        kf.pose = v.pose;
    }
    Ok((keyframes, graph, timing))
}

/// Combines a front-end run with a back-end pass into the final result.
pub fn assemble<D: DataSource + ?Sized>(
    data: &D,
    frontend: FrontendRun,
    config: &RunConfig,
) -> Result<PipelineResult, PipelineError> {
    let (keyframes, graph, backend_timing) = run_backend(&frontend, config)?;
    let body = frontend.extrinsic.inverse();
    let trajectory: Vec<(f64, Pose)> = keyframes.iter().map(|k| (k.t, k.pose.compose(&body))).collect();
    let report = evaluate_loop_deviation(&trajectory)?;
    let error = data.ground_truth().and_then(|gt| trajectory_error(&trajectory, gt, 1e-6));
    let mut timing = frontend.timing.clone();
    timing.merge(&backend_timing);
    Ok(PipelineResult { frontend, keyframes, graph, trajectory, report, error, timing })
}

pub fn run_pipeline<D: DataSource + ?Sized>(data: &D, config: &RunConfig) -> Result<PipelineResult, PipelineError> {
    let frontend = run_frontend(data, config)?;
    assemble(data, frontend, config)
}

/// Union of the keyframe points in the world frame, voxel-thinned.
pub fn export_map(keyframes: &[Keyframe], voxel: f64) -> Vec<Vec3> {
    let world: Vec<Vec3> =
        keyframes.iter().flat_map(|k| k.points.iter().map(move |p| k.pose.transform_point(p))).collect();
    voxel_downsample(&world, voxel)
}

/// Rebuilds a map from a body trajectory whose stamps are sweep end times:
/// each matching sweep is deskewed with the motion interpolated from the
/// previous trajectory pose, transformed and voxel-thinned. Stamps with no
/// sweep within `max_dt` are skipped.
pub fn map_from_trajectory<D: DataSource + ?Sized>(
    data: &D,
    trajectory: &[(f64, Pose)],
    voxel: f64,
    max_dt: f64,
) -> Result<Vec<Vec3>, PipelineError> {
    let extrinsic = data.info().extrinsic;
    let ends: Vec<f64> = (0..data.sweep_count()).map(|i| data.sweep_interval(i).1).collect();
    let mut world = Vec::new();
    let mut prev: Option<(f64, Pose)> = None;
    for (t, body) in trajectory {
        let lidar = body.compose(&extrinsic);
        let k = ends.partition_point(|e| *e < *t);
        let Some(i) = [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter(|&i| i < ends.len() && (ends[i] - t).abs() <= max_dt)
            .min_by(|&a, &b| (ends[a] - t).abs().total_cmp(&(ends[b] - t).abs()))
        else {
            prev = Some((*t, lidar));
            continue;
        };
        let sweep = data.sweep(i)?;
        let motion = match prev {
            Some((tp, p)) if *t > tp => {
                let s = 1.0 - ((sweep.t_end - sweep.t_start) / (t - tp)).min(1.0);
                Pose::interpolate(&p, &lidar, s).between(&lidar)
            }
            _ => Pose::identity(),
        };
        let points = deskew(&sweep, &motion).map(|s| s.positions()).unwrap_or_else(|_| sweep.positions());
        world.extend(points.iter().map(|x| lidar.transform_point(x)));
        prev = Some((*t, lidar));
    }
    Ok(voxel_downsample(&world, voxel))
}

fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    std::fs::write(path, text).map_err(|source| PipelineError::Io { path: path.to_path_buf(), source })
}

/// Writes `trajectory.tum`, `odometry.tum`, `map.ply`, `report.txt`,
/// `timing.txt`, `srp.csv`, `graph.txt` and `config.txt` into `out_dir`.
pub fn write_outputs(result: &PipelineResult, config: &RunConfig, out_dir: &Path) -> Result<(), PipelineError> {
    std::fs::create_dir_all(out_dir).map_err(|source| PipelineError::Io { path: out_dir.to_path_buf(), source })?;
    write_tum(&out_dir.join("trajectory.tum"), &result.trajectory)?;
    write_tum(&out_dir.join("odometry.tum"), &result.frontend.odometry)?;
    write_ply(&out_dir.join("map.ply"), &export_map(&result.keyframes, config.map_voxel))?;

    let rows: Vec<_> = result
        .keyframes
        .iter()
        .flat_map(|k| k.srps.iter().enumerate().map(move |(i, s)| (k.id, i, s.plane, s.inliers)))
        .collect();
    write_srp_csv(&out_dir.join("srp.csv"), &rows)?;

    let graph_path = out_dir.join("graph.txt");
    let mut dump = Vec::new();
    result.graph.dump(&mut dump).map_err(|source| PipelineError::Io { path: graph_path.clone(), source })?;
    std::fs::write(&graph_path, dump).map_err(|source| PipelineError::Io { path: graph_path.clone(), source })?;

    write_text(&out_dir.join("report.txt"), &report_text(result))?;
    write_text(&out_dir.join("timing.txt"), &timing_text(&result.timing))?;
    write_text(&out_dir.join("config.txt"), &config.to_text())?;
    Ok(())
}

pub fn report_text(result: &PipelineResult) -> String {
    let mut s = format!("{}\n", result.report);
    s.push_str(&format!("keyframes = {}\n", result.keyframes.len()));
    s.push_str(&format!("plane_edges = {}\n", result.graph.plane_edges().len()));
    s.push_str(&format!("optimizations = {}\n", result.graph.reports().len()));
    s.push_str(&format!("degraded_sweeps = {}\n", result.frontend.degraded_sweeps));
    if let Some(e) = &result.error {
        s.push_str(&format!("keyframe_rmse = {:.6}\n", e.rmse));
        s.push_str(&format!("keyframe_max_position_error = {:.6}\n", e.max_position_error));
        s.push_str(&format!("keyframe_max_angle_error = {:.6}\n", e.max_angle_error));
    }
    s
}

pub fn timing_text(timing: &Timing) -> String {
    let mut s = String::from("# stage calls mean_ms total_ms\n");
    for (stage, n, total) in timing.stages() {
        s.push_str(&format!("{stage} {n} {:.3} {:.3}\n", 1e3 * total / n.max(1) as f64, 1e3 * total));
    }
    s
}

/// Opens the dataset at `dataset_dir`, runs the pipeline and writes the
/// outputs.
pub fn run_dataset_dir(
    dataset_dir: &Path,
    config: &RunConfig,
    out_dir: &Path,
) -> Result<PipelineResult, PipelineError> {
    let data = DiskDataset::open(dataset_dir)?;
    let result = run_pipeline(&data, config)?;
    write_outputs(&result, config, out_dir)?;
    Ok(result)
}
