//! Sliding-window LiDAR-inertial odometry.
//!
//! The window holds world-frame body states. The oldest pose is held fixed
//! (its velocity stays free), the IMU bias is shared across the window, and each frame keeps the
//! point-to-plane / point-to-line correspondences found when it was added
//! (targets stored in the world frame, points in the body frame).

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix1x6, Matrix6, SMatrix, Vector6};
use thiserror::Error;

use crate::dataset::DatasetInfo;
use crate::geometry::{quat_from_euler_zyx, so3_exp, transform_plane, Pose, Vec3};
use crate::imu::{
    imu_residual_with_jacobians, integrate, Gravity, ImuBias, ImuError, ImuNoiseModel, ImuSample, NavState,
    PreintegratedDelta, BIAS_REINTEGRATION_THRESHOLD,
};
use crate::matching::{
    build_local_map, find_correspondences, voxel_downsample, Correspondence, LineSegment3, MatchParams, Target,
};
use crate::scan::{deskew, extract_features, FeatureParams, FeatureSet, Sweep};
use crate::solver::{levenberg_marquardt, Linearization, LmReport, LmSettings, Problem, SolverError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrontendError {
    #[error("excessive motion during initialization (accelerometer std {std:.3} m/s^2 > {limit})")]
    ExcessiveMotionDuringInit { std: f64, limit: f64 },
    #[error("not enough IMU data to initialize ({0} samples)")]
    InsufficientInitData(usize),
    #[error(transparent)]
    Imu(#[from] ImuError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("insufficient constraints: {dims} LiDAR residual dimensions and no IMU factor")]
    InsufficientConstraints { dims: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrontendParams {
    /// Number of relative poses in the window (states kept = size + 1).
    pub window_size: usize,
    pub edge_voxel: f64,
    pub planar_voxel: f64,
    pub lidar_sigma: f64,
    /// Huber threshold on LiDAR residuals in metres; `None` for plain least squares.
    pub huber_delta: Option<f64>,
    pub outer_iterations: usize,
    pub lm: LmSettings,
    pub features: FeatureParams,
    pub matching: MatchParams,
    /// Noise model used to weight IMU factors.
    pub imu_noise: ImuNoiseModel,
    pub use_imu: bool,
    /// Adds point-to-line residuals for edge features.
    pub use_edges: bool,
    pub init_duration: f64,
    /// Per-axis accelerometer standard deviation tolerated while initializing.
    pub init_accel_std_max: f64,
    /// Estimate the IMU bias in the window; when false it stays at its initial value.
    pub estimate_bias: bool,
}

impl Default for FrontendParams {
    fn default() -> Self {
        Self {
            window_size: 5,
            edge_voxel: 0.2,
            planar_voxel: 0.1,
            lidar_sigma: 0.02,
            huber_delta: Some(0.1),
            outer_iterations: 2,
            lm: LmSettings::default(),
            features: FeatureParams { planar_per_sector: 20, ..FeatureParams::default() },
            matching: MatchParams { trim_sigmas: Some(8.0), ..MatchParams::default() },
            imu_noise: ImuNoiseModel::default(),
            use_imu: true,
            use_edges: false,
            init_duration: 0.5,
            init_accel_std_max: 0.35,
            estimate_bias: true,
        }
    }
}

/// Correspondence ready for the window solve: the point in the body frame
/// of its sweep and the target in the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldCorrespondence {
    pub point: Vec3,
    pub target: Target,
}

impl WorldCorrespondence {
    fn as_correspondence(&self) -> Correspondence {
        Correspondence { point: self.point, target: self.target }
    }
}

fn target_to_world(target: &Target, t: &Pose) -> Target {
    match target {
        Target::Plane(p) => Target::Plane(transform_plane(t, p)),
        Target::Line(l) => {
            Target::Line(LineSegment3 { point: t.transform_point(&l.point), direction: t.rotation * l.direction })
        }
    }
}

/// One state of the window with the data needed to re-evaluate its factors.
#[derive(Clone, Debug)]
pub struct Frame {
    pub t: f64,
    pub state: NavState,
    /// Features in the LiDAR frame at `t`.
    pub features: FeatureSet,
    pub correspondences: Vec<WorldCorrespondence>,
    /// Pre-integrated motion from the previous frame, with its samples.
    pub delta: Option<PreintegratedDelta>,
    pub imu_segment: Vec<ImuSample>,
}

#[derive(Clone, Debug)]
pub struct WindowState {
    pub frames: VecDeque<Frame>,
    /// Bias estimate and its information, used as the prior of the next solve.
    pub bias: ImuBias,
    pub bias_information: Matrix6<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostBreakdown {
    pub imu_cost: f64,
    pub planar_cost: f64,
    pub edge_cost: f64,
    pub total: f64,
    pub iterations: usize,
    pub residuals: usize,
}

#[derive(Clone, Debug)]
pub struct OdometryOutput {
    pub t: f64,
    /// Body (IMU) pose in the world frame.
    pub body_pose: Pose,
    /// LiDAR pose `T^W_L` at the sweep end.
    pub lidar_pose: Pose,
    pub state: NavState,
    /// Final cost divided by the residual count.
    pub cost_per_residual: f64,
    /// Set when feature extraction or matching failed and the pose is an IMU-only prediction.
    pub degraded: bool,
    /// The sweep re-expressed in the LiDAR frame at `t`.
    pub deskewed: Sweep,
    pub features: FeatureSet,
    pub report: Option<LmReport>,
}

/// Weights applied to the three cost groups. Scaling all three by the same
/// factor leaves the minimiser unchanged.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub imu: f64,
    pub planar: f64,
    pub edge: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self { imu: 1.0, planar: 1.0, edge: 1.0 }
    }
}

struct WindowProblem<'a> {
    frames: &'a VecDeque<Frame>,
    gravity: Gravity,
    use_imu: bool,
    lidar_info: f64,
    huber: Option<f64>,
    weights: CostWeights,
    bias_prior: ImuBias,
    bias_prior_info: Matrix6<f64>,
    imu_info: Vec<SMatrix<f64, 9, 9>>,
}

#[derive(Clone, Debug)]
struct WindowVars {
    states: Vec<NavState>,
    bias: ImuBias,
}

fn huber(r: f64, delta: Option<f64>) -> (f64, f64) {
    // (cost, IRLS weight) with cost = r^2 / 2 inside the threshold
    match delta {
        Some(d) if r.abs() > d => (d * r.abs() - 0.5 * d * d, d / r.abs()),
        _ => (0.5 * r * r, 1.0),
    }
}

impl WindowProblem<'_> {
    fn block(&self) -> usize {
        if self.use_imu {
            9
        } else {
            6
        }
    }

    /// Layout: `[v_0 (imu only) | (dp, dtheta, dv) per later frame | bias (imu only)]`.
    fn anchor_dim(&self) -> usize {
        if self.use_imu {
            3
        } else {
            0
        }
    }

    fn frame_offset(&self, k: usize) -> usize {
        self.anchor_dim() + (k - 1) * self.block()
    }

    fn bias_offset(&self) -> usize {
        self.anchor_dim() + (self.frames.len() - 1) * self.block()
    }

    fn dim(&self) -> usize {
        self.bias_offset() + if self.use_imu { 6 } else { 0 }
    }

    fn with_bias(s: &NavState, b: &ImuBias) -> NavState {
        NavState { bias: *b, ..*s }
    }

    fn breakdown(&self, vars: &WindowVars) -> CostBreakdown {
        let mut out = CostBreakdown::default();
        if self.use_imu {
            for k in 1..self.frames.len() {
                let Some(delta) = &self.frames[k].delta else {
                    continue;
                };
                let si = Self::with_bias(&vars.states[k - 1], &vars.bias);
                let sj = Self::with_bias(&vars.states[k], &vars.bias);
                let (r, _, _) = imu_residual_with_jacobians(&si, &sj, delta, &self.gravity);
                let r9 = r.fixed_rows::<9>(0);
                out.imu_cost += 0.5 * self.weights.imu * (r9.transpose() * self.imu_info[k] * r9)[0];
                out.residuals += 9;
            }
            let db = bias_vector(&vars.bias) - bias_vector(&self.bias_prior);
            out.imu_cost += 0.5 * self.weights.imu * db.dot(&(self.bias_prior_info * db));
        }
        for k in 1..self.frames.len() {
            let pose = vars.states[k].pose();
            for c in &self.frames[k].correspondences {
                let r = c.as_correspondence().residual(&pose);
                let (cost, _) = huber(r, self.huber);
                match c.target {
                    Target::Plane(_) => out.planar_cost += self.weights.planar * self.lidar_info * cost,
                    Target::Line(_) => out.edge_cost += self.weights.edge * self.lidar_info * cost,
                }
                out.residuals += 1;
            }
        }
        out.total = out.imu_cost + out.planar_cost + out.edge_cost;
        out
    }
}

fn bias_vector(b: &ImuBias) -> Vector6<f64> {
    Vector6::new(b.accel.x, b.accel.y, b.accel.z, b.gyro.x, b.gyro.y, b.gyro.z)
}

impl WindowProblem<'_> {
    /// Bias information after the solve: the prior plus the window's own
    /// information about the bias (Schur complement of the other states),
    /// divided by the number of IMU factors since consecutive windows share
    /// all but one of them.
    fn bias_posterior_information(&self, vars: &WindowVars) -> Matrix6<f64> {
        let lin = self.linearize(vars);
        let b = self.bias_offset();
        let n = b;
        let mut h = lin.hessian;
        let prior = self.bias_prior_info * self.weights.imu;
        for a in 0..6 {
            for c in 0..6 {
                h[(b + a, b + c)] -= prior[(a, c)];
            }
        }
        let hoo = h.view((0, 0), (n, n)).into_owned();
        let hob = h.view((0, b), (n, 6)).into_owned();
        let hbb: Matrix6<f64> = h.fixed_view::<6, 6>(b, b).into_owned();
        let scale = hoo.diagonal().amax().max(1.0) * 1e-9;
        let mut reg = hoo;
        for i in 0..n {
            reg[(i, i)] += scale;
        }
        let Some(chol) = reg.cholesky() else {
            return self.bias_prior_info;
        };
        let schur = hbb - hob.transpose() * chol.solve(&hob);
        let schur = Matrix6::from_iterator(schur.iter().copied());
        let factors = self.frames.iter().skip(1).filter(|f| f.delta.is_some()).count().max(1) as f64;
        let mut post = self.bias_prior_info + schur / (factors * self.weights.imu);
        post = (post + post.transpose()) * 0.5;
        post
    }
}

impl Problem for WindowProblem<'_> {
    type State = WindowVars;

    fn cost(&self, vars: &WindowVars) -> f64 {
        self.breakdown(vars).total
    }

    fn linearize(&self, vars: &WindowVars) -> Linearization {
        let n = self.dim();
        let mut h = DMatrix::zeros(n, n);
        let mut g = DVector::zeros(n);
        let off = |k: usize| self.frame_offset(k);
        let bias_off = self.bias_offset();

        if self.use_imu {
            for k in 1..self.frames.len() {
                let Some(delta) = &self.frames[k].delta else {
                    continue;
                };
                let si = Self::with_bias(&vars.states[k - 1], &vars.bias);
                let sj = Self::with_bias(&vars.states[k], &vars.bias);
                let (r, ji, jj) = imu_residual_with_jacobians(&si, &sj, delta, &self.gravity);
                let r9 = r.fixed_rows::<9>(0).into_owned();
                let info = self.imu_info[k] * self.weights.imu;
                // columns: [state k-1 (9) | state k (9) | bias (6)]
                let mut j = SMatrix::<f64, 9, 24>::zeros();
                j.fixed_view_mut::<9, 9>(0, 0).copy_from(&ji.fixed_view::<9, 9>(0, 0));
                j.fixed_view_mut::<9, 9>(0, 9).copy_from(&jj.fixed_view::<9, 9>(0, 0));
                let jb = ji.fixed_view::<9, 6>(0, 9) + jj.fixed_view::<9, 6>(0, 9);
                j.fixed_view_mut::<9, 6>(0, 18).copy_from(&jb);
                let jt_info = j.transpose() * info;
                let hh = jt_info * j;
                let gg = jt_info * r9;
                let mut idx: Vec<Option<usize>> = Vec::with_capacity(24);
                for c in 0..9 {
                    idx.push(match (k - 1, c) {
                        (0, 6..) => Some(c - 6),
                        (0, _) => None,
                        _ => Some(off(k - 1) + c),
                    });
                }
                for c in 0..9 {
                    idx.push(Some(off(k) + c));
                }
                for c in 0..6 {
                    idx.push(Some(bias_off + c));
                }
                for (a, ia) in idx.iter().enumerate() {
                    let Some(ia) = ia else { continue };
                    g[*ia] += gg[a];
                    for (b, ib) in idx.iter().enumerate() {
                        if let Some(ib) = ib {
                            h[(*ia, *ib)] += hh[(a, b)];
                        }
                    }
                }
            }
            let db = bias_vector(&vars.bias) - bias_vector(&self.bias_prior);
            let info = self.bias_prior_info * self.weights.imu;
            let gb = info * db;
            for a in 0..6 {
                g[bias_off + a] += gb[a];
                for b in 0..6 {
                    h[(bias_off + a, bias_off + b)] += info[(a, b)];
                }
            }
        }

        for k in 1..self.frames.len() {
            let pose = vars.states[k].pose();
            let mut hp = SMatrix::<f64, 6, 6>::zeros();
            let mut gp = Vector6::zeros();
            for c in &self.frames[k].correspondences {
                let (r, j): (f64, Matrix1x6<f64>) = c.as_correspondence().residual_with_jacobian(&pose);
                let (_, w) = huber(r, self.huber);
                let group = if matches!(c.target, Target::Plane(_)) { self.weights.planar } else { self.weights.edge };
                let w = w * self.lidar_info * group;
                hp += j.transpose() * j * w;
                gp += j.transpose() * (w * r);
            }
            let o = off(k);
            for a in 0..6 {
                g[o + a] += gp[a];
                for b in 0..6 {
                    h[(o + a, o + b)] += hp[(a, b)];
                }
            }
        }
        Linearization { cost: self.cost(vars), hessian: h, gradient: g }
    }

    fn retract(&self, vars: &WindowVars, delta: &DVector<f64>) -> WindowVars {
        let mut out = vars.clone();
        if self.use_imu {
            out.states[0].velocity += Vec3::new(delta[0], delta[1], delta[2]);
        }
        for k in 1..self.frames.len() {
            let o = self.frame_offset(k);
            let s = &mut out.states[k];
            s.position += Vec3::new(delta[o], delta[o + 1], delta[o + 2]);
            let dtheta = Vec3::new(delta[o + 3], delta[o + 4], delta[o + 5]);
            s.orientation = crate::geometry::Quat::new_normalize((s.orientation * so3_exp(&dtheta)).into_inner());
            if self.use_imu {
                s.velocity += Vec3::new(delta[o + 6], delta[o + 7], delta[o + 8]);
            }
        }
        if self.use_imu {
            let o = self.bias_offset();
            out.bias.accel += Vec3::new(delta[o], delta[o + 1], delta[o + 2]);
            out.bias.gyro += Vec3::new(delta[o + 3], delta[o + 4], delta[o + 5]);
        }
        out
    }
}

/// Jointly optimizes all non-anchor states of the window.
pub fn solve_window(
    window: &WindowState,
    gravity: &Gravity,
    params: &FrontendParams,
    weights: &CostWeights,
) -> Result<(WindowState, CostBreakdown, LmReport), FrontendError> {
    let frames = &window.frames;
    let has_imu = params.use_imu && frames.iter().skip(1).any(|f| f.delta.is_some());
    let lidar_dims: usize = frames.iter().skip(1).map(|f| f.correspondences.len()).sum();
    if !has_imu && lidar_dims < 6 {
        return Err(FrontendError::InsufficientConstraints { dims: lidar_dims });
    }
    let imu_info = frames
        .iter()
        .map(|f| {
            f.delta
                .as_ref()
                .map_or_else(SMatrix::<f64, 9, 9>::zeros, |d| d.information().fixed_view::<9, 9>(0, 0).into_owned())
        })
        .collect();
    let problem = WindowProblem {
        frames,
        gravity: *gravity,
        use_imu: has_imu,
        lidar_info: 1.0 / (params.lidar_sigma * params.lidar_sigma),
        huber: params.huber_delta,
        weights: *weights,
        bias_prior: window.bias,
        bias_prior_info: if params.estimate_bias { window.bias_information } else { Matrix6::identity() * 1e16 },
        imu_info,
    };
    let vars = WindowVars { states: frames.iter().map(|f| f.state).collect(), bias: window.bias };
    if frames.len() < 2 {
        let b = problem.breakdown(&vars);
        return Ok((window.clone(), b, LmReport::default()));
    }
    let (solved, report) = levenberg_marquardt(&problem, vars, &params.lm)?;
    let mut breakdown = problem.breakdown(&solved);
    breakdown.iterations = report.iterations;
    let mut out = window.clone();
    for (f, s) in out.frames.iter_mut().zip(&solved.states) {
        f.state = *s;
        f.state.bias = solved.bias;
    }
    out.bias = solved.bias;
    if has_imu && params.estimate_bias {
        out.bias_information = problem.bias_posterior_information(&solved);
    }
    Ok((out, breakdown, report))
}

/// Gravity-aligned initial state from a stationary IMU segment.
pub fn initialize(samples: &[ImuSample], gravity: &Gravity, accel_std_max: f64) -> Result<NavState, FrontendError> {
    if samples.len() < 10 {
        return Err(FrontendError::InsufficientInitData(samples.len()));
    }
    let n = samples.len() as f64;
    let mean_a: Vec3 = samples.iter().map(|s| s.accel).sum::<Vec3>() / n;
    let mean_g: Vec3 = samples.iter().map(|s| s.gyro).sum::<Vec3>() / n;
    let var: Vec3 = samples.iter().map(|s| (s.accel - mean_a).component_mul(&(s.accel - mean_a))).sum::<Vec3>() / n;
    let std = var.map(f64::sqrt).max();
    if std > accel_std_max {
        return Err(FrontendError::ExcessiveMotionDuringInit { std, limit: accel_std_max });
    }
    let roll = mean_a.y.atan2(mean_a.z);
    let pitch = (-mean_a.x).atan2((mean_a.y * mean_a.y + mean_a.z * mean_a.z).sqrt());
    let orientation = quat_from_euler_zyx(0.0, pitch, roll);
    let accel_bias = mean_a + orientation.inverse() * gravity.0;
    Ok(NavState {
        position: Vec3::zeros(),
        velocity: Vec3::zeros(),
        orientation,
        bias: ImuBias::new(accel_bias, mean_g),
    })
}

/// Information of the bias estimated from the mean of `samples` at rest.
fn initial_bias_information(samples: &[ImuSample], noise: &ImuNoiseModel) -> Matrix6<f64> {
    let span = match (samples.first(), samples.last()) {
        (Some(a), Some(b)) if b.t > a.t => b.t - a.t,
        _ => 1.0,
    };
    // variance of the mean of white noise with density q over the span
    let var = |q: f64| (q * q / span).max(1e-18);
    let (va, vg) = (var(noise.accel_noise_density), var(noise.gyro_noise_density));
    Matrix6::from_diagonal(&Vector6::new(1.0 / va, 1.0 / va, 1.0 / va, 1.0 / vg, 1.0 / vg, 1.0 / vg))
}

/// Adds the bias random walk over `dt` to an information matrix.
fn diffuse_bias_information(info: &Matrix6<f64>, noise: &ImuNoiseModel, dt: f64) -> Matrix6<f64> {
    let Some(cov) = info.try_inverse() else {
        return *info;
    };
    let qa = noise.accel_bias_walk.powi(2) * dt;
    let qg = noise.gyro_bias_walk.powi(2) * dt;
    let cov = cov + Matrix6::from_diagonal(&Vector6::new(qa, qa, qa, qg, qg, qg));
    cov.try_inverse().unwrap_or(*info)
}

/// Per-sweep odometry driver.
pub struct Frontend {
    pub params: FrontendParams,
    gravity: Gravity,
    extrinsic: Pose,
    window: WindowState,
    last_motion: Pose,
}

impl Frontend {
    /// Initializes from the IMU samples of the first `init_duration` seconds.
    pub fn new(params: FrontendParams, info: &DatasetInfo, imu: &[ImuSample], t0: f64) -> Result<Self, FrontendError> {
        let init: Vec<ImuSample> =
            imu.iter().filter(|s| s.t >= t0 && s.t <= t0 + params.init_duration).copied().collect();
        let state = if params.use_imu {
            initialize(&init, &info.gravity, params.init_accel_std_max)?
        } else {
            NavState::default()
        };
        let init_bias_info = initial_bias_information(&init, &params.imu_noise);
        Ok(Self {
            params,
            gravity: info.gravity,
            extrinsic: info.extrinsic,
            window: WindowState { frames: VecDeque::new(), bias: state.bias, bias_information: init_bias_info },
            last_motion: Pose::identity(),
        })
        .map(|mut f: Frontend| {
            f.window.frames.push_back(Frame {
                t: f64::NAN,
                state,
                features: FeatureSet::default(),
                correspondences: Vec::new(),
                delta: None,
                imu_segment: Vec::new(),
            });
            f
        })
    }

    pub fn window(&self) -> &WindowState {
        &self.window
    }

    pub fn extrinsic(&self) -> &Pose {
        &self.extrinsic
    }

    fn lidar_pose(&self, s: &NavState) -> Pose {
        s.pose().compose(&self.extrinsic)
    }

    /// Processes one sweep. `imu` must cover the interval from the previous
    /// sweep end to this sweep end (bracketing samples included).
    pub fn process_sweep(&mut self, sweep: &Sweep, imu: &[ImuSample]) -> Result<OdometryOutput, FrontendError> {
        let first = self.window.frames.len() == 1 && self.window.frames[0].t.is_nan();
        let prev = self.window.frames.back().unwrap().clone();
        let bias = self.window.bias;

        // prediction
        let (pred_state, delta) = if first {
            (prev.state, None)
        } else if self.params.use_imu {
            let delta = integrate(imu, &bias, &self.params.imu_noise)?;
            let mut s = delta.predict(&NavState { bias, ..prev.state }, &self.gravity);
            s.bias = bias;
            (s, Some(delta))
        } else {
            let pose = prev.state.pose().compose(&self.last_motion);
            (NavState { position: pose.translation, orientation: pose.rotation, ..prev.state }, None)
        };

        let prev_lidar = self.lidar_pose(&prev.state);
        let pred_lidar = self.lidar_pose(&pred_state);
        let motion = if first { Pose::identity() } else { prev_lidar.between(&pred_lidar) };
        let deskewed = deskew(sweep, &motion).unwrap_or_else(|_| sweep.clone());
        let features = extract_features(&deskewed, &self.params.features);
        let (features, mut degraded) = match features {
            Ok(mut f) => {
                if !self.params.use_edges {
                    f.edge_points.clear();
                    f.edge_map_points.clear();
                }
                // thin the map-only points once per sweep instead of per window
                f.edge_map_points = voxel_downsample(&f.edge_map_points, self.params.edge_voxel);
                f.planar_map_points = voxel_downsample(&f.planar_map_points, self.params.planar_voxel);
                (f, false)
            }
            Err(e) => {
                log::warn!("sweep at t={:.3}: {e}; using prediction", sweep.t_end);
                (FeatureSet::default(), true)
            }
        };

        let new_frame = Frame {
            t: sweep.t_end,
            state: pred_state,
            features: features.clone(),
            correspondences: Vec::new(),
            delta,
            imu_segment: imu.to_vec(),
        };

        if first {
            self.window.frames[0] = new_frame;
            let state = self.window.frames[0].state;
            return Ok(self.output(sweep.t_end, state, 0.0, degraded, deskewed, features, None));
        }

        // local map in the previous LiDAR frame
        let anchor = prev_lidar;
        let anchor_inv = anchor.inverse();
        let map_frames: Vec<(FeatureSet, Pose)> = self
            .window
            .frames
            .iter()
            .filter(|f| !f.features.is_empty())
            .map(|f| (f.features.clone(), anchor_inv.compose(&self.lidar_pose(&f.state))))
            .collect();
        let map = build_local_map(&map_frames, self.params.edge_voxel, self.params.planar_voxel).ok();

        let mut candidate = self.window.clone();
        candidate.bias_information =
            diffuse_bias_information(&candidate.bias_information, &self.params.imu_noise, sweep.t_end - prev.t);
        self.refresh_deltas(&mut candidate);
        candidate.frames.push_back(new_frame);
        let mut breakdown = CostBreakdown::default();
        let mut last_report = None;
        let mut posterior = None;
        let outer = self.params.outer_iterations.max(1);
        for iteration in 0..outer {
            let current = candidate.frames.back().unwrap().state;
            // trimming against the raw prediction would discard exactly the
            // features that correct its error, so it waits for a solved pose
            let mut matching = self.params.matching;
            if iteration == 0 && outer > 1 {
                matching.trim_sigmas = None;
            }
            let correspondences = match &map {
                Some(m) if !features.is_empty() => {
                    let prediction = anchor_inv.compose(&self.lidar_pose(&current));
                    find_correspondences(&features, m, &prediction, &matching)
                }
                _ => Vec::new(),
            };
            let world: Vec<WorldCorrespondence> = correspondences
                .iter()
                .map(|c| WorldCorrespondence {
                    point: self.extrinsic.transform_point(&c.point),
                    target: target_to_world(&c.target, &anchor),
                })
                .collect();
            candidate.frames.back_mut().unwrap().correspondences = world;
            match solve_window(&candidate, &self.gravity, &self.params, &CostWeights::default()) {
                Ok((solved, b, report)) => {
                    // later outer iterations restart from this solution but
                    // keep the original priors so they are counted once
                    posterior = Some((solved.bias, solved.bias_information));
                    candidate.frames = solved.frames;
                    breakdown = b;
                    last_report = Some(report);
                }
                Err(FrontendError::InsufficientConstraints { dims }) => {
                    log::warn!("sweep at t={:.3}: only {dims} LiDAR residuals; using prediction", sweep.t_end);
                    degraded = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }

        if let Some((bias, information)) = posterior {
            candidate.bias = bias;
            candidate.bias_information = information;
        }
        let state = candidate.frames.back().unwrap().state;
        if !self.params.use_imu {
            let dt = sweep.t_end - prev.t;
            let mut s = state;
            s.velocity = (state.position - prev.state.position) / dt.max(1e-9);
            candidate.frames.back_mut().unwrap().state = s;
            self.last_motion = prev.state.pose().between(&state.pose());
        }
        while candidate.frames.len() > self.params.window_size + 1 {
            candidate.frames.pop_front();
            if let Some(f) = candidate.frames.front_mut() {
                f.delta = None;
                f.imu_segment.clear();
            }
        }
        self.window = candidate;
        let state = self.window.frames.back().unwrap().state;
        let per = if breakdown.residuals > 0 { breakdown.total / breakdown.residuals as f64 } else { 0.0 };
        Ok(self.output(sweep.t_end, state, per, degraded, deskewed, features, last_report))
    }

    /// Re-integrates deltas whose reference bias is too far from the current one.
    fn refresh_deltas(&self, window: &mut WindowState) {
        let bias = window.bias;
        for f in window.frames.iter_mut() {
            let stale = f.delta.as_ref().is_some_and(|d| {
                let da = d.bias_ref.accel - bias.accel;
                let dg = d.bias_ref.gyro - bias.gyro;
                (da.norm_squared() + dg.norm_squared()).sqrt() > BIAS_REINTEGRATION_THRESHOLD
            });
            if stale {
                if let Ok(d) = integrate(&f.imu_segment, &bias, &self.params.imu_noise) {
                    f.delta = Some(d);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn output(
        &self,
        t: f64,
        state: NavState,
        cost_per_residual: f64,
        degraded: bool,
        deskewed: Sweep,
        features: FeatureSet,
        report: Option<LmReport>,
    ) -> OdometryOutput {
        OdometryOutput {
            t,
            body_pose: state.pose(),
            lidar_pose: self.lidar_pose(&state),
            state,
            cost_per_residual,
            degraded,
            deskewed,
            features,
            report,
        }
    }
}
