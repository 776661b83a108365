//! IMU measurement model, pre-integration between scan times, and the
//! relative-motion residual used by the front-end window.

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

use crate::geometry::{
    propagate_quaternion, quat_angle, right_jacobian, right_jacobian_inv, skew, so3_exp, so3_log, Mat3, Quat, Vec3,
};

pub type Mat9 = SMatrix<f64, 9, 9>;
pub type Mat15 = SMatrix<f64, 15, 15>;
pub type Vec15 = SVector<f64, 15>;

/// Bias drift (norm of the combined change) beyond which a delta must be
/// re-integrated instead of corrected to first order.
pub const BIAS_REINTEGRATION_THRESHOLD: f64 = 1e-2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImuError {
    #[error("IMU stream has fewer than two samples")]
    EmptyStream,
    #[error("IMU timestamps not strictly increasing at sample {index} (t = {t})")]
    NonMonotonicTime { index: usize, t: f64 },
    #[error("bias moved {drift:.4} from the pre-integration reference; re-integrate")]
    BiasReferenceStale { drift: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub accel: Vec3,
    pub gyro: Vec3,
}

impl ImuSample {
    pub fn new(t: f64, accel: Vec3, gyro: Vec3) -> Self {
        Self { t, accel, gyro }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ImuBias {
    pub accel: Vec3,
    pub gyro: Vec3,
}

impl ImuBias {
    pub fn new(accel: Vec3, gyro: Vec3) -> Self {
        Self { accel, gyro }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    fn drift_from(&self, other: &ImuBias) -> f64 {
        ((self.accel - other.accel).norm_squared() + (self.gyro - other.gyro).norm_squared()).sqrt()
    }
}

/// White-noise densities (per sqrt(Hz)) and bias random-walk densities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImuNoiseModel {
    pub accel_noise_density: f64,
    pub gyro_noise_density: f64,
    pub accel_bias_walk: f64,
    pub gyro_bias_walk: f64,
}

impl Default for ImuNoiseModel {
    fn default() -> Self {
        Self { accel_noise_density: 1e-2, gyro_noise_density: 1e-3, accel_bias_walk: 1e-4, gyro_bias_walk: 1e-5 }
    }
}

impl ImuNoiseModel {
    pub fn zero() -> Self {
        Self { accel_noise_density: 0.0, gyro_noise_density: 0.0, accel_bias_walk: 0.0, gyro_bias_walk: 0.0 }
    }
}

/// Constant world-frame gravity, default `(0, 0, -9.81)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gravity(pub Vec3);

impl Default for Gravity {
    fn default() -> Self {
        Gravity(Vec3::new(0.0, 0.0, -9.81))
    }
}

/// IMU state in the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NavState {
    pub position: Vec3,
    pub velocity: Vec3,
    pub orientation: Quat,
    pub bias: ImuBias,
}

impl Default for NavState {
    fn default() -> Self {
        Self { position: Vec3::zeros(), velocity: Vec3::zeros(), orientation: Quat::identity(), bias: ImuBias::zero() }
    }
}

impl NavState {
    pub fn pose(&self) -> crate::geometry::Pose {
        crate::geometry::Pose::new(self.orientation, self.position)
    }

    /// Applies a 15-dim tangent update ordered `[dp, dtheta, dv, dba, dbg]`.
    pub fn retract(&self, delta: &Vec15) -> NavState {
        let block = |i: usize| Vec3::new(delta[i], delta[i + 1], delta[i + 2]);
        NavState {
            position: self.position + block(0),
            orientation: Quat::new_normalize((self.orientation * so3_exp(&block(3))).into_inner()),
            velocity: self.velocity + block(6),
            bias: ImuBias { accel: self.bias.accel + block(9), gyro: self.bias.gyro + block(12) },
        }
    }
}

/// First-order sensitivities of the deltas to the reference bias.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BiasJacobians {
    pub rot_gyro: Mat3,
    pub vel_accel: Mat3,
    pub vel_gyro: Mat3,
    pub pos_accel: Mat3,
    pub pos_gyro: Mat3,
}

impl Default for BiasJacobians {
    fn default() -> Self {
        Self {
            rot_gyro: Mat3::zeros(),
            vel_accel: Mat3::zeros(),
            vel_gyro: Mat3::zeros(),
            pos_accel: Mat3::zeros(),
            pos_gyro: Mat3::zeros(),
        }
    }
}

/// Relative motion accumulated between two sample times, gravity excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct PreintegratedDelta {
    pub dp: Vec3,
    pub dv: Vec3,
    pub dq: Quat,
    pub dt_total: f64,
    /// Covariance of `(dp, dv, dtheta)`.
    pub covariance: Mat9,
    pub bias_ref: ImuBias,
    pub jacobians: BiasJacobians,
    pub noise: ImuNoiseModel,
}

impl PreintegratedDelta {
    pub fn identity(bias_ref: ImuBias, noise: ImuNoiseModel) -> Self {
        Self {
            dp: Vec3::zeros(),
            dv: Vec3::zeros(),
            dq: Quat::identity(),
            dt_total: 0.0,
            covariance: Mat9::zeros(),
            bias_ref,
            jacobians: BiasJacobians::default(),
            noise,
        }
    }

    /// Chains `self` (earlier) with `next` (later). Both must share the same
    /// reference bias for the result to be meaningful.
    pub fn compose(&self, next: &PreintegratedDelta) -> PreintegratedDelta {
        let ra = self.dq.to_rotation_matrix().into_inner();
        let rb = next.dq.to_rotation_matrix().into_inner();
        let dp = self.dp + self.dv * next.dt_total + ra * next.dp;
        let dv = self.dv + ra * next.dv;
        let dq = Quat::new_normalize((self.dq * next.dq).into_inner());

        // error-state transition of the earlier block, [dp, dv, dtheta] order
        let mut a = Mat9::identity();
        a.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Mat3::identity() * next.dt_total));
        a.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-ra * skew(&next.dp)));
        a.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-ra * skew(&next.dv)));
        a.fixed_view_mut::<3, 3>(6, 6).copy_from(&rb.transpose());
        let mut b = Mat9::zeros();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&ra);
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&ra);
        b.fixed_view_mut::<3, 3>(6, 6).copy_from(&Mat3::identity());
        let covariance = a * self.covariance * a.transpose() + b * next.covariance * b.transpose();

        let ja = &self.jacobians;
        let jb = &next.jacobians;
        let jacobians = BiasJacobians {
            rot_gyro: rb.transpose() * ja.rot_gyro + jb.rot_gyro,
            vel_accel: ja.vel_accel + ra * jb.vel_accel,
            vel_gyro: ja.vel_gyro + ra * jb.vel_gyro - ra * skew(&next.dv) * ja.rot_gyro,
            pos_accel: ja.pos_accel + ja.vel_accel * next.dt_total + ra * jb.pos_accel,
            pos_gyro: ja.pos_gyro + ja.vel_gyro * next.dt_total + ra * jb.pos_gyro - ra * skew(&next.dp) * ja.rot_gyro,
        };
        PreintegratedDelta {
            dp,
            dv,
            dq,
            dt_total: self.dt_total + next.dt_total,
            covariance,
            bias_ref: self.bias_ref,
            jacobians,
            noise: self.noise,
        }
    }

    /// Deltas corrected to first order for a bias different from `bias_ref`.
    pub fn corrected(&self, bias: &ImuBias) -> (Vec3, Vec3, Quat) {
        let dba = bias.accel - self.bias_ref.accel;
        let dbg = bias.gyro - self.bias_ref.gyro;
        let j = &self.jacobians;
        let dq = self.dq * so3_exp(&(j.rot_gyro * dbg));
        let dv = self.dv + j.vel_accel * dba + j.vel_gyro * dbg;
        let dp = self.dp + j.pos_accel * dba + j.pos_gyro * dbg;
        (dp, dv, dq)
    }

    /// Applies the delta to a start state: the reassembly
    /// `p_j = p_i + v_i T + g T^2 / 2 + R_i dp`, `v_j = v_i + g T + R_i dv`,
    /// `q_j = q_i dq`. Uses the deltas as integrated (no bias correction).
    pub fn predict(&self, state: &NavState, gravity: &Gravity) -> NavState {
        let t = self.dt_total;
        let r = state.orientation;
        NavState {
            position: state.position + state.velocity * t + 0.5 * gravity.0 * t * t + r * self.dp,
            velocity: state.velocity + gravity.0 * t + r * self.dv,
            orientation: Quat::new_normalize((r * self.dq).into_inner()),
            bias: state.bias,
        }
    }

    /// Information matrix of the 15-dim residual `(dp, dtheta, dv, dba, dbg)`.
    pub fn information(&self) -> Mat15 {
        // reorder (dp, dv, dtheta) -> (dp, dtheta, dv)
        let perm = [0usize, 1, 2, 6, 7, 8, 3, 4, 5];
        let mut cov = Mat9::zeros();
        for (r, &pr) in perm.iter().enumerate() {
            for (c, &pc) in perm.iter().enumerate() {
                cov[(r, c)] = self.covariance[(pr, pc)];
            }
        }
        let scale = cov.diagonal().max().max(1e-30);
        let regularised = cov + Mat9::identity() * (scale * 1e-9 + 1e-18);
        let info9 = regularised.try_inverse().unwrap_or_else(Mat9::zeros);
        let info9 = 0.5 * (info9 + info9.transpose());

        let mut info = Mat15::zeros();
        info.fixed_view_mut::<9, 9>(0, 0).copy_from(&info9);
        let dt = self.dt_total.max(1e-6);
        let ba = (self.noise.accel_bias_walk.powi(2) * dt).max(1e-18);
        let bg = (self.noise.gyro_bias_walk.powi(2) * dt).max(1e-18);
        for k in 0..3 {
            info[(9 + k, 9 + k)] = 1.0 / ba;
            info[(12 + k, 12 + k)] = 1.0 / bg;
        }
        info
    }
}

/// Incremental mid-point pre-integrator.
#[derive(Clone, Debug)]
pub struct Preintegrator {
    delta: PreintegratedDelta,
    last: Option<ImuSample>,
    count: usize,
}

impl Preintegrator {
    pub fn new(bias: ImuBias, noise: ImuNoiseModel) -> Self {
        Self { delta: PreintegratedDelta::identity(bias, noise), last: None, count: 0 }
    }

    pub fn push(&mut self, sample: &ImuSample) -> Result<(), ImuError> {
        let prev = match self.last {
            None => {
                self.last = Some(*sample);
                self.count = 1;
                return Ok(());
            }
            Some(prev) => prev,
        };
        let dt = sample.t - prev.t;
        if !(dt > 0.0) {
            return Err(ImuError::NonMonotonicTime { index: self.count, t: sample.t });
        }
        self.step(&prev, sample, dt);
        self.last = Some(*sample);
        self.count += 1;
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        self.count
    }

    pub fn finish(self) -> Result<PreintegratedDelta, ImuError> {
        if self.count < 2 {
            return Err(ImuError::EmptyStream);
        }
        Ok(self.delta)
    }

    pub fn current(&self) -> &PreintegratedDelta {
        &self.delta
    }

    fn step(&mut self, a: &ImuSample, b: &ImuSample, dt: f64) {
        let d = &mut self.delta;
        let bias = d.bias_ref;
        let omega = 0.5 * (a.gyro + b.gyro) - bias.gyro;
        let r0 = d.dq.to_rotation_matrix().into_inner();
        let q1 = propagate_quaternion(&d.dq, &omega, dt);
        let r1 = q1.to_rotation_matrix().into_inner();
        let acc0 = a.accel - bias.accel;
        let acc1 = b.accel - bias.accel;
        let acc_frame = 0.5 * (r0 * acc0 + r1 * acc1);
        let acc_body = 0.5 * (acc0 + acc1);

        // first-order error propagation, [dp, dv, dtheta] order
        let step_rot = so3_exp(&(omega * dt)).to_rotation_matrix().into_inner();
        let jr = right_jacobian(&(omega * dt));
        let acc_skew = skew(&acc_body);
        let mut a_mat = Mat9::identity();
        a_mat.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Mat3::identity() * dt));
        a_mat.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-0.5 * r0 * acc_skew * dt * dt));
        a_mat.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-r0 * acc_skew * dt));
        a_mat.fixed_view_mut::<3, 3>(6, 6).copy_from(&step_rot.transpose());
        let mut b_mat = SMatrix::<f64, 9, 6>::zeros();
        b_mat.fixed_view_mut::<3, 3>(0, 0).copy_from(&(0.5 * r0 * dt * dt));
        b_mat.fixed_view_mut::<3, 3>(3, 0).copy_from(&(r0 * dt));
        b_mat.fixed_view_mut::<3, 3>(6, 3).copy_from(&(jr * dt));
        let qa = d.noise.accel_noise_density.powi(2) / dt;
        let qg = d.noise.gyro_noise_density.powi(2) / dt;
        let q = SMatrix::<f64, 6, 6>::from_diagonal(&SVector::<f64, 6>::new(qa, qa, qa, qg, qg, qg));
        d.covariance = a_mat * d.covariance * a_mat.transpose() + b_mat * q * b_mat.transpose();

        let j = &mut d.jacobians;
        j.pos_accel += j.vel_accel * dt - 0.5 * r0 * dt * dt;
        j.pos_gyro += j.vel_gyro * dt - 0.5 * r0 * acc_skew * j.rot_gyro * dt * dt;
        j.vel_accel -= r0 * dt;
        j.vel_gyro -= r0 * acc_skew * j.rot_gyro * dt;
        j.rot_gyro = step_rot.transpose() * j.rot_gyro - jr * dt;

        d.dp += d.dv * dt + 0.5 * acc_frame * dt * dt;
        d.dv += acc_frame * dt;
        d.dq = q1;
        d.dt_total += dt;
    }
}

/// Pre-integrates `samples` (inclusive of both bracketing samples) with the
/// reference bias `bias`.
pub fn integrate(samples: &[ImuSample], bias: &ImuBias, noise: &ImuNoiseModel) -> Result<PreintegratedDelta, ImuError> {
    let mut pre = Preintegrator::new(*bias, *noise);
    for s in samples {
        pre.push(s)?;
    }
    pre.finish()
}

/// Strapdown propagation of a world-frame state through `samples`, using the
/// same mid-point rule as [`integrate`].
pub fn propagate_state(state: &NavState, samples: &[ImuSample], gravity: &Gravity) -> Result<NavState, ImuError> {
    if samples.len() < 2 {
        return Err(ImuError::EmptyStream);
    }
    let g = gravity.0;
    let bias = state.bias;
    let mut out = *state;
    for (k, pair) in samples.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        let dt = b.t - a.t;
        if !(dt > 0.0) {
            return Err(ImuError::NonMonotonicTime { index: k + 1, t: b.t });
        }
        let omega = 0.5 * (a.gyro + b.gyro) - bias.gyro;
        let q1 = propagate_quaternion(&out.orientation, &omega, dt);
        let acc = 0.5 * (out.orientation * (a.accel - bias.accel) + q1 * (b.accel - bias.accel)) + g;
        out.position += out.velocity * dt + 0.5 * acc * dt * dt;
        out.velocity += acc * dt;
        out.orientation = q1;
    }
    Ok(out)
}

/// Residual `(dp, dtheta, dv, dba, dbg)` between two states given a delta.
pub fn imu_residual(
    state_i: &NavState,
    state_j: &NavState,
    delta: &PreintegratedDelta,
    gravity: &Gravity,
) -> Result<Vec15, ImuError> {
    let drift = state_i.bias.drift_from(&delta.bias_ref);
    if drift > BIAS_REINTEGRATION_THRESHOLD {
        return Err(ImuError::BiasReferenceStale { drift });
    }
    Ok(imu_residual_with_jacobians(state_i, state_j, delta, gravity).0)
}

/// Residual and its Jacobians with respect to the 15-dim tangent of each
/// state (see [`NavState::retract`]). No staleness check.
pub fn imu_residual_with_jacobians(
    state_i: &NavState,
    state_j: &NavState,
    delta: &PreintegratedDelta,
    gravity: &Gravity,
) -> (Vec15, Mat15, Mat15) {
    let t = delta.dt_total;
    let g = gravity.0;
    let ri = state_i.orientation.to_rotation_matrix().into_inner();
    let rj = state_j.orientation.to_rotation_matrix().into_inner();
    let rit = ri.transpose();
    let dbg = state_i.bias.gyro - delta.bias_ref.gyro;
    let (dp_c, dv_c, dq_c) = delta.corrected(&state_i.bias);
    let jb = &delta.jacobians;

    let pos_term = state_j.position - state_i.position - state_i.velocity * t - 0.5 * g * t * t;
    let vel_term = state_j.velocity - state_i.velocity - g * t;
    let r_p = rit * pos_term - dp_c;
    let r_v = rit * vel_term - dv_c;
    let err_q = dq_c.inverse() * state_i.orientation.inverse() * state_j.orientation;
    let r_q = so3_log(&err_q);
    let r_ba = state_j.bias.accel - state_i.bias.accel;
    let r_bg = state_j.bias.gyro - state_i.bias.gyro;

    let mut r = Vec15::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_p);
    r.fixed_rows_mut::<3>(3).copy_from(&r_q);
    r.fixed_rows_mut::<3>(6).copy_from(&r_v);
    r.fixed_rows_mut::<3>(9).copy_from(&r_ba);
    r.fixed_rows_mut::<3>(12).copy_from(&r_bg);

    let jr_inv = right_jacobian_inv(&r_q);
    let corr = jb.rot_gyro * dbg;
    let exp_rq = so3_exp(&r_q).to_rotation_matrix().into_inner();

    let mut ji = Mat15::zeros();
    let mut jj = Mat15::zeros();
    let set = |m: &mut Mat15, row: usize, col: usize, v: Mat3| {
        m.fixed_view_mut::<3, 3>(row, col).copy_from(&v);
    };
    // position residual
    set(&mut ji, 0, 0, -rit);
    set(&mut ji, 0, 3, skew(&(rit * pos_term)));
    set(&mut ji, 0, 6, -rit * t);
    set(&mut ji, 0, 9, -jb.pos_accel);
    set(&mut ji, 0, 12, -jb.pos_gyro);
    set(&mut jj, 0, 0, rit);
    // rotation residual
    set(&mut ji, 3, 3, -jr_inv * rj.transpose() * ri);
    set(&mut ji, 3, 12, -jr_inv * exp_rq.transpose() * right_jacobian(&corr) * jb.rot_gyro);
    set(&mut jj, 3, 3, jr_inv);
    // velocity residual
    set(&mut ji, 6, 3, skew(&(rit * vel_term)));
    set(&mut ji, 6, 6, -rit);
    set(&mut ji, 6, 9, -jb.vel_accel);
    set(&mut ji, 6, 12, -jb.vel_gyro);
    set(&mut jj, 6, 6, rit);
    // bias random walk
    set(&mut ji, 9, 9, -Mat3::identity());
    set(&mut ji, 12, 12, -Mat3::identity());
    set(&mut jj, 9, 9, Mat3::identity());
    set(&mut jj, 12, 12, Mat3::identity());

    (r, ji, jj)
}

/// Angle (rad) between the orientations of two states.
pub fn orientation_error(a: &NavState, b: &NavState) -> f64 {
    quat_angle(&(a.orientation.inverse() * b.orientation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn stream(n: usize, rate: f64, f: impl Fn(f64) -> (Vec3, Vec3)) -> Vec<ImuSample> {
        (0..n)
            .map(|k| {
                let t = k as f64 / rate;
                let (a, w) = f(t);
                ImuSample::new(t, a, w)
            })
            .collect()
    }

    fn random_stream(rng: &mut ChaCha8Rng, n: usize) -> Vec<ImuSample> {
        let a0 = Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(7.0..12.0));
        let w0 = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let fa = rng.random_range(0.5..3.0);
        stream(n, 400.0, |t| {
            (a0 + Vec3::new((fa * t).sin(), (2.0 * t).cos(), 0.3 * t), w0 * (1.0 + 0.5 * (fa * t).sin()))
        })
    }

    fn random_state(rng: &mut ChaCha8Rng) -> NavState {
        NavState {
            position: Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
            velocity: Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            orientation: so3_exp(&Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            )),
            bias: ImuBias::new(
                Vec3::new(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05)),
                Vec3::new(
                    rng.random_range(-0.005..0.005),
                    rng.random_range(-0.005..0.005),
                    rng.random_range(-0.005..0.005),
                ),
            ),
        }
    }

    #[test]
    fn stationary_closed_form() {
        let s = stream(401, 400.0, |_| (Vec3::new(0.0, 0.0, 9.81), Vec3::zeros()));
        let d = integrate(&s, &ImuBias::zero(), &ImuNoiseModel::default()).unwrap();
        assert!(quat_angle(&d.dq) < 1e-15);
        assert_relative_eq!(d.dv, Vec3::new(0.0, 0.0, 9.81), epsilon = 1e-9);
        assert_relative_eq!(d.dp, Vec3::new(0.0, 0.0, 4.905), epsilon = 1e-9);
        assert_relative_eq!(d.dt_total, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_yaw_rate_closed_form() {
        let s = stream(401, 400.0, |_| (Vec3::zeros(), Vec3::new(0.0, 0.0, FRAC_PI_2)));
        let d = integrate(&s, &ImuBias::zero(), &ImuNoiseModel::default()).unwrap();
        let exact = so3_exp(&Vec3::new(0.0, 0.0, FRAC_PI_2));
        assert!(quat_angle(&(d.dq.inverse() * exact)) < 1e-5);
    }

    #[test]
    fn stationary_propagation_is_fixed_point() {
        let s = stream(401, 400.0, |_| (Vec3::new(0.0, 0.0, 9.81), Vec3::zeros()));
        let start = NavState::default();
        let end = propagate_state(&start, &s, &Gravity::default()).unwrap();
        assert!(end.position.norm() < 1e-9);
        assert!(end.velocity.norm() < 1e-9);
        assert!(orientation_error(&start, &end) < 1e-9);
    }

    #[test]
    fn free_fall() {
        let s = stream(401, 400.0, |_| (Vec3::zeros(), Vec3::zeros()));
        let end = propagate_state(&NavState::default(), &s, &Gravity::default()).unwrap();
        assert_relative_eq!(end.position, Vec3::new(0.0, 0.0, -4.905), epsilon = 1e-9);
    }

    #[test]
    fn reassembly_matches_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let s = random_stream(&mut rng, 401);
            let mut start = random_state(&mut rng);
            start.bias = ImuBias::zero();
            let g = Gravity::default();
            let d = integrate(&s, &start.bias, &ImuNoiseModel::default()).unwrap();
            let a = d.predict(&start, &g);
            let b = propagate_state(&start, &s, &g).unwrap();
            assert!((a.position - b.position).norm() < 1e-7);
            assert!((a.velocity - b.velocity).norm() < 1e-7);
            assert!(orientation_error(&a, &b) < 1e-7);
        }
    }

    #[test]
    fn errors_on_short_or_unordered_stream() {
        let n = ImuNoiseModel::default();
        assert_eq!(integrate(&[], &ImuBias::zero(), &n).unwrap_err(), ImuError::EmptyStream);
        let one = [ImuSample::new(0.0, Vec3::zeros(), Vec3::zeros())];
        assert_eq!(integrate(&one, &ImuBias::zero(), &n).unwrap_err(), ImuError::EmptyStream);
        let bad = [one[0], ImuSample::new(0.0, Vec3::zeros(), Vec3::zeros())];
        assert!(matches!(integrate(&bad, &ImuBias::zero(), &n), Err(ImuError::NonMonotonicTime { .. })));
    }

    #[test]
    fn concatenation_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = random_stream(&mut rng, 401);
        let bias = ImuBias::new(Vec3::new(0.01, -0.02, 0.03), Vec3::new(0.001, 0.0, -0.002));
        let n = ImuNoiseModel::default();
        let whole = integrate(&s, &bias, &n).unwrap();
        let a = integrate(&s[..201], &bias, &n).unwrap();
        let b = integrate(&s[200..], &bias, &n).unwrap();
        let c = a.compose(&b);
        assert!((whole.dp - c.dp).norm() < 1e-9);
        assert!((whole.dv - c.dv).norm() < 1e-9);
        assert!(quat_angle(&(whole.dq.inverse() * c.dq)) < 1e-9);
        // covariance and bias Jacobians are discretised per step, so the
        // composed versions agree only to first order
        let rel = (whole.covariance - c.covariance).norm() / whole.covariance.norm();
        assert!(rel < 1e-2, "covariance mismatch {rel}");
        let rel_j = (whole.jacobians.pos_gyro - c.jacobians.pos_gyro).norm() / whole.jacobians.pos_gyro.norm();
        assert!(rel_j < 1e-2, "jacobian mismatch {rel_j}");
    }

    #[test]
    fn bias_subtraction_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = random_stream(&mut rng, 101);
        let bias = ImuBias::new(Vec3::new(0.1, -0.2, 0.05), Vec3::new(0.01, 0.02, -0.03));
        let shifted: Vec<ImuSample> =
            s.iter().map(|x| ImuSample::new(x.t, x.accel + bias.accel, x.gyro + bias.gyro)).collect();
        let n = ImuNoiseModel::default();
        let a = integrate(&shifted, &bias, &n).unwrap();
        let b = integrate(&s, &ImuBias::zero(), &n).unwrap();
        // (a + b) - b is not bit-exact in floating point; the difference is
        // rounding of the re-added bias only.
        assert!((a.dp - b.dp).norm() < 1e-12);
        assert!((a.dv - b.dv).norm() < 1e-12);
        assert!(quat_angle(&(a.dq.inverse() * b.dq)) < 1e-12);
    }

    #[test]
    fn covariance_trace_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = random_stream(&mut rng, 200);
        let mut pre = Preintegrator::new(ImuBias::zero(), ImuNoiseModel::default());
        let mut last = 0.0;
        for x in &s {
            pre.push(x).unwrap();
            let tr = pre.current().covariance.trace();
            assert!(tr >= last);
            last = tr;
        }
        let cov = pre.current().covariance;
        assert!((cov - cov.transpose()).norm() < 1e-18);
        assert!(cov.symmetric_eigenvalues().min() > -1e-18);
    }

    #[test]
    fn residual_zero_for_consistent_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let s = random_stream(&mut rng, 41);
        let si = random_state(&mut rng);
        let g = Gravity::default();
        let sj = propagate_state(&si, &s, &g).unwrap();
        let d = integrate(&s, &si.bias, &ImuNoiseModel::default()).unwrap();
        assert!(imu_residual(&si, &sj, &d, &g).unwrap().norm() < 1e-7);
    }

    #[test]
    fn residual_position_perturbation() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let s = random_stream(&mut rng, 41);
        let si = random_state(&mut rng);
        let g = Gravity::default();
        let mut sj = propagate_state(&si, &s, &g).unwrap();
        let d = integrate(&s, &si.bias, &ImuNoiseModel::default()).unwrap();
        sj.position += Vec3::new(0.1, 0.0, 0.0);
        let r = imu_residual(&si, &sj, &d, &g).unwrap();
        let expected = si.orientation.inverse() * Vec3::new(0.1, 0.0, 0.0);
        assert_relative_eq!(r.fixed_rows::<3>(0).into_owned(), expected, epsilon = 1e-7);
        assert!(r.fixed_rows::<12>(3).norm() < 1e-7);
    }

    #[test]
    fn stale_bias_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let s = random_stream(&mut rng, 41);
        let si = random_state(&mut rng);
        let d = integrate(
            &s,
            &ImuBias::new(si.bias.accel + Vec3::new(0.5, 0.0, 0.0), si.bias.gyro),
            &ImuNoiseModel::default(),
        )
        .unwrap();
        assert!(matches!(imu_residual(&si, &si, &d, &Gravity::default()), Err(ImuError::BiasReferenceStale { .. })));
    }

    #[test]
    fn residual_jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let s = random_stream(&mut rng, 41);
            let si = random_state(&mut rng);
            let g = Gravity::default();
            let mut sj = propagate_state(&si, &s, &g).unwrap();
            sj = sj.retract(&Vec15::from_fn(|_, _| rng.random_range(-0.05..0.05)));
            let mut ref_bias = si.bias;
            ref_bias.gyro += Vec3::new(0.002, -0.001, 0.001);
            ref_bias.accel += Vec3::new(-0.003, 0.002, 0.001);
            let d = integrate(&s, &ref_bias, &ImuNoiseModel::default()).unwrap();
            let (_, ji, jj) = imu_residual_with_jacobians(&si, &sj, &d, &g);
            let h = 1e-6;
            for k in 0..15 {
                let mut e = Vec15::zeros();
                e[k] = h;
                let fd_i = (imu_residual_with_jacobians(&si.retract(&e), &sj, &d, &g).0
                    - imu_residual_with_jacobians(&si.retract(&(-e)), &sj, &d, &g).0)
                    / (2.0 * h);
                let fd_j = (imu_residual_with_jacobians(&si, &sj.retract(&e), &d, &g).0
                    - imu_residual_with_jacobians(&si, &sj.retract(&(-e)), &d, &g).0)
                    / (2.0 * h);
                let ai = ji.column(k).into_owned();
                let aj = jj.column(k).into_owned();
                assert!((fd_i - ai).norm() <= 1e-5 * ai.norm().max(1.0), "state i col {k}: {fd_i} vs {ai}");
                assert!((fd_j - aj).norm() <= 1e-5 * aj.norm().max(1.0), "state j col {k}");
            }
        }
    }
}
