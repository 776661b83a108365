//! Forward IMU measurement model sampled from analytic trajectory derivatives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::geometry::Vec3;
use crate::imu::{Gravity, ImuSample};

use super::trajectory::Trajectory;
use super::SensorRig;

fn gaussian(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng))
}

/// Samples at `k / rate` for every integer `k` with `t0 <= k / rate <= t1`.
///
/// Accelerometer: `R^T (a - g) + b_a + n_a`; gyroscope: `w + b_g + n_g`.
/// White noise uses the discrete deviation `density * sqrt(rate)`, and the
/// biases follow a random walk with deviation `walk * sqrt(dt)` per step.
pub fn simulate_imu(
    trajectory: &Trajectory,
    rig: &SensorRig,
    gravity: &Gravity,
    seed: u64,
    t0: f64,
    t1: f64,
) -> Vec<ImuSample> {
    let imu = &rig.imu;
    let n = &imu.noise;
    let dt = 1.0 / imu.rate;
    let sigma_a = n.accel_noise_density * imu.rate.sqrt();
    let sigma_g = n.gyro_noise_density * imu.rate.sqrt();
    let walk_a = n.accel_bias_walk * dt.sqrt();
    let walk_g = n.gyro_bias_walk * dt.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // separate stream from the LiDAR columns
    rng.set_stream(u64::MAX);
    let mut ba = imu.accel_bias;
    let mut bg = imu.gyro_bias;
    let k0 = (t0 * imu.rate).ceil() as i64;
    let k1 = (t1 * imu.rate + 1e-9).floor() as i64;
    let mut out = Vec::with_capacity((k1 - k0 + 1).max(0) as usize);
    for k in k0..=k1 {
        let t = k as f64 / imu.rate;
        let s = trajectory.state(t);
        let rot = s.orientation.to_rotation_matrix();
        let mut accel = rot.transpose() * (s.acceleration - gravity.0) + ba;
        let mut gyro = s.angular_velocity + bg;
        if sigma_a > 0.0 {
            accel += gaussian(&mut rng) * sigma_a;
        }
        if sigma_g > 0.0 {
            gyro += gaussian(&mut rng) * sigma_g;
        }
        if walk_a > 0.0 {
            ba += gaussian(&mut rng) * walk_a;
        }
        if walk_g > 0.0 {
            bg += gaussian(&mut rng) * walk_g;
        }
        out.push(ImuSample::new(t, accel, gyro));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{quat_angle, Pose};
    use crate::imu::{propagate_state, ImuBias, NavState};
    use crate::sim::trajectory::{CircularTrajectory, WaypointTrajectory};

    #[test]
    fn stationary_measures_gravity_only() {
        let traj: Trajectory = WaypointTrajectory::with_attitude(Vec3::zeros(), Vec3::new(0.3, 0.2, -0.1)).into();
        let rig = SensorRig::noise_free();
        let g = Gravity::default();
        let samples = simulate_imu(&traj, &rig, &g, 1, 0.0, 1.0);
        assert_eq!(samples.len(), 401);
        let r = traj.pose(0.0).rotation_matrix();
        for s in &samples {
            assert!((s.accel - r.transpose() * (-g.0)).norm() < 1e-12);
            assert_eq!(s.gyro, Vec3::zeros());
        }
    }

    #[test]
    fn circular_motion_centripetal() {
        let c = CircularTrajectory { center: Vec3::zeros(), radius: 2.0, angular_speed: 0.8, duration: 5.0 };
        let traj: Trajectory = c.into();
        let g = Gravity::default();
        let samples = simulate_imu(&traj, &SensorRig::noise_free(), &g, 1, 0.0, 5.0);
        for s in samples.iter().step_by(50) {
            let rot = traj.pose(s.t).rotation_matrix();
            let a_world = rot * s.accel + g.0;
            assert!((a_world.norm() - 2.0 * 0.64).abs() < 1e-9);
        }
    }

    fn integrate_against_truth(traj: &Trajectory, t1: f64) -> (f64, f64) {
        let g = Gravity::default();
        let samples = simulate_imu(traj, &SensorRig::noise_free(), &g, 1, 0.0, t1);
        let s0 = traj.state(0.0);
        let start = NavState {
            position: s0.position,
            velocity: s0.velocity,
            orientation: s0.orientation,
            bias: ImuBias::zero(),
        };
        let end = propagate_state(&start, &samples, &g).unwrap();
        let truth: Pose = traj.pose(samples.last().unwrap().t);
        ((end.position - truth.translation).norm(), quat_angle(&(end.orientation.inverse() * truth.rotation)))
    }

    #[test]
    fn double_integration_tracks_waypoint_path() {
        let mut w = WaypointTrajectory::new(Vec3::new(0.0, 0.0, 0.45), 0.0);
        w.hold(1.0).move_to(Vec3::new(4.0, 0.5, 0.45), 0.5).move_to(Vec3::new(6.0, 2.0, 1.5), 1.2);
        let traj: Trajectory = w.into();
        let (dp, dr) = integrate_against_truth(&traj, 10.0);
        assert!(dp < 1e-3, "position error {dp}");
        assert!(dr < 1e-4);
    }

    #[test]
    fn double_integration_tracks_circle() {
        let traj: Trajectory =
            CircularTrajectory { center: Vec3::zeros(), radius: 3.0, angular_speed: 0.4, duration: 10.0 }.into();
        let (dp, _) = integrate_against_truth(&traj, 10.0);
        assert!(dp < 1e-3, "position error {dp}");
    }
}
