//! Analytic body trajectories: stop-and-go minimum-jerk waypoint paths and
//! uniform circular motion. Both give exact velocity, acceleration and body
//! angular rate, which the IMU simulator samples.

use crate::geometry::{quat_from_euler_zyx, Pose, Quat, Vec3};

/// Kinematic state of the body at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryState {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
    pub orientation: Quat,
    /// Angular rate in the body frame.
    pub angular_velocity: Vec3,
}

impl TrajectoryState {
    pub fn pose(&self) -> Pose {
        Pose::new(self.orientation, self.position)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Waypoint {
    pub position: Vec3,
    /// Z-Y-X Euler angles (yaw, pitch, roll), radians. Interpolated without wrapping.
    pub euler: Vec3,
    /// Time to reach this waypoint from the previous one.
    pub duration: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WaypointTrajectory {
    waypoints: Vec<Waypoint>,
    starts: Vec<f64>,
}

impl WaypointTrajectory {
    pub fn new(start: Vec3, yaw: f64) -> Self {
        Self::with_attitude(start, Vec3::new(yaw, 0.0, 0.0))
    }

    pub fn with_attitude(start: Vec3, euler: Vec3) -> Self {
        Self { waypoints: vec![Waypoint { position: start, euler, duration: 0.0 }], starts: vec![0.0] }
    }

    fn last(&self) -> &Waypoint {
        self.waypoints.last().unwrap()
    }

    pub fn push(&mut self, wp: Waypoint) -> &mut Self {
        let t0 = *self.starts.last().unwrap();
        self.starts.push(t0 + wp.duration);
        self.waypoints.push(wp);
        self
    }

    /// Stays at the current pose for `duration` seconds.
    pub fn hold(&mut self, duration: f64) -> &mut Self {
        let last = *self.last();
        self.push(Waypoint { duration, ..last })
    }

    /// Moves to `position` with heading `yaw`, level attitude, using a
    /// duration that keeps peak speed near 1.3 m/s and yaw rate below 0.75 rad/s.
    pub fn move_to(&mut self, position: Vec3, yaw: f64) -> &mut Self {
        let last = *self.last();
        let dist = (position - last.position).norm();
        let turn = (yaw - last.euler.x).abs();
        let duration = (1.4 * dist).max(2.5 * turn).max(1.5);
        self.push(Waypoint { position, euler: Vec3::new(yaw, 0.0, 0.0), duration })
    }

    pub fn turn_to(&mut self, yaw: f64) -> &mut Self {
        let p = self.last().position;
        self.move_to(p, yaw)
    }

    pub fn duration(&self) -> f64 {
        *self.starts.last().unwrap()
    }

    pub fn waypoints(&self) -> &[Waypoint] {
        &self.waypoints
    }

    pub fn path_length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| (w[1].position - w[0].position).norm()).sum()
    }

    pub fn state(&self, t: f64) -> TrajectoryState {
        let t = t.clamp(0.0, self.duration());
        // segment k runs from starts[k-1] to starts[k]
        let k = match self.starts.iter().position(|&s| s >= t) {
            Some(0) | None => {
                let w = if t <= 0.0 { &self.waypoints[0] } else { self.last() };
                return at_rest(w);
            }
            Some(k) => k,
        };
        let (a, b) = (&self.waypoints[k - 1], &self.waypoints[k]);
        if b.duration <= 0.0 {
            return at_rest(b);
        }
        let tau = (t - self.starts[k - 1]) / b.duration;
        let (s, ds, dds) = min_jerk(tau);
        let dt = b.duration;
        let dp = b.position - a.position;
        let de = b.euler - a.euler;
        let euler = a.euler + de * s;
        let euler_rate = de * (ds / dt);
        TrajectoryState {
            position: a.position + dp * s,
            velocity: dp * (ds / dt),
            acceleration: dp * (dds / (dt * dt)),
            orientation: quat_from_euler_zyx(euler.x, euler.y, euler.z),
            angular_velocity: body_rate(&euler, &euler_rate),
        }
    }
}

fn at_rest(w: &Waypoint) -> TrajectoryState {
    TrajectoryState {
        position: w.position,
        velocity: Vec3::zeros(),
        acceleration: Vec3::zeros(),
        orientation: quat_from_euler_zyx(w.euler.x, w.euler.y, w.euler.z),
        angular_velocity: Vec3::zeros(),
    }
}

/// Quintic blend `10 t^3 - 15 t^4 + 6 t^5` and its first two derivatives.
fn min_jerk(tau: f64) -> (f64, f64, f64) {
    let t = tau.clamp(0.0, 1.0);
    let (t2, t3) = (t * t, t * t * t);
    (
        10.0 * t3 - 15.0 * t3 * t + 6.0 * t3 * t2,
        30.0 * t2 - 60.0 * t3 + 30.0 * t3 * t,
        60.0 * t - 180.0 * t2 + 120.0 * t3,
    )
}

/// Body angular velocity from Z-Y-X Euler angles `(yaw, pitch, roll)` and their rates.
pub fn body_rate(euler: &Vec3, rate: &Vec3) -> Vec3 {
    let (pitch, roll) = (euler.y, euler.z);
    let (dyaw, dpitch, droll) = (rate.x, rate.y, rate.z);
    Vec3::new(
        droll - dyaw * pitch.sin(),
        dpitch * roll.cos() + dyaw * roll.sin() * pitch.cos(),
        -dpitch * roll.sin() + dyaw * roll.cos() * pitch.cos(),
    )
}

/// Constant-speed circle in the horizontal plane, heading along the tangent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CircularTrajectory {
    pub center: Vec3,
    pub radius: f64,
    pub angular_speed: f64,
    pub duration: f64,
}

impl CircularTrajectory {
    pub fn state(&self, t: f64) -> TrajectoryState {
        let (r, w) = (self.radius, self.angular_speed);
        let phase = w * t;
        let (s, c) = phase.sin_cos();
        TrajectoryState {
            position: self.center + Vec3::new(r * c, r * s, 0.0),
            velocity: Vec3::new(-r * w * s, r * w * c, 0.0),
            acceleration: Vec3::new(-r * w * w * c, -r * w * w * s, 0.0),
            orientation: quat_from_euler_zyx(phase + w.signum() * std::f64::consts::FRAC_PI_2, 0.0, 0.0),
            angular_velocity: Vec3::new(0.0, 0.0, w),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Trajectory {
    Waypoints(WaypointTrajectory),
    Circle(CircularTrajectory),
}

impl Trajectory {
    pub fn state(&self, t: f64) -> TrajectoryState {
        match self {
            Trajectory::Waypoints(w) => w.state(t),
            Trajectory::Circle(c) => c.state(t),
        }
    }

    pub fn pose(&self, t: f64) -> Pose {
        self.state(t).pose()
    }

    pub fn duration(&self) -> f64 {
        match self {
            Trajectory::Waypoints(w) => w.duration(),
            Trajectory::Circle(c) => c.duration,
        }
    }
}

impl From<WaypointTrajectory> for Trajectory {
    fn from(w: WaypointTrajectory) -> Self {
        Trajectory::Waypoints(w)
    }
}

impl From<CircularTrajectory> for Trajectory {
    fn from(c: CircularTrajectory) -> Self {
        Trajectory::Circle(c)
    }
}
