//! Start-to-end loop deviation and trajectory error against ground truth.

use std::fmt;

use thiserror::Error;

use crate::geometry::{quat_angle_between, Pose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("trajectory needs at least two poses, got {0}")]
    EmptyTrajectory(usize),
}

/// Relative pose between the first and last trajectory entries of a loop
/// that ends where it started. Angles in radians, Z-Y-X (yaw, pitch, roll).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DeviationReport {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dxyz: f64,
    pub dyaw: f64,
    pub dpitch: f64,
    pub droll: f64,
    /// Rotation angle of the relative orientation.
    pub dangle: f64,
}

impl DeviationReport {
    /// Report for a relative pose `first^-1 * last`.
    pub fn from_relative(relative: &Pose) -> Self {
        let t = relative.translation;
        let (dyaw, dpitch, droll) = relative.euler_zyx();
        Self { dx: t.x, dy: t.y, dz: t.z, dxyz: t.norm(), dyaw, dpitch, droll, dangle: relative.rotation_angle() }
    }
}

impl fmt::Display for DeviationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# loop deviation, first to last pose; meters and radians; euler order Z-Y-X (yaw, pitch, roll)")?;
        writeln!(f, "dx = {:.6}", self.dx)?;
        writeln!(f, "dy = {:.6}", self.dy)?;
        writeln!(f, "dz = {:.6}", self.dz)?;
        writeln!(f, "dxyz = {:.6}", self.dxyz)?;
        writeln!(f, "dyaw = {:.6}", self.dyaw)?;
        writeln!(f, "dpitch = {:.6}", self.dpitch)?;
        writeln!(f, "droll = {:.6}", self.droll)?;
        write!(f, "dangle = {:.6}", self.dangle)
    }
}

pub fn evaluate_loop_deviation(trajectory: &[(f64, Pose)]) -> Result<DeviationReport, EvalError> {
    if trajectory.len() < 2 {
        return Err(EvalError::EmptyTrajectory(trajectory.len()));
    }
    let first = trajectory[0].1;
    let last = trajectory[trajectory.len() - 1].1;
    Ok(DeviationReport::from_relative(&first.between(&last)))
}

/// Position and orientation errors of an estimate against ground truth
/// after aligning the first poses.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrajectoryError {
    pub matched: usize,
    pub rmse: f64,
    pub max_position_error: f64,
    pub max_angle_error: f64,
}

/// Matches each estimate to the ground-truth pose with the nearest stamp
/// (within `max_dt`), aligns both trajectories at their first matched pair
/// and reports the errors.
pub fn trajectory_error(estimate: &[(f64, Pose)], truth: &[(f64, Pose)], max_dt: f64) -> Option<TrajectoryError> {
    let nearest = |t: f64| -> Option<&Pose> {
        let k = truth.partition_point(|(s, _)| *s < t);
        [k.checked_sub(1), Some(k)]
            .into_iter()
            .flatten()
            .filter_map(|i| truth.get(i))
            .filter(|(s, _)| (s - t).abs() <= max_dt)
            .min_by(|a, b| (a.0 - t).abs().total_cmp(&(b.0 - t).abs()))
            .map(|(_, p)| p)
    };
    let pairs: Vec<(Pose, Pose)> = estimate.iter().filter_map(|(t, p)| nearest(*t).map(|g| (*p, *g))).collect();
    let (e0, g0) = pairs.first()?;
    let align = g0.compose(&e0.inverse());
    let mut out = TrajectoryError { matched: pairs.len(), ..Default::default() };
    let mut sum = 0.0;
    for (e, g) in &pairs {
        let aligned = align.compose(e);
        let err = (aligned.translation - g.translation).norm();
        sum += err * err;
        out.max_position_error = out.max_position_error.max(err);
        out.max_angle_error = out.max_angle_error.max(quat_angle_between(&aligned.rotation, &g.rotation));
    }
    out.rmse = (sum / pairs.len() as f64).sqrt();
    Some(out)
}
