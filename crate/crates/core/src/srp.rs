//! Keyframe selection, structural representative plane (SRP) extraction and
//! the global plane registry used to form plane edges between keyframes.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{transform_plane, HessePlane, Pose, Vec3};
use crate::matching::fit_plane;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SrpError {
    #[error("no plane with at least {0} inliers")]
    NoPlanesFound(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrpParams {
    /// Translation since the last keyframe that triggers a new one, meters.
    pub keyframe_distance: f64,
    /// Pitch or roll change that triggers a new keyframe, radians.
    pub keyframe_attitude: f64,
    pub ransac_threshold: f64,
    pub ransac_max_iterations: usize,
    pub ransac_confidence: f64,
    pub min_inliers: usize,
    /// Extraction stops once this fraction of the points is assigned to planes.
    pub consume_fraction: f64,
    /// Maximum `|n_i . n_j|` between selected planes.
    pub orthogonality: f64,
    pub angle_gate: f64,
    pub distance_gate: f64,
    /// Registry planes are only considered when their owner keyframe lies
    /// within this distance of the querying keyframe.
    pub locality: f64,
}

impl Default for SrpParams {
    fn default() -> Self {
        Self {
            keyframe_distance: 1.0,
            keyframe_attitude: 10f64.to_radians(),
            ransac_threshold: 0.05,
            ransac_max_iterations: 1000,
            ransac_confidence: 0.99,
            min_inliers: 400,
            consume_fraction: 0.95,
            orthogonality: 0.15,
            angle_gate: 5f64.to_radians(),
            distance_gate: 0.2,
            locality: 30.0,
        }
    }
}

/// An extracted plane with its post-refit inlier count.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Srp {
    pub plane: HessePlane,
    pub inliers: usize,
}

#[derive(Clone, Debug)]
pub struct Keyframe {
    pub id: usize,
    pub t: f64,
    /// `T^W_K`, the LiDAR pose at the keyframe sweep end.
    pub pose: Pose,
    /// Deskewed sweep points in the keyframe frame.
    pub points: Vec<Vec3>,
    /// At most three planes in the keyframe frame.
    pub srps: Vec<Srp>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlobalPlaneRecord {
    pub plane_id: usize,
    pub owner: usize,
    /// Plane in the owner keyframe frame.
    pub plane: HessePlane,
    pub support: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrpMatch {
    pub keyframe: usize,
    pub owner: usize,
    pub plane_id: usize,
    /// Plane observed in the keyframe frame.
    pub observed: HessePlane,
    /// Registry plane in the owner frame.
    pub reference: HessePlane,
    pub delta_angle: f64,
    pub delta_distance: f64,
}

fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// True when the motion since `last_keyframe` exceeds the translation gate or
/// the pitch or roll gate. Yaw changes never trigger a keyframe.
pub fn is_keyframe(current: &Pose, last_keyframe: &Pose, params: &SrpParams) -> bool {
    if (current.translation - last_keyframe.translation).norm() > params.keyframe_distance {
        return true;
    }
    let (_, pitch, roll) = current.euler_zyx();
    let (_, last_pitch, last_roll) = last_keyframe.euler_zyx();
    wrap_angle(pitch - last_pitch).abs() > params.keyframe_attitude
        || wrap_angle(roll - last_roll).abs() > params.keyframe_attitude
}

fn plane_through(a: &Vec3, b: &Vec3, c: &Vec3) -> Option<HessePlane> {
    let n = (b - a).cross(&(c - a));
    if n.norm() < 1e-9 {
        return None;
    }
    HessePlane::from_point_normal(a, &n)
}

fn inlier_mask(points: &[Vec3], plane: &HessePlane, threshold: f64) -> Vec<bool> {
    points.par_iter().map(|p| plane.signed_distance(p).abs() <= threshold).collect()
}

fn inlier_count(points: &[Vec3], plane: &HessePlane, threshold: f64) -> usize {
    points.par_iter().filter(|p| plane.signed_distance(p).abs() <= threshold).count()
}

/// Iterations needed to draw one all-inlier triple with `confidence`.
fn required_iterations(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let w3 = inlier_ratio.powi(3);
    if w3 <= 0.0 {
        return cap;
    }
    if w3 >= 1.0 {
        return 1;
    }
    let n = (1.0 - confidence).ln() / (1.0 - w3).ln();
    if n.is_finite() {
        (n.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Best RANSAC plane refit by least squares on its inliers, with the mask
/// recounted against the refit plane.
fn ransac_plane(points: &[Vec3], params: &SrpParams, rng: &mut ChaCha8Rng) -> Option<(HessePlane, Vec<bool>)> {
    let n = points.len();
    if n < 3 {
        return None;
    }
    let mut best: Option<(HessePlane, usize)> = None;
    let mut needed = params.ransac_max_iterations;
    let mut iteration = 0;
    while iteration < needed {
        iteration += 1;
        let idx = sample(rng, n, 3);
        let Some(plane) = plane_through(&points[idx.index(0)], &points[idx.index(1)], &points[idx.index(2)]) else {
            continue;
        };
        let count = inlier_count(points, &plane, params.ransac_threshold);
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((plane, count));
            needed =
                required_iterations(count as f64 / n as f64, params.ransac_confidence, params.ransac_max_iterations);
        }
    }
    let (mut plane, _) = best?;
    let mut mask = inlier_mask(points, &plane, params.ransac_threshold);
    for _ in 0..2 {
        let inliers: Vec<Vec3> = points.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| *p).collect();
        let Ok((refit, _)) = fit_plane(&inliers) else {
            break;
        };
        plane = refit;
        mask = inlier_mask(points, &plane, params.ransac_threshold);
    }
    Some((plane, mask))
}

/// Sequential RANSAC over the sweep, then selection of up to three mutually
/// near-orthogonal planes, largest first.
pub fn extract_srp(points: &[Vec3], params: &SrpParams, seed: u64) -> Result<Vec<Srp>, SrpError> {
    let total = points.len();
    if total < params.min_inliers {
        return Err(SrpError::NoPlanesFound(params.min_inliers));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let stop_at = ((1.0 - params.consume_fraction) * total as f64).ceil() as usize;
    let mut remaining = points.to_vec();
    let mut found: Vec<Srp> = Vec::new();
    while remaining.len() > stop_at && remaining.len() >= params.min_inliers {
        let Some((plane, mask)) = ransac_plane(&remaining, params, &mut rng) else {
            break;
        };
        let inliers = mask.iter().filter(|&&m| m).count();
        if inliers < params.min_inliers {
            break;
        }
        found.push(Srp { plane, inliers });
        let mut keep = mask.iter().map(|&m| !m);
        remaining.retain(|_| keep.next().unwrap());
    }
    if found.is_empty() {
        return Err(SrpError::NoPlanesFound(params.min_inliers));
    }
    // stable sort keeps extraction order among equal counts
    found.sort_by_key(|s| std::cmp::Reverse(s.inliers));
    let mut selected: Vec<Srp> = Vec::with_capacity(3);
    for candidate in found {
        if selected.len() == 3 {
            break;
        }
        let orthogonal =
            selected.iter().all(|s| s.plane.normal().dot(candidate.plane.normal()).abs() <= params.orthogonality);
        if orthogonal {
            selected.push(candidate);
        }
    }
    Ok(selected)
}

/// Angle and distance between two planes in the same frame, treating
/// `(n, d)` and `(-n, -d)` as the same plane.
pub fn plane_difference(a: &HessePlane, b: &HessePlane) -> (f64, f64) {
    let angle = a.normal_angle(b);
    if angle <= PI / 2.0 {
        (angle, (a.distance() - b.distance()).abs())
    } else {
        (PI - angle, (a.distance() + b.distance()).abs())
    }
}

/// Matches the keyframe SRPs against registry planes owned by other
/// keyframes. `poses[id]` is the current estimate of `T^W_K` for keyframe
/// `id`. Returns the matches and the records created for unmatched SRPs.
///
/// Among candidates inside both gates the smallest distance difference
/// wins, ties broken by angle. Each registry plane is matched at most once
/// per keyframe.
pub fn match_srp(
    keyframe: &Keyframe,
    registry: &[GlobalPlaneRecord],
    poses: &[Pose],
    params: &SrpParams,
) -> (Vec<SrpMatch>, Vec<GlobalPlaneRecord>) {
    let world_to_kf = keyframe.pose.inverse();
    let candidates: Vec<(&GlobalPlaneRecord, HessePlane)> = registry
        .iter()
        .filter(|r| r.owner != keyframe.id && r.owner < poses.len())
        .filter(|r| (poses[r.owner].translation - keyframe.pose.translation).norm() <= params.locality)
        .map(|r| (r, transform_plane(&world_to_kf.compose(&poses[r.owner]), &r.plane)))
        .collect();

    let mut proposals: Vec<(usize, SrpMatch)> = Vec::new();
    let mut unmatched = Vec::new();
    for (idx, srp) in keyframe.srps.iter().enumerate() {
        let best = candidates
            .iter()
            .map(|(r, pred)| (r, plane_difference(&srp.plane, pred)))
            .filter(|(_, (da, dd))| *da <= params.angle_gate && *dd <= params.distance_gate)
            .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(a.1 .0.total_cmp(&b.1 .0)));
        match best {
            Some((r, (da, dd))) => proposals.push((
                idx,
                SrpMatch {
                    keyframe: keyframe.id,
                    owner: r.owner,
                    plane_id: r.plane_id,
                    observed: srp.plane,
                    reference: r.plane,
                    delta_angle: da,
                    delta_distance: dd,
                },
            )),
            None => unmatched.push(*srp),
        }
    }

    // two SRPs claiming one record: keep the closer match
    proposals.sort_by(|a, b| a.1.delta_distance.total_cmp(&b.1.delta_distance).then(a.0.cmp(&b.0)));
    let mut used = BTreeSet::new();
    let mut matches: Vec<(usize, SrpMatch)> = Vec::new();
    for (idx, m) in proposals {
        if used.insert(m.plane_id) {
            matches.push((idx, m));
        } else {
            unmatched.push(keyframe.srps[idx]);
        }
    }
    matches.sort_by_key(|(idx, _)| *idx);

    let mut next_id = registry.iter().map(|r| r.plane_id + 1).max().unwrap_or(0);
    let records = unmatched
        .into_iter()
        .map(|srp| {
            let record =
                GlobalPlaneRecord { plane_id: next_id, owner: keyframe.id, plane: srp.plane, support: srp.inliers };
            next_id += 1;
            record
        })
        .collect();
    (matches.into_iter().map(|(_, m)| m).collect(), records)
}

/// All registry planes plus the set of plane edges already emitted.
#[derive(Clone, Debug, Default)]
pub struct PlaneRegistry {
    records: Vec<GlobalPlaneRecord>,
    edges: BTreeSet<(usize, usize, usize)>,
}

impl PlaneRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[GlobalPlaneRecord] {
        &self.records
    }

    /// Runs [`match_srp`], stores the new records and drops matches whose
    /// `(keyframe, owner, plane_id)` edge was already emitted.
    pub fn register(&mut self, keyframe: &Keyframe, poses: &[Pose], params: &SrpParams) -> Vec<SrpMatch> {
        let (matches, records) = match_srp(keyframe, &self.records, poses, params);
        self.records.extend(records);
        matches.into_iter().filter(|m| self.edges.insert((m.keyframe, m.owner, m.plane_id))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::quat_from_euler_zyx;

    #[test]
    fn keyframe_rule() {
        let p = SrpParams::default();
        let origin = Pose::identity();
        assert!(is_keyframe(&Pose::from_translation(Vec3::new(1.5, 0.0, 0.0)), &origin, &p));
        assert!(!is_keyframe(&Pose::from_translation(Vec3::new(1.0, 0.0, 0.0)), &origin, &p));
        let yaw = Pose::from_euler_zyx(45f64.to_radians(), 0.0, 0.0, Vec3::new(0.2, 0.0, 0.0));
        assert!(!is_keyframe(&yaw, &origin, &p));
        let pitch = Pose::from_euler_zyx(0.0, 12f64.to_radians(), 0.0, Vec3::new(0.1, 0.0, 0.0));
        assert!(is_keyframe(&pitch, &origin, &p));
        let roll = Pose::from_euler_zyx(1.0, 0.0, 11f64.to_radians(), Vec3::zeros());
        assert!(is_keyframe(&roll, &origin, &p));
        // tilt is measured in the world frame, so a yawed keyframe does not matter
        let last = Pose::from_euler_zyx(2.0, 5f64.to_radians(), 0.0, Vec3::zeros());
        let cur = Pose::from_euler_zyx(-1.0, 9f64.to_radians(), 0.0, Vec3::zeros());
        assert!(!is_keyframe(&cur, &last, &p));
    }

    #[test]
    fn iteration_rule() {
        assert_eq!(required_iterations(1.0, 0.99, 1000), 1);
        assert_eq!(required_iterations(0.0, 0.99, 1000), 1000);
        // (1 - 0.5^3)^n <= 0.01 needs n = 35
        assert_eq!(required_iterations(0.5, 0.99, 1000), 35);
    }

    #[test]
    fn plane_difference_handles_sign() {
        let a = HessePlane::new(Vec3::new(0.0, 0.0, 1.0), 0.01).unwrap();
        let b = HessePlane::new(Vec3::new(0.0, 0.0, -1.0), 0.01).unwrap();
        let (da, dd) = plane_difference(&a, &b);
        assert!(da < 1e-12 && (dd - 0.02).abs() < 1e-12);
    }

    fn keyframe(id: usize, pose: Pose, planes: &[HessePlane]) -> Keyframe {
        let srps = planes.iter().map(|p| Srp { plane: *p, inliers: 500 }).collect();
        Keyframe { id, t: id as f64, pose, points: Vec::new(), srps }
    }

    #[test]
    fn exact_poses_match_exactly() {
        let world_floor = HessePlane::new(Vec3::new(0.0, 0.0, 1.0), -0.0).unwrap();
        let world_wall = HessePlane::new(Vec3::new(1.0, 0.0, 0.0), 4.0).unwrap();
        let poses = [
            Pose::new(quat_from_euler_zyx(0.3, 0.0, 0.0), Vec3::new(0.0, 0.0, 1.2)),
            Pose::new(quat_from_euler_zyx(-0.7, 0.02, 0.01), Vec3::new(1.5, 0.4, 1.3)),
        ];
        let local = |k: usize, p: &HessePlane| transform_plane(&poses[k].inverse(), p);
        let params = SrpParams::default();
        let mut registry = PlaneRegistry::new();
        let kf0 = keyframe(0, poses[0], &[local(0, &world_floor), local(0, &world_wall)]);
        assert!(registry.register(&kf0, &poses, &params).is_empty());
        assert_eq!(registry.records().len(), 2);
        let kf1 = keyframe(1, poses[1], &[local(1, &world_wall), local(1, &world_floor)]);
        let matches = registry.register(&kf1, &poses, &params);
        assert_eq!(matches.len(), 2);
        for m in &matches {
            assert!(m.delta_angle < 1e-6 && m.delta_distance < 1e-6);
        }
        assert_eq!(matches[0].plane_id, 1);
        assert_eq!(matches[1].plane_id, 0);
        assert_eq!(registry.records().len(), 2);
        // re-registering the same keyframe emits no duplicate edges
        assert!(registry.register(&kf1, &poses, &params).is_empty());
    }

    #[test]
    fn angle_and_locality_gates() {
        let params = SrpParams::default();
        let floor = HessePlane::new(Vec3::new(0.0, 0.0, -1.0), 1.2).unwrap();
        let wall = HessePlane::new(Vec3::new(1.0, 0.0, 0.0), 1.2).unwrap();
        let poses = [Pose::identity(), Pose::identity(), Pose::from_translation(Vec3::new(40.0, 0.0, 0.0))];
        let (m, records) = match_srp(&keyframe(1, poses[1], &[wall]), &[record(0, floor)], &poses, &params);
        assert!(m.is_empty());
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].plane_id, 1);
        // same plane but owner out of range
        let far_floor = transform_plane(&poses[2].inverse(), &floor);
        let owned_far = GlobalPlaneRecord { owner: 2, ..record(0, far_floor) };
        let (m, _) = match_srp(&keyframe(1, poses[1], &[floor]), &[owned_far], &poses, &params);
        assert!(m.is_empty());
    }

    fn record(owner: usize, plane: HessePlane) -> GlobalPlaneRecord {
        GlobalPlaneRecord { plane_id: 0, owner, plane, support: 500 }
    }

    #[test]
    fn two_srps_do_not_share_a_record() {
        let params = SrpParams::default();
        let poses = [Pose::identity(), Pose::identity()];
        let a = HessePlane::new(Vec3::new(0.0, 0.0, -1.0), 1.2).unwrap();
        let b = HessePlane::new(Vec3::new(0.0, 0.0, -1.0), 1.3).unwrap();
        let (m, records) = match_srp(&keyframe(1, poses[1], &[b, a]), &[record(0, a)], &poses, &params);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].observed, a);
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].plane, b);
    }
}
