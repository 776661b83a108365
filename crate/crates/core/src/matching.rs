//! Feature local maps, nearest-neighbour search, plane/line fitting and the
//! point-to-plane / point-to-line residuals used by the front-end.

use std::collections::HashMap;

use nalgebra::{Matrix1x6, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{skew, HessePlane, Mat3, Pose, Vec3};
use crate::scan::FeatureSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("local map window is empty")]
    EmptyWindow,
    #[error("degenerate point configuration for fitting")]
    DegenerateConfiguration,
}

/// Infinite line through `point` along the unit vector `direction`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSegment3 {
    pub point: Vec3,
    pub direction: Vec3,
}

impl LineSegment3 {
    pub fn new(point: Vec3, direction: Vec3) -> Option<Self> {
        let norm = direction.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return None;
        }
        Some(Self { point, direction: direction / norm })
    }

    pub fn distance(&self, x: &Vec3) -> f64 {
        let w = x - self.point;
        (w - self.direction * w.dot(&self.direction)).norm()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Target {
    Plane(HessePlane),
    Line(LineSegment3),
}

/// A feature point (sensor frame of the sweep being matched) paired with
/// the map geometry it should lie on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub point: Vec3,
    pub target: Target,
}

impl Correspondence {
    pub fn is_planar(&self) -> bool {
        matches!(self.target, Target::Plane(_))
    }

    pub fn residual(&self, t: &Pose) -> f64 {
        match &self.target {
            Target::Plane(p) => point_plane_residual(t, &self.point, p),
            Target::Line(l) => point_line_residual(t, &self.point, l),
        }
    }

    /// Residual and its derivative w.r.t. the `[dp, dtheta]` tangent of `t`.
    pub fn residual_with_jacobian(&self, t: &Pose) -> (f64, Matrix1x6<f64>) {
        match &self.target {
            Target::Plane(p) => point_plane_residual_with_jacobian(t, &self.point, p),
            Target::Line(l) => point_line_residual_with_jacobian(t, &self.point, l),
        }
    }
}

/// Uniform-grid hash for fixed-radius k-nearest-neighbour queries.
#[derive(Clone, Debug, Default)]
pub struct GridIndex {
    cell: f64,
    buckets: HashMap<(i64, i64, i64), Vec<usize>>,
}

fn cell_key(p: &Vec3, cell: f64) -> (i64, i64, i64) {
    ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64)
}

impl GridIndex {
    pub fn new(points: &[Vec3], cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(cell_key(p, cell)).or_default().push(i);
        }
        Self { cell, buckets }
    }

    /// Up to `k` indices within `radius` of `query`, nearest first; equal
    /// distances are ordered by index.
    pub fn knn(&self, points: &[Vec3], query: &Vec3, k: usize, radius: f64) -> Vec<usize> {
        let reach = (radius / self.cell).ceil() as i64;
        let (cx, cy, cz) = cell_key(query, self.cell);
        let r2 = radius * radius;
        let mut found: Vec<(f64, usize)> = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(bucket) = self.buckets.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &i in bucket {
                            let d2 = (points[i] - query).norm_squared();
                            if d2 <= r2 {
                                found.push((d2, i));
                            }
                        }
                    }
                }
            }
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.truncate(k);
        found.into_iter().map(|(_, i)| i).collect()
    }
}

/// Reference brute-force search with the same ordering rules as [`GridIndex::knn`].
pub fn knn_brute_force(points: &[Vec3], query: &Vec3, k: usize, radius: f64) -> Vec<usize> {
    let mut found: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - query).norm_squared(), i))
        .filter(|(d2, _)| *d2 <= radius * radius)
        .collect();
    found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    found.truncate(k);
    found.into_iter().map(|(_, i)| i).collect()
}

/// Replaces the points in each voxel by their centroid. Output order follows
/// the first point seen in each voxel.
pub fn voxel_downsample(points: &[Vec3], voxel: f64) -> Vec<Vec3> {
    let mut slots: HashMap<(i64, i64, i64), usize> = HashMap::new();
    let mut groups: Vec<((i64, i64, i64), Vec<usize>)> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let key = cell_key(p, voxel);
        let slot = *slots.entry(key).or_insert_with(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(i);
    }
    groups
        .into_iter()
        .map(|(key, members)| {
            let first = points[members[0]];
            if members.len() == 1 {
                return first;
            }
            let offset: Vec3 = members.iter().map(|&i| points[i] - first).sum();
            let c = first + offset / members.len() as f64;
            if cell_key(&c, voxel) == key {
                c
            } else {
                // rounding pushed the centroid out of its voxel; keep the
                // nearest member so the output stays one point per voxel
                members
                    .iter()
                    .map(|&i| points[i])
                    .min_by(|a, b| (a - c).norm_squared().total_cmp(&(b - c).norm_squared()))
                    .unwrap()
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchParams {
    pub neighbors: usize,
    pub radius: f64,
    pub plane_score_max: f64,
    pub plane_point_max: f64,
    pub line_score_max: f64,
    /// Drops features whose residual exceeds this many robust standard
    /// deviations (1.4826 x median absolute residual) of their feature type.
    pub trim_sigmas: Option<f64>,
    /// Lower bound on the trimming threshold in metres.
    pub trim_floor: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            neighbors: 5,
            radius: 1.0,
            plane_score_max: 0.2,
            plane_point_max: 0.2,
            line_score_max: 0.25,
            trim_sigmas: None,
            trim_floor: 0.0,
        }
    }
}

/// Edge and planar maps in the anchor frame, with search indices.
#[derive(Clone, Debug)]
pub struct FeatureLocalMap {
    pub edge_map: Vec<Vec3>,
    pub planar_map: Vec<Vec3>,
    pub anchor_index: usize,
    pub edge_voxel: f64,
    pub planar_voxel: f64,
    edge_index: GridIndex,
    planar_index: GridIndex,
}

impl FeatureLocalMap {
    pub fn from_points(edge_map: Vec<Vec3>, planar_map: Vec<Vec3>, edge_voxel: f64, planar_voxel: f64) -> Self {
        let edge_index = GridIndex::new(&edge_map, 1.0);
        let planar_index = GridIndex::new(&planar_map, 1.0);
        Self { edge_map, planar_map, anchor_index: 0, edge_voxel, planar_voxel, edge_index, planar_index }
    }

    pub fn is_empty(&self) -> bool {
        self.edge_map.is_empty() && self.planar_map.is_empty()
    }
}

/// Merges the window's feature sets into the anchor frame. Each entry pairs
/// a feature set with its pose relative to the anchor.
pub fn build_local_map(
    window: &[(FeatureSet, Pose)],
    edge_voxel: f64,
    planar_voxel: f64,
) -> Result<FeatureLocalMap, MatchError> {
    if window.is_empty() {
        return Err(MatchError::EmptyWindow);
    }
    let mut edges = Vec::new();
    let mut planes = Vec::new();
    for (features, pose) in window {
        edges.extend(features.map_edges().iter().map(|p| pose.transform_point(p)));
        planes.extend(features.map_planes().iter().map(|p| pose.transform_point(p)));
    }
    Ok(FeatureLocalMap::from_points(
        voxel_downsample(&edges, edge_voxel),
        voxel_downsample(&planes, planar_voxel),
        edge_voxel,
        planar_voxel,
    ))
}

fn scatter(points: &[Vec3]) -> Option<(Vec3, SymmetricEigen<f64, nalgebra::U3>)> {
    if points.is_empty() {
        return None;
    }
    let n = points.len() as f64;
    let centroid: Vec3 = points.iter().sum::<Vec3>() / n;
    let mut cov = Mat3::zeros();
    for p in points {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    Some((centroid, SymmetricEigen::new(cov)))
}

fn sorted_eigen(eig: &SymmetricEigen<f64, nalgebra::U3>) -> [(f64, Vec3); 3] {
    let mut pairs: Vec<(f64, Vec3)> =
        (0..3).map(|i| (eig.eigenvalues[i].max(0.0), eig.eigenvectors.column(i).into_owned())).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    [pairs[0], pairs[1], pairs[2]]
}

/// Least-squares plane. Returns the plane and the smallest-to-middle
/// eigenvalue ratio (0 for exact planes).
pub fn fit_plane(points: &[Vec3]) -> Result<(HessePlane, f64), MatchError> {
    if points.len() < 3 {
        return Err(MatchError::DegenerateConfiguration);
    }
    let (centroid, eig) = scatter(points).ok_or(MatchError::DegenerateConfiguration)?;
    let [(l0, n), (l1, _), (l2, _)] = sorted_eigen(&eig);
    if !(l2 > 0.0) || l1 <= 1e-12 * l2 {
        return Err(MatchError::DegenerateConfiguration);
    }
    let plane = HessePlane::from_point_normal(&centroid, &n).ok_or(MatchError::DegenerateConfiguration)?;
    Ok((plane, l0 / l1))
}

/// Principal-axis line through the centroid. The score is the middle-to-largest
/// eigenvalue ratio (0 for exactly collinear points).
pub fn fit_line(points: &[Vec3]) -> Result<(LineSegment3, f64), MatchError> {
    if points.len() < 2 {
        return Err(MatchError::DegenerateConfiguration);
    }
    let (centroid, eig) = scatter(points).ok_or(MatchError::DegenerateConfiguration)?;
    let [_, (l1, _), (l2, u)] = sorted_eigen(&eig);
    let extent = points.iter().map(|p| (p - centroid).norm()).fold(0.0, f64::max);
    if !(l2 > 1e-24 * extent.max(1.0)) || extent == 0.0 {
        return Err(MatchError::DegenerateConfiguration);
    }
    let line = LineSegment3::new(centroid, u).ok_or(MatchError::DegenerateConfiguration)?;
    Ok((line, l1 / l2))
}

/// Signed distance of the transformed point to the plane: `(R x + p).n - d`.
pub fn point_plane_residual(t: &Pose, point: &Vec3, plane: &HessePlane) -> f64 {
    t.transform_point(point).dot(plane.normal()) - plane.distance()
}

pub fn point_plane_residual_with_jacobian(t: &Pose, point: &Vec3, plane: &HessePlane) -> (f64, Matrix1x6<f64>) {
    let n = plane.normal();
    let r_mat = t.rotation_matrix();
    let rot_part = -(n.transpose() * r_mat * skew(point));
    let mut j = Matrix1x6::zeros();
    j.fixed_view_mut::<1, 3>(0, 0).copy_from(&n.transpose());
    j.fixed_view_mut::<1, 3>(0, 3).copy_from(&rot_part);
    (point_plane_residual(t, point, plane), j)
}

/// Euclidean distance from the transformed point to the line.
pub fn point_line_residual(t: &Pose, point: &Vec3, line: &LineSegment3) -> f64 {
    line.distance(&t.transform_point(point))
}

pub fn point_line_residual_with_jacobian(t: &Pose, point: &Vec3, line: &LineSegment3) -> (f64, Matrix1x6<f64>) {
    let u = line.direction;
    let w = t.transform_point(point) - line.point;
    let perp = w - u * w.dot(&u);
    let r = perp.norm();
    let mut j = Matrix1x6::zeros();
    if r > 1e-15 {
        let g = perp.transpose() / r;
        let rot_part = -(g * t.rotation_matrix() * skew(point));
        j.fixed_view_mut::<1, 3>(0, 0).copy_from(&g);
        j.fixed_view_mut::<1, 3>(0, 3).copy_from(&rot_part);
    }
    (r, j)
}

fn planar_match(map: &FeatureLocalMap, x: &Vec3, params: &MatchParams) -> Option<HessePlane> {
    let idx = map.planar_index.knn(&map.planar_map, x, params.neighbors, params.radius);
    if idx.len() < params.neighbors {
        return None;
    }
    let pts: Vec<Vec3> = idx.iter().map(|&i| map.planar_map[i]).collect();
    let (plane, score) = fit_plane(&pts).ok()?;
    if score > params.plane_score_max || pts.iter().any(|p| plane.signed_distance(p).abs() > params.plane_point_max) {
        return None;
    }
    Some(plane)
}

fn edge_match(map: &FeatureLocalMap, x: &Vec3, params: &MatchParams) -> Option<LineSegment3> {
    let idx = map.edge_index.knn(&map.edge_map, x, params.neighbors, params.radius);
    if idx.len() < params.neighbors {
        return None;
    }
    let pts: Vec<Vec3> = idx.iter().map(|&i| map.edge_map[i]).collect();
    let (line, score) = fit_line(&pts).ok()?;
    if score > params.line_score_max {
        return None;
    }
    Some(line)
}

/// Associates each feature (transformed by `prediction`) with a fitted map
/// plane or line. Features without an acceptable fit are dropped. Output is
/// edges first, then planar points, each in input order.
pub fn find_correspondences(
    features: &FeatureSet,
    map: &FeatureLocalMap,
    prediction: &Pose,
    params: &MatchParams,
) -> Vec<Correspondence> {
    let out: Vec<Correspondence> = features
        .edge_points
        .par_iter()
        .filter_map(|p| {
            edge_match(map, &prediction.transform_point(p), params)
                .map(|l| Correspondence { point: *p, target: Target::Line(l) })
        })
        .collect();
    let planar: Vec<Correspondence> = features
        .planar_points
        .par_iter()
        .filter_map(|p| {
            planar_match(map, &prediction.transform_point(p), params)
                .map(|pl| Correspondence { point: *p, target: Target::Plane(pl) })
        })
        .collect();
    let mut out = trim(out, prediction, params);
    out.extend(trim(planar, prediction, params));
    out
}

fn trim(correspondences: Vec<Correspondence>, prediction: &Pose, params: &MatchParams) -> Vec<Correspondence> {
    let Some(k) = params.trim_sigmas else {
        return correspondences;
    };
    if correspondences.is_empty() {
        return correspondences;
    }
    let mut abs: Vec<f64> = correspondences.iter().map(|c| c.residual(prediction).abs()).collect();
    let mid = abs.len() / 2;
    let median = *abs.select_nth_unstable_by(mid, f64::total_cmp).1;
    let gate = (k * 1.4826 * median).max(params.trim_floor);
    correspondences.into_iter().filter(|c| c.residual(prediction).abs() <= gate).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::so3_exp;
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let w = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let p = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        Pose::new(so3_exp(&w), p)
    }

    fn random_vec(rng: &mut ChaCha8Rng, s: f64) -> Vec3 {
        Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
    }

    #[test]
    fn plane_fit_exact() {
        let pts: Vec<Vec3> = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (2.0, 3.0), (-1.0, 0.5)]
            .iter()
            .map(|&(x, y)| Vec3::new(x, y, 1.0))
            .collect();
        let (plane, score) = fit_plane(&pts).unwrap();
        assert!((plane.normal() - Vec3::z()).norm() < 1e-12);
        assert!((plane.distance() - 1.0).abs() < 1e-12);
        assert!(score < 1e-12);
    }

    #[test]
    fn plane_fit_noisy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<Vec3> = (0..5)
            .map(|_| {
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0 + rng.random_range(-0.01..0.01))
            })
            .collect();
        let (plane, _) = fit_plane(&pts).unwrap();
        assert!((0.98..=1.02).contains(&plane.distance()));
        assert!(plane.normal().dot(&Vec3::z()).abs().acos().to_degrees() < 3.0);
    }

    #[test]
    fn plane_fit_collinear_is_degenerate() {
        let pts = [Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0), Vec3::new(2.0, 2.0, 2.0)];
        assert_eq!(fit_plane(&pts).unwrap_err(), MatchError::DegenerateConfiguration);
    }

    #[test]
    fn line_fit_cases() {
        let pts: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64 - 1.0, 0.0, 0.0)).collect();
        let (line, score) = fit_line(&pts).unwrap();
        assert!((line.direction.x.abs() - 1.0).abs() < 1e-12);
        assert!(line.point.y.abs() < 1e-12 && line.point.z.abs() < 1e-12);
        assert!(score < 1e-12);

        let square = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(1.0, 1.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.5, 0.5, 0.0),
        ];
        let (_, score) = fit_line(&square).unwrap();
        assert!(score > MatchParams::default().line_score_max);

        let same = [Vec3::new(1.0, 2.0, 3.0), Vec3::new(1.0, 2.0, 3.0)];
        assert_eq!(fit_line(&same).unwrap_err(), MatchError::DegenerateConfiguration);
    }

    #[test]
    fn residual_values() {
        let plane = HessePlane::new(Vec3::z(), 1.0).unwrap();
        assert_eq!(point_plane_residual(&Pose::identity(), &Vec3::new(0.0, 0.0, 3.0), &plane), 2.0);
        let line = LineSegment3::new(Vec3::zeros(), Vec3::x()).unwrap();
        assert_eq!(point_line_residual(&Pose::identity(), &Vec3::new(0.0, 1.0, 0.0), &line), 1.0);
        let t = Pose::new(so3_exp(&Vec3::new(0.3, -0.2, 0.1)), Vec3::new(1.0, 2.0, 3.0));
        let on_plane = t.inverse().transform_point(&Vec3::new(5.0, -2.0, 1.0));
        assert!(point_plane_residual(&t, &on_plane, &plane).abs() < 1e-12);
        let on_line = t.inverse().transform_point(&Vec3::new(7.0, 0.0, 0.0));
        assert!(point_line_residual(&t, &on_line, &line) < 1e-12);
    }

    #[test]
    fn line_residual_matches_dense_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let line = LineSegment3::new(Vec3::new(0.5, -0.3, 0.2), Vec3::new(1.0, 2.0, -0.5)).unwrap();
        let t = random_pose(&mut rng);
        let x = random_vec(&mut rng, 2.0);
        let xt = t.transform_point(&x);
        let r = point_line_residual(&t, &x, &line);
        let along = (xt - line.point).dot(&line.direction);
        let mut best = f64::INFINITY;
        let samples = 1_000_000;
        for k in 0..samples {
            let s = along - 1.0 + 2.0 * k as f64 / samples as f64;
            best = best.min((xt - (line.point + line.direction * s)).norm());
        }
        assert!((best - r).abs() < 1e-5);
    }

    fn fd_check<F: Fn(&Pose) -> f64>(t: &Pose, f: F, analytic: &Matrix1x6<f64>) {
        let h = 1e-6;
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let num = (f(&t.retract(&d)) - f(&t.retract(&(-d)))) / (2.0 * h);
            let scale = analytic.norm().max(1e-3);
            assert!((num - analytic[k]).abs() < 1e-5 * scale, "component {k}: {num} vs {}", analytic[k]);
        }
    }

    #[test]
    fn residual_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let t = random_pose(&mut rng);
            let x = random_vec(&mut rng, 3.0);
            let plane = HessePlane::new(random_vec(&mut rng, 1.0), rng.random_range(0.0..4.0)).unwrap();
            let (_, jp) = point_plane_residual_with_jacobian(&t, &x, &plane);
            fd_check(&t, |p| point_plane_residual(p, &x, &plane), &jp);
            let line = LineSegment3::new(random_vec(&mut rng, 2.0), random_vec(&mut rng, 1.0)).unwrap();
            let (_, jl) = point_line_residual_with_jacobian(&t, &x, &line);
            fd_check(&t, |p| point_line_residual(p, &x, &line), &jl);
        }
    }

    #[test]
    fn residuals_are_frame_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let t = random_pose(&mut rng);
            let x = random_vec(&mut rng, 3.0);
            let plane = HessePlane::new(random_vec(&mut rng, 1.0), 1.5).unwrap();
            let a = point_plane_residual(&t, &x, &plane);
            let b = point_plane_residual(&Pose::identity(), &t.transform_point(&x), &plane);
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut pts: Vec<Vec3> = (0..5000).map(|_| random_vec(&mut rng, 5.0)).collect();
        // exact duplicates exercise the index tie-break
        for i in 0..100 {
            pts.push(pts[i * 7]);
        }
        let index = GridIndex::new(&pts, 1.0);
        for _ in 0..300 {
            let q = random_vec(&mut rng, 5.5);
            assert_eq!(index.knn(&pts, &q, 5, 1.0), knn_brute_force(&pts, &q, 5, 1.0));
        }
    }

    #[test]
    fn downsample_is_idempotent_and_merges_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = (0..3000).map(|_| random_vec(&mut rng, 4.0)).collect();
        let once = voxel_downsample(&pts, 0.4);
        assert_eq!(voxel_downsample(&once, 0.4), once);
        let doubled: Vec<Vec3> = pts.iter().chain(pts.iter()).copied().collect();
        assert_eq!(voxel_downsample(&doubled, 0.4).len(), once.len());
    }

    #[test]
    fn local_map_from_offset_frames() {
        let f = FeatureSet {
            edge_points: vec![Vec3::new(0.05, 0.05, 0.05)],
            planar_points: vec![Vec3::new(0.1, 0.1, 0.1)],
            ..Default::default()
        };
        let offset = Pose::from_translation(Vec3::new(1.0, 0.0, 0.0));
        let map = build_local_map(&[(f.clone(), Pose::identity()), (f.clone(), offset)], 0.2, 0.4).unwrap();
        assert_eq!(map.planar_map.len(), 2);
        assert!((map.planar_map[1] - map.planar_map[0] - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!(matches!(build_local_map(&[], 0.2, 0.4), Err(MatchError::EmptyWindow)));
    }

    fn floor_grid() -> Vec<Vec3> {
        let mut pts = Vec::new();
        for i in 0..20 {
            for j in 0..20 {
                pts.push(Vec3::new(i as f64 * 0.3, j as f64 * 0.3, 0.0));
            }
        }
        pts
    }

    #[test]
    fn self_match_has_zero_residual() {
        let pts = floor_grid();
        let map = FeatureLocalMap::from_points(vec![], pts.clone(), 0.2, 0.4);
        let feats = FeatureSet { edge_points: vec![], planar_points: pts.clone(), ..Default::default() };
        let corr = find_correspondences(&feats, &map, &Pose::identity(), &MatchParams::default());
        assert_eq!(corr.len(), pts.len());
        for c in &corr {
            assert!(c.residual(&Pose::identity()).abs() < 1e-12);
        }
    }

    #[test]
    fn offset_features_give_offset_residuals() {
        let map = FeatureLocalMap::from_points(vec![], floor_grid(), 0.2, 0.4);
        let normal = Normal::new(0.0_f64, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats: Vec<Vec3> =
            (0..50).map(|_| Vec3::new(1.0 + 4.0 * normal.sample(&mut rng).abs().min(1.0), 2.0, 0.1)).collect();
        let fs = FeatureSet { edge_points: vec![], planar_points: feats, ..Default::default() };
        let corr = find_correspondences(&fs, &map, &Pose::identity(), &MatchParams::default());
        assert!(!corr.is_empty());
        for c in &corr {
            assert!((c.residual(&Pose::identity()).abs() - 0.1).abs() < 1e-9);
        }
        let far = FeatureSet {
            edge_points: vec![Vec3::new(20.0, 20.0, 0.0)],
            planar_points: vec![Vec3::new(20.0, 20.0, 10.0)],
            ..Default::default()
        };
        assert!(find_correspondences(&far, &map, &Pose::identity(), &MatchParams::default()).is_empty());
    }
}
