//! Sweep undistortion and curvature-based edge/planar feature extraction.

use thiserror::Error;

use crate::geometry::{Pose, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScanError {
    #[error("point timestamp {t} outside sweep interval [{start}, {end}]")]
    TimestampOutOfRange { t: f64, start: f64, end: f64 },
    #[error("no ring has at least {needed} points")]
    TooFewPoints { needed: usize },
    #[error("sweep interval is empty ({start} >= {end})")]
    InvalidInterval { start: f64, end: f64 },
}

/// A single LiDAR return in the sensor frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedPoint {
    pub xyz: Vec3,
    pub ring: u16,
    pub t: f64,
}

impl TimedPoint {
    pub fn new(xyz: Vec3, ring: u16, t: f64) -> Self {
        Self { xyz, ring, t }
    }
}

/// One revolution of the scanner. Points are stored in firing order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Sweep {
    pub points: Vec<TimedPoint>,
    pub t_start: f64,
    pub t_end: f64,
}

impl Sweep {
    pub fn new(points: Vec<TimedPoint>, t_start: f64, t_end: f64) -> Self {
        Self { points, t_start, t_end }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.points.iter().map(|p| p.xyz).collect()
    }

    pub fn ring_count(&self) -> usize {
        self.points.iter().map(|p| p.ring as usize + 1).max().unwrap_or(0)
    }
}

/// Feature points, all expressed in the sweep-end frame.
///
/// `edge_points` / `planar_points` are the sparse per-sector selections that
/// get matched. The `*_map_points` sets are the denser "less sharp" and
/// "less flat" points used to build local maps; when empty, the selections
/// themselves are used.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSet {
    pub edge_points: Vec<Vec3>,
    pub planar_points: Vec<Vec3>,
    pub edge_map_points: Vec<Vec3>,
    pub planar_map_points: Vec<Vec3>,
}

impl FeatureSet {
    pub fn transformed(&self, t: &Pose) -> FeatureSet {
        let tf = |v: &[Vec3]| v.iter().map(|p| t.transform_point(p)).collect();
        FeatureSet {
            edge_points: tf(&self.edge_points),
            planar_points: tf(&self.planar_points),
            edge_map_points: tf(&self.edge_map_points),
            planar_map_points: tf(&self.planar_map_points),
        }
    }

    pub fn map_edges(&self) -> &[Vec3] {
        if self.edge_map_points.is_empty() {
            &self.edge_points
        } else {
            &self.edge_map_points
        }
    }

    pub fn map_planes(&self) -> &[Vec3] {
        if self.planar_map_points.is_empty() {
            &self.planar_points
        } else {
            &self.planar_map_points
        }
    }

    pub fn len(&self) -> usize {
        self.edge_points.len() + self.planar_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Re-expresses every point in the sweep-end frame.
///
/// `motion` is the pose of the end frame in the start frame. The sensor pose
/// at a point's timestamp is interpolated between identity (t_start) and
/// `motion` (t_end) with the normalised fraction of the interval.
pub fn deskew(sweep: &Sweep, motion: &Pose) -> Result<Sweep, ScanError> {
    let span = sweep.t_end - sweep.t_start;
    if !(span > 0.0) {
        return Err(ScanError::InvalidInterval { start: sweep.t_start, end: sweep.t_end });
    }
    let end_inv = motion.inverse();
    let identity = Pose::identity();
    let mut out = Vec::with_capacity(sweep.points.len());
    for p in &sweep.points {
        if p.t < sweep.t_start - 1e-9 || p.t > sweep.t_end + 1e-9 {
            return Err(ScanError::TimestampOutOfRange { t: p.t, start: sweep.t_start, end: sweep.t_end });
        }
        let s = ((p.t - sweep.t_start) / span).clamp(0.0, 1.0);
        let xyz = if s == 1.0 {
            p.xyz
        } else {
            let at_t = Pose::interpolate(&identity, motion, s);
            end_inv.transform_point(&at_t.transform_point(&p.xyz))
        };
        out.push(TimedPoint { xyz, ring: p.ring, t: p.t });
    }
    Ok(Sweep { points: out, t_start: sweep.t_start, t_end: sweep.t_end })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureParams {
    pub half_window: usize,
    pub sectors: usize,
    pub edges_per_sector: usize,
    pub planar_per_sector: usize,
    /// Map-only edge points kept per sector (includes the selected edges).
    pub map_edges_per_sector: usize,
    pub edge_threshold: f64,
    pub planar_threshold: f64,
    /// Gap (m) between consecutive ring points treated as a depth discontinuity.
    pub discontinuity: f64,
    /// Squared-spacing factor for the grazing-beam test: a point is dropped
    /// when both neighbours are farther than `sqrt(factor) * range`.
    pub grazing_factor: f64,
    pub min_range: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            half_window: 5,
            sectors: 6,
            edges_per_sector: 2,
            planar_per_sector: 4,
            map_edges_per_sector: 20,
            edge_threshold: 0.005,
            planar_threshold: 0.002,
            discontinuity: 0.3,
            grazing_factor: 2e-4,
            min_range: 0.3,
        }
    }
}

/// Curvature `|sum_j (x_j - x_k)| / (|N| |x_k|)` over `half_window`
/// neighbours on each side along a ring. `None` near the ring ends.
pub fn ring_curvature(ring: &[Vec3], half_window: usize) -> Vec<Option<f64>> {
    let n = ring.len();
    let mut out = vec![None; n];
    if n < 2 * half_window + 1 {
        return out;
    }
    for k in half_window..n - half_window {
        let mut sum = Vec3::zeros();
        for j in k - half_window..=k + half_window {
            if j != k {
                sum += ring[j] - ring[k];
            }
        }
        let range = ring[k].norm();
        if range > 0.0 {
            out[k] = Some(sum.norm() / ((2 * half_window) as f64 * range));
        }
    }
    out
}

/// Selects edge and planar points ring by ring.
pub fn extract_features(sweep: &Sweep, params: &FeatureParams) -> Result<FeatureSet, ScanError> {
    let rings = sweep.ring_count();
    let mut per_ring: Vec<Vec<Vec3>> = vec![Vec::new(); rings];
    for p in &sweep.points {
        if p.xyz.norm() >= params.min_range {
            per_ring[p.ring as usize].push(p.xyz);
        }
    }
    let needed = 2 * params.half_window + 1;
    if !per_ring.iter().any(|r| r.len() >= needed) {
        return Err(ScanError::TooFewPoints { needed });
    }
    let mut features = FeatureSet::default();
    for ring in per_ring.iter().filter(|r| r.len() >= needed) {
        let ring_features = ring_features(ring, params);
        features.edge_points.extend(ring_features.edge_points);
        features.planar_points.extend(ring_features.planar_points);
        features.edge_map_points.extend(ring_features.edge_map_points);
        features.planar_map_points.extend(ring_features.planar_map_points);
    }
    Ok(features)
}

fn ring_features(ring: &[Vec3], params: &FeatureParams) -> FeatureSet {
    let n = ring.len();
    let hw = params.half_window;
    let curvature = ring_curvature(ring, hw);
    let mut usable: Vec<bool> = curvature.iter().map(|c| c.is_some()).collect();

    // occlusion boundaries: drop the far side of a depth jump
    for k in 0..n - 1 {
        let gap = (ring[k + 1] - ring[k]).norm();
        if gap > params.discontinuity {
            let (rk, rk1) = (ring[k].norm(), ring[k + 1].norm());
            if rk > rk1 {
                usable[k.saturating_sub(hw)..=k].fill(false);
            } else {
                usable[k + 1..=(k + 1 + hw).min(n - 1)].fill(false);
            }
        }
    }
    // beams nearly parallel to the surface
    for k in 1..n - 1 {
        let r2 = ring[k].norm_squared();
        let d_prev = (ring[k] - ring[k - 1]).norm_squared();
        let d_next = (ring[k + 1] - ring[k]).norm_squared();
        if d_prev > params.grazing_factor * r2 && d_next > params.grazing_factor * r2 {
            usable[k] = false;
        }
    }

    let sector_width = std::f64::consts::TAU / params.sectors as f64;
    let mut sectors: Vec<Vec<usize>> = vec![Vec::new(); params.sectors];
    for k in 0..n {
        if usable[k] {
            let az = ring[k].y.atan2(ring[k].x).rem_euclid(std::f64::consts::TAU);
            let s = ((az / sector_width) as usize).min(params.sectors - 1);
            sectors[s].push(k);
        }
    }

    let mut picked = vec![false; n];
    let mut suppressed = vec![false; n];
    let mut out = FeatureSet::default();
    let suppress = |k: usize, suppressed: &mut Vec<bool>| {
        suppressed[k.saturating_sub(hw)..=(k + hw).min(n - 1)].fill(true);
    };
    for members in &sectors {
        let mut order: Vec<usize> = members.clone();
        // descending curvature, ties by index
        order.sort_by(|&a, &b| curvature[b].unwrap().total_cmp(&curvature[a].unwrap()).then(a.cmp(&b)));
        let mut map_edges = vec![false; n];
        for &k in order
            .iter()
            .take_while(|&&k| curvature[k].unwrap() > params.edge_threshold)
            .take(params.map_edges_per_sector)
        {
            map_edges[k] = true;
        }
        for &k in members {
            if map_edges[k] {
                out.edge_map_points.push(ring[k]);
            } else if curvature[k].unwrap() < params.edge_threshold {
                out.planar_map_points.push(ring[k]);
            }
        }
        let mut edges = 0;
        for &k in &order {
            if edges >= params.edges_per_sector {
                break;
            }
            let c = curvature[k].unwrap();
            if c <= params.edge_threshold {
                break;
            }
            if suppressed[k] {
                continue;
            }
            picked[k] = true;
            out.edge_points.push(ring[k]);
            edges += 1;
            suppress(k, &mut suppressed);
        }
        let mut planar = 0;
        for &k in order.iter().rev() {
            if planar >= params.planar_per_sector {
                break;
            }
            let c = curvature[k].unwrap();
            if c >= params.planar_threshold {
                break;
            }
            if suppressed[k] || picked[k] {
                continue;
            }
            picked[k] = true;
            out.planar_points.push(ring[k]);
            planar += 1;
            suppress(k, &mut suppressed);
        }
    }
    out
}
