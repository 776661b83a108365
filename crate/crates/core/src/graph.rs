//! Keyframe pose graph with odometry edges and closest-point plane edges,
//! optimized by dense Levenberg-Marquardt with the first vertex fixed.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x6, Matrix6, SMatrix, Vector3, Vector6};
use thiserror::Error;

use crate::geometry::{right_jacobian_inv, skew, so3_log, HessePlane, Pose, Vec3};
use crate::solver::{levenberg_marquardt, Linearization, LmReport, LmSettings, Problem, SolverError};
use crate::srp::SrpMatch;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("vertex {0} is not connected to the fixed vertex")]
    DisconnectedGraph(usize),
    #[error("unknown vertex {0}")]
    UnknownVertex(usize),
    #[error("vertex id {0} is not greater than the previous id")]
    NonIncreasingId(usize),
    #[error("information matrix is not symmetric positive definite")]
    InvalidInformation,
    #[error(transparent)]
    Solver(#[from] SolverError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphParams {
    /// Odometry translation sigma per meter of path, meters.
    pub odometry_translation_sigma: f64,
    /// Odometry rotation sigma per meter of path, radians.
    pub odometry_rotation_sigma: f64,
    /// Shortest path length used to scale odometry information.
    pub odometry_min_length: f64,
    pub plane_sigma: f64,
    /// Plane edges are only created when both planes are farther than this
    /// from their keyframe origins (the closest-point vector degenerates at 0).
    pub min_plane_distance: f64,
    pub lm: LmSettings,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            odometry_translation_sigma: 0.05,
            odometry_rotation_sigma: 0.5f64.to_radians(),
            odometry_min_length: 0.1,
            plane_sigma: 0.05,
            min_plane_distance: 0.05,
            lm: LmSettings {
                max_iterations: 50,
                relative_cost_tolerance: 1e-8,
                step_tolerance: 0.0,
                initial_lambda: 1e-4,
            },
        }
    }
}

impl GraphParams {
    /// Diagonal odometry information for an edge covering `path_length` meters.
    pub fn odometry_information(&self, path_length: f64) -> Matrix6<f64> {
        let l = path_length.max(self.odometry_min_length);
        let t = 1.0 / (self.odometry_translation_sigma.powi(2) * l);
        let r = 1.0 / (self.odometry_rotation_sigma.powi(2) * l);
        Matrix6::from_diagonal(&Vector6::new(t, t, t, r, r, r))
    }

    pub fn plane_information(&self) -> Matrix3<f64> {
        Matrix3::identity() / self.plane_sigma.powi(2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphVertex {
    pub id: usize,
    /// `T^W_K`.
    pub pose: Pose,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdomEdge {
    pub from: usize,
    pub to: usize,
    /// Measured `T^{K_from}_{K_to}`.
    pub measurement: Pose,
    pub information: Matrix6<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlaneEdge {
    /// Observing keyframe `i`.
    pub keyframe: usize,
    /// Keyframe `m` owning the registry plane.
    pub owner: usize,
    pub plane_id: usize,
    /// Plane observed in `K_i`.
    pub observed: HessePlane,
    /// Registry plane in `K_m`.
    pub reference: HessePlane,
    pub information: Matrix3<f64>,
}

/// `[e_p; e_theta]` with `e_p = R_z^T (t_ij - t_z)` and
/// `e_theta = Log(R_z^T R_ij)` where `T_ij = T_i^-1 T_j`.
pub fn odometry_error(measurement: &Pose, pose_i: &Pose, pose_j: &Pose) -> Vector6<f64> {
    let rel = pose_i.between(pose_j);
    let err = measurement.between(&rel);
    let r = so3_log(&err.rotation);
    Vector6::new(err.translation.x, err.translation.y, err.translation.z, r.x, r.y, r.z)
}

/// Error and Jacobians with respect to the `[dp, dtheta]` tangents of
/// `pose_i` and `pose_j`.
pub fn odometry_error_with_jacobians(
    measurement: &Pose,
    pose_i: &Pose,
    pose_j: &Pose,
) -> (Vector6<f64>, Matrix6<f64>, Matrix6<f64>) {
    let e = odometry_error(measurement, pose_i, pose_j);
    let ri_t = pose_i.rotation_matrix().transpose();
    let rz_t = measurement.rotation_matrix().transpose();
    let t_rel = ri_t * (pose_j.translation - pose_i.translation);
    let a = ri_t * pose_j.rotation_matrix();
    let jr_inv = right_jacobian_inv(&Vec3::new(e[3], e[4], e[5]));
    let mut ji = Matrix6::zeros();
    let mut jj = Matrix6::zeros();
    ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rz_t * ri_t));
    ji.fixed_view_mut::<3, 3>(0, 3).copy_from(&(rz_t * skew(&t_rel)));
    ji.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-jr_inv * a.transpose()));
    jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&(rz_t * ri_t));
    jj.fixed_view_mut::<3, 3>(3, 3).copy_from(&jr_inv);
    (e, ji, jj)
}

/// Closest-point vector of the reference plane moved from `K_m` into `K_i`.
/// The CP vector is sign-invariant, so no canonicalisation is needed.
fn predicted_cp(reference: &HessePlane, pose_i: &Pose, pose_m: &Pose) -> (Vec3, f64, Vec3) {
    let w = pose_m.rotation * reference.normal();
    let n = pose_i.rotation.inverse() * w;
    let d = reference.distance() + (pose_m.translation - pose_i.translation).dot(&w);
    (n * d, d, n)
}

/// `eta_obs - eta_pred` with `eta = n d`.
pub fn plane_edge_error(observed: &HessePlane, reference: &HessePlane, pose_i: &Pose, pose_m: &Pose) -> Vector3<f64> {
    observed.closest_point() - predicted_cp(reference, pose_i, pose_m).0
}

/// Error and Jacobians with respect to the `[dp, dtheta]` tangents of
/// `pose_i` and `pose_m`.
pub fn plane_edge_error_with_jacobians(
    observed: &HessePlane,
    reference: &HessePlane,
    pose_i: &Pose,
    pose_m: &Pose,
) -> (Vector3<f64>, Matrix3x6<f64>, Matrix3x6<f64>) {
    let (eta, d, n) = predicted_cp(reference, pose_i, pose_m);
    let e = observed.closest_point() - eta;
    let rm = pose_m.rotation_matrix();
    let w = rm * reference.normal();
    let dp = pose_m.translation - pose_i.translation;
    let r_im = pose_i.rotation_matrix().transpose() * rm;
    let dn_dthm = -r_im * skew(reference.normal());
    let dd_dthm = -(dp.transpose() * rm * skew(reference.normal()));
    let mut ji = Matrix3x6::zeros();
    let mut jm = Matrix3x6::zeros();
    ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&(n * w.transpose()));
    ji.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-d * skew(&n)));
    jm.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-n * w.transpose()));
    jm.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-(dn_dthm * d + n * dd_dthm)));
    (e, ji, jm)
}

fn is_spd<const N: usize>(m: &SMatrix<f64, N, N>) -> bool {
    m.iter().all(|v| v.is_finite()) && (m - m.transpose()).amax() <= 1e-9 * m.amax().max(1.0) && m.cholesky().is_some()
}

struct GraphProblem<'a> {
    index: &'a BTreeMap<usize, usize>,
    odometry: &'a [OdomEdge],
    planes: &'a [PlaneEdge],
    dim: usize,
}

impl GraphProblem<'_> {
    /// Column of vertex `k`, or `None` for the fixed vertex.
    fn column(&self, id: usize) -> Option<usize> {
        let k = self.index[&id];
        (k > 0).then(|| 6 * (k - 1))
    }

    fn pose<'p>(&self, poses: &'p [Pose], id: usize) -> &'p Pose {
        &poses[self.index[&id]]
    }
}

fn accumulate<const R: usize>(
    h: &mut DMatrix<f64>,
    g: &mut DVector<f64>,
    blocks: [(Option<usize>, &SMatrix<f64, R, 6>); 2],
    information: &SMatrix<f64, R, R>,
    e: &SMatrix<f64, R, 1>,
) {
    for (ca, ja) in blocks {
        let Some(ca) = ca else { continue };
        let jt_w = ja.transpose() * information;
        let mut gv = g.fixed_rows_mut::<6>(ca);
        gv += jt_w * e;
        for (cb, jb) in blocks {
            let Some(cb) = cb else { continue };
            let mut hv = h.fixed_view_mut::<6, 6>(ca, cb);
            hv += jt_w * jb;
        }
    }
}

impl Problem for GraphProblem<'_> {
    type State = Vec<Pose>;

    /// Half the weighted squared error, `F / 2`.
    fn cost(&self, poses: &Vec<Pose>) -> f64 {
        let mut total = 0.0;
        for edge in self.odometry {
            let e = odometry_error(&edge.measurement, self.pose(poses, edge.from), self.pose(poses, edge.to));
            total += e.dot(&(edge.information * e));
        }
        for edge in self.planes {
            let e = plane_edge_error(
                &edge.observed,
                &edge.reference,
                self.pose(poses, edge.keyframe),
                self.pose(poses, edge.owner),
            );
            total += e.dot(&(edge.information * e));
        }
        0.5 * total
    }

    fn linearize(&self, poses: &Vec<Pose>) -> Linearization {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        let mut g = DVector::zeros(self.dim);
        for edge in self.odometry {
            let (e, ji, jj) = odometry_error_with_jacobians(
                &edge.measurement,
                self.pose(poses, edge.from),
                self.pose(poses, edge.to),
            );
            accumulate(
                &mut h,
                &mut g,
                [(self.column(edge.from), &ji), (self.column(edge.to), &jj)],
                &edge.information,
                &e,
            );
        }
        for edge in self.planes {
            let (e, ji, jm) = plane_edge_error_with_jacobians(
                &edge.observed,
                &edge.reference,
                self.pose(poses, edge.keyframe),
                self.pose(poses, edge.owner),
            );
            accumulate(
                &mut h,
                &mut g,
                [(self.column(edge.keyframe), &ji), (self.column(edge.owner), &jm)],
                &edge.information,
                &e,
            );
        }
        Linearization { cost: self.cost(poses), hessian: h, gradient: g }
    }

    fn retract(&self, poses: &Vec<Pose>, delta: &DVector<f64>) -> Vec<Pose> {
        let mut out = poses.clone();
        for (k, pose) in out.iter_mut().enumerate().skip(1) {
            *pose = pose.retract(&delta.fixed_rows::<6>(6 * (k - 1)).into_owned());
        }
        out
    }
}

/// Weighted squared error `F = sum e^T Omega e` over both edge types.
pub fn graph_cost(vertices: &[GraphVertex], odometry: &[OdomEdge], planes: &[PlaneEdge]) -> Result<f64, GraphError> {
    let index = index_of(vertices)?;
    check_edges(&index, odometry, planes)?;
    let problem = GraphProblem { index: &index, odometry, planes, dim: 6 * vertices.len().saturating_sub(1) };
    Ok(2.0 * problem.cost(&vertices.iter().map(|v| v.pose).collect()))
}

fn index_of(vertices: &[GraphVertex]) -> Result<BTreeMap<usize, usize>, GraphError> {
    let mut index = BTreeMap::new();
    for (k, v) in vertices.iter().enumerate() {
        if k > 0 && v.id <= vertices[k - 1].id {
            return Err(GraphError::NonIncreasingId(v.id));
        }
        index.insert(v.id, k);
    }
    Ok(index)
}

fn check_edges(index: &BTreeMap<usize, usize>, odometry: &[OdomEdge], planes: &[PlaneEdge]) -> Result<(), GraphError> {
    let ends = odometry.iter().flat_map(|e| [e.from, e.to]).chain(planes.iter().flat_map(|e| [e.keyframe, e.owner]));
    for id in ends {
        if !index.contains_key(&id) {
            return Err(GraphError::UnknownVertex(id));
        }
    }
    Ok(())
}

fn check_connected(
    vertices: &[GraphVertex],
    index: &BTreeMap<usize, usize>,
    odometry: &[OdomEdge],
    planes: &[PlaneEdge],
) -> Result<(), GraphError> {
    let mut adjacency = vec![Vec::new(); vertices.len()];
    for (a, b) in odometry.iter().map(|e| (e.from, e.to)).chain(planes.iter().map(|e| (e.keyframe, e.owner))) {
        adjacency[index[&a]].push(index[&b]);
        adjacency[index[&b]].push(index[&a]);
    }
    let mut seen = vec![false; vertices.len()];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(k) = queue.pop_front() {
        for &n in &adjacency[k] {
            if !seen[n] {
                seen[n] = true;
                queue.push_back(n);
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(k) => Err(GraphError::DisconnectedGraph(vertices[k].id)),
        None => Ok(()),
    }
}

/// Minimises `F` over all vertices but the first. Returns the optimized
/// poses (the first one bit-identical to the input) and the solver report,
/// whose costs are `F / 2`.
pub fn optimize_graph(
    vertices: &[GraphVertex],
    odometry: &[OdomEdge],
    planes: &[PlaneEdge],
    settings: &LmSettings,
) -> Result<(Vec<Pose>, LmReport), GraphError> {
    let poses: Vec<Pose> = vertices.iter().map(|v| v.pose).collect();
    if vertices.len() < 2 {
        return Ok((poses, LmReport::default()));
    }
    let index = index_of(vertices)?;
    check_edges(&index, odometry, planes)?;
    if !odometry.iter().all(|e| is_spd(&e.information)) || !planes.iter().all(|e| is_spd(&e.information)) {
        return Err(GraphError::InvalidInformation);
    }
    check_connected(vertices, &index, odometry, planes)?;
    let problem = GraphProblem { index: &index, odometry, planes, dim: 6 * (vertices.len() - 1) };
    let (out, report) = levenberg_marquardt(&problem, poses, settings)?;
    Ok((out, report))
}

/// Incrementally built graph. Optimization runs only when a keyframe adds
/// at least one plane edge.
#[derive(Clone, Debug, Default)]
pub struct PoseGraph {
    pub params: GraphParams,
    vertices: Vec<GraphVertex>,
    odometry: Vec<OdomEdge>,
    planes: Vec<PlaneEdge>,
    reports: Vec<LmReport>,
}

impl PoseGraph {
    pub fn new(params: GraphParams) -> Self {
        Self { params, ..Default::default() }
    }

    pub fn vertices(&self) -> &[GraphVertex] {
        &self.vertices
    }

    pub fn odometry_edges(&self) -> &[OdomEdge] {
        &self.odometry
    }

    pub fn plane_edges(&self) -> &[PlaneEdge] {
        &self.planes
    }

    /// Reports of every optimization run so far.
    pub fn reports(&self) -> &[LmReport] {
        &self.reports
    }

    pub fn cost_evaluations(&self) -> usize {
        self.reports.iter().map(|r| r.cost_evaluations).sum()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.vertices.iter().map(|v| v.pose).collect()
    }

    pub fn pose(&self, id: usize) -> Option<Pose> {
        self.vertices.binary_search_by_key(&id, |v| v.id).ok().map(|k| self.vertices[k].pose)
    }

    pub fn cost(&self) -> f64 {
        graph_cost(&self.vertices, &self.odometry, &self.planes).unwrap_or(f64::NAN)
    }

    /// Plane edge for a registry match, or `None` when either plane is too
    /// close to its keyframe origin.
    pub fn plane_edge(&self, m: &SrpMatch) -> Option<PlaneEdge> {
        let min = self.params.min_plane_distance;
        (m.observed.distance() > min && m.reference.distance() > min).then(|| PlaneEdge {
            keyframe: m.keyframe,
            owner: m.owner,
            plane_id: m.plane_id,
            observed: m.observed,
            reference: m.reference,
            information: self.params.plane_information(),
        })
    }

    /// Appends keyframe `id`. Its vertex is the previous optimized vertex
    /// composed with `odometry` (`T^{K_prev}_{K_id}`), linked by an odometry
    /// edge covering `path_length` meters. The first keyframe becomes the
    /// fixed vertex at `initial`. Returns the report when an optimization ran.
    pub fn on_new_keyframe(
        &mut self,
        id: usize,
        initial: Pose,
        odometry: Pose,
        path_length: f64,
        matches: &[SrpMatch],
    ) -> Result<Option<LmReport>, GraphError> {
        let Some(last) = self.vertices.last().copied() else {
            self.vertices.push(GraphVertex { id, pose: initial });
            return Ok(None);
        };
        if id <= last.id {
            return Err(GraphError::NonIncreasingId(id));
        }
        self.vertices.push(GraphVertex { id, pose: last.pose.compose(&odometry) });
        self.odometry.push(OdomEdge {
            from: last.id,
            to: id,
            measurement: odometry,
            information: self.params.odometry_information(path_length),
        });
        let before = self.planes.len();
        for m in matches {
            if m.keyframe != id || self.pose(m.owner).is_none() {
                return Err(GraphError::UnknownVertex(if m.keyframe != id { m.keyframe } else { m.owner }));
            }
            if let Some(edge) = self.plane_edge(m) {
                self.planes.push(edge);
            }
        }
        if self.planes.len() == before {
            return Ok(None);
        }
        self.optimize().map(Some)
    }

    /// Runs [`optimize_graph`] on the whole graph and stores the result.
    pub fn optimize(&mut self) -> Result<LmReport, GraphError> {
        let (poses, report) = optimize_graph(&self.vertices, &self.odometry, &self.planes, &self.params.lm)?;
        for (v, p) in self.vertices.iter_mut().zip(poses) {
            v.pose = p;
        }
        self.reports.push(report.clone());
        Ok(report)
    }

    /// Text dump: `VERTEX id x y z qx qy qz qw`, `EDGE_ODOM i j x y z qx qy qz qw`
    /// followed by the 21 upper-triangular information entries, and
    /// `EDGE_PLANE i m plane_id nx ny nz d nx_m ny_m nz_m d_m` followed by the
    /// 6 upper-triangular information entries.
    pub fn dump<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for v in &self.vertices {
            writeln!(out, "VERTEX {} {}", v.id, pose_fields(&v.pose))?;
        }
        for e in &self.odometry {
            writeln!(out, "EDGE_ODOM {} {} {} {}", e.from, e.to, pose_fields(&e.measurement), upper(&e.information))?;
        }
        for e in &self.planes {
            let (o, r) = (e.observed, e.reference);
            writeln!(
                out,
                "EDGE_PLANE {} {} {} {} {} {} {} {} {} {} {} {}",
                e.keyframe,
                e.owner,
                e.plane_id,
                o.normal().x,
                o.normal().y,
                o.normal().z,
                o.distance(),
                r.normal().x,
                r.normal().y,
                r.normal().z,
                r.distance(),
                upper(&e.information)
            )?;
        }
        Ok(())
    }
}

fn pose_fields(p: &Pose) -> String {
    let q = p.rotation.quaternion();
    format!("{} {} {} {} {} {} {}", p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w)
}

fn upper<const N: usize>(m: &SMatrix<f64, N, N>) -> String {
    let mut fields = Vec::with_capacity(N * (N + 1) / 2);
    for r in 0..N {
        for c in r..N {
            fields.push(m[(r, c)].to_string());
        }
    }
    fields.join(" ")
}
