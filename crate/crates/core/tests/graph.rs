use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix6, Vector6};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srp_slam::geometry::{so3_exp, transform_plane, HessePlane, Pose, Vec3};
use srp_slam::graph::{
    graph_cost, odometry_error, odometry_error_with_jacobians, optimize_graph, plane_edge_error,
    plane_edge_error_with_jacobians, GraphError, GraphParams, GraphVertex, OdomEdge, PlaneEdge, PoseGraph,
};
use srp_slam::solver::LmReport;
use srp_slam::srp::{Keyframe, PlaneRegistry, Srp, SrpMatch, SrpParams};

fn random_pose(rng: &mut ChaCha8Rng, spread: f64) -> Pose {
    let axis = Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0));
    let t = Vec3::from_fn(|_, _| rng.random_range(-spread..spread));
    Pose::new(so3_exp(&(axis * 1.2)), t)
}

fn random_plane(rng: &mut ChaCha8Rng) -> HessePlane {
    HessePlane::new(Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0)), rng.random_range(0.5..5.0)).unwrap()
}

fn tangent(i: usize, h: f64) -> Vector6<f64> {
    let mut d = Vector6::zeros();
    d[i] = h;
    d
}

fn check_columns<const R: usize>(
    analytic: &nalgebra::SMatrix<f64, R, 6>,
    f: impl Fn(&Vector6<f64>) -> nalgebra::SVector<f64, R>,
) {
    let h = 1e-6;
    for c in 0..6 {
        let fd = (f(&tangent(c, h)) - f(&tangent(c, -h))) / (2.0 * h);
        let col = analytic.column(c);
        let scale = col.norm().max(1.0);
        assert!((fd - col).norm() <= 1e-5 * scale, "column {c}: fd {fd:?} analytic {col:?}");
    }
}

#[test]
fn odometry_jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (pi, pj, z) = (random_pose(&mut rng, 5.0), random_pose(&mut rng, 5.0), random_pose(&mut rng, 2.0));
        let (e, ji, jj) = odometry_error_with_jacobians(&z, &pi, &pj);
        assert!((e - odometry_error(&z, &pi, &pj)).norm() < 1e-15);
        check_columns(&ji, |d| odometry_error(&z, &pi.retract(d), &pj));
        check_columns(&jj, |d| odometry_error(&z, &pi, &pj.retract(d)));
    }
}

#[test]
fn plane_edge_jacobians_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (pi, pm) = (random_pose(&mut rng, 5.0), random_pose(&mut rng, 5.0));
        let (obs, reference) = (random_plane(&mut rng), random_plane(&mut rng));
        let (e, ji, jm) = plane_edge_error_with_jacobians(&obs, &reference, &pi, &pm);
        assert!((e - plane_edge_error(&obs, &reference, &pi, &pm)).norm() < 1e-15);
        check_columns(&ji, |d| plane_edge_error(&obs, &reference, &pi.retract(d), &pm));
        check_columns(&jm, |d| plane_edge_error(&obs, &reference, &pi, &pm.retract(d)));
    }
}

fn vertices(poses: &[Pose]) -> Vec<GraphVertex> {
    poses.iter().enumerate().map(|(id, &pose)| GraphVertex { id, pose }).collect()
}

fn chain(poses: &[Pose], params: &GraphParams) -> Vec<OdomEdge> {
    poses
        .windows(2)
        .enumerate()
        .map(|(k, w)| OdomEdge {
            from: k,
            to: k + 1,
            measurement: w[0].between(&w[1]),
            information: params.odometry_information((w[1].translation - w[0].translation).norm()),
        })
        .collect()
}

fn assert_properties(before: &[Pose], after: &[Pose], report: &LmReport) {
    assert_eq!(before[0], after[0], "gauge vertex moved");
    assert!(report.monotone(), "cost increased: {:?}", report.cost_history);
}

#[test]
fn zero_noise_chain_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = GraphParams::default();
    let poses: Vec<Pose> = (0..10).map(|_| random_pose(&mut rng, 10.0)).collect();
    let odometry = chain(&poses, &params);
    let (out, report) = optimize_graph(&vertices(&poses), &odometry, &[], &params.lm).unwrap();
    assert_properties(&poses, &out, &report);
    assert!(2.0 * report.final_cost < 1e-16);
    for (a, b) in poses.iter().zip(&out) {
        assert!(a.local(b).norm() < 1e-10);
    }
}

#[test]
fn zero_noise_graph_with_planes_is_a_fixed_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = GraphParams::default();
    let poses: Vec<Pose> = (0..8).map(|_| random_pose(&mut rng, 10.0)).collect();
    let world: Vec<HessePlane> = (0..3).map(|_| random_plane(&mut rng)).collect();
    let planes: Vec<PlaneEdge> = (1..poses.len())
        .flat_map(|i| world.iter().enumerate().map(move |(p, w)| (i, p, w)))
        .map(|(i, p, w)| PlaneEdge {
            keyframe: i,
            owner: 0,
            plane_id: p,
            observed: transform_plane(&poses[i].inverse(), w),
            reference: transform_plane(&poses[0].inverse(), w),
            information: params.plane_information(),
        })
        .collect();
    let (out, report) = optimize_graph(&vertices(&poses), &chain(&poses, &params), &planes, &params.lm).unwrap();
    assert_properties(&poses, &out, &report);
    for (a, b) in poses.iter().zip(&out) {
        assert!(a.local(b).norm() < 1e-10);
    }
}

/// Three keyframes 1 m apart; odometry claims 0.15 m rise per edge while a
/// shared floor plane says the last keyframe is level with the first.
fn toy(plane_weight: f64) -> f64 {
    let poses = [Pose::from_translation(Vec3::new(0.0, 0.0, 1.0)); 3]
        .iter()
        .enumerate()
        .map(|(k, p)| Pose::from_translation(p.translation + Vec3::new(k as f64, 0.0, 0.15 * k as f64)))
        .collect::<Vec<_>>();
    // rotations pinned hard so the rise cannot be traded for pitch
    let information = Matrix6::from_diagonal(&Vector6::new(1.0, 1.0, 1.0, 1e8, 1e8, 1e8));
    let odometry: Vec<OdomEdge> = poses
        .windows(2)
        .enumerate()
        .map(|(k, w)| OdomEdge { from: k, to: k + 1, measurement: w[0].between(&w[1]), information })
        .collect();
    let floor = HessePlane::new(Vec3::new(0.0, 0.0, -1.0), 1.0).unwrap();
    let plane = PlaneEdge {
        keyframe: 2,
        owner: 0,
        plane_id: 0,
        observed: floor,
        reference: floor,
        information: Matrix3::identity() * plane_weight,
    };
    let settings = GraphParams::default().lm;
    let (out, report) = optimize_graph(&vertices(&poses), &odometry, &[plane], &settings).unwrap();
    assert_properties(&poses, &out, &report);
    out[2].translation.z - out[0].translation.z
}

#[test]
fn three_vertex_toy_balances_rise() {
    // with z1 = z2 / 2 at the optimum, the rise solves (z2 - 0.3) + 2 w z2 = 0
    for w in [1.0, 100.0] {
        let rise = toy(w);
        let expected = 0.3 / (1.0 + 2.0 * w);
        assert!((rise - expected).abs() < 1e-6, "weight {w}: rise {rise}, expected {expected}");
        assert!(rise > 0.0 && rise < 0.3);
    }
    assert!(toy(100.0) < 0.01);
}

#[test]
fn disconnected_graph_is_rejected() {
    let params = GraphParams::default();
    let poses: Vec<Pose> = (0..4).map(|k| Pose::from_translation(Vec3::new(k as f64, 0.0, 0.0))).collect();
    let mut odometry = chain(&poses, &params);
    odometry.remove(1);
    let r = optimize_graph(&vertices(&poses), &odometry, &[], &params.lm);
    assert_eq!(r.unwrap_err(), GraphError::DisconnectedGraph(2));
}

#[test]
fn invalid_information_is_rejected() {
    let params = GraphParams::default();
    let poses: Vec<Pose> = (0..2).map(|k| Pose::from_translation(Vec3::new(k as f64, 0.0, 0.0))).collect();
    let mut odometry = chain(&poses, &params);
    odometry[0].information[(0, 0)] = -1.0;
    assert_eq!(
        optimize_graph(&vertices(&poses), &odometry, &[], &params.lm).unwrap_err(),
        GraphError::InvalidInformation
    );
}

fn observed_match(keyframe: usize, owner: usize, plane_id: usize, world: &HessePlane, poses: &[Pose]) -> SrpMatch {
    SrpMatch {
        keyframe,
        owner,
        plane_id,
        observed: transform_plane(&poses[keyframe].inverse(), world),
        reference: transform_plane(&poses[owner].inverse(), world),
        delta_angle: 0.0,
        delta_distance: 0.0,
    }
}

#[test]
fn keyframes_without_matches_do_not_optimize() {
    let poses: Vec<Pose> = (0..3).map(|k| Pose::from_translation(Vec3::new(k as f64, 0.0, 1.0))).collect();
    let mut graph = PoseGraph::new(GraphParams::default());
    assert_eq!(graph.on_new_keyframe(0, poses[0], Pose::identity(), 0.0, &[]).unwrap(), None);
    assert_eq!(graph.vertices().len(), 1);
    assert!(graph.odometry_edges().is_empty());
    assert_eq!(graph.on_new_keyframe(1, poses[1], poses[0].between(&poses[1]), 1.0, &[]).unwrap(), None);
    assert_eq!(graph.cost_evaluations(), 0);
    assert!(graph.reports().is_empty());

    let world = [HessePlane::new(Vec3::y(), 1.2).unwrap(), HessePlane::new(Vec3::x(), 5.0).unwrap()];
    let matches: Vec<SrpMatch> = world.iter().enumerate().map(|(p, w)| observed_match(2, 0, p, w, &poses)).collect();
    let report = graph.on_new_keyframe(2, poses[2], poses[1].between(&poses[2]), 1.0, &matches).unwrap();
    assert!(report.is_some());
    assert_eq!(graph.plane_edges().len(), 2);
    assert_eq!(graph.reports().len(), 1);
    assert_eq!(graph.vertices()[0].pose, poses[0]);
}

#[test]
fn plane_through_keyframe_origin_is_not_an_edge() {
    let poses = [Pose::identity(), Pose::from_translation(Vec3::new(1.0, 0.0, 0.0))];
    let graph = PoseGraph::new(GraphParams::default());
    let through_origin = HessePlane::new(Vec3::y(), 0.01).unwrap();
    assert!(graph.plane_edge(&observed_match(1, 0, 0, &through_origin, &poses)).is_none());
}

#[test]
fn dump_lists_every_vertex_and_edge() {
    let poses: Vec<Pose> = (0..3).map(|k| Pose::from_translation(Vec3::new(k as f64, 0.0, 1.0))).collect();
    let wall = HessePlane::new(Vec3::y(), 1.2).unwrap();
    let mut graph = PoseGraph::new(GraphParams::default());
    graph.on_new_keyframe(0, poses[0], Pose::identity(), 0.0, &[]).unwrap();
    graph.on_new_keyframe(1, poses[1], poses[0].between(&poses[1]), 1.0, &[]).unwrap();
    graph
        .on_new_keyframe(2, poses[2], poses[1].between(&poses[2]), 1.0, &[observed_match(2, 0, 0, &wall, &poses)])
        .unwrap();
    let mut out = Vec::new();
    graph.dump(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.iter().filter(|l| l.starts_with("VERTEX ")).count(), 3);
    let odom: Vec<&str> = lines.iter().filter(|l| l.starts_with("EDGE_ODOM ")).copied().collect();
    assert_eq!(odom.len(), 2);
    assert_eq!(odom[0].split_whitespace().count(), 1 + 2 + 7 + 21);
    let plane: Vec<&str> = lines.iter().filter(|l| l.starts_with("EDGE_PLANE ")).copied().collect();
    assert_eq!(plane.len(), 1);
    assert_eq!(plane[0].split_whitespace().count(), 1 + 3 + 8 + 6);
}

/// Two-story loop: story 1 corridor, ramp up, story 2 back, ramp down, return
/// to the start. Side walls are shared by both stories.
struct Loop {
    poses: Vec<Pose>,
    /// Visible world planes per keyframe as (plane id, plane).
    visible: Vec<Vec<(usize, HessePlane)>>,
}

fn two_story_loop() -> Loop {
    let h = 3.0;
    let planes = [
        HessePlane::new(Vec3::new(0.0, 0.0, 1.0), 0.0).unwrap(),
        HessePlane::new(Vec3::new(0.0, 1.0, 0.0), 1.2).unwrap(),
        HessePlane::new(Vec3::new(1.0, 0.0, 0.0), 20.0).unwrap(),
        HessePlane::new(Vec3::new(1.0, 0.0, 0.0), 6.0).unwrap(),
        HessePlane::new(Vec3::new(0.0, 0.0, 1.0), h).unwrap(),
    ];
    let mut path: Vec<(Vec3, f64, Option<usize>)> = Vec::new();
    let z1 = 1.2;
    for k in 0..=12 {
        path.push((Vec3::new(k as f64, 0.0, z1), 0.0, Some(0)));
    }
    for k in 1..=4 {
        path.push((Vec3::new(12.0 + k as f64, 0.0, z1 + h * k as f64 / 4.0), 0.0, None));
    }
    for k in (0..=16).rev() {
        path.push((Vec3::new(k as f64, 0.5, z1 + h), PI, Some(4)));
    }
    for k in 1..=4 {
        path.push((Vec3::new(-(k as f64), 0.5, z1 + h - h * k as f64 / 4.0), PI, None));
    }
    for k in -3..=0 {
        path.push((Vec3::new(k as f64, 0.0, z1), 0.0, Some(0)));
    }
    let poses: Vec<Pose> = path.iter().map(|(p, yaw, _)| Pose::from_euler_zyx(*yaw, 0.0, 0.0, *p)).collect();
    let visible = path
        .iter()
        .map(|(p, _, floor)| {
            let end_wall = if p.x > 7.0 { 2 } else { 3 };
            let mut v = vec![(1, planes[1]), (end_wall, planes[end_wall])];
            if let Some(f) = floor {
                v.push((*f, planes[*f]));
            }
            v
        })
        .collect();
    Loop { poses, visible }
}

/// Each odometry edge drifts by 1 cm per meter on every axis and 0.2 deg of
/// yaw per meter.
fn drifted(rel: &Pose) -> Pose {
    let len = rel.translation.norm();
    rel.compose(&Pose::from_euler_zyx(0.2f64.to_radians() * len, 0.0, 0.0, Vec3::new(0.01, 0.01, 0.01) * len))
}

#[test]
fn two_story_loop_drift_is_reduced_tenfold() {
    let scenario = two_story_loop();
    let n = scenario.poses.len();
    let srp_params = SrpParams { locality: 40.0, ..SrpParams::default() };
    let mut graph = PoseGraph::new(GraphParams::default());
    let mut registry = PlaneRegistry::new();
    let mut dead_reckoned = vec![scenario.poses[0]];
    for k in 0..n {
        let rel = if k == 0 { Pose::identity() } else { drifted(&scenario.poses[k - 1].between(&scenario.poses[k])) };
        if k > 0 {
            let next = dead_reckoned[k - 1].compose(&rel);
            dead_reckoned.push(next);
        }
        let estimate = match graph.vertices().last() {
            Some(v) => v.pose.compose(&rel),
            None => scenario.poses[0],
        };
        let srps = scenario.visible[k]
            .iter()
            .map(|(_, w)| Srp { plane: transform_plane(&scenario.poses[k].inverse(), w), inliers: 1000 })
            .collect();
        let keyframe = Keyframe { id: k, t: k as f64, pose: estimate, points: Vec::new(), srps };
        let mut poses = graph.poses();
        poses.push(estimate);
        let matches = registry.register(&keyframe, &poses, &srp_params);
        let before = graph.poses();
        graph.on_new_keyframe(k, scenario.poses[0], rel, rel.translation.norm(), &matches).unwrap();
        let after = graph.poses();
        if let Some(report) = graph.reports().last() {
            assert_properties(&before, &after, report);
        }
    }
    let deviation = |poses: &[Pose]| poses[0].between(&poses[n - 1]).translation.norm();
    let truth = deviation(&scenario.poses);
    assert!(truth < 1e-9);
    let raw = deviation(&dead_reckoned);
    let optimized = deviation(&graph.poses());
    assert!(!graph.plane_edges().is_empty());
    assert!(optimized * 10.0 <= raw, "raw {raw}, optimized {optimized}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cost_is_invariant_to_a_global_rigid_motion(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = GraphParams::default();
        let poses: Vec<Pose> = (0..5).map(|_| random_pose(&mut rng, 8.0)).collect();
        let mut odometry = chain(&poses, &params);
        for e in &mut odometry {
            e.measurement = e.measurement.compose(&random_pose(&mut rng, 0.2));
        }
        let planes: Vec<PlaneEdge> = (0..4)
            .map(|k| PlaneEdge {
                keyframe: k + 1,
                owner: k % 2,
                plane_id: k,
                observed: random_plane(&mut rng),
                reference: random_plane(&mut rng),
                information: params.plane_information(),
            })
            .collect();
        let motion = random_pose(&mut rng, 50.0);
        let moved: Vec<Pose> = poses.iter().map(|p| motion.compose(p)).collect();
        let a = graph_cost(&vertices(&poses), &odometry, &planes).unwrap();
        let b = graph_cost(&vertices(&moved), &odometry, &planes).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn optimization_never_increases_cost(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = GraphParams::default();
        let poses: Vec<Pose> = (0..6).map(|k| Pose::from_translation(Vec3::new(k as f64, 0.0, 0.0))).collect();
        let mut odometry = chain(&poses, &params);
        for e in &mut odometry {
            e.measurement = e.measurement.compose(&random_pose(&mut rng, 0.3));
        }
        let wall = HessePlane::new(Vec3::y(), 1.5).unwrap();
        let planes: Vec<PlaneEdge> = (1..6)
            .map(|k| PlaneEdge {
                keyframe: k,
                owner: 0,
                plane_id: 0,
                observed: transform_plane(&poses[k].inverse(), &wall),
                reference: transform_plane(&poses[0].inverse(), &wall),
                information: params.plane_information(),
            })
            .collect();
        let start: Vec<Pose> = poses.iter().map(|p| p.compose(&random_pose(&mut rng, 0.1))).collect();
        let (out, report) = optimize_graph(&vertices(&start), &odometry, &planes, &params.lm).unwrap();
        prop_assert_eq!(out[0], start[0]);
        prop_assert!(report.monotone());
        prop_assert!(report.final_cost <= report.initial_cost);
    }
}
