//! Seeded problem generators shared by the test suites and benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kinematics::{
    forward_kinematics, CollisionSpec, FingertipSpec, HandModel, JointSpec, JointType, ModelDescription, Origin,
    SphereSpec, ROOT_LINK,
};
use crate::qp::QpProblem;
use crate::tracker::{collision_pairs, linearize_collisions};
use crate::waypoint_planner::{FingerTarget, GraspPlan, Phase, PhaseAnchor};

/// Strictly convex QP with `n, m <= 4` and finite, consistent bounds.
///
/// About half of the rows get equal bounds or bounds that exclude the
/// unconstrained minimizer, so a good share of instances are active.
pub fn random_qp(seed: u64) -> QpProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=4);
    let m = rng.random_range(0..=4);
    let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let p = b.transpose() * &b + DMatrix::identity(n, n) * rng.random_range(0.05..1.0);
    let p = (&p + p.transpose()) * 0.5;
    let g = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    // a feasible point keeps every instance solvable
    let x0 = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
    let ax0 = &a * &x0;
    let mut l = DVector::zeros(m);
    let mut u = DVector::zeros(m);
    for i in 0..m {
        if rng.random_bool(0.15) {
            l[i] = ax0[i];
            u[i] = ax0[i];
        } else {
            l[i] = ax0[i] - rng.random_range(0.0..1.0);
            u[i] = ax0[i] + rng.random_range(0.0..1.0);
        }
    }
    QpProblem { p, g, a, l, u }
}

/// A kinematic chain, a start configuration and a single-finger plan.
#[derive(Debug, Clone)]
pub struct ReachingTask {
    pub model: HandModel,
    pub q_init: Vec<f64>,
    pub plan: GraspPlan,
    pub reachable: bool,
}

fn revolute(name: String, parent: String, xyz: [f64; 3], axis: [f64; 3], limit: f64) -> JointSpec {
    JointSpec {
        name,
        kind: JointType::Revolute,
        parent,
        origin: Origin { xyz, rpy: [0.0; 3] },
        axis,
        limits: Some([-limit, limit]),
    }
}

/// Planar chain of revolute joints about `z`, one per link length.
pub fn planar_chain(lengths: &[f64]) -> HandModel {
    let joints = lengths
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let parent = if i == 0 { ROOT_LINK.to_string() } else { format!("j{}", i - 1) };
            let xyz = if i == 0 { [0.0; 3] } else { [lengths[i - 1], 0.0, 0.0] };
            revolute(format!("j{i}"), parent, xyz, [0.0, 0.0, 1.0], 2.6)
        })
        .collect();
    let last = lengths.len() - 1;
    HandModel::from_description(ModelDescription {
        name: "planar".into(),
        joints,
        fingertips: vec![FingertipSpec {
            name: "tip".into(),
            link: format!("j{last}"),
            offset: [lengths[last], 0.0, 0.0],
        }],
        coupling: Default::default(),
        collision: Default::default(),
    })
    .expect("well-formed planar chain")
}

/// Spatial chain of revolute joints with alternating axes, collision
/// spheres on every link and a table below the base.
pub fn spatial_chain(rng: &mut ChaCha8Rng, links: usize) -> HandModel {
    let axes = [[0.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]];
    let mut joints = Vec::new();
    let mut lengths = Vec::new();
    for i in 0..links {
        let len = rng.random_range(0.08..0.16);
        let parent = if i == 0 { ROOT_LINK.to_string() } else { format!("j{}", i - 1) };
        let xyz = if i == 0 { [0.0, 0.0, 0.05] } else { [lengths[i - 1], 0.0, 0.0] };
        joints.push(revolute(format!("j{i}"), parent, xyz, axes[i % 3], 2.0));
        lengths.push(len);
    }
    let spheres = (0..links)
        .map(|i| SphereSpec {
            link: format!("j{i}"),
            center: [lengths[i], 0.0, 0.0],
            radius: 0.03,
        })
        .collect();
    HandModel::from_description(ModelDescription {
        name: "spatial".into(),
        joints,
        fingertips: vec![FingertipSpec {
            name: "tip".into(),
            link: format!("j{}", links - 1),
            offset: [lengths[links - 1], 0.0, 0.0],
        }],
        coupling: Default::default(),
        collision: CollisionSpec {
            spheres,
            table_z: Some(0.0),
        },
    })
    .expect("well-formed spatial chain")
}

/// Plan tracking one point in every phase.
pub fn point_plan(target: [f64; 3]) -> GraspPlan {
    GraspPlan {
        phases: Phase::ALL
            .iter()
            .map(|&name| PhaseAnchor {
                name,
                s: 0.0,
                targets: vec![FingerTarget { finger: 0, xyz: target }],
            })
            .collect(),
        hand_waypoint: target,
        fingers_used: vec![0],
        contacts: vec![],
    }
}

fn random_config(rng: &mut ChaCha8Rng, model: &HandModel, shrink: f64) -> Vec<f64> {
    model
        .lower
        .iter()
        .zip(&model.upper)
        .map(|(lo, hi)| shrink * rng.random_range(*lo..*hi))
        .collect()
}

fn clear_of_collisions(model: &HandModel, q: &[f64], margin: f64) -> bool {
    linearize_collisions(model, q, margin, 1e-6).is_ok_and(|rows| rows.is_empty())
}

/// Even seeds give planar three-link tasks, odd seeds spatial chains with
/// collision geometry. Every fourth task targets a point beyond reach.
pub fn reaching_task(seed: u64) -> ReachingTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = if seed % 2 == 0 {
        let lengths: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..0.4)).collect();
        planar_chain(&lengths)
    } else {
        let links = rng.random_range(3..=5);
        spatial_chain(&mut rng, links)
    };
    let check_margin = if collision_pairs(&model).is_empty() { 0.0 } else { 0.01 };
    let pick = |rng: &mut ChaCha8Rng| loop {
        let q = random_config(rng, &model, 0.8);
        if clear_of_collisions(&model, &q, check_margin) {
            return q;
        }
    };
    let q_init = pick(&mut rng);
    let reachable = seed % 4 != 3;
    let target = if reachable {
        forward_kinematics(&model, &pick(&mut rng)).expect("valid configuration").fingertip(0)
    } else {
        let reach: f64 = model.joints.iter().map(|j| j.origin_translation.norm()).sum::<f64>()
            + model.fingertips[0].offset.norm();
        let base = model.joints[0].origin_translation;
        [base.x + 1.5 * reach, base.y + 0.5 * reach, base.z]
    };
    ReachingTask {
        model,
        q_init,
        plan: point_plan(target),
        reachable,
    }
}
