//! Damped Gauss-Newton fingertip tracking with joint-limit, step-size and
//! linearized collision constraints, driven through the grasp phases.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::{coupling_residual, fingertip_jacobian, forward_kinematics, sphere_centers, HandModel, KinematicState};
use crate::qp::{QpProblem, QpSettings, QpSolver, QpStatus, WarmStart};
use crate::waypoint_planner::{GraspPlan, Phase};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Per-finger residual weights, indexed by finger id.
    pub finger_weights: Vec<f64>,
    pub coupling_weight: f64,
    pub damping: f64,
    /// Per-coordinate step cap.
    pub max_step: f64,
    pub tol_approach: f64,
    pub tol_closure: f64,
    pub tol_hold: f64,
    /// Step budgets for approach, closure, hold.
    pub budgets: [usize; 3],
    pub safety_margin: f64,
    /// Clearance below which a collision pair is constrained.
    pub activation_distance: f64,
    /// Weight of the fingertip-centroid row during approach.
    pub hand_weight: f64,
    /// Step for the finite-difference clearance gradient.
    pub gradient_step: f64,
    pub qp: QpSettings,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            finger_weights: vec![2.0, 1.0, 1.0, 1.0, 1.0],
            coupling_weight: 10.0,
            damping: 1e-3,
            max_step: 0.05,
            tol_approach: 0.008,
            tol_closure: 0.003,
            tol_hold: 0.003,
            budgets: [300, 200, 100],
            safety_margin: 0.003,
            activation_distance: 0.02,
            hand_weight: 0.5,
            gradient_step: 1e-6,
            qp: QpSettings::default(),
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.coupling_weight,
            self.damping,
            self.max_step,
            self.tol_approach,
            self.tol_closure,
            self.tol_hold,
            self.hand_weight,
            self.gradient_step,
        ];
        if positive.iter().any(|x| !(x.is_finite() && *x > 0.0)) || self.finger_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::invalid("tracker weights, tolerances and step cap must be positive"));
        }
        if self.tol_closure > self.tol_approach {
            return Err(Error::invalid("closure tolerance must not exceed the approach tolerance"));
        }
        if !(self.safety_margin >= 0.0 && self.activation_distance > self.safety_margin) {
            return Err(Error::invalid("activation distance must exceed the safety margin"));
        }
        Ok(())
    }

    pub fn tolerance(&self, phase: Phase) -> f64 {
        match phase {
            Phase::Approach => self.tol_approach,
            Phase::Closure => self.tol_closure,
            Phase::Hold => self.tol_hold,
        }
    }

    pub fn budget(&self, phase: Phase) -> usize {
        self.budgets[phase as usize]
    }

    pub fn finger_weight(&self, finger: usize) -> f64 {
        self.finger_weights.get(finger).copied().unwrap_or(1.0)
    }
}

/// Stacked residual and Jacobian with per-row weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStack {
    pub r: DVector<f64>,
    pub j: DMatrix<f64>,
    pub weights: DVector<f64>,
    /// Fingers in row order.
    pub fingers: Vec<usize>,
}

fn participating(model: &HandModel, plan: &GraspPlan) -> Result<Vec<usize>> {
    let mut fingers = plan.fingers_used.clone();
    fingers.sort_unstable();
    fingers.dedup();
    if fingers.is_empty() {
        return Err(Error::invalid("plan has no participating fingers"));
    }
    if let Some(&f) = fingers.iter().find(|&&f| f >= model.fingertip_count()) {
        return Err(Error::invalid(format!(
            "plan finger {f} has no fingertip frame in model {}",
            model.name
        )));
    }
    Ok(fingers)
}

/// Fingertip rows (thumb to little) followed by the coupling rows.
pub fn stack_residuals(
    model: &HandModel,
    state: &KinematicState,
    plan: &GraspPlan,
    phase: Phase,
    config: &TrackerConfig,
) -> Result<ResidualStack> {
    let fingers = participating(model, plan)?;
    let anchor = plan.phase(phase)?;
    let (ec, jc) = coupling_residual(model, &state.q)?;
    let rows = 3 * fingers.len() + ec.len();
    let n = model.dof();
    let mut r = DVector::zeros(rows);
    let mut j = DMatrix::zeros(rows, n);
    let mut w = DVector::zeros(rows);
    for (i, &f) in fingers.iter().enumerate() {
        let target = anchor
            .target(f)
            .ok_or_else(|| Error::invalid(format!("{phase} phase has no target for finger {f}")))?;
        let p = state.fingertips[f];
        for a in 0..3 {
            r[3 * i + a] = p[a] - target[a];
            w[3 * i + a] = config.finger_weight(f);
        }
        j.view_mut((3 * i, 0), (3, n)).copy_from(&fingertip_jacobian(model, state, f)?);
    }
    let base = 3 * fingers.len();
    for c in 0..ec.len() {
        r[base + c] = ec[c];
        w[base + c] = config.coupling_weight;
    }
    j.view_mut((base, 0), (ec.len(), n)).copy_from(&jc);
    Ok(ResidualStack {
        r,
        j,
        weights: w,
        fingers,
    })
}

/// Fingertip-centroid residual toward the plan's hand waypoint.
pub fn hand_residual(model: &HandModel, state: &KinematicState, plan: &GraspPlan) -> Result<(Vector3<f64>, DMatrix<f64>)> {
    let fingers = participating(model, plan)?;
    let k = fingers.len() as f64;
    let mut centroid = Vector3::zeros();
    let mut jac = DMatrix::zeros(3, model.dof());
    for &f in &fingers {
        centroid += state.fingertips[f] / k;
        jac += fingertip_jacobian(model, state, f)? / k;
    }
    Ok((centroid - Vector3::from(plan.hand_waypoint), jac))
}

/// A linearized clearance constraint `-grad' dq <= phi - d_safe`.
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionRow {
    /// Sphere indices; `None` as the second entry is the table.
    pub pair: (usize, Option<usize>),
    pub clearance: f64,
    pub gradient: DVector<f64>,
}

fn clearances(model: &HandModel, q: &[f64], pairs: &[(usize, Option<usize>)]) -> Result<Vec<f64>> {
    let state = forward_kinematics(model, q)?;
    let c = sphere_centers(model, &state);
    Ok(pairs
        .iter()
        .map(|&(i, j)| match j {
            None => c[i].z - model.table_z.unwrap_or(f64::NEG_INFINITY) - model.spheres[i].radius,
            Some(j) => (c[i] - c[j]).norm() - model.spheres[i].radius - model.spheres[j].radius,
        })
        .collect())
}

/// Every sphere-table and self-collision pair the model can produce.
pub fn collision_pairs(model: &HandModel) -> Vec<(usize, Option<usize>)> {
    let mut pairs = Vec::new();
    if model.table_z.is_some() {
        for i in 0..model.spheres.len() {
            if (0..model.dof()).any(|d| model.dof_moves(d, model.spheres[i].link)) {
                pairs.push((i, None));
            }
        }
    }
    pairs.extend(model.sphere_pairs().into_iter().map(|(i, j)| (i, Some(j))));
    pairs
}

/// Linearizes every pair whose clearance is below `activation`.
pub fn linearize_collisions(model: &HandModel, q: &[f64], activation: f64, step: f64) -> Result<Vec<CollisionRow>> {
    let pairs = collision_pairs(model);
    let phi = clearances(model, q, &pairs)?;
    let active: Vec<usize> = (0..pairs.len()).filter(|&i| phi[i] < activation).collect();
    if active.is_empty() {
        return Ok(Vec::new());
    }
    let sub: Vec<_> = active.iter().map(|&i| pairs[i]).collect();
    let n = model.dof();
    let mut grads = vec![DVector::zeros(n); sub.len()];
    for d in 0..n {
        let mut qp = q.to_vec();
        let mut qm = q.to_vec();
        qp[d] += step;
        qm[d] -= step;
        let (fp, fm) = (clearances(model, &qp, &sub)?, clearances(model, &qm, &sub)?);
        for (g, (a, b)) in grads.iter_mut().zip(fp.iter().zip(&fm)) {
            g[d] = (a - b) / (2.0 * step);
        }
    }
    Ok(active
        .iter()
        .zip(grads)
        .map(|(&i, gradient)| CollisionRow {
            pair: pairs[i],
            clearance: phi[i],
            gradient,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryStep {
    pub t: usize,
    pub phase: Phase,
    pub q: Vec<f64>,
    /// Per participating finger, `|p_k - p_k*|` before the step.
    pub residuals: Vec<f64>,
    pub coupling_residual: f64,
    pub dq: Vec<f64>,
    pub qp_status: QpStatus,
    pub active_collisions: usize,
    pub damping: f64,
}

/// Result of one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub dq: DVector<f64>,
    pub status: QpStatus,
    pub collisions: Vec<CollisionRow>,
    pub problem: QpProblem,
    /// Objective scale applied before solving.
    pub scale: f64,
}

#[allow(clippy::too_many_arguments)]
/// Assembles and solves one step QP at `state`. Returns the raw QP answer;
/// see [`apply_step`] for the exact-feasibility post-processing.
pub fn step(
    model: &HandModel,
    state: &KinematicState,
    plan: &GraspPlan,
    phase: Phase,
    config: &TrackerConfig,
    damping: f64,
    solver: &mut QpSolver,
    warm: Option<&WarmStart>,
) -> Result<StepResult> {
    let stack = stack_residuals(model, state, plan, phase, config)?;
    let n = model.dof();
    let wj = DMatrix::from_fn(stack.j.nrows(), n, |i, c| stack.weights[i] * stack.j[(i, c)]);
    let mut p = stack.j.transpose() * &wj + DMatrix::identity(n, n) * damping;
    let mut g = wj.transpose() * &stack.r;
    if phase == Phase::Approach {
        let (hr, hj) = hand_residual(model, state, plan)?;
        p += hj.transpose() * &hj * config.hand_weight;
        g += hj.transpose() * hr * config.hand_weight;
    }
    // Symmetrize exactly and normalize the objective; the minimizer is unchanged.
    p = (&p + p.transpose()) * 0.5;
    let scale = 1.0 / p.diagonal().max().max(f64::MIN_POSITIVE);
    p *= scale;
    g *= scale;
    let collisions = linearize_collisions(model, &state.q, config.activation_distance, config.gradient_step)?;
    let m = n + collisions.len();
    let mut a = DMatrix::zeros(m, n);
    let mut l = DVector::zeros(m);
    let mut u = DVector::zeros(m);
    for i in 0..n {
        a[(i, i)] = 1.0;
        l[i] = (model.lower[i] - state.q[i]).max(-config.max_step);
        u[i] = (model.upper[i] - state.q[i]).min(config.max_step);
        if l[i] > u[i] {
            // outside the limits already; pull straight back
            let mid = 0.5 * (l[i] + u[i]);
            l[i] = mid;
            u[i] = mid;
        }
    }
    for (r, c) in collisions.iter().enumerate() {
        for d in 0..n {
            a[(n + r, d)] = -c.gradient[d];
        }
        l[n + r] = f64::NEG_INFINITY;
        u[n + r] = c.clearance - config.safety_margin;
    }
    let problem = QpProblem { p, g, a, l, u };
    let warm = warm.filter(|w| w.x.len() == n && w.y.len() == m);
    let sol = solver.solve(&problem, warm)?;
    Ok(StepResult {
        dq: sol.x,
        status: sol.status,
        collisions,
        problem,
        scale,
    })
}

/// Clamps `q + dq` into the joint limits and the step cap exactly, nudging
/// by one ulp where rounding would break either bound.
pub fn apply_step(model: &HandModel, q: &[f64], dq: &DVector<f64>, max_step: f64) -> Vec<f64> {
    q.iter()
        .enumerate()
        .map(|(i, &qi)| {
            let lo = model.lower[i].max(qi - max_step);
            let hi = model.upper[i].min(qi + max_step);
            let mut next = (qi + dq[i]).clamp(lo.min(hi), hi.max(lo));
            next = next.clamp(model.lower[i], model.upper[i]);
            while (next - qi).abs() > max_step {
                next = if next > qi { next.next_down() } else { next.next_up() };
            }
            while next > model.upper[i] {
                next = next.next_down();
            }
            while next < model.lower[i] {
                next = next.next_up();
            }
            next
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    PhaseTimeout(Phase),
    QpFailure,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Success => f.write_str("success"),
            Outcome::PhaseTimeout(p) => write!(f, "phase_timeout({p})"),
            Outcome::QpFailure => f.write_str("qp_failure"),
        }
    }
}

impl FromStr for Outcome {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "success" => Outcome::Success,
            "qp_failure" => Outcome::QpFailure,
            "phase_timeout(approach)" => Outcome::PhaseTimeout(Phase::Approach),
            "phase_timeout(closure)" => Outcome::PhaseTimeout(Phase::Closure),
            "phase_timeout(hold)" => Outcome::PhaseTimeout(Phase::Hold),
            _ => return Err(Error::invalid(format!("unknown outcome {s}"))),
        })
    }
}

impl Serialize for Outcome {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Outcome {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutSummary {
    pub outcome: Outcome,
    pub steps: usize,
    /// Per participating finger, against the last phase reached.
    pub final_residuals: Vec<f64>,
    pub fingers: Vec<usize>,
    pub final_phase: Phase,
    pub final_q: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub steps: Vec<TrajectoryStep>,
    pub summary: RolloutSummary,
    /// Step problems, retained when requested.
    pub problems: Vec<QpProblem>,
}

fn finger_errors(state: &KinematicState, plan: &GraspPlan, phase: Phase, fingers: &[usize]) -> Result<Vec<f64>> {
    let anchor = plan.phase(phase)?;
    fingers
        .iter()
        .map(|&f| {
            let t = anchor
                .target(f)
                .ok_or_else(|| Error::invalid(format!("{phase} phase has no target for finger {f}")))?;
            Ok((state.fingertips[f] - Vector3::from(t)).norm())
        })
        .collect()
}

/// Runs the approach, closure and hold phases from `q_init`.
pub fn rollout(model: &HandModel, q_init: &[f64], plan: &GraspPlan, config: &TrackerConfig) -> Result<Rollout> {
    rollout_with(model, q_init, plan, config, false)
}

pub fn rollout_with(model: &HandModel, q_init: &[f64], plan: &GraspPlan, config: &TrackerConfig, keep_problems: bool) -> Result<Rollout> {
    config.validate()?;
    plan.validate()?;
    let fingers = participating(model, plan)?;
    if !model.within_limits(q_init) {
        return Err(Error::invalid("initial configuration violates the joint limits"));
    }
    let mut solver = QpSolver::new(config.qp);
    let mut q = q_init.to_vec();
    let mut state = forward_kinematics(model, &q)?;
    let mut steps = Vec::new();
    let mut problems = Vec::new();
    let mut warm: Option<WarmStart> = None;
    let mut outcome = Outcome::Success;
    let mut message = None;
    let mut final_phase = Phase::Approach;
    'phases: for phase in Phase::ALL {
        final_phase = phase;
        let tol = config.tolerance(phase);
        let mut done = false;
        for _ in 0..config.budget(phase) {
            let errs = finger_errors(&state, plan, phase, &fingers)?;
            if errs.iter().all(|&e| e < tol) {
                done = true;
                break;
            }
            let mut damping = config.damping;
            let mut res = step(model, &state, plan, phase, config, damping, &mut solver, warm.as_ref())?;
            if res.status != QpStatus::Solved {
                damping *= 2.0;
                res = step(model, &state, plan, phase, config, damping, &mut solver, None)?;
            }
            let (ec, _) = coupling_residual(model, &q)?;
            let mut record = TrajectoryStep {
                t: steps.len(),
                phase,
                q: q.clone(),
                residuals: errs,
                coupling_residual: ec.norm(),
                dq: vec![0.0; q.len()],
                qp_status: res.status,
                active_collisions: res.collisions.len(),
                damping,
            };
            if keep_problems {
                problems.push(res.problem.clone());
            }
            if res.status != QpStatus::Solved {
                steps.push(record);
                outcome = Outcome::QpFailure;
                message = Some(format!("step QP {} at t={} after damping retry", res.status, steps.len() - 1));
                break 'phases;
            }
            let next = apply_step(model, &q, &res.dq, config.max_step);
            record.dq = next.iter().zip(&q).map(|(a, b)| a - b).collect();
            steps.push(record);
            warm = Some(WarmStart {
                x: res.dq.clone(),
                y: DVector::zeros(res.problem.m()),
            });
            q = next;
            state = forward_kinematics(model, &q)?;
        }
        if !done {
            let errs = finger_errors(&state, plan, phase, &fingers)?;
            if !errs.iter().all(|&e| e < tol) {
                outcome = Outcome::PhaseTimeout(phase);
                break;
            }
        }
    }
    let final_residuals = finger_errors(&state, plan, final_phase, &fingers)?;
    Ok(Rollout {
        summary: RolloutSummary {
            outcome,
            steps: steps.len(),
            final_residuals,
            fingers,
            final_phase,
            final_q: q,
            message,
        },
        steps,
        problems,
    })
}

/// Re-derives the per-step guarantees of a rollout from scratch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub steps: usize,
    /// Recorded configurations outside the joint limits.
    pub limit_violations: usize,
    /// Steps whose largest joint change exceeds the step cap.
    pub continuity_violations: usize,
    /// Solved steps with no active constraint.
    pub unconstrained_steps: usize,
    /// Largest relative deviation of those steps from the damped closed form.
    pub max_closed_form_error: f64,
    pub constrained_pairs: usize,
    /// Smallest `phi + grad' dq - d_safe` over every linearized pair.
    pub min_predicted_margin: f64,
}

impl AuditReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.limit_violations == 0
            && self.continuity_violations == 0
            && self.max_closed_form_error <= tol
            && self.min_predicted_margin >= -tol
    }
}

pub fn audit_rollout(model: &HandModel, plan: &GraspPlan, config: &TrackerConfig, rollout: &Rollout) -> Result<AuditReport> {
    let n = model.dof();
    let mut report = AuditReport {
        steps: rollout.steps.len(),
        limit_violations: 0,
        continuity_violations: 0,
        unconstrained_steps: 0,
        max_closed_form_error: 0.0,
        constrained_pairs: 0,
        min_predicted_margin: f64::INFINITY,
    };
    let mut configs: Vec<&[f64]> = rollout.steps.iter().map(|s| s.q.as_slice()).collect();
    configs.push(&rollout.summary.final_q);
    report.limit_violations = configs.iter().filter(|q| !model.within_limits(q)).count();
    for s in &rollout.steps {
        if s.qp_status != QpStatus::Solved {
            continue;
        }
        let dq = DVector::from_column_slice(&s.dq);
        if dq.amax() > config.max_step {
            report.continuity_violations += 1;
        }
        let collisions = linearize_collisions(model, &s.q, config.activation_distance, config.gradient_step)?;
        let mut any_active = false;
        for c in &collisions {
            let predicted = c.clearance + c.gradient.dot(&dq);
            report.min_predicted_margin = report.min_predicted_margin.min(predicted - config.safety_margin);
            report.constrained_pairs += 1;
            any_active |= predicted - config.safety_margin <= 1e-9;
        }
        for i in 0..n {
            let lo = (model.lower[i] - s.q[i]).max(-config.max_step);
            let hi = (model.upper[i] - s.q[i]).min(config.max_step);
            any_active |= dq[i] - lo <= 1e-9 || hi - dq[i] <= 1e-9;
        }
        if any_active {
            continue;
        }
        report.unconstrained_steps += 1;
        let state = forward_kinematics(model, &s.q)?;
        let stack = stack_residuals(model, &state, plan, s.phase, config)?;
        let w = DMatrix::from_diagonal(&stack.weights);
        let mut lhs = stack.j.transpose() * &w * &stack.j + DMatrix::identity(n, n) * s.damping;
        let mut rhs = -(stack.j.transpose() * &w * &stack.r);
        if s.phase == Phase::Approach {
            let (hr, hj) = hand_residual(model, &state, plan)?;
            lhs += hj.transpose() * &hj * config.hand_weight;
            rhs -= hj.transpose() * hr * config.hand_weight;
        }
        let closed = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::invalid("damped normal equations are singular"))?;
        let err = (&dq - &closed).norm() / closed.norm().max(f64::MIN_POSITIVE);
        report.max_closed_form_error = report.max_closed_form_error.max(err);
    }
    if report.constrained_pairs == 0 {
        report.min_predicted_margin = 0.0;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::tests::planar_two_link;
    use crate::waypoint_planner::{FingerTarget, PhaseAnchor};

    pub(crate) fn single_target_plan(finger: usize, targets: [[f64; 3]; 3]) -> GraspPlan {
        GraspPlan {
            phases: Phase::ALL
                .iter()
                .zip(targets)
                .map(|(&name, xyz)| PhaseAnchor {
                    name,
                    s: 0.0,
                    targets: vec![FingerTarget { finger, xyz }],
                })
                .collect(),
            hand_waypoint: targets[0],
            fingers_used: vec![finger],
            contacts: vec![],
        }
    }

    fn point_model() -> HandModel {
        HandModel::parse(
            r#"{"name":"xyz","joints":[
                {"name":"x","type":"prismatic","parent":"base","axis":[1,0,0],"limits":[-1,1]},
                {"name":"y","type":"prismatic","parent":"x","axis":[0,1,0],"limits":[-1,1]},
                {"name":"z","type":"prismatic","parent":"y","axis":[0,0,1],"limits":[-1,1]}],
              "fingertips":[{"name":"t","link":"z"}],
              "collision":{"spheres":[{"link":"z","radius":0.01}],"table_z":0.0}}"#,
        )
        .unwrap()
    }

    #[test]
    fn residual_rows_match_definition() {
        let m = planar_two_link();
        let s = forward_kinematics(&m, &[0.3, 0.2]).unwrap();
        let p = s.fingertip(0);
        let plan = single_target_plan(0, [p, [1.0, 1.0, 0.0], p]);
        let cfg = TrackerConfig::default();
        let at = stack_residuals(&m, &s, &plan, Phase::Approach, &cfg).unwrap();
        assert_eq!(at.r.norm(), 0.0);
        let off = stack_residuals(&m, &s, &plan, Phase::Closure, &cfg).unwrap();
        for a in 0..3 {
            assert_eq!(off.r[a], p[a] - [1.0, 1.0, 0.0][a]);
        }
        assert_eq!(off.j.shape(), (3, 2));
    }

    #[test]
    fn dimension_count_with_coupling() {
        let mut m = HandModel::parse(
            r#"{"name":"two","joints":[
                {"name":"a","type":"revolute","parent":"base","limits":[-1,1]},
                {"name":"b","type":"revolute","parent":"base","origin":{"xyz":[0,1,0]},"limits":[-1,1]}],
              "fingertips":[{"name":"t0","link":"a","offset":[1,0,0]},{"name":"t1","link":"b","offset":[1,0,0]}],
              "coupling":{"C":[[1,-1]],"d":[0]}}"#,
        )
        .unwrap();
        m.table_z = None;
        let s = forward_kinematics(&m, &[0.1, 0.2]).unwrap();
        let mut plan = single_target_plan(0, [[0.0; 3]; 3]);
        for ph in &mut plan.phases {
            ph.targets.push(FingerTarget { finger: 1, xyz: [0.0; 3] });
        }
        plan.fingers_used = vec![0, 1];
        let st = stack_residuals(&m, &s, &plan, Phase::Hold, &TrackerConfig::default()).unwrap();
        assert_eq!(st.r.len(), 7);
        assert_eq!(st.j.shape(), (7, 2));
        assert_eq!(st.weights[6], 10.0);
    }

    #[test]
    fn table_clearance_and_gradient() {
        let m = point_model();
        let q = [0.0, 0.0, 0.015];
        let rows = linearize_collisions(&m, &q, 0.02, 1e-6).unwrap();
        assert_eq!(rows.len(), 1);
        assert!((rows[0].clearance - 0.005).abs() < 1e-15);
        assert!(rows[0].gradient[0].abs() < 1e-9 && rows[0].gradient[1].abs() < 1e-9);
        assert!((rows[0].gradient[2] - 1.0).abs() < 1e-6);
        assert!(linearize_collisions(&m, &[0.0, 0.0, 0.5], 0.02, 1e-6).unwrap().is_empty());
    }

    #[test]
    fn touching_spheres_force_separation() {
        let m = HandModel::parse(
            r#"{"name":"pair","joints":[
                {"name":"a","type":"prismatic","parent":"base","axis":[1,0,0],"limits":[-1,1]},
                {"name":"b","type":"prismatic","parent":"base","axis":[1,0,0],"limits":[-1,1]}],
              "fingertips":[{"name":"t","link":"a"}],
              "collision":{"spheres":[{"link":"a","radius":0.01},{"link":"b","center":[0.02,0,0],"radius":0.01}]}}"#,
        )
        .unwrap();
        let rows = linearize_collisions(&m, &[0.0, 0.0], 0.02, 1e-6).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].clearance.abs() < 1e-12);
        assert!(rows[0].clearance - 0.003 < 0.0);
    }

    #[test]
    fn stationary_point_gives_zero_step() {
        let m = planar_two_link();
        let q = [0.3, 0.4];
        let s = forward_kinematics(&m, &q).unwrap();
        let plan = single_target_plan(0, [s.fingertip(0); 3]);
        let mut solver = QpSolver::new(QpSettings::default());
        let r = step(&m, &s, &plan, Phase::Closure, &TrackerConfig::default(), 1e-3, &mut solver, None).unwrap();
        assert!(r.dq.amax() < 1e-12);
    }

    #[test]
    fn identity_jacobian_closed_form() {
        let m = point_model();
        let q = [0.1, -0.2, 0.5];
        let s = forward_kinematics(&m, &q).unwrap();
        let target = [0.12, -0.21, 0.49];
        let plan = single_target_plan(0, [target; 3]);
        let cfg = TrackerConfig {
            finger_weights: vec![1.0],
            ..TrackerConfig::default()
        };
        let mut solver = QpSolver::new(QpSettings::default());
        let res = step(&m, &s, &plan, Phase::Closure, &cfg, 1e-3, &mut solver, None).unwrap();
        for a in 0..3 {
            let r = s.fingertip(0)[a] - target[a];
            let expect = -r / (1.0 + 1e-3);
            assert!((res.dq[a] - expect).abs() <= 1e-6 * expect.abs().max(1e-12), "{a}");
        }
    }

    #[test]
    fn upper_limit_blocks_motion() {
        let m = point_model();
        let q = [1.0, 0.0, 0.5];
        let s = forward_kinematics(&m, &q).unwrap();
        let plan = single_target_plan(0, [[1.5, 0.0, 0.5]; 3]);
        let mut solver = QpSolver::new(QpSettings::default());
        let res = step(&m, &s, &plan, Phase::Closure, &TrackerConfig::default(), 1e-3, &mut solver, None).unwrap();
        let next = apply_step(&m, &q, &res.dq, 0.05);
        assert_eq!(next[0], 1.0);
    }

    #[test]
    fn targets_at_start_succeed_immediately() {
        let m = planar_two_link();
        let q = [0.2, 0.9];
        let s = forward_kinematics(&m, &q).unwrap();
        let plan = single_target_plan(0, [s.fingertip(0); 3]);
        let r = rollout(&m, &q, &plan, &TrackerConfig::default()).unwrap();
        assert_eq!(r.summary.outcome, Outcome::Success);
        assert!(r.steps.len() <= 3);
    }

    #[test]
    fn unreachable_target_times_out_in_approach() {
        let m = planar_two_link();
        let plan = single_target_plan(0, [[3.0, 0.5, 0.0]; 3]);
        let cfg = TrackerConfig {
            budgets: [60, 10, 10],
            ..TrackerConfig::default()
        };
        let r = rollout(&m, &[0.0, 0.0], &plan, &cfg).unwrap();
        assert_eq!(r.summary.outcome, Outcome::PhaseTimeout(Phase::Approach));
        assert!(r.steps.iter().all(|s| m.within_limits(&s.q)));
        assert_eq!(r.summary.outcome.to_string(), "phase_timeout(approach)");
        let parsed: Outcome = serde_json::from_str("\"phase_timeout(approach)\"").unwrap();
        assert_eq!(parsed, r.summary.outcome);
    }

    #[test]
    fn apply_step_respects_bounds_exactly() {
        let m = point_model();
        let q = [0.999_999_999_7, -0.3, 0.1];
        let dq = DVector::from_vec(vec![0.2, -0.050_000_000_1, 0.049_999_999_9]);
        let next = apply_step(&m, &q, &dq, 0.05);
        assert!(m.within_limits(&next));
        for i in 0..3 {
            assert!((next[i] - q[i]).abs() <= 0.05);
        }
    }
}
