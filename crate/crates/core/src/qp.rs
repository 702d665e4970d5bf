//! Dense operator-splitting (ADMM) solver for convex quadratic programs
//!
//! ```text
//! minimize  1/2 x'Px + g'x   subject to  l <= Ax <= u
//! ```
//!
//! Dual sign convention: `Px + g + A'y = 0` at the optimum, so `y_i > 0`
//! marks an active upper bound and `y_i < 0` an active lower bound.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    /// Problem without constraints.
    pub fn unconstrained(p: DMatrix<f64>, g: DVector<f64>) -> Self {
        let n = g.len();
        QpProblem {
            p,
            g,
            a: DMatrix::zeros(0, n),
            l: DVector::zeros(0),
            u: DVector::zeros(0),
        }
    }

    pub fn n(&self) -> usize {
        self.g.len()
    }

    pub fn m(&self) -> usize {
        self.l.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n(), self.m());
        if self.p.shape() != (n, n) || self.a.shape() != (m, n) || self.u.len() != m {
            return Err(Error::shape(format!(
                "QP dims: P {:?}, g {}, A {:?}, l {}, u {}",
                self.p.shape(),
                n,
                self.a.shape(),
                m,
                self.u.len()
            )));
        }
        if !self.p.iter().chain(self.g.iter()).chain(self.a.iter()).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("QP data"));
        }
        if (&self.p - self.p.transpose()).amax() >= 1e-9 {
            return Err(Error::invalid("P is not symmetric"));
        }
        for i in 0..m {
            let (l, u) = (self.l[i], self.u[i]);
            if l.is_nan() || u.is_nan() || l > u || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return Err(Error::invalid(format!("row {i}: bounds [{l}, {u}] are inconsistent")));
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.g.dot(x)
    }

    /// Largest bound violation of `x`.
    pub fn infeasibility(&self, x: &DVector<f64>) -> f64 {
        let ax = &self.a * x;
        (0..self.m())
            .map(|i| (self.l[i] - ax[i]).max(ax[i] - self.u[i]).max(0.0))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub eps_infeasible: f64,
    pub max_iter: usize,
    /// How often residuals are checked.
    pub check_every: usize,
    pub polish: bool,
    /// Rebalance `rho` from the residual ratio every this many iterations; 0 disables.
    pub adapt_every: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            eps_infeasible: 1e-6,
            max_iter: 4000,
            check_every: 5,
            polish: true,
            adapt_every: 25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIter,
    Infeasible,
}

impl std::fmt::Display for QpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            QpStatus::Solved => "solved",
            QpStatus::MaxIter => "max_iter",
            QpStatus::Infeasible => "infeasible",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub polished: bool,
}

/// Primal and dual iterates used to seed a solve.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
}

struct CachedFactor {
    p: DMatrix<f64>,
    a: DMatrix<f64>,
    rho: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

/// Reusable solver; keeps the last KKT factorization and refreshes it only
/// when `P`, `A` or the equality pattern changes.
#[derive(Default)]
pub struct QpSolver {
    pub settings: QpSettings,
    cache: Option<CachedFactor>,
    factorizations: usize,
    /// Step size carried over from the previous solve.
    rho: Option<f64>,
}

const RHO_EQ_SCALE: f64 = 1e3;
const RHO_FREE: f64 = 1e-6;

fn row_rho(rho: f64, l: f64, u: f64) -> f64 {
    if l == f64::NEG_INFINITY && u == f64::INFINITY {
        RHO_FREE
    } else if u - l <= 1e-9 * (1.0 + l.abs()) {
        rho * RHO_EQ_SCALE
    } else {
        rho
    }
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        QpSolver {
            settings,
            cache: None,
            factorizations: 0,
            rho: None,
        }
    }

    /// Number of KKT factorizations performed so far.
    pub fn factorizations(&self) -> usize {
        self.factorizations
    }

    fn factor(&mut self, prob: &QpProblem, rho: &DVector<f64>) -> Result<&Cholesky<f64, Dyn>> {
        let reuse = self
            .cache
            .as_ref()
            .is_some_and(|c| c.p == prob.p && c.a == prob.a && c.rho == *rho);
        if !reuse {
            let n = prob.n();
            let mut k = &prob.p + DMatrix::identity(n, n) * self.settings.sigma;
            k += prob.a.transpose() * DMatrix::from_diagonal(rho) * &prob.a;
            let chol = Cholesky::new(k).ok_or_else(|| Error::invalid("P is not positive semidefinite"))?;
            self.factorizations += 1;
            self.cache = Some(CachedFactor {
                p: prob.p.clone(),
                a: prob.a.clone(),
                rho: rho.clone(),
                chol,
            });
        }
        Ok(&self.cache.as_ref().expect("cache populated").chol)
    }

    pub fn solve(&mut self, prob: &QpProblem, warm: Option<&WarmStart>) -> Result<QpSolution> {
        prob.validate()?;
        let s = self.settings;
        let (n, m) = (prob.n(), prob.m());
        let mut rho_scalar = self.rho.unwrap_or(s.rho);
        let mut rho = DVector::from_fn(m, |i, _| row_rho(rho_scalar, prob.l[i], prob.u[i]));
        let (mut x, mut y) = match warm {
            Some(w) if w.x.len() == n && w.y.len() == m => (w.x.clone(), w.y.clone()),
            Some(_) => return Err(Error::shape("warm start dims disagree with the problem")),
            None => (DVector::zeros(n), DVector::zeros(m)),
        };
        let project = |v: &DVector<f64>| DVector::from_fn(m, |i, _| v[i].clamp(prob.l[i], prob.u[i]));
        let mut z = project(&(&prob.a * &x));
        let at = prob.a.transpose();
        let mut chol = self.factor(prob, &rho)?.clone();
        let mut status = QpStatus::MaxIter;
        let (mut prim, mut dual) = (f64::INFINITY, f64::INFINITY);
        let mut iterations = 0;
        for it in 1..=s.max_iter.max(1) {
            iterations = it;
            let rhs = &x * s.sigma - &prob.g + &at * (rho.component_mul(&z) - &y);
            let xt = chol.solve(&rhs);
            let zt = &prob.a * &xt;
            let x_next = &xt * s.alpha + &x * (1.0 - s.alpha);
            let z_relax = &zt * s.alpha + &z * (1.0 - s.alpha);
            let z_next = project(&(&z_relax + y.component_div(&rho)));
            let y_next = &y + rho.component_mul(&(&z_relax - &z_next));
            let dy = &y_next - &y;
            x = x_next;
            z = z_next;
            y = y_next;
            if it % s.check_every.max(1) != 0 && it != s.max_iter {
                continue;
            }
            let ax = &prob.a * &x;
            let px = &prob.p * &x;
            let aty = &at * &y;
            prim = inf_norm(&(&ax - &z));
            dual = inf_norm(&(&px + &prob.g + &aty));
            let eps_p = s.eps_abs + s.eps_rel * inf_norm(&ax).max(inf_norm(&z));
            let eps_d = s.eps_abs + s.eps_rel * inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&prob.g));
            if prim <= eps_p && dual <= eps_d {
                status = QpStatus::Solved;
                break;
            }
            if m > 0 && primal_infeasible(prob, &dy, s.eps_infeasible) {
                status = QpStatus::Infeasible;
                break;
            }
            if m > 0 && s.adapt_every > 0 && it % s.adapt_every == 0 {
                let scaled_p = prim / inf_norm(&ax).max(inf_norm(&z)).max(1e-30);
                let scaled_d = dual / inf_norm(&px).max(inf_norm(&aty)).max(inf_norm(&prob.g)).max(1e-30);
                let ratio = (scaled_p / scaled_d.max(1e-30)).sqrt();
                if !(0.2..=5.0).contains(&ratio) {
                    rho_scalar = (rho_scalar * ratio).clamp(1e-6, 1e6);
                    rho = DVector::from_fn(m, |i, _| row_rho(rho_scalar, prob.l[i], prob.u[i]));
                    chol = self.factor(prob, &rho)?.clone();
                }
            }
        }
        self.rho = Some(rho_scalar);
        let mut sol = QpSolution {
            x,
            y,
            status,
            iterations,
            primal_residual: prim,
            dual_residual: dual,
            polished: false,
        };
        if s.polish && sol.status == QpStatus::Solved {
            if let Some(p) = polish(prob, &sol, &z) {
                sol = p;
            }
        }
        Ok(sol)
    }
}

/// Certificate: `A'dy ~ 0` and `u'dy+ + l'dy- < 0`.
fn primal_infeasible(prob: &QpProblem, dy: &DVector<f64>, eps: f64) -> bool {
    let norm = inf_norm(dy);
    if norm < 1e-12 {
        return false;
    }
    if inf_norm(&(prob.a.transpose() * dy)) > eps * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy.len() {
        let d = dy[i];
        if d > eps * norm {
            if prob.u[i] == f64::INFINITY {
                return false;
            }
            support += prob.u[i] * d;
        } else if d < -eps * norm {
            if prob.l[i] == f64::NEG_INFINITY {
                return false;
            }
            support += prob.l[i] * d;
        }
    }
    support < -eps * norm
}

/// Solves the equality-constrained problem on the guessed active set and
/// keeps the result if it is at least as accurate as the ADMM iterate.
fn polish(prob: &QpProblem, sol: &QpSolution, z: &DVector<f64>) -> Option<QpSolution> {
    let (n, m) = (prob.n(), prob.m());
    let mut active: Vec<(usize, f64)> = Vec::new();
    for i in 0..m {
        if z[i] - prob.l[i] < -sol.y[i] {
            active.push((i, prob.l[i]));
        } else if prob.u[i] - z[i] < sol.y[i] {
            active.push((i, prob.u[i]));
        }
    }
    let k = active.len();
    let mut kkt = DMatrix::zeros(n + k, n + k);
    kkt.view_mut((0, 0), (n, n)).copy_from(&prob.p);
    let mut rhs = DVector::zeros(n + k);
    rhs.rows_mut(0, n).copy_from(&(-&prob.g));
    for (r, &(i, b)) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = prob.a[(i, j)];
            kkt[(j, n + r)] = prob.a[(i, j)];
        }
        rhs[n + r] = b;
    }
    let lu = kkt.clone().lu();
    let mut solution = lu.solve(&rhs)?;
    // one step of iterative refinement
    let resid = &rhs - &kkt * &solution;
    if let Some(corr) = lu.solve(&resid) {
        solution += corr;
    }
    if !solution.iter().all(|v| v.is_finite()) {
        return None;
    }
    let x = solution.rows(0, n).into_owned();
    let mut y = DVector::zeros(m);
    for (r, &(i, b)) in active.iter().enumerate() {
        let yi = solution[n + r];
        // multipliers must push the right way
        if (b == prob.u[i] && b != prob.l[i] && yi < -1e-9) || (b == prob.l[i] && b != prob.u[i] && yi > 1e-9) {
            return None;
        }
        y[i] = yi;
    }
    let prim = prob.infeasibility(&x);
    let dual = inf_norm(&(&prob.p * &x + &prob.g + prob.a.transpose() * &y));
    let tol = 1e-9 * (1.0 + inf_norm(&prob.g));
    if prim > sol.primal_residual.max(tol) || dual > sol.dual_residual.max(tol) {
        return None;
    }
    Some(QpSolution {
        x,
        y,
        status: QpStatus::Solved,
        iterations: sol.iterations,
        primal_residual: prim,
        dual_residual: dual,
        polished: true,
    })
}

/// Convenience wrapper around a fresh [`QpSolver`].
pub fn solve(prob: &QpProblem, warm: Option<&WarmStart>, settings: QpSettings) -> Result<QpSolution> {
    QpSolver::new(settings).solve(prob, warm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_feasibility: f64,
    pub dual_sign: f64,
    pub complementarity: f64,
    pub violations: Vec<String>,
}

impl KktReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks the four KKT conditions of a candidate solution at `tol`.
pub fn verify_kkt(prob: &QpProblem, sol: &QpSolution, tol: f64) -> KktReport {
    let ax = &prob.a * &sol.x;
    let stationarity = inf_norm(&(&prob.p * &sol.x + &prob.g + prob.a.transpose() * &sol.y));
    let primal_feasibility = prob.infeasibility(&sol.x);
    let mut dual_sign: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    for i in 0..prob.m() {
        let (yp, ym) = (sol.y[i].max(0.0), (-sol.y[i]).max(0.0));
        if prob.u[i] == f64::INFINITY {
            dual_sign = dual_sign.max(yp);
        } else {
            complementarity = complementarity.max(yp * (prob.u[i] - ax[i]).abs());
        }
        if prob.l[i] == f64::NEG_INFINITY {
            dual_sign = dual_sign.max(ym);
        } else {
            complementarity = complementarity.max(ym * (ax[i] - prob.l[i]).abs());
        }
    }
    let mut violations = Vec::new();
    for (name, val) in [
        ("stationarity", stationarity),
        ("primal feasibility", primal_feasibility),
        ("dual sign", dual_sign),
        ("complementary slackness", complementarity),
    ] {
        if !(val <= tol) {
            violations.push(format!("{name}: {val:e} > {tol:e}"));
        }
    }
    KktReport {
        stationarity,
        primal_feasibility,
        dual_sign,
        complementarity,
        violations,
    }
}

/// Exhaustive active-set reference solver for tiny problems with finite
/// bounds: each row is inactive, at its lower bound, or at its upper bound.
pub fn brute_force(prob: &QpProblem) -> Option<DVector<f64>> {
    let (n, m) = (prob.n(), prob.m());
    let mut best: Option<(f64, DVector<f64>)> = None;
    for code in 0..3usize.pow(m as u32) {
        let mut rows = Vec::new();
        let mut c = code;
        for i in 0..m {
            match c % 3 {
                1 => rows.push((i, prob.l[i])),
                2 => rows.push((i, prob.u[i])),
                _ => {}
            }
            c /= 3;
        }
        let k = rows.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&prob.p);
        let mut rhs = DVector::zeros(n + k);
        rhs.rows_mut(0, n).copy_from(&(-&prob.g));
        for (r, &(i, b)) in rows.iter().enumerate() {
            for j in 0..n {
                kkt[(n + r, j)] = prob.a[(i, j)];
                kkt[(j, n + r)] = prob.a[(i, j)];
            }
            rhs[n + r] = b;
        }
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        if prob.infeasibility(&x) > 1e-9 {
            continue;
        }
        let f = prob.objective(&x);
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, x));
        }
    }
    best.map(|b| b.1)
}
