//! Joint energy/latency uplink power allocation.
//!
//! For fixed per-client payloads `b_j` the server chooses powers
//! `p in [p_min, 1]^M` and a straggler latency `l_max` minimising
//!
//! ```text
//! F(p, l_max) = theta_l * l_max + theta_E * sum_j p_j p_u b_j / r_j(p)
//! s.t.        b_j / r_j(p) <= l_max
//! ```
//!
//! The solver is an SQP loop: a quadratic model with a BFGS Hessian and
//! linearised latency constraints is solved by a primal active-set method,
//! the step is damped by Armijo backtracking, and the Hessian is updated from
//! the change in the Lagrangian gradient.
//!
//! Internally `l_max` is measured in units of the full-power straggler
//! latency and `F` in units of its value at the starting point, so the
//! iterates are O(1) regardless of payload size or bandwidth. All public
//! results are in physical units.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::{rate_jacobian, uplink_rate, ChannelConfig, ChannelStats};

/// Lower power bound; latency diverges at `p_j = 0`.
pub const P_MIN: f64 = 1e-4;
pub const DEFAULT_EPS_X: f64 = 1e-6;
pub const DEFAULT_MAX_ROUNDS: usize = 200;
pub const ARMIJO_C: f64 = 0.1;
pub const ARMIJO_SHRINK: f64 = 0.5;
pub const ARMIJO_MAX_HALVINGS: u32 = 40;
const QP_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerError {
    #[error("invalid power problem: {0}")]
    InvalidProblem(String),
    #[error("client {client} has zero uplink rate")]
    ZeroRate { client: usize },
    #[error("QP subproblem is infeasible at the current iterate")]
    QpInfeasible,
    #[error("QP active-set method did not converge in {iterations} iterations")]
    QpIterationLimit { iterations: usize },
    #[error("singular KKT system in QP subproblem")]
    SingularKkt,
}

/// How the latency constraints are linearised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linearization {
    /// `d l_j / d p_i` for every `i`.
    #[default]
    Full,
    /// Own-power derivative only; cross terms dropped.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerProblem {
    pub stats: ChannelStats,
    /// Payload of each client in bits.
    pub bits: Vec<f64>,
    pub cfg: ChannelConfig,
    pub theta_e: f64,
    pub theta_l: f64,
}

impl PowerProblem {
    pub fn new(
        stats: ChannelStats,
        bits: Vec<f64>,
        cfg: ChannelConfig,
        theta_e: f64,
        theta_l: f64,
    ) -> Result<Self, PowerError> {
        let problem = Self {
            stats,
            bits,
            cfg,
            theta_e,
            theta_l,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<(), PowerError> {
        let bad = |m: String| Err(PowerError::InvalidProblem(m));
        self.stats
            .validate()
            .map_err(|e| PowerError::InvalidProblem(e.to_string()))?;
        self.cfg
            .validate()
            .map_err(|e| PowerError::InvalidProblem(e.to_string()))?;
        if self.bits.len() != self.num_clients() {
            return bad(format!(
                "{} payloads for {} clients",
                self.bits.len(),
                self.num_clients()
            ));
        }
        if self.bits.iter().any(|&b| !(b >= 1.0 && b.is_finite())) {
            return bad("every payload must be at least one bit".into());
        }
        for (name, t) in [("theta_e", self.theta_e), ("theta_l", self.theta_l)] {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("{name} = {t} is outside [0, 1]"));
            }
        }
        if self.theta_e == 0.0 && self.theta_l == 0.0 {
            return bad("theta_e and theta_l cannot both be zero".into());
        }
        Ok(())
    }

    pub fn num_clients(&self) -> usize {
        self.stats.num_clients()
    }
}

/// `b_j / r_j(p)` in seconds.
pub fn latency(problem: &PowerProblem, p: &[f64], j: usize) -> Result<f64, PowerError> {
    let r = uplink_rate(&problem.stats, p, j, &problem.cfg);
    if r > 0.0 {
        Ok(problem.bits[j] / r)
    } else {
        Err(PowerError::ZeroRate { client: j })
    }
}

/// Latencies of every client; `+inf` where the rate is zero.
pub fn latencies(problem: &PowerProblem, p: &[f64]) -> Vec<f64> {
    (0..problem.num_clients())
        .map(|j| latency(problem, p, j).unwrap_or(f64::INFINITY))
        .collect()
}

/// `p_j p_u l_j` in joules. At `p_j = 0` the limit value is returned.
pub fn energy(problem: &PowerProblem, p: &[f64], j: usize) -> Result<f64, PowerError> {
    let pu = problem.cfg.max_power_w;
    if p[j] == 0.0 {
        let s = &problem.stats;
        let rest: f64 = (0..p.len())
            .filter(|&i| i != j)
            .map(|i| p[i] * s.b_tilde[j][i])
            .sum::<f64>()
            + s.i_m[j];
        if s.a_bar[j] == 0.0 {
            return Err(PowerError::ZeroRate { client: j });
        }
        let slope = problem.cfg.effective_bandwidth() * s.a_bar[j]
            / (rest * std::f64::consts::LN_2);
        return Ok(pu * problem.bits[j] / slope);
    }
    Ok(p[j] * pu * latency(problem, p, j)?)
}

/// `F(x)` with `x = [p_1, ..., p_M, l_max]`.
pub fn objective(problem: &PowerProblem, x: &[f64]) -> f64 {
    let m = problem.num_clients();
    let p = &x[..m];
    let pu = problem.cfg.max_power_w;
    let energy: f64 = if problem.theta_e == 0.0 {
        0.0
    } else {
        latencies(problem, p)
            .iter()
            .zip(p)
            .map(|(l, pj)| pj * pu * l)
            .sum()
    };
    problem.theta_l * x[m] + problem.theta_e * energy
}

/// `grad[j][i] = d l_j / d p_i`.
pub fn latency_gradient(problem: &PowerProblem, p: &[f64]) -> Vec<Vec<f64>> {
    let jac = rate_jacobian(&problem.stats, p, &problem.cfg);
    (0..problem.num_clients())
        .map(|j| {
            let r = uplink_rate(&problem.stats, p, j, &problem.cfg);
            let c = -problem.bits[j] / (r * r);
            jac[j].iter().map(|d| c * d).collect()
        })
        .collect()
}

/// Analytic `grad F(x)`; the last component is `theta_l`.
pub fn objective_gradient(problem: &PowerProblem, x: &[f64]) -> Vec<f64> {
    let m = problem.num_clients();
    let p = &x[..m];
    let mut grad = vec![0.0; m + 1];
    grad[m] = problem.theta_l;
    if problem.theta_e == 0.0 {
        return grad;
    }
    let pu = problem.cfg.max_power_w;
    let lat = latencies(problem, p);
    let dlat = latency_gradient(problem, p);
    for j in 0..m {
        for i in 0..m {
            let own = if i == j { lat[j] } else { 0.0 };
            grad[i] += problem.theta_e * pu * (own + p[j] * dlat[j][i]);
        }
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub eps_x: f64,
    pub max_rounds: usize,
    pub p_min: f64,
    pub linearization: Linearization,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            eps_x: DEFAULT_EPS_X,
            max_rounds: DEFAULT_MAX_ROUNDS,
            p_min: P_MIN,
            linearization: Linearization::Full,
        }
    }
}

/// Units in which the solver measures latency and objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaling {
    pub latency: f64,
    pub objective: f64,
}

impl Scaling {
    /// Reference latency is the full-power straggler latency; reference
    /// objective is `F` at the solver's starting point.
    pub fn for_problem(problem: &PowerProblem) -> Result<Self, PowerError> {
        let ones = vec![1.0; problem.num_clients()];
        let mut l0 = 0.0f64;
        for j in 0..problem.num_clients() {
            l0 = l0.max(latency(problem, &ones, j)?);
        }
        let mut x = ones;
        x.push(l0);
        let f0 = objective(problem, &x);
        if !(f0 > 0.0 && f0.is_finite() && l0.is_finite()) {
            return Err(PowerError::InvalidProblem(
                "degenerate objective at full power".into(),
            ));
        }
        Ok(Self {
            latency: l0,
            objective: f0,
        })
    }

    /// Units taken from a physical point `x = [p, l_max]`.
    pub fn at(problem: &PowerProblem, x: &[f64]) -> Self {
        Self {
            latency: x[x.len() - 1],
            objective: objective(problem, x),
        }
    }

    pub fn to_physical(&self, y: &[f64]) -> Vec<f64> {
        let mut x = y.to_vec();
        let m = x.len() - 1;
        x[m] *= self.latency;
        x
    }
}

/// Scaled view of a problem: `y = [p, l_max / l0]`, `f = F / F0`.
struct Scaled<'a> {
    problem: &'a PowerProblem,
    scaling: Scaling,
}

impl Scaled<'_> {
    fn f(&self, y: &[f64]) -> f64 {
        objective(self.problem, &self.scaling.to_physical(y)) / self.scaling.objective
    }

    fn grad(&self, y: &[f64]) -> DVector<f64> {
        let mut g = objective_gradient(self.problem, &self.scaling.to_physical(y));
        let m = g.len() - 1;
        g[m] *= self.scaling.latency;
        DVector::from_iterator(m + 1, g.into_iter().map(|v| v / self.scaling.objective))
    }

    fn latencies(&self, p: &[f64]) -> Vec<f64> {
        latencies(self.problem, p)
            .into_iter()
            .map(|l| l / self.scaling.latency)
            .collect()
    }

    fn latency_gradient(&self, p: &[f64], lin: Linearization) -> Vec<Vec<f64>> {
        let mut grad = latency_gradient(self.problem, p);
        for (j, row) in grad.iter_mut().enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = if lin == Linearization::Diagonal && i != j {
                    0.0
                } else {
                    *v / self.scaling.latency
                };
            }
        }
        grad
    }

    /// Raises `l_max` to the largest latency so the point is feasible.
    fn lift(&self, y: &mut [f64]) {
        let m = y.len() - 1;
        let worst = self.latencies(&y[..m]).into_iter().fold(0.0, f64::max);
        if worst > y[m] {
            y[m] = worst;
        }
    }
}

/// One SQP iterate in scaled coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverIterate {
    /// `[p_1, ..., p_M, l_max / scaling.latency]`.
    pub x: Vec<f64>,
    pub h_bar: DMatrix<f64>,
    pub round: usize,
    pub scaling: Scaling,
}

/// Data of `min 0.5 d'Hd + g'd  s.t.  G d <= h`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpData {
    pub h_bar: DMatrix<f64>,
    pub g: DVector<f64>,
    pub g_mat: DMatrix<f64>,
    pub p_tilde: DVector<f64>,
}

/// Builds the QP subproblem at an iterate. Rows are ordered as
/// `[-I 0; I 0; dl/dp -1]`, with right-hand side
/// `[p - p_min, 1 - p, l_max - l_j(p)]`.
pub fn build_qp(problem: &PowerProblem, it: &SolverIterate, opts: &SolverOptions) -> QpData {
    let sc = Scaled {
        problem,
        scaling: it.scaling,
    };
    let m = problem.num_clients();
    let p = &it.x[..m];
    let t = it.x[m];
    let lat = sc.latencies(p);
    let dlat = sc.latency_gradient(p, opts.linearization);
    let mut g_mat = DMatrix::zeros(3 * m, m + 1);
    let mut p_tilde = DVector::zeros(3 * m);
    for j in 0..m {
        g_mat[(j, j)] = -1.0;
        p_tilde[j] = p[j] - opts.p_min;
        g_mat[(m + j, j)] = 1.0;
        p_tilde[m + j] = 1.0 - p[j];
        for i in 0..m {
            g_mat[(2 * m + j, i)] = dlat[j][i];
        }
        g_mat[(2 * m + j, m)] = -1.0;
        p_tilde[2 * m + j] = t - lat[j];
    }
    QpData {
        h_bar: it.h_bar.clone(),
        g: sc.grad(&it.x),
        g_mat,
        p_tilde,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub dx: DVector<f64>,
    /// One multiplier per inequality row, zero for inactive rows.
    pub lambda: DVector<f64>,
    pub iterations: usize,
}

impl QpSolution {
    /// Max of stationarity, complementarity and primal violation.
    pub fn kkt_residual(&self, qp: &QpData) -> f64 {
        let stat = &qp.h_bar * &self.dx + &qp.g + qp.g_mat.transpose() * &self.lambda;
        let slack = &qp.g_mat * &self.dx - &qp.p_tilde;
        let comp = self.lambda.dot(&slack).abs();
        let viol = slack.iter().fold(0.0f64, |a, &v| a.max(v));
        stat.amax().max(comp).max(viol)
    }
}

/// Primal active-set method started from `d = 0`.
///
/// Constraints are added when they block a step (lowest index on ties) and
/// the working-set constraint with the most negative multiplier is dropped
/// (again lowest index on ties).
pub fn solve_qp(qp: &QpData) -> Result<QpSolution, PowerError> {
    let n = qp.g.len();
    let rows = qp.g_mat.nrows();
    if qp.p_tilde.iter().any(|&v| v < -1e-9) {
        return Err(PowerError::QpInfeasible);
    }
    let rhs = qp.p_tilde.map(|v| v.max(0.0));
    let max_iter = 50 * rows.max(2) / 3 + 50;
    let mut x = DVector::zeros(n);
    let mut working: Vec<usize> = Vec::new();

    for iteration in 1..=max_iter {
        let (d, lambda_w) = eqp_step(qp, &x, &working)?;
        let scale = 1.0 + x.amax();
        if d.amax() <= 1e-13 * scale {
            let most_negative = working
                .iter()
                .zip(lambda_w.iter())
                .filter(|(_, &l)| l < -1e-12)
                .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(b.0)));
            match most_negative {
                Some((&row, _)) => working.retain(|&r| r != row),
                None => {
                    let mut lambda = DVector::zeros(rows);
                    for (&row, &l) in working.iter().zip(lambda_w.iter()) {
                        lambda[row] = l.max(0.0);
                    }
                    return Ok(QpSolution {
                        dx: x,
                        lambda,
                        iterations: iteration,
                    });
                }
            }
            continue;
        }
        let mut alpha = 1.0;
        let mut blocking = None;
        let d_norm = d.norm();
        for row in 0..rows {
            if working.contains(&row) {
                continue;
            }
            let a = qp.g_mat.row(row);
            let ad = a.dot(&d.transpose());
            if ad > QP_TOL * a.norm() * d_norm {
                let room = (rhs[row] - a.dot(&x.transpose())).max(0.0);
                let step = room / ad;
                if step < alpha {
                    alpha = step;
                    blocking = Some(row);
                }
            }
        }
        x += alpha * d;
        if let Some(row) = blocking {
            working.push(row);
        }
    }
    Err(PowerError::QpIterationLimit {
        iterations: max_iter,
    })
}

/// Solves the equality-constrained step for the current working set.
fn eqp_step(
    qp: &QpData,
    x: &DVector<f64>,
    working: &[usize],
) -> Result<(DVector<f64>, DVector<f64>), PowerError> {
    let n = x.len();
    let w = working.len();
    let mut kkt = DMatrix::zeros(n + w, n + w);
    kkt.view_mut((0, 0), (n, n)).copy_from(&qp.h_bar);
    for (k, &row) in working.iter().enumerate() {
        for c in 0..n {
            kkt[(n + k, c)] = qp.g_mat[(row, c)];
            kkt[(c, n + k)] = qp.g_mat[(row, c)];
        }
    }
    let mut rhs = DVector::zeros(n + w);
    let c = &qp.h_bar * x + &qp.g;
    rhs.rows_mut(0, n).copy_from(&(-c));
    let sol = kkt.lu().solve(&rhs).ok_or(PowerError::SingularKkt)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(PowerError::SingularKkt);
    }
    Ok((sol.rows(0, n).into_owned(), sol.rows(n, w).into_owned()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSearch {
    pub alpha: f64,
    pub halvings: u32,
    pub stalled: bool,
}

/// Backtracking from `alpha = 1`, halving until
/// `f(alpha) <= f0 + 0.1 * alpha * slope`. After the last allowed halving
/// fails the search reports a stall with `alpha = 0`.
pub fn armijo_step(f0: f64, slope: f64, mut f: impl FnMut(f64) -> f64) -> LineSearch {
    let mut alpha = 1.0;
    for halvings in 0..ARMIJO_MAX_HALVINGS {
        if f(alpha) <= f0 + ARMIJO_C * alpha * slope {
            return LineSearch {
                alpha,
                halvings,
                stalled: false,
            };
        }
        alpha *= ARMIJO_SHRINK;
    }
    LineSearch {
        alpha: 0.0,
        halvings: ARMIJO_MAX_HALVINGS,
        stalled: true,
    }
}

/// BFGS update; returns `None` when the curvature condition
/// `z's > 1e-10 |s| |z|` fails and the matrix is left unchanged.
pub fn bfgs_update(h: &DMatrix<f64>, s: &DVector<f64>, z: &DVector<f64>) -> Option<DMatrix<f64>> {
    let zs = z.dot(s);
    if !(zs > 1e-10 * s.norm() * z.norm()) {
        return None;
    }
    let hs = h * s;
    let shs = s.dot(&hs);
    if !(shs > 0.0) {
        return None;
    }
    let mut next = h - (&hs * hs.transpose()) / shs + (z * z.transpose()) / zs;
    next = (&next + next.transpose()) * 0.5;
    Some(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSolution {
    pub p: Vec<f64>,
    /// Straggler latency, tightened to `max_j l_j(p)`.
    pub ell_max: f64,
    pub objective: f64,
    pub kkt_residual: f64,
    pub rounds_used: usize,
    pub converged: bool,
    /// Physical objective after every accepted SQP round, starting point
    /// first.
    pub objective_history: Vec<f64>,
}

impl PowerSolution {
    /// Evaluates a fixed allocation with the tight straggler latency.
    pub fn at(problem: &PowerProblem, p: Vec<f64>) -> Result<Self, PowerError> {
        let mut ell = 0.0f64;
        for j in 0..problem.num_clients() {
            ell = ell.max(latency(problem, &p, j)?);
        }
        let mut x = p.clone();
        x.push(ell);
        let f = objective(problem, &x);
        Ok(Self {
            p,
            ell_max: ell,
            objective: f,
            kkt_residual: f64::NAN,
            rounds_used: 0,
            converged: true,
            objective_history: vec![f],
        })
    }

    pub fn latencies(&self, problem: &PowerProblem) -> Vec<f64> {
        latencies(problem, &self.p)
    }

    pub fn energies(&self, problem: &PowerProblem) -> Vec<f64> {
        let pu = problem.cfg.max_power_w;
        self.latencies(problem)
            .iter()
            .zip(&self.p)
            .map(|(l, p)| p * pu * l)
            .collect()
    }
}

/// Runs the SQP loop from full power with an identity Hessian.
pub fn solve(problem: &PowerProblem, opts: &SolverOptions) -> Result<PowerSolution, PowerError> {
    problem.validate()?;
    let m = problem.num_clients();
    let scaling = Scaling::for_problem(problem)?;
    let mut sc = Scaled { problem, scaling };
    let mut x = vec![1.0; m];
    x.push(1.0);
    sc.lift(&mut x);

    let mut it = SolverIterate {
        x,
        h_bar: DMatrix::identity(m + 1, m + 1),
        round: 0,
        scaling,
    };
    let mut f = sc.f(&it.x);
    let mut history = vec![f * scaling.objective];
    let mut converged = false;
    let mut kkt = f64::NAN;
    // A small step is only trusted when taken from a fresh identity Hessian
    // in units of the current point; otherwise the solver restarts there.
    let mut fresh = true;
    let restart = |it: &mut SolverIterate, sc: &mut Scaled, f: &mut f64| {
        let phys = sc.scaling.to_physical(&it.x);
        sc.scaling = Scaling::at(problem, &phys);
        it.scaling = sc.scaling;
        it.x[m] = 1.0;
        it.h_bar = DMatrix::identity(m + 1, m + 1);
        *f = sc.f(&it.x);
    };

    while it.round < opts.max_rounds {
        it.round += 1;
        let qp = build_qp(problem, &it, opts);
        let sol = match solve_qp(&qp) {
            Ok(sol) => sol,
            Err(PowerError::QpIterationLimit { .. } | PowerError::SingularKkt) => break,
            Err(e) => return Err(e),
        };
        kkt = sol.kkt_residual(&qp);
        if sol.dx.amax() < opts.eps_x {
            if fresh {
                converged = true;
                break;
            }
            restart(&mut it, &mut sc, &mut f);
            fresh = true;
            continue;
        }
        let slope = qp.g.dot(&sol.dx);
        let trial = |alpha: f64| {
            let mut y: Vec<f64> = it
                .x
                .iter()
                .zip(sol.dx.iter())
                .map(|(a, b)| a + alpha * b)
                .collect();
            for v in &mut y[..m] {
                *v = v.clamp(opts.p_min, 1.0);
            }
            sc.lift(&mut y);
            y
        };
        let ls = armijo_step(f, slope, |alpha| sc.f(&trial(alpha)));
        if ls.stalled {
            if fresh {
                converged = true;
                break;
            }
            restart(&mut it, &mut sc, &mut f);
            fresh = true;
            continue;
        }
        let next = trial(ls.alpha);
        let f_next = sc.f(&next);

        let lagrangian_grad = |y: &[f64]| {
            let mut g = sc.grad(y);
            let dlat = sc.latency_gradient(&y[..m], opts.linearization);
            for j in 0..m {
                let l = sol.lambda[2 * m + j];
                if l == 0.0 {
                    continue;
                }
                for i in 0..m {
                    g[i] += l * dlat[j][i];
                }
                g[m] -= l;
            }
            g
        };
        let s = DVector::from_iterator(m + 1, next.iter().zip(&it.x).map(|(a, b)| a - b));
        let z = lagrangian_grad(&next) - lagrangian_grad(&it.x);
        // Updates that fail the curvature test or lose definiteness to
        // rounding are skipped. In directions with no usable curvature the
        // model is then scaled down while full steps keep being accepted.
        match bfgs_update(&it.h_bar, &s, &z).filter(|h| h.clone().cholesky().is_some()) {
            Some(h) => it.h_bar = h,
            None if ls.halvings == 0 => it.h_bar *= 0.5,
            None => {}
        }
        let step = s.amax();
        it.x = next;
        f = f_next;
        history.push(f * sc.scaling.objective);
        if step < opts.eps_x {
            if fresh {
                converged = true;
                break;
            }
            restart(&mut it, &mut sc, &mut f);
        }
        fresh = step < opts.eps_x;
    }

    let p = it.x[..m].to_vec();
    let mut sol = PowerSolution::at(problem, p)?;
    sol.kkt_residual = kkt;
    sol.rounds_used = it.round;
    sol.converged = converged;
    if sol.objective < *history.last().expect("history starts non-empty") {
        history.push(sol.objective);
    }
    sol.objective_history = history;
    Ok(sol)
}
