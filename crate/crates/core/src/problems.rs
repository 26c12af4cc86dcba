//! The parametric optimization problems under study, their ground-truth
//! solvers, and the regret metric.
//!
//! A problem exposes its objective, constraint residuals and Jacobians as
//! functions of `(x, zeta)`, a ground-truth solver, and a restoration policy;
//! training methods and the harness only touch this interface.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, norm_inf, Matrix};
use crate::qp::{self, PolyhedronProjector, QpProblem, QpStatus};

/// Default feasibility tolerance used when certifying solutions.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// Linear constraint block `Ax = b, Gx <= h` shared by the in-scope problems.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearConstraintSet {
    pub a_eq: Matrix,
    pub b_eq: Vec<f64>,
    pub g_ineq: Matrix,
    pub h_ineq: Vec<f64>,
}

impl LinearConstraintSet {
    pub fn n(&self) -> usize {
        if self.a_eq.rows() > 0 {
            self.a_eq.cols()
        } else {
            self.g_ineq.cols()
        }
    }

    pub fn projector(&self) -> Result<PolyhedronProjector> {
        PolyhedronProjector::new(self.n(), &self.a_eq, &self.b_eq, &self.g_ineq, &self.h_ineq)
    }

    /// `(max inequality violation, max |equality residual|)`.
    pub fn violation(&self, x: &[f64]) -> (f64, f64) {
        let ineq = if self.g_ineq.rows() > 0 {
            self.g_ineq
                .matvec(x)
                .iter()
                .zip(&self.h_ineq)
                .fold(0.0f64, |m, (gx, h)| m.max(gx - h))
                .max(0.0)
        } else {
            0.0
        };
        let eq = if self.a_eq.rows() > 0 {
            norm_inf(&linalg::sub(&self.a_eq.matvec(x), &self.b_eq))
        } else {
            0.0
        };
        (ineq, eq)
    }
}

/// How infeasible model outputs get repaired for this problem.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RestorationPolicy {
    /// Clip negatives and renormalize onto the simplex.
    ClipSimplex,
    /// Euclidean projection onto the linear constraint set.
    ProjectPolyhedron,
    /// Newton least-squares on the (ReLU-ed) constraint residual system.
    NewtonLeastSquares,
}

/// A parametric constrained problem `min_x f(x, zeta) s.t. g(x) <= 0, h(x) = 0`.
pub trait ParametricProblem: Send + Sync {
    fn n_decision(&self) -> usize;
    fn n_param(&self) -> usize;
    fn objective(&self, x: &[f64], zeta: &[f64]) -> f64;
    fn grad_x_objective(&self, x: &[f64], zeta: &[f64]) -> Vec<f64>;
    fn grad_zeta_objective(&self, x: &[f64], zeta: &[f64]) -> Vec<f64>;
    /// Inequality residuals, feasible iff every entry `<= 0`.
    fn ineq_residuals(&self, x: &[f64], zeta: &[f64]) -> Vec<f64>;
    fn eq_residuals(&self, x: &[f64], zeta: &[f64]) -> Vec<f64>;
    fn ineq_jacobian(&self, x: &[f64], zeta: &[f64]) -> Matrix;
    fn eq_jacobian(&self, x: &[f64], zeta: &[f64]) -> Matrix;
    /// The constraint block when it is linear and parameter-independent.
    fn linear_constraints(&self) -> Option<&LinearConstraintSet>;
    fn ground_truth(&self, zeta: &[f64]) -> Result<Vec<f64>>;
    fn restoration_policy(&self) -> RestorationPolicy;
    fn tag(&self) -> &'static str;

    /// `max(max_i [g_i]_+, max_j |h_j|)`.
    fn max_violation(&self, x: &[f64], zeta: &[f64]) -> f64 {
        let gi = self
            .ineq_residuals(x, zeta)
            .iter()
            .fold(0.0f64, |m, &v| m.max(v));
        let he = norm_inf(&self.eq_residuals(x, zeta));
        gi.max(0.0).max(he)
    }
}

// ---------------------------------------------------------------------------
// Portfolio allocation
// ---------------------------------------------------------------------------

/// Mean-risk portfolio allocation over the probability simplex:
/// `min_x  risk_weight * x' Sigma x - zeta' x  s.t. 1'x = 1, x >= 0`
/// (maximization of return minus risk, written as a minimization).
#[derive(Clone, Debug)]
pub struct PortfolioProblem {
    pub sigma: Matrix,
    pub risk_weight: f64,
    constraints: LinearConstraintSet,
}

impl PortfolioProblem {
    pub fn new(sigma: Matrix, risk_weight: f64) -> Result<Self> {
        let d = sigma.rows();
        if sigma.cols() != d || d == 0 {
            return Err(Error::contract("Sigma must be square and non-empty"));
        }
        if sigma.symmetry_defect() > 1e-10 {
            return Err(Error::contract("Sigma must be symmetric"));
        }
        let eigs = linalg::sym_eigenvalues(&sigma);
        if eigs[0] < -1e-8 {
            return Err(Error::contract(format!(
                "Sigma not PSD (min eigenvalue {:.3e})",
                eigs[0]
            )));
        }
        let mut g = Matrix::zeros(d, d);
        for i in 0..d {
            g.set(i, i, -1.0);
        }
        Ok(PortfolioProblem {
            sigma,
            risk_weight,
            constraints: LinearConstraintSet {
                a_eq: Matrix::from_vec(1, d, vec![1.0; d])?,
                b_eq: vec![1.0],
                g_ineq: g,
                h_ineq: vec![0.0; d],
            },
        })
    }

    pub fn assets(&self) -> usize {
        self.sigma.rows()
    }

    /// The convex QP whose solution is `ground_truth(zeta)`:
    /// `Q = 2*risk_weight*Sigma`, `q = -zeta`, simplex constraints.
    pub fn to_qp(&self, zeta: &[f64]) -> QpProblem {
        let mut quad = self.sigma.clone();
        quad.scale(2.0 * self.risk_weight);
        QpProblem {
            quad,
            lin: zeta.iter().map(|&z| -z).collect(),
            a_eq: self.constraints.a_eq.clone(),
            b_eq: self.constraints.b_eq.clone(),
            g_ineq: self.constraints.g_ineq.clone(),
            h_ineq: self.constraints.h_ineq.clone(),
        }
    }
}

impl ParametricProblem for PortfolioProblem {
    fn n_decision(&self) -> usize {
        self.assets()
    }

    fn n_param(&self) -> usize {
        self.assets()
    }

    fn objective(&self, x: &[f64], zeta: &[f64]) -> f64 {
        let sx = self.sigma.matvec(x);
        self.risk_weight * linalg::dot(x, &sx) - linalg::dot(zeta, x)
    }

    fn grad_x_objective(&self, x: &[f64], zeta: &[f64]) -> Vec<f64> {
        let mut g = self.sigma.matvec(x);
        for (gi, &zi) in g.iter_mut().zip(zeta) {
            *gi = 2.0 * self.risk_weight * *gi - zi;
        }
        g
    }

    fn grad_zeta_objective(&self, x: &[f64], _zeta: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| -v).collect()
    }

    fn ineq_residuals(&self, x: &[f64], _zeta: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| -v).collect()
    }

    fn eq_residuals(&self, x: &[f64], _zeta: &[f64]) -> Vec<f64> {
        vec![x.iter().sum::<f64>() - 1.0]
    }

    fn ineq_jacobian(&self, _x: &[f64], _zeta: &[f64]) -> Matrix {
        self.constraints.g_ineq.clone()
    }

    fn eq_jacobian(&self, _x: &[f64], _zeta: &[f64]) -> Matrix {
        self.constraints.a_eq.clone()
    }

    fn linear_constraints(&self) -> Option<&LinearConstraintSet> {
        Some(&self.constraints)
    }

    fn ground_truth(&self, zeta: &[f64]) -> Result<Vec<f64>> {
        if zeta.len() != self.assets() || !zeta.iter().all(|v| v.is_finite()) {
            return Err(Error::contract(
                "zeta must be finite with one entry per asset",
            ));
        }
        let qp = self.to_qp(zeta);
        let sol = qp::solve_qp(&qp, qp::DEFAULT_QP_TOL, qp::DEFAULT_QP_MAX_ITER)?;
        match sol.status {
            QpStatus::Optimal => Ok(sol.x),
            QpStatus::Infeasible => Err(Error::Infeasible("portfolio QP".to_string())),
            QpStatus::MaxIter => Err(Error::NoConvergence(format!(
                "portfolio QP stopped at residuals ({:.2e}, {:.2e})",
                sol.primal_residual, sol.dual_residual
            ))),
        }
    }

    fn restoration_policy(&self) -> RestorationPolicy {
        RestorationPolicy::ClipSimplex
    }

    fn tag(&self) -> &'static str {
        "portfolio"
    }
}

// ---------------------------------------------------------------------------
// Nonconvex QP with an oscillating objective
// ---------------------------------------------------------------------------

/// Fixed-point solver knobs for projected gradient descent.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PgdConfig {
    pub step: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl Default for PgdConfig {
    fn default() -> Self {
        PgdConfig {
            step: 0.01,
            max_iters: 2000,
            tol: 1e-7,
            restarts: 16,
        }
    }
}

/// `min_x 0.5 x' diag(mu) x + zeta' sin(x)  s.t.  Ax = b, Gx <= h`.
#[derive(Clone, Debug)]
pub struct NonconvexQpProblem {
    pub mu: Vec<f64>,
    pub pgd: PgdConfig,
    /// Seed for the multi-start ground-truth search; fixed per instance so the
    /// regret baseline is reproducible.
    pub gt_seed: u64,
    constraints: LinearConstraintSet,
}

impl NonconvexQpProblem {
    pub fn new(
        mu: Vec<f64>,
        constraints: LinearConstraintSet,
        pgd: PgdConfig,
        gt_seed: u64,
    ) -> Result<Self> {
        let n = mu.len();
        if constraints.n() != n {
            return Err(Error::contract("constraint width must match mu length"));
        }
        if mu.iter().any(|&m| m < 0.0) {
            return Err(Error::contract("mu must be entrywise nonnegative"));
        }
        Ok(NonconvexQpProblem {
            mu,
            pgd,
            gt_seed,
            constraints,
        })
    }

    pub fn n(&self) -> usize {
        self.mu.len()
    }
}

impl ParametricProblem for NonconvexQpProblem {
    fn n_decision(&self) -> usize {
        self.n()
    }

    fn n_param(&self) -> usize {
        self.n()
    }

    fn objective(&self, x: &[f64], zeta: &[f64]) -> f64 {
        x.iter()
            .zip(&self.mu)
            .map(|(&xi, &mi)| 0.5 * mi * xi * xi)
            .sum::<f64>()
            + x.iter()
                .zip(zeta)
                .map(|(&xi, &zi)| zi * xi.sin())
                .sum::<f64>()
    }

    fn grad_x_objective(&self, x: &[f64], zeta: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mu)
            .zip(zeta)
            .map(|((&xi, &mi), &zi)| mi * xi + zi * xi.cos())
            .collect()
    }

    fn grad_zeta_objective(&self, x: &[f64], _zeta: &[f64]) -> Vec<f64> {
        x.iter().map(|&xi| xi.sin()).collect()
    }

    fn ineq_residuals(&self, x: &[f64], _zeta: &[f64]) -> Vec<f64> {
        linalg::sub(&self.constraints.g_ineq.matvec(x), &self.constraints.h_ineq)
    }

    fn eq_residuals(&self, x: &[f64], _zeta: &[f64]) -> Vec<f64> {
        linalg::sub(&self.constraints.a_eq.matvec(x), &self.constraints.b_eq)
    }

    fn ineq_jacobian(&self, _x: &[f64], _zeta: &[f64]) -> Matrix {
        self.constraints.g_ineq.clone()
    }

    fn eq_jacobian(&self, _x: &[f64], _zeta: &[f64]) -> Matrix {
        self.constraints.a_eq.clone()
    }

    fn linear_constraints(&self) -> Option<&LinearConstraintSet> {
        Some(&self.constraints)
    }

    fn ground_truth(&self, zeta: &[f64]) -> Result<Vec<f64>> {
        nonconvex_ground_truth(self, zeta, self.pgd.restarts, self.gt_seed)
    }

    fn restoration_policy(&self) -> RestorationPolicy {
        RestorationPolicy::ProjectPolyhedron
    }

    fn tag(&self) -> &'static str {
        "nonconvex_qp"
    }
}

// ---------------------------------------------------------------------------
// 2-D illustrative problem
// ---------------------------------------------------------------------------

/// `min zeta_1 x_1^2 + zeta_2 x_2^2` over three halfplanes; convex whenever
/// `zeta > 0`. Used by the distribution-shift probe.
#[derive(Clone, Debug)]
pub struct Toy2dProblem {
    constraints: LinearConstraintSet,
}

impl Default for Toy2dProblem {
    fn default() -> Self {
        Self::new()
    }
}

impl Toy2dProblem {
    pub fn new() -> Self {
        Toy2dProblem {
            constraints: LinearConstraintSet {
                a_eq: Matrix::zeros(0, 2),
                b_eq: vec![],
                g_ineq: Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, -1.0], vec![1.0, 1.0]])
                    .expect("static constraint rows"),
                h_ineq: vec![0.5, 0.2, 0.3],
            },
        }
    }
}

impl ParametricProblem for Toy2dProblem {
    fn n_decision(&self) -> usize {
        2
    }

    fn n_param(&self) -> usize {
        2
    }

    fn objective(&self, x: &[f64], zeta: &[f64]) -> f64 {
        zeta[0] * x[0] * x[0] + zeta[1] * x[1] * x[1]
    }

    fn grad_x_objective(&self, x: &[f64], zeta: &[f64]) -> Vec<f64> {
        vec![2.0 * zeta[0] * x[0], 2.0 * zeta[1] * x[1]]
    }

    fn grad_zeta_objective(&self, x: &[f64], _zeta: &[f64]) -> Vec<f64> {
        vec![x[0] * x[0], x[1] * x[1]]
    }

    fn ineq_residuals(&self, x: &[f64], _zeta: &[f64]) -> Vec<f64> {
        linalg::sub(&self.constraints.g_ineq.matvec(x), &self.constraints.h_ineq)
    }

    fn eq_residuals(&self, _x: &[f64], _zeta: &[f64]) -> Vec<f64> {
        vec![]
    }

    fn ineq_jacobian(&self, _x: &[f64], _zeta: &[f64]) -> Matrix {
        self.constraints.g_ineq.clone()
    }

    fn eq_jacobian(&self, _x: &[f64], _zeta: &[f64]) -> Matrix {
        Matrix::zeros(0, 2)
    }

    fn linear_constraints(&self) -> Option<&LinearConstraintSet> {
        Some(&self.constraints)
    }

    fn ground_truth(&self, zeta: &[f64]) -> Result<Vec<f64>> {
        if zeta.iter().any(|&z| z <= 0.0) {
            return Err(Error::contract("toy problem requires zeta > 0"));
        }
        let qp = QpProblem {
            quad: Matrix::diag(&[2.0 * zeta[0], 2.0 * zeta[1]]),
            lin: vec![0.0, 0.0],
            a_eq: Matrix::zeros(0, 2),
            b_eq: vec![],
            g_ineq: self.constraints.g_ineq.clone(),
            h_ineq: self.constraints.h_ineq.clone(),
        };
        let sol = qp::solve_qp(&qp, qp::DEFAULT_QP_TOL, qp::DEFAULT_QP_MAX_ITER)?;
        Ok(sol.x)
    }

    fn restoration_policy(&self) -> RestorationPolicy {
        RestorationPolicy::NewtonLeastSquares
    }

    fn tag(&self) -> &'static str {
        "toy2d"
    }
}

// ---------------------------------------------------------------------------
// Projected gradient descent and the multi-start ground truth
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PgdResult {
    pub x: Vec<f64>,
    /// `||x - proj(x - step * grad f(x))||_2` at the returned iterate.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Iterates `x <- proj(x - step * grad f(x, zeta))` until the fixed-point
/// residual drops below `cfg.tol` or the budget runs out. The returned point
/// is always a projection output, hence feasible to projection tolerance.
pub fn pgd_solve(
    problem: &dyn ParametricProblem,
    zeta: &[f64],
    x0: &[f64],
    cfg: &PgdConfig,
) -> Result<PgdResult> {
    let constraints = problem
        .linear_constraints()
        .ok_or_else(|| Error::Unsupported("PGD needs linear constraints".to_string()))?;
    let mut projector = constraints.projector()?;
    pgd_solve_with(&mut projector, problem, zeta, x0, cfg)
}

/// Same as [`pgd_solve`] with a caller-provided projector so that repeated
/// solves share its factorization and warm start.
pub fn pgd_solve_with(
    projector: &mut PolyhedronProjector,
    problem: &dyn ParametricProblem,
    zeta: &[f64],
    x0: &[f64],
    cfg: &PgdConfig,
) -> Result<PgdResult> {
    let mut x = projector.project(x0)?;
    let mut residual = f64::INFINITY;
    for it in 0..cfg.max_iters {
        let grad = problem.grad_x_objective(&x, zeta);
        let target: Vec<f64> = x
            .iter()
            .zip(&grad)
            .map(|(&xi, &gi)| xi - cfg.step * gi)
            .collect();
        if !target.iter().all(|v| v.is_finite()) {
            return Err(Error::StepSize(format!(
                "non-finite PGD iterate at iteration {it}"
            )));
        }
        let next = projector.project(&target)?;
        residual = linalg::norm2(&linalg::sub(&x, &next));
        if residual <= cfg.tol {
            // x itself satisfies the fixed-point condition
            return Ok(PgdResult {
                x,
                residual,
                iterations: it,
                converged: true,
            });
        }
        x = next;
    }
    Ok(PgdResult {
        x,
        residual,
        iterations: cfg.max_iters,
        converged: false,
    })
}

/// Splitmix-style seed derivation for independent sub-streams.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Best-objective PGD result over seeded restarts; this defines the regret
/// baseline for the nonconvex task. Restart 0 starts from the projected
/// origin; the best run is extended with a second budget if it stopped on the
/// iteration cap.
pub fn nonconvex_ground_truth(
    problem: &NonconvexQpProblem,
    zeta: &[f64],
    restarts: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if restarts == 0 {
        return Err(Error::contract("restarts must be >= 1"));
    }
    let constraints = problem
        .linear_constraints()
        .expect("nonconvex QP constraints are linear");
    let mut projector = constraints.projector()?;
    let n = problem.n();
    let cfg = problem.pgd;
    let mut best: Option<PgdResult> = None;
    let mut failures = 0usize;
    for r in 0..restarts {
        let x0 = if r == 0 {
            vec![0.0; n]
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, r as u64));
            (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };
        match pgd_solve_with(&mut projector, problem, zeta, &x0, &cfg) {
            Ok(res) => {
                let obj = problem.objective(&res.x, zeta);
                let better = match &best {
                    None => true,
                    Some(b) => obj < problem.objective(&b.x, zeta),
                };
                if better {
                    best = Some(res);
                }
            }
            Err(_) => failures += 1,
        }
    }
    let mut best = best
        .ok_or_else(|| Error::NoConvergence(format!("all {failures} PGD restarts diverged")))?;
    if !best.converged {
        // spend a second budget on the winning basin
        best = pgd_solve_with(&mut projector, problem, zeta, &best.x.clone(), &cfg)?;
    }
    Ok(best.x)
}

// ---------------------------------------------------------------------------
// Regret
// ---------------------------------------------------------------------------

/// Raw objective gap `f(x_hat) - f(x_star)` with no feasibility requirement;
/// this is the "before restoration" number in reports.
pub fn objective_gap(
    problem: &dyn ParametricProblem,
    x_hat: &[f64],
    zeta: &[f64],
    x_star: &[f64],
) -> f64 {
    problem.objective(x_hat, zeta) - problem.objective(x_star, zeta)
}

/// Percent form of a gap relative to the optimal objective value.
pub fn percent_of_optimum(gap: f64, f_star: f64) -> f64 {
    100.0 * gap / f_star.abs().max(1e-12)
}

/// Regret of a candidate that must be feasible within `feas_tol`; an
/// infeasible candidate is an error carrying its violation, never a number.
pub fn regret_with_target(
    problem: &dyn ParametricProblem,
    x_hat: &[f64],
    zeta: &[f64],
    x_star: &[f64],
    feas_tol: f64,
) -> Result<f64> {
    let viol = problem.max_violation(x_hat, zeta);
    if viol > feas_tol {
        return Err(Error::Infeasible(format!(
            "candidate violates constraints by {viol:.3e} (tolerance {feas_tol:.1e})"
        )));
    }
    Ok(objective_gap(problem, x_hat, zeta, x_star))
}

/// Regret against a ground-truth solve performed on the spot.
pub fn regret(problem: &dyn ParametricProblem, x_hat: &[f64], zeta: &[f64]) -> Result<f64> {
    let x_star = problem.ground_truth(zeta)?;
    regret_with_target(problem, x_hat, zeta, &x_star, FEASIBILITY_TOL)
}

/// Percent regret against a ground-truth solve performed on the spot.
pub fn percent_regret(
    problem: &dyn ParametricProblem,
    x_hat: &[f64],
    zeta: &[f64],
) -> Result<f64> {
    let x_star = problem.ground_truth(zeta)?;
    let gap = regret_with_target(problem, x_hat, zeta, &x_star, FEASIBILITY_TOL)?;
    Ok(percent_of_optimum(gap, problem.objective(&x_star, zeta)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_diff_grad(
        problem: &dyn ParametricProblem,
        x: &[f64],
        zeta: &[f64],
        h: f64,
    ) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                xp[i] += h;
                let mut xm = x.to_vec();
                xm[i] -= h;
                (problem.objective(&xp, zeta) - problem.objective(&xm, zeta)) / (2.0 * h)
            })
            .collect()
    }

    fn sample_portfolio(d: usize, seed: u64) -> (PortfolioProblem, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = Matrix::zeros(d, 3);
        for v in f.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let mut sigma = f.matmul(&f.transpose());
        for i in 0..d {
            sigma.set(i, i, sigma.get(i, i) + rng.gen_range(0.05..0.2));
        }
        let zeta: Vec<f64> = (0..d).map(|_| rng.gen_range(0.0..0.5)).collect();
        (PortfolioProblem::new(sigma, 2.0).unwrap(), zeta)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (port, zeta) = sample_portfolio(5, 1);
        let x = vec![0.2, 0.1, 0.3, 0.25, 0.15];
        let ana = port.grad_x_objective(&x, &zeta);
        let num = finite_diff_grad(&port, &x, &zeta, 1e-6);
        for (a, n) in ana.iter().zip(&num) {
            assert!((a - n).abs() / a.abs().max(1.0) < 1e-5);
        }

        let toy = Toy2dProblem::new();
        let zeta2 = vec![0.7, 1.3];
        let x2 = vec![0.05, -0.1];
        let ana2 = toy.grad_x_objective(&x2, &zeta2);
        let num2 = finite_diff_grad(&toy, &x2, &zeta2, 1e-6);
        for (a, n) in ana2.iter().zip(&num2) {
            assert!((a - n).abs() < 1e-6);
        }
    }

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        // Box-Muller; test-local
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    fn small_nonconvex(n: usize, seed: u64) -> NonconvexQpProblem {
        // miniature instance following the dataset recipe
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_eq = n / 2;
        let n_ineq = n / 2;
        let mu: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut a = Matrix::zeros(n_eq, n);
        let mut g = Matrix::zeros(n_ineq, n);
        loop {
            for v in a.data_mut() {
                *v = gauss(&mut rng);
            }
            if linalg::pinv_wide(&a).is_ok() {
                break;
            }
        }
        for v in g.data_mut() {
            *v = gauss(&mut rng);
        }
        let b: Vec<f64> = (0..n_eq).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a_pinv = linalg::pinv_wide(&a).unwrap();
        let m = g.matmul(&a_pinv);
        let h: Vec<f64> = (0..n_ineq)
            .map(|i| m.row(i).iter().map(|v| v.abs()).sum())
            .collect();
        NonconvexQpProblem::new(
            mu,
            LinearConstraintSet {
                a_eq: a,
                b_eq: b,
                g_ineq: g,
                h_ineq: h,
            },
            PgdConfig::default(),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn nonconvex_gradient_is_exact_formula() {
        let nc = small_nonconvex(4, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zeta: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..5.0)).collect();
        let grad = nc.grad_x_objective(&x, &zeta);
        for i in 0..4 {
            let expect = nc.mu[i] * x[i] + zeta[i] * x[i].cos();
            assert_eq!(grad[i], expect);
        }
        let num = finite_diff_grad(&nc, &x, &zeta, 1e-6);
        for (a, n) in grad.iter().zip(&num) {
            assert!((a - n).abs() / a.abs().max(1.0) < 1e-5);
        }
    }

    #[test]
    fn portfolio_limits() {
        // risk-dominated: Sigma = I, huge risk weight → near-uniform allocation
        let d = 4;
        let port = PortfolioProblem::new(Matrix::identity(d), 500.0).unwrap();
        let zeta = vec![0.3, 0.1, 0.2, 0.15];
        let x = port.ground_truth(&zeta).unwrap();
        for &xi in &x {
            assert!((xi - 0.25).abs() < 0.01, "{x:?}");
        }
        // return-dominated: tiny risk weight, one dominant return
        let port2 = PortfolioProblem::new(Matrix::identity(d), 1e-3).unwrap();
        let zeta2 = vec![0.1, 5.0, 0.1, 0.1];
        let x2 = port2.ground_truth(&zeta2).unwrap();
        assert!(x2[1] > 0.99, "{x2:?}");
    }

    #[test]
    fn portfolio_ground_truth_beats_random_sampling() {
        let (port, zeta) = sample_portfolio(5, 7);
        let x_star = port.ground_truth(&zeta).unwrap();
        let f_star = port.objective(&x_star, &zeta);
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        for _ in 0..10_000 {
            // Dirichlet(1) sample via exponential normalization
            let e: Vec<f64> = (0..5)
                .map(|_| -rng.gen_range(1e-12..1.0f64).ln())
                .collect();
            let s: f64 = e.iter().sum();
            let x: Vec<f64> = e.iter().map(|v| v / s).collect();
            assert!(port.objective(&x, &zeta) >= f_star - 1e-9);
        }
    }

    #[test]
    fn toy2d_optimum_is_origin() {
        let toy = Toy2dProblem::new();
        let x = toy.ground_truth(&[1.0, 1.0]).unwrap();
        assert!(norm_inf(&x) < 1e-6, "{x:?}");
    }

    #[test]
    fn pgd_convex_case_matches_qp() {
        // zeta = 0 removes the oscillating term: plain convex QP
        let nc = small_nonconvex(6, 21);
        let zeta = vec![0.0; 6];
        // a step-length residual of 1e-7 leaves O(res / (step*mu_min)) distance
        // to the optimum, so drive the fixed point tighter for this comparison
        let res = pgd_solve(
            &nc,
            &zeta,
            &vec![0.0; 6],
            &PgdConfig {
                max_iters: 200_000,
                tol: 1e-10,
                ..PgdConfig::default()
            },
        )
        .unwrap();
        assert!(res.converged, "residual {}", res.residual);
        let c = nc.linear_constraints().unwrap();
        let qp_prob = QpProblem {
            quad: Matrix::diag(&nc.mu),
            lin: vec![0.0; 6],
            a_eq: c.a_eq.clone(),
            b_eq: c.b_eq.clone(),
            g_ineq: c.g_ineq.clone(),
            h_ineq: c.h_ineq.clone(),
        };
        let sol = qp::solve_qp(&qp_prob, 1e-10, 100_000).unwrap();
        for (a, b) in res.x.iter().zip(&sol.x) {
            assert!((a - b).abs() < 1e-5, "{:?} vs {:?}", res.x, sol.x);
        }
    }

    #[test]
    fn pgd_fixed_point_is_stationary() {
        let nc = small_nonconvex(4, 5);
        let zeta = vec![1.0, 2.0, 0.5, 1.5];
        let first = pgd_solve(
            &nc,
            &zeta,
            &vec![0.0; 4],
            &PgdConfig {
                max_iters: 50_000,
                ..PgdConfig::default()
            },
        )
        .unwrap();
        assert!(first.converged);
        // restarting at the fixed point terminates immediately, unchanged
        let again = pgd_solve(&nc, &zeta, &first.x, &PgdConfig::default()).unwrap();
        assert_eq!(again.iterations, 0);
        for (a, b) in first.x.iter().zip(&again.x) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    /// Basis for the null space of the equality block, for feasible sampling.
    fn null_space_basis(a: &Matrix) -> Vec<Vec<f64>> {
        let me = a.rows();
        let n = a.cols();
        let mut work = a.clone();
        let mut pivots = Vec::new();
        let mut used = vec![false; n];
        for r in 0..me {
            let mut best = (0usize, 0.0f64);
            for c in 0..n {
                if !used[c] && work.get(r, c).abs() > best.1 {
                    best = (c, work.get(r, c).abs());
                }
            }
            let (pc, mag) = best;
            assert!(mag > 1e-10, "rank-deficient equality block in test");
            used[pc] = true;
            pivots.push(pc);
            let pv = work.get(r, pc);
            for rr in 0..me {
                if rr == r {
                    continue;
                }
                let f = work.get(rr, pc) / pv;
                if f != 0.0 {
                    for c in 0..n {
                        let v = work.get(rr, c) - f * work.get(r, c);
                        work.set(rr, c, v);
                    }
                }
            }
        }
        let free: Vec<usize> = (0..n).filter(|c| !used[*c]).collect();
        let mut basis = Vec::new();
        for &fc in &free {
            let mut v = vec![0.0; n];
            v[fc] = 1.0;
            for r in 0..me {
                let pc = pivots[r];
                v[pc] = -work.get(r, fc) / work.get(r, pc);
            }
            assert!(norm_inf(&a.matvec(&v)) < 1e-8);
            basis.push(v);
        }
        basis
    }

    #[test]
    fn pgd_beats_feasible_random_search() {
        let nc = small_nonconvex(6, 33);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zeta: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..5.0)).collect();
        let x_best = nonconvex_ground_truth(&nc, &zeta, 16, 7).unwrap();
        let f_best = nc.objective(&x_best, &zeta);
        // feasible sampling: particular solution plus null-space directions,
        // rejection against the inequalities
        let c = nc.linear_constraints().unwrap();
        let x_part = c.projector().unwrap().project(&vec![0.0; 6]).unwrap();
        let basis = null_space_basis(&c.a_eq);
        let mut best_sample = f64::INFINITY;
        let mut accepted = 0u32;
        for _ in 0..100_000 {
            let mut x = x_part.clone();
            for bvec in &basis {
                let t = rng.gen_range(-3.0..3.0);
                linalg::axpy(t, bvec, &mut x);
            }
            let (gi, _) = c.violation(&x);
            if gi <= 0.0 {
                accepted += 1;
                best_sample = best_sample.min(nc.objective(&x, &zeta));
            }
        }
        assert!(accepted > 1000, "sampler accepted only {accepted}");
        assert!(
            f_best <= best_sample + 1e-3,
            "multi-start PGD {f_best} vs sampled best {best_sample}"
        );
    }

    #[test]
    fn ground_truth_restart_semantics() {
        let nc = small_nonconvex(4, 11);
        let zeta = vec![2.0, 1.0, 3.0, 0.5];
        let single = nonconvex_ground_truth(&nc, &zeta, 1, 55).unwrap();
        let canonical = pgd_solve(&nc, &zeta, &vec![0.0; 4], &nc.pgd).unwrap();
        assert!(canonical.converged);
        for (a, b) in single.iter().zip(&canonical.x) {
            assert!((a - b).abs() < 1e-12);
        }
        // objective non-increasing in the number of restarts
        let mut prev = f64::INFINITY;
        for r in [1usize, 4, 8, 16] {
            let x = nonconvex_ground_truth(&nc, &zeta, r, 55).unwrap();
            let f = nc.objective(&x, &zeta);
            assert!(f <= prev + 1e-12, "restarts {r}: {f} > {prev}");
            prev = f;
        }
    }

    #[test]
    fn regret_basics() {
        let (port, zeta) = sample_portfolio(5, 13);
        let x_star = port.ground_truth(&zeta).unwrap();
        let r = regret_with_target(&port, &x_star, &zeta, &x_star, FEASIBILITY_TOL).unwrap();
        assert_eq!(r, 0.0);
        // uniform allocation: regret equals the hand-computed objective difference
        let uniform = vec![0.2; 5];
        let r_u = regret_with_target(&port, &uniform, &zeta, &x_star, FEASIBILITY_TOL).unwrap();
        let expect = port.objective(&uniform, &zeta) - port.objective(&x_star, &zeta);
        assert_eq!(r_u, expect);
        assert!(r_u >= -1e-6, "convex regret must be nonnegative up to tol");
        // infeasible candidates are reported separately, not as regret
        let bad = vec![0.5; 5];
        assert!(matches!(
            regret_with_target(&port, &bad, &zeta, &x_star, FEASIBILITY_TOL),
            Err(Error::Infeasible(_))
        ));
    }
}
