//! Convex quadratic programming.
//!
//! The solver is ADMM in the operator-splitting form used by OSQP: constraints
//! are stacked as `l <= Ax <= u`, a quasi-definite KKT matrix is factorized
//! once and reused every iteration, with over-relaxation, per-row penalties,
//! occasional penalty rescaling, an infeasibility certificate, and an
//! active-set polish step at the end. Problems here are desk scale, so the
//! factorization is a dense LU.
//!
//! The module also provides exact sort-based simplex projection, Euclidean
//! projection onto a polyhedron (a QP), KKT residual certificates, and
//! implicit differentiation of the solution map with respect to the linear
//! cost term.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, norm_inf, LuFactors, Matrix};

/// `minimize 0.5 x'Qx + q'x  s.t.  Ax = b, Gx <= h`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QpProblem {
    pub quad: Matrix,
    pub lin: Vec<f64>,
    pub a_eq: Matrix,
    pub b_eq: Vec<f64>,
    pub g_ineq: Matrix,
    pub h_ineq: Vec<f64>,
}

impl QpProblem {
    pub fn n(&self) -> usize {
        self.quad.rows()
    }

    pub fn m_eq(&self) -> usize {
        self.a_eq.rows()
    }

    pub fn m_ineq(&self) -> usize {
        self.g_ineq.rows()
    }

    /// Shape consistency, symmetry to 1e-10 and positive semidefiniteness of
    /// the quadratic term (smallest eigenvalue >= -1e-8).
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if self.quad.cols() != n || self.lin.len() != n {
            return Err(Error::contract("Q/q shape mismatch"));
        }
        if self.a_eq.rows() != self.b_eq.len() || (self.a_eq.rows() > 0 && self.a_eq.cols() != n) {
            return Err(Error::contract("equality constraint shape mismatch"));
        }
        if self.g_ineq.rows() != self.h_ineq.len()
            || (self.g_ineq.rows() > 0 && self.g_ineq.cols() != n)
        {
            return Err(Error::contract("inequality constraint shape mismatch"));
        }
        if self.quad.symmetry_defect() > 1e-10 {
            return Err(Error::contract("Q is not symmetric"));
        }
        let eigs = linalg::sym_eigenvalues(&self.quad);
        if eigs.first().copied().unwrap_or(0.0) < -1e-8 {
            return Err(Error::contract(format!(
                "Q is not PSD (min eigenvalue {:.3e})",
                eigs[0]
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub dual_eq: Vec<f64>,
    pub dual_ineq: Vec<f64>,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
}

/// KKT certificate residuals of a candidate primal-dual pair.
#[derive(Clone, Copy, Debug)]
pub struct KktResiduals {
    /// `||Qx + q + A'nu + G'lambda||_inf`
    pub stationarity: f64,
    /// `||Ax - b||_inf`
    pub primal_eq: f64,
    /// `max(0, max_i (Gx - h)_i)`
    pub primal_ineq: f64,
    /// `max(0, -min_i lambda_i)`
    pub dual_feasibility: f64,
    /// `max_i min(lambda_i, h_i - (Gx)_i)` clipped at 0
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_eq)
            .max(self.primal_ineq)
            .max(self.dual_feasibility)
            .max(self.complementarity)
    }
}

pub fn kkt_residuals(qp: &QpProblem, x: &[f64], dual_eq: &[f64], dual_ineq: &[f64]) -> KktResiduals {
    let mut grad = qp.quad.matvec(x);
    linalg::axpy(1.0, &qp.lin, &mut grad);
    if qp.m_eq() > 0 {
        let at_nu = qp.a_eq.matvec_t(dual_eq);
        linalg::axpy(1.0, &at_nu, &mut grad);
    }
    if qp.m_ineq() > 0 {
        let gt_l = qp.g_ineq.matvec_t(dual_ineq);
        linalg::axpy(1.0, &gt_l, &mut grad);
    }
    let primal_eq = if qp.m_eq() > 0 {
        norm_inf(&linalg::sub(&qp.a_eq.matvec(x), &qp.b_eq))
    } else {
        0.0
    };
    let (mut primal_ineq, mut comp, mut dual_feas) = (0.0f64, 0.0f64, 0.0f64);
    if qp.m_ineq() > 0 {
        let gx = qp.g_ineq.matvec(x);
        for i in 0..qp.m_ineq() {
            let slack = qp.h_ineq[i] - gx[i];
            primal_ineq = primal_ineq.max(-slack);
            dual_feas = dual_feas.max(-dual_ineq[i]);
            comp = comp.max(dual_ineq[i].max(0.0).min(slack.max(0.0)));
        }
    }
    KktResiduals {
        stationarity: norm_inf(&grad),
        primal_eq,
        primal_ineq: primal_ineq.max(0.0),
        dual_feasibility: dual_feas,
        complementarity: comp,
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdmmSettings {
    pub tol_abs: f64,
    pub tol_rel: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub over_relaxation: f64,
    pub adaptive_rho: bool,
    pub polish: bool,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        AdmmSettings {
            tol_abs: 1e-8,
            tol_rel: 1e-8,
            max_iter: 50_000,
            rho: 0.1,
            sigma: 1e-6,
            over_relaxation: 1.6,
            adaptive_rho: true,
            polish: true,
        }
    }
}

const RHO_EQ_FACTOR: f64 = 1e3;
const CHECK_EVERY: usize = 25;

/// ADMM engine for a QP with fixed `Q`, constraints and bounds; the linear
/// term may vary between solves, which makes repeated projections and
/// predict-then-optimize training loops cheap (one factorization, many solves).
pub struct AdmmSolver {
    n: usize,
    m_eq: usize,
    m: usize,
    quad: Matrix,
    a_stack: Matrix,
    lower: Vec<f64>,
    upper: Vec<f64>,
    rho: Vec<f64>,
    rho_base: f64,
    kkt: LuFactors,
    settings: AdmmSettings,
    warm: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

impl AdmmSolver {
    pub fn new(qp: &QpProblem, settings: AdmmSettings) -> Result<Self> {
        qp.validate()?;
        let n = qp.n();
        let m_eq = qp.m_eq();
        let m = m_eq + qp.m_ineq();
        let mut a_stack = Matrix::zeros(m, n);
        let mut lower = vec![0.0; m];
        let mut upper = vec![0.0; m];
        for i in 0..m_eq {
            a_stack.row_mut(i).copy_from_slice(qp.a_eq.row(i));
            lower[i] = qp.b_eq[i];
            upper[i] = qp.b_eq[i];
        }
        for i in 0..qp.m_ineq() {
            a_stack.row_mut(m_eq + i).copy_from_slice(qp.g_ineq.row(i));
            lower[m_eq + i] = f64::NEG_INFINITY;
            upper[m_eq + i] = qp.h_ineq[i];
        }
        let rho_base = settings.rho;
        let rho = Self::rho_vec(rho_base, m_eq, m);
        let kkt = Self::factor(&qp.quad, &a_stack, &rho, settings.sigma)?;
        Ok(AdmmSolver {
            n,
            m_eq,
            m,
            quad: qp.quad.clone(),
            a_stack,
            lower,
            upper,
            rho,
            rho_base,
            kkt,
            settings,
            warm: None,
        })
    }

    fn rho_vec(base: f64, m_eq: usize, m: usize) -> Vec<f64> {
        (0..m)
            .map(|i| if i < m_eq { base * RHO_EQ_FACTOR } else { base })
            .collect()
    }

    fn factor(quad: &Matrix, a: &Matrix, rho: &[f64], sigma: f64) -> Result<LuFactors> {
        let n = quad.rows();
        let m = a.rows();
        let mut k = Matrix::zeros(n + m, n + m);
        for i in 0..n {
            for j in 0..n {
                k.set(i, j, quad.get(i, j));
            }
            k.set(i, i, k.get(i, i) + sigma);
        }
        for i in 0..m {
            for j in 0..n {
                let v = a.get(i, j);
                k.set(n + i, j, v);
                k.set(j, n + i, v);
            }
            k.set(n + i, n + i, -1.0 / rho[i]);
        }
        LuFactors::new(&k)
            .map_err(|e| Error::Singular(format!("ADMM KKT factorization failed: {e}")))
    }

    pub fn clear_warm_start(&mut self) {
        self.warm = None;
    }

    /// The `(x, z, y)` state the next solve would warm-start from.
    pub fn warm_state(&self) -> Option<&(Vec<f64>, Vec<f64>, Vec<f64>)> {
        self.warm.as_ref()
    }

    /// Injects a warm start, e.g. a per-sample cache in a training loop.
    pub fn set_warm_state(&mut self, state: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>) {
        self.warm = state;
    }

    /// Solves with the stored linear structure and the given linear term,
    /// warm-starting from the previous solve when available.
    pub fn solve(&mut self, lin: &[f64]) -> Result<QpSolution> {
        assert_eq!(lin.len(), self.n, "linear term dimension mismatch");
        let (n, m) = (self.n, self.m);
        let s = self.settings;
        let (mut x, mut z, mut y) = match self.warm.take() {
            Some(w) => w,
            None => (vec![0.0; n], vec![0.0; m], vec![0.0; m]),
        };
        let mut rhs = vec![0.0; n + m];
        let mut status = QpStatus::MaxIter;
        let mut r_prim = f64::INFINITY;
        let mut r_dual = f64::INFINITY;
        let mut iterations = s.max_iter;
        let mut y_prev_check = y.clone();

        let mut it = 0usize;
        while it < s.max_iter {
            it += 1;
            // KKT solve for (x~, nu)
            for i in 0..n {
                rhs[i] = s.sigma * x[i] - lin[i];
            }
            for i in 0..m {
                rhs[n + i] = z[i] - y[i] / self.rho[i];
            }
            let sol = self.kkt.solve(&rhs);
            let alpha = s.over_relaxation;
            // x update
            for i in 0..n {
                x[i] = alpha * sol[i] + (1.0 - alpha) * x[i];
            }
            // z/y updates via the relaxed candidate v
            for i in 0..m {
                let z_tilde = z[i] + (sol[n + i] - y[i]) / self.rho[i];
                let v = alpha * z_tilde + (1.0 - alpha) * z[i] + y[i] / self.rho[i];
                let z_new = v.clamp(self.lower[i], self.upper[i]);
                y[i] = self.rho[i] * (v - z_new);
                z[i] = z_new;
            }

            if it % CHECK_EVERY == 0 || it == s.max_iter {
                let ax = self.a_stack.matvec(&x);
                r_prim = norm_inf(&linalg::sub(&ax, &z));
                let mut dual = self.quad.matvec(&x);
                linalg::axpy(1.0, lin, &mut dual);
                let aty = self.a_stack.matvec_t(&y);
                linalg::axpy(1.0, &aty, &mut dual);
                r_dual = norm_inf(&dual);
                let eps_p = s.tol_abs + s.tol_rel * norm_inf(&ax).max(norm_inf(&z));
                let mut qx = self.quad.matvec(&x);
                let scale_d = norm_inf(&qx).max(norm_inf(&aty)).max(norm_inf(lin));
                let eps_d = s.tol_abs + s.tol_rel * scale_d;
                if r_prim <= eps_p && r_dual <= eps_d {
                    status = QpStatus::Optimal;
                    iterations = it;
                    break;
                }
                // primal infeasibility certificate from the dual direction
                let dy: Vec<f64> = y.iter().zip(&y_prev_check).map(|(a, b)| a - b).collect();
                let dy_norm = norm_inf(&dy);
                if dy_norm > 1e-12 && self.certifies_infeasible(&dy, dy_norm) {
                    status = QpStatus::Infeasible;
                    iterations = it;
                    break;
                }
                y_prev_check.copy_from_slice(&y);

                if s.adaptive_rho && it % 100 == 0 && it < s.max_iter / 2 {
                    let p_norm = norm_inf(&ax).max(norm_inf(&z)).max(1e-12);
                    qx = self.quad.matvec(&x);
                    let d_norm = norm_inf(&qx).max(norm_inf(&aty)).max(norm_inf(lin)).max(1e-12);
                    let ratio = ((r_prim / p_norm) / (r_dual / d_norm).max(1e-16)).sqrt();
                    if ratio > 5.0 || ratio < 0.2 {
                        let new_base = (self.rho_base * ratio).clamp(1e-6, 1e6);
                        if (new_base / self.rho_base - 1.0).abs() > 1e-3 {
                            self.rho_base = new_base;
                            self.rho = Self::rho_vec(new_base, self.m_eq, m);
                            self.kkt =
                                Self::factor(&self.quad, &self.a_stack, &self.rho, s.sigma)?;
                        }
                    }
                }
            }
        }
        if status == QpStatus::MaxIter {
            iterations = s.max_iter;
        }

        let mut solution = QpSolution {
            x: x.clone(),
            dual_eq: y[..self.m_eq].to_vec(),
            dual_ineq: y[self.m_eq..].to_vec(),
            status,
            primal_residual: r_prim,
            dual_residual: r_dual,
            iterations,
        };
        if status == QpStatus::Optimal {
            if s.polish {
                self.polish(lin, &z, &mut solution);
            }
            self.warm = Some((x, z, y));
        }
        Ok(solution)
    }

    fn certifies_infeasible(&self, dy: &[f64], dy_norm: f64) -> bool {
        let eps = 1e-6 * dy_norm;
        let at_dy = self.a_stack.matvec_t(dy);
        if norm_inf(&at_dy) > eps {
            return false;
        }
        let mut support = 0.0;
        for i in 0..self.m {
            let pos = dy[i].max(0.0);
            let neg = (-dy[i]).max(0.0);
            if self.upper[i].is_finite() {
                support += self.upper[i] * pos;
            } else if pos > eps {
                return false;
            }
            if self.lower[i].is_finite() {
                support -= self.lower[i] * neg;
            } else if neg > eps {
                return false;
            }
        }
        support < -eps
    }

    /// Re-solves the KKT system restricted to the apparently-active set. When
    /// the refined point has smaller residuals it replaces the iterate.
    fn polish(&self, lin: &[f64], z: &[f64], sol: &mut QpSolution) {
        let n = self.n;
        let mut active: Vec<usize> = (0..self.m_eq).collect();
        for i in self.m_eq..self.m {
            let slack = self.upper[i] - z[i];
            let y_i = if i >= self.m_eq {
                sol.dual_ineq[i - self.m_eq]
            } else {
                0.0
            };
            if slack <= 1e-7 * (1.0 + self.upper[i].abs()) || y_i > 1e-7 {
                active.push(i);
            }
        }
        let na = active.len();
        let mut k = Matrix::zeros(n + na, n + na);
        for i in 0..n {
            for j in 0..n {
                k.set(i, j, self.quad.get(i, j));
            }
        }
        for (ai, &row) in active.iter().enumerate() {
            for j in 0..n {
                let v = self.a_stack.get(row, j);
                k.set(n + ai, j, v);
                k.set(j, n + ai, v);
            }
        }
        let lu = match LuFactors::new(&k) {
            Ok(lu) => lu,
            Err(_) => return,
        };
        let mut rhs = vec![0.0; n + na];
        for i in 0..n {
            rhs[i] = -lin[i];
        }
        for (ai, &row) in active.iter().enumerate() {
            rhs[n + ai] = self.upper[row];
        }
        let pol = lu.solve(&rhs);
        let x_pol = pol[..n].to_vec();
        let mut dual_eq = vec![0.0; self.m_eq];
        let mut dual_ineq = vec![0.0; self.m - self.m_eq];
        for (ai, &row) in active.iter().enumerate() {
            let mult = pol[n + ai];
            if row < self.m_eq {
                dual_eq[row] = mult;
            } else {
                dual_ineq[row - self.m_eq] = mult;
            }
        }
        if dual_ineq.iter().any(|&l| l < -1e-9) {
            return;
        }
        let qp_view = QpProblem {
            quad: self.quad.clone(),
            lin: lin.to_vec(),
            a_eq: self.sub_rows(0, self.m_eq),
            b_eq: self.upper[..self.m_eq].to_vec(),
            g_ineq: self.sub_rows(self.m_eq, self.m),
            h_ineq: self.upper[self.m_eq..].to_vec(),
        };
        let before = kkt_residuals(&qp_view, &sol.x, &sol.dual_eq, &sol.dual_ineq).max();
        let after = kkt_residuals(&qp_view, &x_pol, &dual_eq, &dual_ineq).max();
        if after < before {
            sol.x = x_pol;
            sol.dual_eq = dual_eq;
            sol.dual_ineq = dual_ineq;
            sol.primal_residual = sol.primal_residual.min(after);
            sol.dual_residual = sol.dual_residual.min(after);
        }
    }

    fn sub_rows(&self, from: usize, to: usize) -> Matrix {
        let mut m = Matrix::zeros(to - from, self.n);
        for (ri, row) in (from..to).enumerate() {
            m.row_mut(ri).copy_from_slice(self.a_stack.row(row));
        }
        m
    }
}

/// One-shot QP solve. `tol` is used for both absolute and relative residual
/// tolerances.
pub fn solve_qp(qp: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    let settings = AdmmSettings {
        tol_abs: tol,
        tol_rel: tol,
        max_iter,
        ..AdmmSettings::default()
    };
    let mut solver = AdmmSolver::new(qp, settings)?;
    solver.solve(&qp.lin)
}

pub const DEFAULT_QP_TOL: f64 = 1e-8;
pub const DEFAULT_QP_MAX_ITER: usize = 50_000;

/// Exact Euclidean projection onto the probability simplex
/// `{x >= 0, sum x = 1}` by the sort-and-threshold algorithm.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    assert!(n > 0, "cannot project an empty vector");
    let mut sorted = v.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut tau = 0.0;
    for (j, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let t = (cumsum - 1.0) / (j + 1) as f64;
        if u - t > 0.0 {
            tau = t;
        } else {
            break;
        }
    }
    v.iter().map(|&vi| (vi - tau).max(0.0)).collect()
}

/// Euclidean projection onto `{x : Ax = b, Gx <= h}` via a QP solve.
pub fn project_polyhedron(
    v: &[f64],
    a_eq: &Matrix,
    b_eq: &[f64],
    g_ineq: &Matrix,
    h_ineq: &[f64],
) -> Result<Vec<f64>> {
    let mut proj = PolyhedronProjector::new(v.len(), a_eq, b_eq, g_ineq, h_ineq)?;
    proj.project(v)
}

/// Reusable projector onto a fixed polyhedron; consecutive projections of
/// nearby points warm-start each other.
pub struct PolyhedronProjector {
    solver: AdmmSolver,
}

impl PolyhedronProjector {
    pub fn new(
        n: usize,
        a_eq: &Matrix,
        b_eq: &[f64],
        g_ineq: &Matrix,
        h_ineq: &[f64],
    ) -> Result<Self> {
        let mut quad = Matrix::zeros(n, n);
        for i in 0..n {
            quad.set(i, i, 2.0);
        }
        let qp = QpProblem {
            quad,
            lin: vec![0.0; n],
            a_eq: a_eq.clone(),
            b_eq: b_eq.to_vec(),
            g_ineq: g_ineq.clone(),
            h_ineq: h_ineq.to_vec(),
        };
        let solver = AdmmSolver::new(&qp, AdmmSettings::default())?;
        Ok(PolyhedronProjector { solver })
    }

    pub fn project(&mut self, v: &[f64]) -> Result<Vec<f64>> {
        let lin: Vec<f64> = v.iter().map(|&vi| -2.0 * vi).collect();
        let sol = self.solver.solve(&lin)?;
        match sol.status {
            QpStatus::Optimal => Ok(sol.x),
            QpStatus::Infeasible => Err(Error::Infeasible(
                "projection target polyhedron is empty".to_string(),
            )),
            QpStatus::MaxIter => Err(Error::NoConvergence(format!(
                "projection stopped at residuals ({:.3e}, {:.3e})",
                sol.primal_residual, sol.dual_residual
            ))),
        }
    }

    /// Projection together with its optimal stacked duals, used when the
    /// projection itself must be differentiated.
    pub fn project_with_duals(&mut self, v: &[f64]) -> Result<QpSolution> {
        let lin: Vec<f64> = v.iter().map(|&vi| -2.0 * vi).collect();
        let sol = self.solver.solve(&lin)?;
        match sol.status {
            QpStatus::Optimal => Ok(sol),
            QpStatus::Infeasible => Err(Error::Infeasible(
                "projection target polyhedron is empty".to_string(),
            )),
            QpStatus::MaxIter => Err(Error::NoConvergence(
                "projection did not converge".to_string(),
            )),
        }
    }
}

/// Gradient of a scalar loss with respect to the QP's linear term, by solving
/// the transposed KKT differential system at the solution. Requires strict
/// complementarity; degenerate active sets surface as an error.
pub fn qp_backward(qp: &QpProblem, sol: &QpSolution, dl_dx: &[f64]) -> Result<Vec<f64>> {
    if sol.status != QpStatus::Optimal {
        return Err(Error::contract("qp_backward needs an optimal solution"));
    }
    let n = qp.n();
    if dl_dx.len() != n {
        return Err(Error::contract("dl_dx dimension mismatch"));
    }
    let mi = qp.m_ineq();
    let me = qp.m_eq();
    let dim = n + mi + me;
    let mut k = Matrix::zeros(dim, dim);
    for i in 0..n {
        for j in 0..n {
            k.set(i, j, qp.quad.get(i, j));
        }
        for r in 0..mi {
            k.set(i, n + r, qp.g_ineq.get(r, i));
        }
        for r in 0..me {
            k.set(i, n + mi + r, qp.a_eq.get(r, i));
        }
    }
    let gx = if mi > 0 { qp.g_ineq.matvec(&sol.x) } else { vec![] };
    for r in 0..mi {
        let lam = sol.dual_ineq[r];
        for j in 0..n {
            k.set(n + r, j, lam * qp.g_ineq.get(r, j));
        }
        k.set(n + r, n + r, gx[r] - qp.h_ineq[r]);
    }
    for r in 0..me {
        for j in 0..n {
            k.set(n + mi + r, j, qp.a_eq.get(r, j));
        }
    }
    let lu = LuFactors::new(&k)
        .map_err(|_| Error::Degenerate("singular KKT differential system".to_string()))?;
    if lu.pivot_ratio() < 1e-12 {
        return Err(Error::Degenerate(format!(
            "ill-conditioned KKT system (pivot ratio {:.3e})",
            lu.pivot_ratio()
        )));
    }
    let mut rhs = vec![0.0; dim];
    rhs[..n].copy_from_slice(dl_dx);
    let w = lu.solve_transpose(&rhs);
    Ok(w[..n].iter().map(|&v| -v).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn simplex_qp(n: usize, quad: Matrix, lin: Vec<f64>) -> QpProblem {
        let mut g = Matrix::zeros(n, n);
        for i in 0..n {
            g.set(i, i, -1.0);
        }
        QpProblem {
            quad,
            lin,
            a_eq: Matrix::from_vec(1, n, vec![1.0; n]).unwrap(),
            b_eq: vec![1.0],
            g_ineq: g,
            h_ineq: vec![0.0; n],
        }
    }

    #[test]
    fn min_norm_on_simplex_is_uniform() {
        let n = 3;
        let qp = simplex_qp(n, {
            let mut q = Matrix::zeros(n, n);
            for i in 0..n {
                q.set(i, i, 2.0);
            }
            q
        }, vec![0.0; n]);
        let sol = solve_qp(&qp, 1e-8, 50_000).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        for &xi in &sol.x {
            assert!((xi - 1.0 / 3.0).abs() < 1e-7, "x = {:?}", sol.x);
        }
        let res = kkt_residuals(&qp, &sol.x, &sol.dual_eq, &sol.dual_ineq);
        assert!(res.max() < 1e-6, "kkt residuals {res:?}");
    }

    #[test]
    fn box_constrained_scalar() {
        // min 0.5 x^2 - 2x s.t. x >= 0  → x = 2 (constraint inactive)
        let qp = QpProblem {
            quad: Matrix::from_vec(1, 1, vec![1.0]).unwrap(),
            lin: vec![-2.0],
            a_eq: Matrix::zeros(0, 1),
            b_eq: vec![],
            g_ineq: Matrix::from_vec(1, 1, vec![-1.0]).unwrap(),
            h_ineq: vec![0.0],
        };
        let sol = solve_qp(&qp, 1e-8, 50_000).unwrap();
        assert_eq!(sol.status, QpStatus::Optimal);
        assert!((sol.x[0] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn detects_infeasible() {
        // x >= 1 and x <= 0 simultaneously
        let qp = QpProblem {
            quad: Matrix::from_vec(1, 1, vec![2.0]).unwrap(),
            lin: vec![0.0],
            a_eq: Matrix::zeros(0, 1),
            b_eq: vec![],
            g_ineq: Matrix::from_vec(2, 1, vec![-1.0, 1.0]).unwrap(),
            h_ineq: vec![-1.0, 0.0],
        };
        let sol = solve_qp(&qp, 1e-8, 50_000).unwrap();
        assert_eq!(sol.status, QpStatus::Infeasible);
    }

    #[test]
    fn simplex_projection_basics() {
        let on = vec![0.25, 0.5, 0.25];
        let p = project_simplex(&on);
        for (a, b) in p.iter().zip(&on) {
            assert!((a - b).abs() < 1e-15);
        }
        let p2 = project_simplex(&[2.0, 0.0, 0.0]);
        assert!((p2[0] - 1.0).abs() < 1e-15);
        assert_eq!(&p2[1..], &[0.0, 0.0]);
    }

    #[test]
    fn simplex_projection_matches_qp() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.5)).collect();
            let direct = project_simplex(&v);
            let mut quad = Matrix::zeros(6, 6);
            for i in 0..6 {
                quad.set(i, i, 2.0);
            }
            let qp = simplex_qp(6, quad, v.iter().map(|&x| -2.0 * x).collect());
            let sol = solve_qp(&qp, 1e-10, 100_000).unwrap();
            for (a, b) in direct.iter().zip(&sol.x) {
                assert!((a - b).abs() < 1e-8, "{direct:?} vs {:?}", sol.x);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn simplex_projection_idempotent_and_nonexpansive(
            v in proptest::collection::vec(-5.0f64..5.0, 2..8),
            w in proptest::collection::vec(-5.0f64..5.0, 2..8),
        ) {
            let p = project_simplex(&v);
            let sum: f64 = p.iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-12);
            proptest::prop_assert!(p.iter().all(|&x| x >= 0.0));
            let pp = project_simplex(&p);
            for (a, b) in p.iter().zip(&pp) {
                proptest::prop_assert!((a - b).abs() < 1e-12);
            }
            // 1-Lipschitz on a matching-length pair
            let m = v.len().min(w.len());
            let pv = project_simplex(&v[..m]);
            let pw = project_simplex(&w[..m]);
            let d_in = linalg::norm2(&linalg::sub(&v[..m], &w[..m]));
            let d_out = linalg::norm2(&linalg::sub(&pv, &pw));
            proptest::prop_assert!(d_out <= d_in + 1e-12);
        }
    }

    #[test]
    fn polyhedron_projection_identity_and_halfspace() {
        // feasible point is a fixed point
        let a = Matrix::zeros(0, 2);
        let g = Matrix::from_vec(1, 2, vec![-1.0, 0.0]).unwrap(); // -x1 <= -1 i.e. x1 >= 1
        let h = vec![-1.0];
        let v = vec![2.0, 0.5];
        let p = project_polyhedron(&v, &a, &[], &g, &h).unwrap();
        assert!((p[0] - 2.0).abs() < 1e-8 && (p[1] - 0.5).abs() < 1e-8);
        let p2 = project_polyhedron(&[0.0, 0.0], &a, &[], &g, &h).unwrap();
        assert!((p2[0] - 1.0).abs() < 1e-7 && p2[1].abs() < 1e-7, "{p2:?}");
    }

    #[test]
    fn qp_backward_unconstrained_closed_form() {
        // x* = -Q^{-1} q, dL/dq = -Q^{-1} dl_dx
        let quad = Matrix::from_rows(&[vec![3.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let qp = QpProblem {
            quad: quad.clone(),
            lin: vec![1.0, -1.0],
            a_eq: Matrix::zeros(0, 2),
            b_eq: vec![],
            g_ineq: Matrix::zeros(0, 2),
            h_ineq: vec![],
        };
        let sol = solve_qp(&qp, 1e-10, 100_000).unwrap();
        let dl_dx = vec![0.7, -0.3];
        let grad = qp_backward(&qp, &sol, &dl_dx).unwrap();
        let expect = linalg::solve_linear(&quad, &dl_dx).unwrap();
        for (g, e) in grad.iter().zip(&expect) {
            assert!((g + e).abs() < 1e-8, "{grad:?} vs -{expect:?}");
        }
    }

    #[test]
    fn qp_backward_equality_closed_form() {
        // 2x2 QP with one equality; differentiate via the inverse KKT block,
        // worked symbolically: K = [[Q, a],[a', 0]], dx/dq = -(K^{-1})_{xx}.
        let quad = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]).unwrap();
        let a_eq = Matrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let qp = QpProblem {
            quad,
            lin: vec![0.5, -1.0],
            a_eq,
            b_eq: vec![1.0],
            g_ineq: Matrix::zeros(0, 2),
            h_ineq: vec![],
        };
        let sol = solve_qp(&qp, 1e-10, 100_000).unwrap();
        let dl_dx = vec![1.0, 2.0];
        let grad = qp_backward(&qp, &sol, &dl_dx).unwrap();
        // K^{-1} for [[2,0,1],[0,4,1],[1,1,0]]: solve K w = e_i columns.
        let k = Matrix::from_rows(&[
            vec![2.0, 0.0, 1.0],
            vec![0.0, 4.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ])
        .unwrap();
        let lu = LuFactors::new(&k).unwrap();
        let w = lu.solve_transpose(&[1.0, 2.0, 0.0]);
        for (g, e) in grad.iter().zip(&w[..2]) {
            assert!((g + e).abs() < 1e-8);
        }
    }

    #[test]
    fn qp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 4;
        for trial in 0..5 {
            // random PSD Q with margin, simplex constraints
            let mut b = Matrix::zeros(n, n);
            for v in b.data_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let mut quad = b.matmul(&b.transpose());
            for i in 0..n {
                quad.set(i, i, quad.get(i, i) + 1.0);
            }
            let lin: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let qp = simplex_qp(n, quad, lin.clone());
            let sol = solve_qp(&qp, 1e-10, 200_000).unwrap();
            let dl_dx: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let grad = match qp_backward(&qp, &sol, &dl_dx) {
                Ok(g) => g,
                Err(Error::Degenerate(_)) => continue, // random degeneracy, skip
                Err(e) => panic!("{e}"),
            };
            let h = 1e-6;
            for j in 0..n {
                let mut qp_p = qp.clone();
                qp_p.lin[j] += h;
                let xp = solve_qp(&qp_p, 1e-10, 200_000).unwrap().x;
                let mut qp_m = qp.clone();
                qp_m.lin[j] -= h;
                let xm = solve_qp(&qp_m, 1e-10, 200_000).unwrap().x;
                let num: f64 = xp
                    .iter()
                    .zip(&xm)
                    .zip(&dl_dx)
                    .map(|((p, m), d)| d * (p - m) / (2.0 * h))
                    .sum();
                let denom = grad[j].abs().max(num.abs()).max(1e-4);
                assert!(
                    (grad[j] - num).abs() / denom < 1e-4,
                    "trial {trial} coord {j}: analytic {} numeric {num}",
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn warm_started_resolve_is_fast_and_consistent() {
        let n = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut b = Matrix::zeros(n, n);
        for v in b.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mut quad = b.matmul(&b.transpose());
        for i in 0..n {
            quad.set(i, i, quad.get(i, i) + 0.5);
        }
        let qp = simplex_qp(n, quad, vec![0.0; n]);
        let mut solver = AdmmSolver::new(&qp, AdmmSettings::default()).unwrap();
        let lin0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cold = solver.solve(&lin0).unwrap();
        let lin1: Vec<f64> = lin0.iter().map(|v| v + 1e-3).collect();
        let warm = solver.solve(&lin1).unwrap();
        assert!(warm.iterations <= cold.iterations);
        // and matches a cold solve of the same problem
        let mut fresh = AdmmSolver::new(&qp, AdmmSettings::default()).unwrap();
        let reference = fresh.solve(&lin1).unwrap();
        for (a, b) in warm.x.iter().zip(&reference.x) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
