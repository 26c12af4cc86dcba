//! Feasibility restoration for model outputs at inference time.
//!
//! Three mechanisms, dispatched per problem: clip-and-normalize for the
//! simplex, Euclidean projection for polyhedra, and Newton least-squares on
//! the constraint residual system (inequalities entering through a ReLU so
//! only violated ones contribute).

use std::time::Instant;

use crate::error::{Error, Result};
use crate::linalg::{self, norm_inf, LuFactors, Matrix};
use crate::problems::{ParametricProblem, RestorationPolicy};

#[derive(Clone, Debug)]
pub struct RestorationResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `max_i [g_i]_+` after restoration.
    pub ineq_violation: f64,
    /// `max_j |h_j|` after restoration.
    pub eq_violation: f64,
    pub converged: bool,
    pub elapsed_secs: f64,
    /// Number of Newton steps that needed Tikhonov damping on `J'J`.
    pub damped_steps: usize,
}

impl RestorationResult {
    pub fn max_violation(&self) -> f64 {
        self.ineq_violation.max(self.eq_violation)
    }
}

/// `[x]_+ / sum([x]_+)`, exactly on the simplex. When no entry is positive
/// the output falls back to the uniform vector.
pub fn clip_normalize_simplex(x_hat: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = x_hat.iter().map(|&v| v.max(0.0)).collect();
    let sum: f64 = clipped.iter().sum();
    if sum <= 0.0 {
        return vec![1.0 / x_hat.len() as f64; x_hat.len()];
    }
    clipped.iter().map(|&v| v / sum).collect()
}

/// Newton least-squares iteration on a residual system `f(x) = 0`:
/// `x <- x + dx` with `dx` solving `min ||J dx + f||_2`, stopping when every
/// `|f_i| < tol`. Rank-deficient normal equations get Tikhonov damping.
///
/// The residual norm is reported in `eq_violation` (the system is treated as
/// equalities; callers with inequalities apply a ReLU before calling).
pub fn newton_restore<F, J>(
    residuals: F,
    jacobian: J,
    x0: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<RestorationResult>
where
    F: Fn(&[f64]) -> Vec<f64>,
    J: Fn(&[f64]) -> Matrix,
{
    let start = Instant::now();
    let mut x = x0.to_vec();
    let mut damped_steps = 0usize;
    let mut iterations = 0usize;
    loop {
        let f = residuals(&x);
        if !f.iter().all(|v| v.is_finite()) {
            return Err(Error::StepSize(
                "non-finite residuals in Newton restore".into(),
            ));
        }
        let worst = norm_inf(&f);
        if worst < tol {
            return Ok(RestorationResult {
                x,
                iterations,
                ineq_violation: 0.0,
                eq_violation: worst,
                converged: true,
                elapsed_secs: start.elapsed().as_secs_f64(),
                damped_steps,
            });
        }
        if iterations >= max_iter {
            return Ok(RestorationResult {
                x,
                iterations,
                ineq_violation: 0.0,
                eq_violation: worst,
                converged: false,
                elapsed_secs: start.elapsed().as_secs_f64(),
                damped_steps,
            });
        }
        let jac = jacobian(&x);
        debug_assert_eq!(jac.rows(), f.len());
        debug_assert_eq!(jac.cols(), x.len());
        // normal equations J'J dx = -J'f
        let jt = jac.transpose();
        let mut jtj = jt.matmul(&jac);
        let rhs: Vec<f64> = jt.matvec(&f).iter().map(|v| -v).collect();
        let dx = match LuFactors::new(&jtj) {
            Ok(lu) if lu.pivot_ratio() > 1e-12 => lu.solve(&rhs),
            _ => {
                damped_steps += 1;
                let damp = 1e-10 * jtj.max_abs().max(1.0);
                for i in 0..jtj.rows() {
                    let v = jtj.get(i, i) + damp;
                    jtj.set(i, i, v);
                }
                LuFactors::new(&jtj)
                    .map_err(|e| Error::Singular(format!("damped normal equations: {e}")))?
                    .solve(&rhs)
            }
        };
        linalg::axpy(1.0, &dx, &mut x);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::StepSize(
                "Newton step produced non-finite iterate".into(),
            ));
        }
        iterations += 1;
    }
}

/// Applies the problem's declared restoration policy to a candidate solution
/// and reports the result with wall-clock timing.
pub fn restore_for(
    problem: &dyn ParametricProblem,
    x_hat: &[f64],
    zeta: &[f64],
) -> Result<RestorationResult> {
    let start = Instant::now();
    match problem.restoration_policy() {
        RestorationPolicy::ClipSimplex => {
            let x = clip_normalize_simplex(x_hat);
            Ok(finish(problem, x, zeta, 1, true, 0, start))
        }
        RestorationPolicy::ProjectPolyhedron => {
            let constraints = problem.linear_constraints().ok_or_else(|| {
                Error::Unsupported("projection restoration needs linear constraints".into())
            })?;
            let x = constraints.projector()?.project(x_hat)?;
            Ok(finish(problem, x, zeta, 1, true, 0, start))
        }
        RestorationPolicy::NewtonLeastSquares => {
            let res = newton_restore(
                |x| relu_residual_system(problem, x, zeta),
                |x| relu_residual_jacobian(problem, x, zeta),
                x_hat,
                1e-6,
                50,
            )?;
            Ok(finish(
                problem,
                res.x,
                zeta,
                res.iterations,
                res.converged,
                res.damped_steps,
                start,
            ))
        }
    }
}

fn finish(
    problem: &dyn ParametricProblem,
    x: Vec<f64>,
    zeta: &[f64],
    iterations: usize,
    converged: bool,
    damped_steps: usize,
    start: Instant,
) -> RestorationResult {
    let ineq = problem
        .ineq_residuals(&x, zeta)
        .iter()
        .fold(0.0f64, |m, &v| m.max(v))
        .max(0.0);
    let eq = norm_inf(&problem.eq_residuals(&x, zeta));
    RestorationResult {
        x,
        iterations,
        ineq_violation: ineq,
        eq_violation: eq,
        converged,
        elapsed_secs: start.elapsed().as_secs_f64(),
        damped_steps,
    }
}

/// Restoration engine that reuses the projection factorization across calls;
/// training loops and test-split evaluation restore thousands of points
/// against the same constraint set.
pub struct Restorer<'p> {
    problem: &'p dyn ParametricProblem,
    projector: Option<crate::qp::PolyhedronProjector>,
}

impl<'p> Restorer<'p> {
    pub fn new(problem: &'p dyn ParametricProblem) -> Result<Self> {
        let projector = match problem.restoration_policy() {
            RestorationPolicy::ProjectPolyhedron => {
                let constraints = problem.linear_constraints().ok_or_else(|| {
                    Error::Unsupported("projection restoration needs linear constraints".into())
                })?;
                Some(constraints.projector()?)
            }
            _ => None,
        };
        Ok(Restorer { problem, projector })
    }

    pub fn restore(&mut self, x_hat: &[f64], zeta: &[f64]) -> Result<RestorationResult> {
        match (self.problem.restoration_policy(), &mut self.projector) {
            (RestorationPolicy::ProjectPolyhedron, Some(projector)) => {
                let start = Instant::now();
                let x = projector.project(x_hat)?;
                Ok(finish(self.problem, x, zeta, 1, true, 0, start))
            }
            _ => restore_for(self.problem, x_hat, zeta),
        }
    }
}

/// Stacked residual system `[relu(g(x)); h(x)]`.
pub fn relu_residual_system(
    problem: &dyn ParametricProblem,
    x: &[f64],
    zeta: &[f64],
) -> Vec<f64> {
    let mut f: Vec<f64> = problem
        .ineq_residuals(x, zeta)
        .iter()
        .map(|&g| g.max(0.0))
        .collect();
    f.extend(problem.eq_residuals(x, zeta));
    f
}

/// Jacobian of [`relu_residual_system`]; rows of satisfied inequalities are
/// zero (the ReLU is flat there).
pub fn relu_residual_jacobian(
    problem: &dyn ParametricProblem,
    x: &[f64],
    zeta: &[f64],
) -> Matrix {
    let g = problem.ineq_residuals(x, zeta);
    let jg = problem.ineq_jacobian(x, zeta);
    let jh = problem.eq_jacobian(x, zeta);
    let n = x.len();
    let mut jac = Matrix::zeros(g.len() + jh.rows(), n);
    for (i, &gi) in g.iter().enumerate() {
        if gi > 0.0 {
            jac.row_mut(i).copy_from_slice(jg.row(i));
        }
    }
    for r in 0..jh.rows() {
        jac.row_mut(g.len() + r).copy_from_slice(jh.row(r));
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::Toy2dProblem;

    #[test]
    fn clip_normalize_cases() {
        let x = clip_normalize_simplex(&[0.2, -0.1, 0.3]);
        assert_eq!(x, vec![0.4, 0.0, 0.6]);
        // already feasible input is unchanged
        let y = clip_normalize_simplex(&[0.25, 0.75]);
        assert_eq!(y, vec![0.25, 0.75]);
        // all-negative input falls back to uniform
        let z = clip_normalize_simplex(&[-1.0, -2.0, -3.0, -4.0]);
        assert_eq!(z, vec![0.25; 4]);
    }

    #[test]
    fn clip_normalize_idempotent_and_on_simplex() {
        let inputs = [
            vec![0.9, -3.0, 0.4, 0.0],
            vec![1e-9, 1e-9],
            vec![5.0, 5.0, 5.0],
        ];
        for x_hat in inputs {
            let x = clip_normalize_simplex(&x_hat);
            let s: f64 = x.iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(x.iter().all(|&v| v >= 0.0));
            let xx = clip_normalize_simplex(&x);
            assert_eq!(x, xx);
        }
    }

    #[test]
    fn newton_one_step_on_affine_system() {
        // f(x) = Ax - b with invertible A converges in one iteration
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 3.0]]).unwrap();
        let b = vec![1.0, 6.0];
        let res = newton_restore(
            |x| linalg::sub(&a.matvec(x), &b),
            |_| a.clone(),
            &[10.0, -4.0],
            1e-6,
            10,
        )
        .unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        assert!((res.x[1] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn newton_scalar_square_root() {
        // f(x) = x^2 - 4 from x0 = 3 reaches 2 within 5 iterations
        let res = newton_restore(
            |x| vec![x[0] * x[0] - 4.0],
            |x| Matrix::from_vec(1, 1, vec![2.0 * x[0]]).unwrap(),
            &[3.0],
            1e-6,
            5,
        )
        .unwrap();
        assert!(res.converged, "residual {}", res.eq_violation);
        assert!((res.x[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn restore_toy2d_is_identity_on_feasible_points() {
        let toy = Toy2dProblem::new();
        let zeta = [1.0, 1.0];
        let feasible = [0.0, 0.0];
        let res = restore_for(&toy, &feasible, &zeta).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 0);
        assert_eq!(res.x, feasible.to_vec());
        assert!(res.elapsed_secs >= 0.0);
    }

    #[test]
    fn restore_toy2d_repairs_violations() {
        let toy = Toy2dProblem::new();
        let zeta = [1.0, 1.0];
        let bad = [0.5, 0.5]; // violates all three halfplanes
        let res = restore_for(&toy, &bad, &zeta).unwrap();
        assert!(res.converged, "violations {:?}", res.max_violation());
        assert!(res.ineq_violation < 1e-6);
    }
}
