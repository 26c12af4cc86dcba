//! Predict-then-optimize baselines: two-stage regression, end-to-end training
//! through a differentiable optimization layer (KKT implicit differentiation
//! for the convex QP, projected-gradient fixed-point differentiation for the
//! nonconvex QP), end-to-end training through a frozen pretrained proxy, and
//! the distribution-shift probe.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, LuFactors, Matrix};
use crate::lto::{EpochStats, InputMode, TrainedModel};
use crate::nn::{Adam, Head, Mlp};
use crate::problems::{
    derive_seed, NonconvexQpProblem, ParametricProblem, PortfolioProblem,
};
use crate::qp::{self, AdmmSettings, AdmmSolver, QpStatus};
use crate::restore::Restorer;

/// Prediction network `z -> zeta_hat` with `m` hidden layers.
#[derive(Clone, Debug)]
pub struct PredictorModel {
    pub net: Mlp,
    pub m_hidden: usize,
    pub history: Vec<EpochStats>,
    pub lr_used: f64,
    /// Batch elements skipped because their sensitivity system was singular
    /// or their inner solve failed to converge.
    pub skipped_elements: usize,
}

impl PredictorModel {
    pub fn predict(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(z)
    }
}

#[derive(Clone, Debug)]
pub struct PtoTrainConfig {
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_width: usize,
    pub patience: usize,
    pub dropout: f64,
}

impl PtoTrainConfig {
    pub fn new(seed: u64) -> Self {
        PtoTrainConfig {
            lr_grid: vec![5e-3, 1e-3, 1e-4],
            epochs: 150,
            batch_size: 50,
            seed,
            hidden_width: 64,
            patience: 40,
            dropout: 0.0,
        }
    }
}

fn predictor_dims(dataset: &Dataset, m: usize, hidden: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(m + 2);
    dims.push(dataset.feature_dim());
    dims.extend(std::iter::repeat(hidden).take(m.max(1)));
    dims.push(dataset.param_dim());
    dims
}

/// Full two-stage inference: solve the problem at the predicted parameters.
pub fn predict_then_solve(
    problem: &dyn ParametricProblem,
    predictor: &PredictorModel,
    z: &[f64],
) -> Result<Vec<f64>> {
    let zeta_hat = predictor.predict(z)?;
    problem.ground_truth(&zeta_hat)
}

// ---------------------------------------------------------------------------
// Two-stage
// ---------------------------------------------------------------------------

/// Parameter regression by MSE, early-stopped on validation MSE. The
/// downstream optimization plays no role in training.
pub fn two_stage_train(
    dataset: &Dataset,
    m: usize,
    cfg: &PtoTrainConfig,
) -> Result<PredictorModel> {
    dataset.validate()?;
    let mut last_err = None;
    for &lr in &cfg.lr_grid {
        match two_stage_at(dataset, m, cfg, lr) {
            Err(Error::TrainingDiverged(msg)) => {
                last_err = Some(Error::TrainingDiverged(format!("lr {lr}: {msg}")))
            }
            other => return other,
        }
    }
    Err(last_err.unwrap_or_else(|| Error::contract("empty learning-rate grid")))
}

fn two_stage_at(
    dataset: &Dataset,
    m: usize,
    cfg: &PtoTrainConfig,
    lr: f64,
) -> Result<PredictorModel> {
    let dims = predictor_dims(dataset, m, cfg.hidden_width);
    let p = dataset.param_dim();
    let mut net = Mlp::init(&dims, Head::Linear, cfg.seed)?;
    let mut adam = Adam::new(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x25));
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, net.clone(), 0usize);

    let mse_on = |net: &Mlp, idxs: &[usize]| -> Result<f64> {
        let mut total = 0.0;
        for &i in idxs {
            let pred = net.forward(&dataset.z[i])?;
            let diff = linalg::sub(&pred, &dataset.zeta[i]);
            total += linalg::dot(&diff, &diff);
        }
        Ok(total / idxs.len().max(1) as f64)
    };

    for epoch in 0..cfg.epochs {
        let batches = crate::lto::shuffled_batches(&dataset.splits.train, cfg.batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for batch in &batches {
            let mut inputs = Matrix::zeros(batch.len(), dataset.feature_dim());
            for (r, &i) in batch.iter().enumerate() {
                inputs.row_mut(r).copy_from_slice(&dataset.z[i]);
            }
            let (out, tape) = net.forward_batch_train(&inputs, cfg.dropout, &mut rng)?;
            let mut dl_dy = Matrix::zeros(batch.len(), p);
            let scale = 1.0 / batch.len() as f64;
            for (r, &i) in batch.iter().enumerate() {
                let diff = linalg::sub(out.row(r), &dataset.zeta[i]);
                epoch_loss += linalg::dot(&diff, &diff);
                count += 1;
                for (o, &d) in dl_dy.row_mut(r).iter_mut().zip(&diff) {
                    *o = 2.0 * d * scale;
                }
            }
            if !epoch_loss.is_finite() {
                return Err(Error::TrainingDiverged("non-finite MSE".into()));
            }
            let (grads, _) = net.backward(&tape, &dl_dy)?;
            adam.step(&mut net, &grads, lr)?;
        }
        let val_mse = mse_on(&net, &dataset.splits.val)?;
        history.push(EpochStats {
            epoch,
            loss: epoch_loss / count.max(1) as f64,
            mean_violation: 0.0,
            val_regret_pct: None,
        });
        if val_mse < best.0 {
            best = (val_mse, net.clone(), 0);
        } else {
            best.2 += 1;
            if best.2 > cfg.patience {
                break;
            }
        }
    }
    Ok(PredictorModel {
        net: best.1,
        m_hidden: m,
        history,
        lr_used: lr,
        skipped_elements: 0,
    })
}

// ---------------------------------------------------------------------------
// End-to-end through the convex QP (KKT implicit differentiation)
// ---------------------------------------------------------------------------

/// Trains the predictor by descending `f(x_star(zeta_hat), zeta)` where the
/// inner argmin is the portfolio QP; the gradient flows through the solution
/// via the transposed KKT system. Degenerate elements are skipped and counted.
pub fn epo_train_qp(
    problem: &PortfolioProblem,
    dataset: &Dataset,
    m: usize,
    cfg: &PtoTrainConfig,
) -> Result<PredictorModel> {
    dataset.validate()?;
    let mut last_err = None;
    for &lr in &cfg.lr_grid {
        match epo_qp_at(problem, dataset, m, cfg, lr) {
            Err(Error::TrainingDiverged(msg)) => {
                last_err = Some(Error::TrainingDiverged(format!("lr {lr}: {msg}")))
            }
            other => return other,
        }
    }
    Err(last_err.unwrap_or_else(|| Error::contract("empty learning-rate grid")))
}

fn epo_qp_at(
    problem: &PortfolioProblem,
    dataset: &Dataset,
    m: usize,
    cfg: &PtoTrainConfig,
    lr: f64,
) -> Result<PredictorModel> {
    let x_star = dataset
        .x_star
        .as_ref()
        .ok_or_else(|| Error::contract("end-to-end training needs targets for validation"))?;
    let dims = predictor_dims(dataset, m, cfg.hidden_width);
    let p = dataset.param_dim();
    let mut net = Mlp::init(&dims, Head::Linear, cfg.seed)?;
    let mut adam = Adam::new(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xE90));
    // one factorization for the whole run: only the linear term varies
    let template = problem.to_qp(&vec![0.0; p]);
    let mut solver = AdmmSolver::new(&template, AdmmSettings::default())?;
    let n_train_max = dataset.len();
    let mut warm: Vec<Option<(Vec<f64>, Vec<f64>, Vec<f64>)>> = vec![None; n_train_max];

    let mut history = Vec::new();
    let mut best = (f64::INFINITY, net.clone(), 0usize);
    let mut skipped = 0usize;

    for epoch in 0..cfg.epochs {
        let batches = crate::lto::shuffled_batches(&dataset.splits.train, cfg.batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for batch in &batches {
            let mut inputs = Matrix::zeros(batch.len(), dataset.feature_dim());
            for (r, &i) in batch.iter().enumerate() {
                inputs.row_mut(r).copy_from_slice(&dataset.z[i]);
            }
            let (out, tape) = net.forward_batch_train(&inputs, cfg.dropout, &mut rng)?;
            let mut dl_dy = Matrix::zeros(batch.len(), p);
            let scale = 1.0 / batch.len() as f64;
            for (r, &i) in batch.iter().enumerate() {
                let zeta_hat = out.row(r);
                let zeta_true = &dataset.zeta[i];
                let lin: Vec<f64> = zeta_hat.iter().map(|&v| -v).collect();
                solver.set_warm_state(warm[i].take());
                let sol = solver.solve(&lin)?;
                warm[i] = solver.warm_state().cloned();
                if sol.status != QpStatus::Optimal {
                    skipped += 1;
                    continue;
                }
                epoch_loss += problem.objective(&sol.x, zeta_true);
                count += 1;
                let dl_dx = problem.grad_x_objective(&sol.x, zeta_true);
                let mut qp_inst = problem.to_qp(zeta_hat);
                qp_inst.lin = lin;
                match qp::qp_backward(&qp_inst, &sol, &dl_dx) {
                    Ok(dl_dq) => {
                        // q = -zeta_hat, so dL/dzeta_hat = -dL/dq
                        for (o, &v) in dl_dy.row_mut(r).iter_mut().zip(&dl_dq) {
                            *o = -v * scale;
                        }
                    }
                    Err(Error::Degenerate(_)) | Err(Error::Singular(_)) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            if !epoch_loss.is_finite() {
                return Err(Error::TrainingDiverged("non-finite EPO loss".into()));
            }
            let (grads, _) = net.backward(&tape, &dl_dy)?;
            adam.step(&mut net, &grads, lr)?;
        }
        // validation percent regret of the full predict-then-solve pipeline
        let mut gap_sum = 0.0;
        let mut norm_sum = 0.0;
        for &i in &dataset.splits.val {
            let zeta_hat = net.forward(&dataset.z[i])?;
            let lin: Vec<f64> = zeta_hat.iter().map(|&v| -v).collect();
            let sol = solver.solve(&lin)?;
            let f_star = problem.objective(&x_star[i], &dataset.zeta[i]);
            gap_sum += problem.objective(&sol.x, &dataset.zeta[i]) - f_star;
            norm_sum += f_star.abs();
        }
        let val = 100.0 * gap_sum / norm_sum.max(1e-12);
        history.push(EpochStats {
            epoch,
            loss: epoch_loss / count.max(1) as f64,
            mean_violation: 0.0,
            val_regret_pct: Some(val),
        });
        if val < best.0 {
            best = (val, net.clone(), 0);
        } else {
            best.2 += 1;
            if best.2 > cfg.patience {
                break;
            }
        }
    }
    Ok(PredictorModel {
        net: best.1,
        m_hidden: m,
        history,
        lr_used: lr,
        skipped_elements: skipped,
    })
}

// ---------------------------------------------------------------------------
// End-to-end through the nonconvex QP (PGD fixed-point differentiation)
// ---------------------------------------------------------------------------

/// Local sensitivity of the PGD fixed point `x = proj(x - a grad f(x, zeta))`:
/// given `dL/dx`, returns `dL/dzeta` by solving the transposed linear system
/// `(I - dT/dx)' w = dL/dx` and applying `(dT/dzeta)'`. The projection is
/// differentiated through its active set at the solution.
pub fn pgd_fixed_point_backward(
    problem: &NonconvexQpProblem,
    x_fp: &[f64],
    zeta_hat: &[f64],
    dl_dx: &[f64],
    step: f64,
    activity_tol: f64,
) -> Result<Vec<f64>> {
    let n = problem.n();
    let constraints = problem.linear_constraints().expect("linear constraints");
    // active rows of the projection at v = x - a grad f(x)
    let gx = constraints.g_ineq.matvec(x_fp);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for r in 0..constraints.a_eq.rows() {
        rows.push(constraints.a_eq.row(r).to_vec());
    }
    for r in 0..constraints.g_ineq.rows() {
        if constraints.h_ineq[r] - gx[r] <= activity_tol {
            rows.push(constraints.g_ineq.row(r).to_vec());
        }
    }
    // tangent-space projector P = I - N' (N N')^{-1} N
    let proj = if rows.is_empty() {
        Matrix::identity(n)
    } else {
        let nm = Matrix::from_rows(&rows)?;
        let nnt = nm.matmul(&nm.transpose());
        let lu = LuFactors::new(&nnt)
            .map_err(|_| Error::Degenerate("redundant active set at fixed point".into()))?;
        let mut p = Matrix::identity(n);
        // P -= N' (NN')^{-1} N, column by column
        for j in 0..n {
            let col: Vec<f64> = (0..nm.rows()).map(|r| nm.get(r, j)).collect();
            let w = lu.solve(&col);
            let corr = nm.matvec_t(&w);
            for i in 0..n {
                p.set(i, j, p.get(i, j) - corr[i]);
            }
        }
        p
    };
    // dT/dx = P (I - a H), H = diag(mu - zeta .* sin(x))
    let mut inner = Matrix::identity(n);
    for i in 0..n {
        let h_ii = problem.mu[i] - zeta_hat[i] * x_fp[i].sin();
        inner.set(i, i, 1.0 - step * h_ii);
    }
    let dt_dx = proj.matmul(&inner);
    // (I - dT/dx)' w = dL/dx
    let mut sys = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            sys.set(i, j, sys.get(i, j) - dt_dx.get(i, j));
        }
    }
    let lu = LuFactors::new(&sys)
        .map_err(|_| Error::Degenerate("singular fixed-point sensitivity system".into()))?;
    let w = lu.solve_transpose(dl_dx);
    // dL/dzeta = (P (-a C))' w = -a C (P w), C = diag(cos x)
    let pw = proj.matvec(&w);
    Ok((0..n).map(|i| -step * x_fp[i].cos() * pw[i]).collect())
}

/// End-to-end training through the nonconvex QP via the PGD fixed point.
/// Elements whose inner solve misses the fixed-point tolerance or whose
/// sensitivity system is singular are skipped and counted.
pub fn epo_train_pgd(
    problem: &NonconvexQpProblem,
    dataset: &Dataset,
    m: usize,
    cfg: &PtoTrainConfig,
) -> Result<PredictorModel> {
    dataset.validate()?;
    let mut last_err = None;
    for &lr in &cfg.lr_grid {
        match epo_pgd_at(problem, dataset, m, cfg, lr) {
            Err(Error::TrainingDiverged(msg)) => {
                last_err = Some(Error::TrainingDiverged(format!("lr {lr}: {msg}")))
            }
            other => return other,
        }
    }
    Err(last_err.unwrap_or_else(|| Error::contract("empty learning-rate grid")))
}

fn epo_pgd_at(
    problem: &NonconvexQpProblem,
    dataset: &Dataset,
    m: usize,
    cfg: &PtoTrainConfig,
    lr: f64,
) -> Result<PredictorModel> {
    let x_star = dataset
        .x_star
        .as_ref()
        .ok_or_else(|| Error::contract("end-to-end training needs targets for validation"))?;
    let dims = predictor_dims(dataset, m, cfg.hidden_width);
    let p = dataset.param_dim();
    let n = problem.n();
    let mut net = Mlp::init(&dims, Head::Linear, cfg.seed)?;
    let mut adam = Adam::new(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xE9D));
    let constraints = problem.linear_constraints().unwrap();
    let mut projector = constraints.projector()?;
    let pgd_cfg = problem.pgd;
    // per-sample solutions warm-start the next epoch's inner solves
    let mut x_cache: Vec<Option<Vec<f64>>> = vec![None; dataset.len()];

    let mut history = Vec::new();
    let mut best = (f64::INFINITY, net.clone(), 0usize);
    let mut skipped = 0usize;

    for epoch in 0..cfg.epochs {
        let batches = crate::lto::shuffled_batches(&dataset.splits.train, cfg.batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for batch in &batches {
            let mut inputs = Matrix::zeros(batch.len(), dataset.feature_dim());
            for (r, &i) in batch.iter().enumerate() {
                inputs.row_mut(r).copy_from_slice(&dataset.z[i]);
            }
            let (out, tape) = net.forward_batch_train(&inputs, cfg.dropout, &mut rng)?;
            let mut dl_dy = Matrix::zeros(batch.len(), p);
            let scale = 1.0 / batch.len() as f64;
            for (r, &i) in batch.iter().enumerate() {
                let zeta_hat = out.row(r);
                let zeta_true = &dataset.zeta[i];
                let x0 = x_cache[i].clone().unwrap_or_else(|| vec![0.0; n]);
                let solve = crate::problems::pgd_solve_with(
                    &mut projector,
                    problem,
                    zeta_hat,
                    &x0,
                    &pgd_cfg,
                );
                let res = match solve {
                    Ok(res) => res,
                    Err(_) => {
                        skipped += 1;
                        continue;
                    }
                };
                x_cache[i] = Some(res.x.clone());
                // fixed-point residual precondition
                if !res.converged || res.residual > pgd_cfg.tol {
                    skipped += 1;
                    continue;
                }
                epoch_loss += problem.objective(&res.x, zeta_true);
                count += 1;
                let dl_dx = problem.grad_x_objective(&res.x, zeta_true);
                match pgd_fixed_point_backward(problem, &res.x, zeta_hat, &dl_dx, pgd_cfg.step, 1e-7)
                {
                    Ok(dl_dzeta) => {
                        for (o, &v) in dl_dy.row_mut(r).iter_mut().zip(&dl_dzeta) {
                            *o = v * scale;
                        }
                    }
                    Err(Error::Degenerate(_)) | Err(Error::Singular(_)) => skipped += 1,
                    Err(e) => return Err(e),
                }
            }
            if !epoch_loss.is_finite() {
                return Err(Error::TrainingDiverged("non-finite EPO loss".into()));
            }
            let (grads, _) = net.backward(&tape, &dl_dy)?;
            adam.step(&mut net, &grads, lr)?;
        }
        // validation percent regret of predict-then-solve
        let mut gap_sum = 0.0;
        let mut norm_sum = 0.0;
        for &i in &dataset.splits.val {
            let zeta_hat = net.forward(&dataset.z[i])?;
            let x0 = x_cache[i].clone().unwrap_or_else(|| vec![0.0; n]);
            let res =
                crate::problems::pgd_solve_with(&mut projector, problem, &zeta_hat, &x0, &pgd_cfg)?;
            x_cache[i] = Some(res.x.clone());
            let f_star = problem.objective(&x_star[i], &dataset.zeta[i]);
            gap_sum += problem.objective(&res.x, &dataset.zeta[i]) - f_star;
            norm_sum += f_star.abs();
        }
        let val = 100.0 * gap_sum / norm_sum.max(1e-12);
        history.push(EpochStats {
            epoch,
            loss: epoch_loss / count.max(1) as f64,
            mean_violation: 0.0,
            val_regret_pct: Some(val),
        });
        if val < best.0 {
            best = (val, net.clone(), 0);
        } else {
            best.2 += 1;
            if best.2 > cfg.patience {
                break;
            }
        }
    }
    Ok(PredictorModel {
        net: best.1,
        m_hidden: m,
        history,
        lr_used: lr,
        skipped_elements: skipped,
    })
}

// ---------------------------------------------------------------------------
// End-to-end through a frozen pretrained proxy
// ---------------------------------------------------------------------------

/// Backward pass through a frozen proxy: given `dL/dx_hat`, returns
/// `dL/d(proxy input)`. Proxy parameters are never touched.
fn proxy_input_gradient(
    proxy: &TrainedModel,
    input: &[f64],
    dl_dx: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (raw, tape) = proxy.net.forward_taped(input)?;
    match &proxy.dc3 {
        None => {
            let dl = Matrix::from_vec(1, dl_dx.len(), dl_dx.to_vec())?;
            let (_, dl_din) = proxy.net.backward(&tape, &dl)?;
            Ok((raw, dl_din.row(0).to_vec()))
        }
        Some(rt) => {
            let (z, masks) = rt.correction_trace(&raw, rt.params.t_test);
            let x = rt.scatter(&z);
            let _ = x;
            let dz_corr = rt.gather_grad(dl_dx);
            let dz0 = rt.backward_corrections(&masks, &dz_corr);
            let dl = Matrix::from_vec(1, dz0.len(), dz0)?;
            let (_, dl_din) = proxy.net.backward(&tape, &dl)?;
            Ok((raw, dl_din.row(0).to_vec()))
        }
    }
}

/// Trains a predictor through a frozen proxy: the loss is
/// `f(proxy(C(z)), zeta)` and only the predictor's weights move. With
/// `pretrain_predictor`, the predictor starts from the two-stage solution.
pub fn epo_with_frozen_proxy(
    proxy: &TrainedModel,
    problem: &dyn ParametricProblem,
    dataset: &Dataset,
    m: usize,
    pretrain_predictor: bool,
    cfg: &PtoTrainConfig,
) -> Result<PredictorModel> {
    dataset.validate()?;
    if proxy.mode != InputMode::Lto {
        return Err(Error::contract(
            "frozen-proxy training needs a proxy trained on problem parameters",
        ));
    }
    let x_star = dataset
        .x_star
        .as_ref()
        .ok_or_else(|| Error::contract("frozen-proxy training needs targets for validation"))?;
    let p = dataset.param_dim();
    let mut net = if pretrain_predictor {
        two_stage_train(dataset, m, cfg)?.net
    } else {
        Mlp::init(&predictor_dims(dataset, m, cfg.hidden_width), Head::Linear, cfg.seed)?
    };
    let mut adam = Adam::new(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xF0A));
    let mut restorer = Restorer::new(problem)?;
    let lr = cfg.lr_grid.first().copied().unwrap_or(1e-3);

    let mut history = Vec::new();
    let mut best = (f64::INFINITY, net.clone(), 0usize);

    for epoch in 0..cfg.epochs {
        let batches = crate::lto::shuffled_batches(&dataset.splits.train, cfg.batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for batch in &batches {
            let mut inputs = Matrix::zeros(batch.len(), dataset.feature_dim());
            for (r, &i) in batch.iter().enumerate() {
                inputs.row_mut(r).copy_from_slice(&dataset.z[i]);
            }
            let (out, tape) = net.forward_batch_train(&inputs, cfg.dropout, &mut rng)?;
            let mut dl_dy = Matrix::zeros(batch.len(), p);
            let scale = 1.0 / batch.len() as f64;
            for (r, &i) in batch.iter().enumerate() {
                let zeta_hat = out.row(r);
                let zeta_true = &dataset.zeta[i];
                let x_hat = proxy.infer(zeta_hat)?;
                epoch_loss += problem.objective(&x_hat, zeta_true);
                count += 1;
                let dl_dx = problem.grad_x_objective(&x_hat, zeta_true);
                let (_, dl_dzeta) = proxy_input_gradient(proxy, zeta_hat, &dl_dx)?;
                for (o, &v) in dl_dy.row_mut(r).iter_mut().zip(&dl_dzeta) {
                    *o = v * scale;
                }
            }
            if !epoch_loss.is_finite() {
                return Err(Error::TrainingDiverged("non-finite proxy-EPO loss".into()));
            }
            let (grads, _) = net.backward(&tape, &dl_dy)?;
            adam.step(&mut net, &grads, lr)?;
        }
        // validation: restored proxy output under predicted parameters
        let mut gap_sum = 0.0;
        let mut norm_sum = 0.0;
        for &i in &dataset.splits.val {
            let zeta_hat = net.forward(&dataset.z[i])?;
            let x_hat = proxy.infer(&zeta_hat)?;
            let restored = restorer.restore(&x_hat, &dataset.zeta[i])?;
            let f_star = problem.objective(&x_star[i], &dataset.zeta[i]);
            gap_sum += problem.objective(&restored.x, &dataset.zeta[i]) - f_star;
            norm_sum += f_star.abs();
        }
        let val = 100.0 * gap_sum / norm_sum.max(1e-12);
        history.push(EpochStats {
            epoch,
            loss: epoch_loss / count.max(1) as f64,
            mean_violation: 0.0,
            val_regret_pct: Some(val),
        });
        if val < best.0 {
            best = (val, net.clone(), 0);
        } else {
            best.2 += 1;
            if best.2 > cfg.patience {
                break;
            }
        }
    }
    Ok(PredictorModel {
        net: best.1,
        m_hidden: m,
        history,
        lr_used: lr,
        skipped_elements: 0,
    })
}

const PREDICTOR_FORMAT: &str = "optprox-predictor";
const PREDICTOR_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct PredictorFile {
    format: String,
    version: u32,
    m_hidden: usize,
    net: String,
    lr_used: f64,
}

impl PredictorModel {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let doc = PredictorFile {
            format: PREDICTOR_FORMAT.to_string(),
            version: PREDICTOR_VERSION,
            m_hidden: self.m_hidden,
            net: self.net.to_json(),
            lr_used: self.lr_used,
        };
        std::fs::write(path, serde_json::to_string_pretty(&doc).unwrap())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: PredictorFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        if doc.format != PREDICTOR_FORMAT || doc.version != PREDICTOR_VERSION {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: format!("unknown predictor format {:?} v{}", doc.format, doc.version),
            });
        }
        Ok(PredictorModel {
            net: Mlp::from_json(&doc.net)?,
            m_hidden: doc.m_hidden,
            history: Vec::new(),
            lr_used: doc.lr_used,
            skipped_elements: 0,
        })
    }
}

// ---------------------------------------------------------------------------
// Distribution-shift probe
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ShiftProbeReport {
    pub scales: Vec<f64>,
    /// Mean restored-output regret at each scale.
    pub mean_regret: Vec<f64>,
    /// Percent form; degenerate (huge) when the optimal objective is ~0, as
    /// on the 2-D toy whose optimum sits at the origin.
    pub mean_regret_percent: Vec<f64>,
}

impl ShiftProbeReport {
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from("scale,mean_regret,mean_regret_percent\n");
        for ((s, r), pct) in self
            .scales
            .iter()
            .zip(&self.mean_regret)
            .zip(&self.mean_regret_percent)
        {
            let _ = writeln!(out, "{s},{r},{pct}");
        }
        out
    }
}

/// Evaluates a parameter-input proxy on scaled versions of the evaluation
/// parameters: for each requested scale `s`, the proxy solves instances
/// `zeta * s` and its restored mean regret is recorded. Scale 1.0 (the
/// in-distribution reference) is always included; requested scales are
/// deduplicated and sorted.
pub fn distribution_shift_probe(
    proxy: &TrainedModel,
    problem: &dyn ParametricProblem,
    eval_zetas: &[Vec<f64>],
    scales: &[f64],
) -> Result<ShiftProbeReport> {
    if proxy.mode != InputMode::Lto {
        return Err(Error::contract("shift probe needs a parameter-input proxy"));
    }
    let mut all: Vec<f64> = scales.to_vec();
    if !all.iter().any(|&s| s == 1.0) {
        all.push(1.0);
    }
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup();
    let mut restorer = Restorer::new(problem)?;
    let mut mean_regret = Vec::with_capacity(all.len());
    let mut mean_pct = Vec::with_capacity(all.len());
    for &s in &all {
        let mut total = 0.0;
        let mut norm_sum = 0.0;
        for zeta in eval_zetas {
            let scaled: Vec<f64> = zeta.iter().map(|&v| v * s).collect();
            let x_hat = proxy.infer(&scaled)?;
            let restored = restorer.restore(&x_hat, &scaled)?;
            let x_star = problem.ground_truth(&scaled)?;
            let f_star = problem.objective(&x_star, &scaled);
            total += problem.objective(&restored.x, &scaled) - f_star;
            norm_sum += f_star.abs();
        }
        mean_regret.push(total / eval_zetas.len().max(1) as f64);
        mean_pct.push(100.0 * total / norm_sum.max(1e-12));
    }
    Ok(ShiftProbeReport {
        scales: all,
        mean_regret,
        mean_regret_percent: mean_pct,
    })
}

/// Per-sample execution time of the full solver pipeline (predict, then solve
/// to optimality), the baseline side of the timing comparison.
pub fn solver_execution_time(
    problem: &dyn ParametricProblem,
    predictor: &PredictorModel,
    dataset: &Dataset,
    idxs: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    for &i in idxs {
        let t0 = Instant::now();
        let zeta_hat = predictor.predict(&dataset.z[i])?;
        let _ = problem.ground_truth(&zeta_hat)?;
        total += t0.elapsed().as_secs_f64();
    }
    Ok(total / idxs.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{
        assemble_dataset, gen_nonconvex_base, gen_portfolio_base, gen_toy2d_base,
        precompute_targets,
    };
    use crate::lto::{lto_train, LtoMethod, TrainConfig};
    use crate::problems::{pgd_solve, PgdConfig};

    fn portfolio_dataset(
        n_samples: usize,
        d: usize,
        k: usize,
        seed: u64,
    ) -> (PortfolioProblem, Dataset) {
        let (spec, zetas, splits) = gen_portfolio_base(n_samples, d, seed).unwrap();
        let mut ds = assemble_dataset(&spec, &zetas, &splits, k, 3 * d, seed, seed + 1).unwrap();
        let problem = match &spec {
            crate::datagen::ProblemSpec::Portfolio { sigma, risk_weight } => {
                PortfolioProblem::new(sigma.clone(), *risk_weight).unwrap()
            }
            _ => unreachable!(),
        };
        precompute_targets(&mut ds, &problem).unwrap();
        (problem, ds)
    }

    fn nonconvex_dataset(
        n_samples: usize,
        n: usize,
        seed: u64,
    ) -> (NonconvexQpProblem, Dataset) {
        let (spec, zetas, splits) = gen_nonconvex_base(n_samples, n, n / 2, n / 2, seed).unwrap();
        let mut ds = assemble_dataset(&spec, &zetas, &splits, 1, 2 * n, seed, seed + 1).unwrap();
        let problem = match &spec {
            crate::datagen::ProblemSpec::NonconvexQp {
                mu,
                constraints,
                pgd,
                gt_seed,
            } => NonconvexQpProblem::new(mu.clone(), constraints.clone(), *pgd, *gt_seed).unwrap(),
            _ => unreachable!(),
        };
        precompute_targets(&mut ds, &problem).unwrap();
        (problem, ds)
    }

    fn quick_cfg(seed: u64) -> PtoTrainConfig {
        let mut cfg = PtoTrainConfig::new(seed);
        cfg.epochs = 25;
        cfg.hidden_width = 24;
        cfg.batch_size = 50;
        cfg
    }

    #[test]
    fn two_stage_identity_features_reach_low_mse_and_regret() {
        // k = 0 features are the parameters themselves: regression is
        // realizable and downstream regret collapses
        let (problem, ds) = portfolio_dataset(36, 3, 0, 2);
        let mut cfg = quick_cfg(2);
        cfg.epochs = 400;
        cfg.lr_grid = vec![1e-2];
        let model = two_stage_train(&ds, 1, &cfg).unwrap();
        let mut worst_pct: f64 = 0.0;
        let xs = ds.x_star.as_ref().unwrap();
        for &i in &ds.splits.test {
            let x_hat = predict_then_solve(&problem, &model, &ds.z[i]).unwrap();
            let f_star = problem.objective(&xs[i], &ds.zeta[i]);
            let gap = problem.objective(&x_hat, &ds.zeta[i]) - f_star;
            worst_pct = worst_pct.max(percent_of_optimum(gap, f_star));
        }
        assert!(worst_pct < 2.0, "worst test percent regret {worst_pct}");
    }

    #[test]
    fn identical_predictors_make_identical_decisions() {
        let (problem, ds) = portfolio_dataset(24, 3, 1, 4);
        let cfg = quick_cfg(4);
        let a = two_stage_train(&ds, 1, &cfg).unwrap();
        let b = a.clone();
        for &i in &ds.splits.test {
            let xa = predict_then_solve(&problem, &a, &ds.z[i]).unwrap();
            let xb = predict_then_solve(&problem, &b, &ds.z[i]).unwrap();
            assert_eq!(xa, xb);
        }
    }

    #[test]
    fn epo_qp_end_to_end_gradient_matches_finite_differences() {
        // gradient of f(x*(zeta_hat), zeta_true) w.r.t. zeta_hat on a D=4 instance
        let (problem, ds) = portfolio_dataset(24, 4, 0, 6);
        let zeta_true = ds.zeta[0].clone();
        let zeta_hat = vec![0.22, 0.31, 0.18, 0.27];
        let loss_at = |zh: &[f64]| -> f64 {
            let x = problem.ground_truth(zh).unwrap();
            problem.objective(&x, &zeta_true)
        };
        let qp_inst = problem.to_qp(&zeta_hat);
        let sol = qp::solve_qp(&qp_inst, 1e-10, 200_000).unwrap();
        let dl_dx = problem.grad_x_objective(&sol.x, &zeta_true);
        let dl_dq = qp::qp_backward(&qp_inst, &sol, &dl_dx).unwrap();
        let h = 1e-6;
        for j in 0..4 {
            let mut zp = zeta_hat.clone();
            zp[j] += h;
            let mut zm = zeta_hat.clone();
            zm[j] -= h;
            let num = (loss_at(&zp) - loss_at(&zm)) / (2.0 * h);
            let ana = -dl_dq[j];
            let denom = ana.abs().max(num.abs()).max(1e-4);
            assert!(
                (ana - num).abs() / denom < 1e-3,
                "coord {j}: analytic {ana} numeric {num}"
            );
        }
    }

    #[test]
    fn epo_qp_trains_and_counts_skips() {
        let (problem, ds) = portfolio_dataset(36, 3, 1, 8);
        let mut cfg = quick_cfg(8);
        cfg.epochs = 10;
        let model = epo_train_qp(&problem, &ds, 1, &cfg).unwrap();
        assert!(!model.history.is_empty());
        // skips are rare on these instances but must be tracked, not hidden
        assert!(model.skipped_elements < ds.splits.train.len() * 10);
    }

    #[test]
    fn pgd_fixed_point_gradient_matches_qp_backward_in_convex_case() {
        // with zeta = 0 the problem is a convex QP; the fixed-point derivative
        // map relates to the KKT derivative via dzeta -> dq = diag(cos x) dzeta
        let (problem, _) = nonconvex_dataset(24, 6, 12);
        let zeta0 = vec![0.0; 6];
        let res = pgd_solve(
            &problem,
            &zeta0,
            &vec![0.0; 6],
            &PgdConfig {
                max_iters: 200_000,
                tol: 1e-11,
                ..problem.pgd
            },
        )
        .unwrap();
        assert!(res.converged);
        let dl_dx = vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.25];
        let via_fp =
            pgd_fixed_point_backward(&problem, &res.x, &zeta0, &dl_dx, problem.pgd.step, 1e-6)
                .unwrap();
        // KKT route on the equivalent QP
        let c = problem.linear_constraints().unwrap();
        let qp_inst = crate::qp::QpProblem {
            quad: Matrix::diag(&problem.mu),
            lin: vec![0.0; 6],
            a_eq: c.a_eq.clone(),
            b_eq: c.b_eq.clone(),
            g_ineq: c.g_ineq.clone(),
            h_ineq: c.h_ineq.clone(),
        };
        let sol = qp::solve_qp(&qp_inst, 1e-11, 400_000).unwrap();
        let dl_dq = qp::qp_backward(&qp_inst, &sol, &dl_dx).unwrap();
        for j in 0..6 {
            let expect = res.x[j].cos() * dl_dq[j];
            let denom = expect.abs().max(via_fp[j].abs()).max(1e-6);
            assert!(
                (via_fp[j] - expect).abs() / denom < 1e-3,
                "coord {j}: fp {} kkt-route {expect}",
                via_fp[j]
            );
        }
    }

    #[test]
    fn pgd_fixed_point_gradient_matches_finite_differences() {
        let (problem, ds) = nonconvex_dataset(24, 4, 14);
        let zeta_hat = ds.zeta[0].clone();
        let zeta_true = ds.zeta[1].clone();
        let tight = PgdConfig {
            max_iters: 400_000,
            tol: 1e-12,
            ..problem.pgd
        };
        let res = pgd_solve(&problem, &zeta_hat, &vec![0.0; 4], &tight).unwrap();
        assert!(res.converged);
        let dl_dx = problem.grad_x_objective(&res.x, &zeta_true);
        let grad =
            pgd_fixed_point_backward(&problem, &res.x, &zeta_hat, &dl_dx, tight.step, 1e-7)
                .unwrap();
        let h = 1e-5;
        for j in 0..4 {
            let mut zp = zeta_hat.clone();
            zp[j] += h;
            let mut zm = zeta_hat.clone();
            zm[j] -= h;
            let xp = pgd_solve(&problem, &zp, &res.x, &tight).unwrap().x;
            let xm = pgd_solve(&problem, &zm, &res.x, &tight).unwrap().x;
            let num = (problem.objective(&xp, &zeta_true) - problem.objective(&xm, &zeta_true))
                / (2.0 * h);
            let denom = grad[j].abs().max(num.abs()).max(1e-3);
            assert!(
                (grad[j] - num).abs() / denom < 1e-3,
                "coord {j}: analytic {} numeric {num}",
                grad[j]
            );
        }
    }

    #[test]
    fn frozen_proxy_stays_frozen() {
        let (problem, ds) = portfolio_dataset(36, 3, 1, 16);
        // proxy trained on parameters (k = 0 inputs)
        let mut proxy_cfg = TrainConfig::new(LtoMethod::Ld, InputMode::Lto, 16);
        proxy_cfg.epochs = 15;
        proxy_cfg.hidden_width = 24;
        let proxy = lto_train(&problem, &ds, &proxy_cfg).unwrap();
        let weights_before: Vec<Vec<f64>> = proxy
            .net
            .weights()
            .iter()
            .map(|w| w.data().to_vec())
            .collect();
        let mut cfg = quick_cfg(16);
        cfg.epochs = 8;
        let _pred = epo_with_frozen_proxy(&proxy, &problem, &ds, 1, false, &cfg).unwrap();
        let _pred2 = epo_with_frozen_proxy(&proxy, &problem, &ds, 1, true, &cfg).unwrap();
        for (w, before) in proxy.net.weights().iter().zip(&weights_before) {
            assert_eq!(w.data(), before.as_slice());
        }
    }

    #[test]
    fn shift_probe_contains_reference_scale_and_each_scale_once() {
        let (spec, zetas, splits) = gen_toy2d_base(30, 3);
        let mut ds = assemble_dataset(&spec, &zetas, &splits, 0, 2, 3, 3).unwrap();
        let problem = spec.build().unwrap();
        precompute_targets(&mut ds, problem.as_ref()).unwrap();
        let mut cfg = TrainConfig::new(LtoMethod::Pdl, InputMode::Lto, 3);
        cfg.epochs = 10;
        cfg.hidden_width = 16;
        let proxy = lto_train(problem.as_ref(), &ds, &cfg).unwrap();
        let eval: Vec<Vec<f64>> = ds.splits.test.iter().map(|&i| ds.zeta[i].clone()).collect();
        let report =
            distribution_shift_probe(&proxy, problem.as_ref(), &eval, &[2.0, 4.0, 2.0]).unwrap();
        assert_eq!(report.scales, vec![1.0, 2.0, 4.0]);
        assert_eq!(report.mean_regret.len(), 3);
        let csv = report.to_csv();
        assert!(csv.starts_with("scale,mean_regret,mean_regret_percent\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
