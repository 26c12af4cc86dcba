//! Training methods for solution proxies.
//!
//! Three losses, each runnable with problem parameters as input (proxy mode,
//! `k = 0`) or with observed features as input:
//!
//! - **LD**: supervised regression to precomputed targets plus
//!   multiplier-weighted constraint penalties, multipliers updated by dual
//!   ascent on the epoch-mean violations;
//! - **PDL**: self-supervised augmented-Lagrangian training with a second
//!   network predicting per-instance multipliers, alternating primal and dual
//!   phases with a monotone penalty weight;
//! - **DC3**: the network predicts a subset of the variables, equalities are
//!   completed by a linear solve, inequalities corrected by unrolled gradient
//!   steps, with backpropagation through both.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::nn::{Adam, Head, Mlp};
use crate::problems::{derive_seed, ParametricProblem};
use crate::restore::Restorer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LtoMethod {
    Ld,
    Pdl,
    Dc3,
}

impl LtoMethod {
    pub fn name(&self) -> &'static str {
        match self {
            LtoMethod::Ld => "ld",
            LtoMethod::Pdl => "pdl",
            LtoMethod::Dc3 => "dc3",
        }
    }
}

/// What the proxy consumes: raw problem parameters or observed features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Lto,
    Ltof,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LdParams {
    pub lambda0: f64,
    pub mu0: f64,
    pub dual_step: f64,
}

impl Default for LdParams {
    fn default() -> Self {
        LdParams {
            lambda0: 0.1,
            mu0: 0.5,
            dual_step: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PdlParams {
    pub rho0: f64,
    pub rho_max: f64,
    pub tau: f64,
    pub alpha: f64,
    /// Primal epochs per outer iteration.
    pub primal_epochs: usize,
    /// Dual-regression epochs per outer iteration.
    pub dual_epochs: usize,
}

impl Default for PdlParams {
    fn default() -> Self {
        PdlParams {
            rho0: 0.5,
            rho_max: 5000.0,
            tau: 0.8,
            alpha: 5.0,
            primal_epochs: 25,
            dual_epochs: 15,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Dc3Params {
    /// Sum of the two penalty weights.
    pub penalty_total: f64,
    /// Fraction of the total on the inequality term.
    pub ineq_fraction: f64,
    pub t_train: usize,
    pub t_test: usize,
    pub correction_step: f64,
}

impl Default for Dc3Params {
    fn default() -> Self {
        Dc3Params {
            penalty_total: 10.0,
            ineq_fraction: 0.75,
            t_train: 5,
            t_test: 5,
            correction_step: 1e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub method: LtoMethod,
    pub mode: InputMode,
    /// Learning rates tried in order until one finishes without divergence.
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub hidden_width: usize,
    /// Hidden layer count; `None` uses `max(2, k + 1)` from the dataset depth.
    pub hidden_layers: Option<usize>,
    pub dropout: f64,
    /// Early-stopping patience in epochs (outer iterations for PDL).
    pub patience: usize,
    pub ld: LdParams,
    pub pdl: PdlParams,
    pub dc3: Dc3Params,
}

impl TrainConfig {
    pub fn new(method: LtoMethod, mode: InputMode, seed: u64) -> Self {
        TrainConfig {
            method,
            mode,
            lr_grid: vec![5e-3, 1e-3, 1e-4],
            epochs: 800,
            batch_size: 25,
            seed,
            hidden_width: 128,
            hidden_layers: None,
            dropout: 0.0,
            patience: 100,
            ld: LdParams::default(),
            pdl: PdlParams::default(),
            dc3: Dc3Params::default(),
        }
    }

    fn depth_for(&self, k: usize) -> usize {
        self.hidden_layers.unwrap_or_else(|| k.max(1) + 1)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub mean_violation: f64,
    pub val_regret_pct: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LdState {
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
}

/// DC3 completion/correction pipeline, precomputed from the constraint block
/// and a variable partition. Everything downstream of the network runs in the
/// predicted-variable space, where completion is affine and corrections are
/// exact gradient steps on the inequality violation.
#[derive(Clone, Debug)]
pub struct Dc3Runtime {
    pub predicted: Vec<usize>,
    pub completed: Vec<usize>,
    /// dx_completed / dx_predicted.
    w: Matrix,
    /// Completed values at x_predicted = 0.
    c0: Vec<f64>,
    /// Inequality map in predicted space: g(x(z)) = m z + d.
    m: Matrix,
    d: Vec<f64>,
    pub params: Dc3Params,
}

impl Dc3Runtime {
    /// Builds the pipeline, choosing the last `m_eq` variables as completed
    /// and falling back to seeded random partitions when that block is
    /// singular.
    pub fn new(
        constraints: &crate::problems::LinearConstraintSet,
        params: Dc3Params,
        seed: u64,
    ) -> Result<Self> {
        let n = constraints.n();
        let me = constraints.a_eq.rows();
        if me > n {
            return Err(Error::contract("more equalities than variables"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xDC3));
        for attempt in 0..50 {
            if attempt > 0 {
                order.shuffle(&mut rng);
            }
            let completed: Vec<usize> = order[n - me..].to_vec();
            let predicted: Vec<usize> = order[..n - me].to_vec();
            match Self::try_build(constraints, params, predicted, completed) {
                Ok(rt) => return Ok(rt),
                Err(_) if me > 0 => continue,
                Err(e) => return Err(e),
            }
        }
        Err(Error::Singular(
            "no invertible completion block found after 50 partitions".to_string(),
        ))
    }

    fn try_build(
        constraints: &crate::problems::LinearConstraintSet,
        params: Dc3Params,
        predicted: Vec<usize>,
        completed: Vec<usize>,
    ) -> Result<Self> {
        let me = completed.len();
        let np = predicted.len();
        let a = &constraints.a_eq;
        let (w, c0) = if me == 0 {
            (Matrix::zeros(0, np), vec![])
        } else {
            let mut a_c = Matrix::zeros(me, me);
            let mut a_p = Matrix::zeros(me, np);
            for r in 0..me {
                for (j, &c) in completed.iter().enumerate() {
                    a_c.set(r, j, a.get(r, c));
                }
                for (j, &c) in predicted.iter().enumerate() {
                    a_p.set(r, j, a.get(r, c));
                }
            }
            let lu = linalg::LuFactors::new(&a_c)?;
            if lu.pivot_ratio() < 1e-10 {
                return Err(Error::Singular("ill-conditioned completion block".into()));
            }
            let c0 = lu.solve(&constraints.b_eq);
            // W column j solves A_c w_j = -A_p e_j
            let mut w = Matrix::zeros(me, np);
            for j in 0..np {
                let rhs: Vec<f64> = (0..me).map(|r| -a_p.get(r, j)).collect();
                let col = lu.solve(&rhs);
                for (r, &v) in col.iter().enumerate() {
                    w.set(r, j, v);
                }
            }
            (w, c0)
        };
        // inequality map g(x(z)) = G x(z) - h = M z + d
        let g = &constraints.g_ineq;
        let mi = g.rows();
        let mut m = Matrix::zeros(mi, np);
        let mut d = vec![0.0; mi];
        for r in 0..mi {
            for (j, &c) in predicted.iter().enumerate() {
                let mut v = g.get(r, c);
                for (cr, &cc) in completed.iter().enumerate() {
                    v += g.get(r, cc) * w.get(cr, j);
                }
                m.set(r, j, v);
            }
            let mut dv = -constraints.h_ineq[r];
            for (cr, &cc) in completed.iter().enumerate() {
                dv += g.get(r, cc) * c0[cr];
            }
            d[r] = dv;
        }
        Ok(Dc3Runtime {
            predicted,
            completed,
            w,
            c0,
            m,
            d,
            params,
        })
    }

    pub fn n_predicted(&self) -> usize {
        self.predicted.len()
    }

    pub(crate) fn scatter(&self, z: &[f64]) -> Vec<f64> {
        let n = self.predicted.len() + self.completed.len();
        let mut x = vec![0.0; n];
        for (j, &c) in self.predicted.iter().enumerate() {
            x[c] = z[j];
        }
        if !self.completed.is_empty() {
            let xc_delta = self.w.matvec(z);
            for (r, &c) in self.completed.iter().enumerate() {
                x[c] = self.c0[r] + xc_delta[r];
            }
        }
        x
    }

    /// Gathers a full-space gradient into predicted space:
    /// `dz = d_pred + W' d_comp`.
    pub(crate) fn gather_grad(&self, dx: &[f64]) -> Vec<f64> {
        let mut dz: Vec<f64> = self.predicted.iter().map(|&c| dx[c]).collect();
        if !self.completed.is_empty() {
            let d_comp: Vec<f64> = self.completed.iter().map(|&c| dx[c]).collect();
            let wt = self.w.matvec_t(&d_comp);
            linalg::axpy(1.0, &wt, &mut dz);
        }
        dz
    }

    pub(crate) fn correction_trace(&self, z0: &[f64], steps: usize) -> (Vec<f64>, Vec<Vec<bool>>) {
        let gamma = self.params.correction_step;
        let mut z = z0.to_vec();
        let mut masks = Vec::with_capacity(steps);
        for _ in 0..steps {
            let gz = self.m.matvec(&z);
            let mut r = vec![0.0; gz.len()];
            let mut mask = vec![false; gz.len()];
            for (i, (&g, dd)) in gz.iter().zip(&self.d).enumerate() {
                let v = g + dd;
                if v > 0.0 {
                    r[i] = v;
                    mask[i] = true;
                }
            }
            let grad = self.m.matvec_t(&r);
            for (zi, &gi) in z.iter_mut().zip(&grad) {
                *zi -= 2.0 * gamma * gi;
            }
            masks.push(mask);
        }
        (z, masks)
    }

    /// Full output for one predicted vector: corrections then completion.
    pub fn output(&self, z0: &[f64], steps: usize) -> Vec<f64> {
        let (z, _) = self.correction_trace(z0, steps);
        self.scatter(&z)
    }

    /// Backpropagates `dz` (gradient at the corrected z) through the unrolled
    /// correction steps using the recorded active masks.
    pub(crate) fn backward_corrections(&self, masks: &[Vec<bool>], dz_out: &[f64]) -> Vec<f64> {
        let gamma = self.params.correction_step;
        let mut v = dz_out.to_vec();
        for mask in masks.iter().rev() {
            // v <- v - 2 gamma M' D M v
            let mut mv = self.m.matvec(&v);
            for (mvi, &active) in mv.iter_mut().zip(mask) {
                if !active {
                    *mvi = 0.0;
                }
            }
            let correction = self.m.matvec_t(&mv);
            for (vi, &ci) in v.iter_mut().zip(&correction) {
                *vi -= 2.0 * gamma * ci;
            }
        }
        v
    }
}

#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub method: LtoMethod,
    pub mode: InputMode,
    pub net: Mlp,
    pub dual_net: Option<Mlp>,
    pub dc3: Option<Dc3Runtime>,
    pub ld_state: Option<LdState>,
    pub pdl_rho: Option<f64>,
    pub history: Vec<EpochStats>,
    pub lr_used: f64,
}

impl TrainedModel {
    /// Deterministic forward pass from an input (features or parameters,
    /// matching the training mode) to a pre-restoration candidate solution.
    pub fn infer(&self, input: &[f64]) -> Result<Vec<f64>> {
        let out = self.net.forward(input)?;
        match &self.dc3 {
            Some(rt) => Ok(rt.output(&out, rt.params.t_test)),
            None => Ok(out),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }
}

pub(crate) fn model_input<'a>(dataset: &'a Dataset, mode: InputMode, idx: usize) -> &'a [f64] {
    match mode {
        InputMode::Lto => &dataset.zeta[idx],
        InputMode::Ltof => &dataset.z[idx],
    }
}

fn input_dim(dataset: &Dataset, mode: InputMode) -> usize {
    match mode {
        InputMode::Lto => dataset.param_dim(),
        InputMode::Ltof => dataset.feature_dim(),
    }
}

fn gather_inputs(dataset: &Dataset, mode: InputMode, idxs: &[usize]) -> Matrix {
    let dim = input_dim(dataset, mode);
    let mut m = Matrix::zeros(idxs.len(), dim);
    for (r, &i) in idxs.iter().enumerate() {
        m.row_mut(r).copy_from_slice(model_input(dataset, mode, i));
    }
    m
}

pub(crate) fn shuffled_batches(
    idxs: &[usize],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order = idxs.to_vec();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

/// Mean percent regret after restoration over a split; the early-stopping
/// metric. Falls back to the mean restored objective when the dataset has no
/// precomputed targets (same argmin, no targets needed).
fn validation_metric(
    net: &Mlp,
    dc3: Option<&Dc3Runtime>,
    mode: InputMode,
    problem: &dyn ParametricProblem,
    dataset: &Dataset,
    idxs: &[usize],
    restorer: &mut Restorer,
) -> Result<f64> {
    let mut gap_sum = 0.0;
    let mut norm_sum = 0.0;
    let mut value_sum = 0.0;
    for &i in idxs {
        let raw = net.forward(model_input(dataset, mode, i))?;
        let x_hat = match dc3 {
            Some(rt) => rt.output(&raw, rt.params.t_test),
            None => raw,
        };
        let restored = restorer.restore(&x_hat, &dataset.zeta[i])?;
        let f_val = problem.objective(&restored.x, &dataset.zeta[i]);
        match &dataset.x_star {
            Some(xs) => {
                let f_star = problem.objective(&xs[i], &dataset.zeta[i]);
                gap_sum += f_val - f_star;
                norm_sum += f_star.abs();
            }
            None => value_sum += f_val,
        }
    }
    if dataset.x_star.is_some() {
        // percent regret aggregated as a ratio of means: per-sample
        // normalization is unstable when individual optima sit near zero
        Ok(100.0 * gap_sum / norm_sum.max(1e-12))
    } else {
        Ok(value_sum / idxs.len().max(1) as f64)
    }
}

/// Trains an LD, PDL, or DC3 model per the config, walking down the learning
/// rate grid on divergence.
pub fn lto_train(
    problem: &dyn ParametricProblem,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    dataset.validate()?;
    if dataset.splits.train.is_empty() {
        return Err(Error::contract("empty training split"));
    }
    let mut last_err = None;
    for &lr in &config.lr_grid {
        let attempt = match config.method {
            LtoMethod::Ld => ld_train_at(problem, dataset, config, lr),
            LtoMethod::Pdl => pdl_train_at(problem, dataset, config, lr),
            LtoMethod::Dc3 => dc3_train_at(problem, dataset, config, lr),
        };
        match attempt {
            Err(Error::TrainingDiverged(msg)) => {
                last_err = Some(Error::TrainingDiverged(format!("lr {lr}: {msg}")));
            }
            other => return other,
        }
    }
    Err(last_err.unwrap_or_else(|| Error::contract("empty learning-rate grid")))
}

/// Supervised Lagrangian-dual training (requires precomputed targets).
pub fn ld_train(
    problem: &dyn ParametricProblem,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let mut cfg = config.clone();
    cfg.method = LtoMethod::Ld;
    lto_train(problem, dataset, &cfg)
}

/// Self-supervised primal-dual training.
pub fn pdl_train(
    problem: &dyn ParametricProblem,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let mut cfg = config.clone();
    cfg.method = LtoMethod::Pdl;
    lto_train(problem, dataset, &cfg)
}

/// Completion-and-correction training.
pub fn dc3_train(
    problem: &dyn ParametricProblem,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainedModel> {
    let mut cfg = config.clone();
    cfg.method = LtoMethod::Dc3;
    lto_train(problem, dataset, &cfg)
}

/// Deterministic forward pass through a trained model (plus completion and
/// correction for DC3).
pub fn lto_infer(model: &TrainedModel, input: &[f64]) -> Result<Vec<f64>> {
    model.infer(input)
}

fn proxy_dims(dataset: &Dataset, config: &TrainConfig, out_dim: usize) -> Vec<usize> {
    let depth = config.depth_for(dataset.k);
    let mut dims = Vec::with_capacity(depth + 2);
    dims.push(input_dim(dataset, config.mode));
    dims.extend(std::iter::repeat(config.hidden_width).take(depth));
    dims.push(out_dim);
    dims
}

struct EarlyStopper {
    best_metric: f64,
    best_net: Mlp,
    best_dual: Option<Mlp>,
    since_best: usize,
    patience: usize,
}

impl EarlyStopper {
    fn new(net: &Mlp, dual: Option<&Mlp>, patience: usize) -> Self {
        EarlyStopper {
            best_metric: f64::INFINITY,
            best_net: net.clone(),
            best_dual: dual.cloned(),
            since_best: 0,
            patience,
        }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, metric: f64, net: &Mlp, dual: Option<&Mlp>) -> bool {
        if metric < self.best_metric {
            self.best_metric = metric;
            self.best_net = net.clone();
            self.best_dual = dual.cloned();
            self.since_best = 0;
            false
        } else {
            self.since_best += 1;
            self.since_best > self.patience
        }
    }
}

// ---------------------------------------------------------------------------
// LD
// ---------------------------------------------------------------------------

fn ld_train_at(
    problem: &dyn ParametricProblem,
    dataset: &Dataset,
    config: &TrainConfig,
    lr: f64,
) -> Result<TrainedModel> {
    let x_star = dataset
        .x_star
        .as_ref()
        .ok_or_else(|| Error::contract("LD is supervised: dataset needs precomputed targets"))?;
    let n = problem.n_decision();
    let dims = proxy_dims(dataset, config, n);
    let mut net = Mlp::init(&dims, Head::Linear, config.seed)?;
    let mut adam = Adam::new(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x1D));
    let mut restorer = Restorer::new(problem)?;

    let mi = problem
        .ineq_residuals(&vec![0.0; n], &dataset.zeta[0])
        .len();
    let me = problem.eq_residuals(&vec![0.0; n], &dataset.zeta[0]).len();
    let mut lambda = vec![config.ld.lambda0; mi];
    let mut mu = vec![config.ld.mu0; me];

    let mut history = Vec::new();
    let mut stopper = EarlyStopper::new(&net, None, config.patience);

    for epoch in 0..config.epochs {
        let batches = shuffled_batches(&dataset.splits.train, config.batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_viol = 0.0;
        let mut mean_pos_g = vec![0.0; mi];
        let mut mean_h = vec![0.0; me];
        let mut count = 0usize;
        for batch in &batches {
            let inputs = gather_inputs(dataset, config.mode, batch);
            let (out, tape) = net.forward_batch_train(&inputs, config.dropout, &mut rng)?;
            let mut dl_dy = Matrix::zeros(batch.len(), n);
            let scale = 1.0 / batch.len() as f64;
            for (r, &i) in batch.iter().enumerate() {
                let x_hat = out.row(r);
                let zeta = &dataset.zeta[i];
                let target = &x_star[i];
                let g = problem.ineq_residuals(x_hat, zeta);
                let h = problem.eq_residuals(x_hat, zeta);
                let diff = linalg::sub(x_hat, target);
                let mut loss = linalg::dot(&diff, &diff);
                for (gi, li) in g.iter().zip(&lambda) {
                    loss += li * gi.max(0.0);
                }
                for (hi, mi_) in h.iter().zip(&mu) {
                    loss += mi_ * hi;
                }
                epoch_loss += loss;
                epoch_viol += problem.max_violation(x_hat, zeta);
                // dL/dx = 2(x - x*) + Jg' (lambda ⊙ 1[g>0]) + Jh' mu
                let mut dl = diff.iter().map(|v| 2.0 * v).collect::<Vec<f64>>();
                if mi > 0 {
                    let jg = problem.ineq_jacobian(x_hat, zeta);
                    let weights: Vec<f64> = g
                        .iter()
                        .zip(&lambda)
                        .map(|(&gi, &li)| if gi > 0.0 { li } else { 0.0 })
                        .collect();
                    linalg::axpy(1.0, &jg.matvec_t(&weights), &mut dl);
                }
                if me > 0 {
                    let jh = problem.eq_jacobian(x_hat, zeta);
                    linalg::axpy(1.0, &jh.matvec_t(&mu), &mut dl);
                }
                for (o, &v) in dl_dy.row_mut(r).iter_mut().zip(&dl) {
                    *o = v * scale;
                }
                for (acc, gi) in mean_pos_g.iter_mut().zip(&g) {
                    *acc += gi.max(0.0);
                }
                for (acc, hi) in mean_h.iter_mut().zip(&h) {
                    *acc += hi;
                }
                count += 1;
            }
            if !epoch_loss.is_finite() {
                return Err(Error::TrainingDiverged("non-finite LD loss".into()));
            }
            let (grads, _) = net.backward(&tape, &dl_dy)?;
            adam.step(&mut net, &grads, lr)?;
        }
        // dual ascent on mean violations; lambda stays nonnegative
        let inv = 1.0 / count.max(1) as f64;
        for (li, acc) in lambda.iter_mut().zip(&mean_pos_g) {
            *li = (*li + config.ld.dual_step * acc * inv).max(0.0);
        }
        for (mi_, acc) in mu.iter_mut().zip(&mean_h) {
            *mi_ += config.ld.dual_step * acc * inv;
        }

        let val = validation_metric(
            &net,
            None,
            config.mode,
            problem,
            dataset,
            &dataset.splits.val,
            &mut restorer,
        )?;
        history.push(EpochStats {
            epoch,
            loss: epoch_loss * inv,
            mean_violation: epoch_viol * inv,
            val_regret_pct: dataset.x_star.as_ref().map(|_| val),
        });
        if stopper.observe(val, &net, None) {
            break;
        }
    }
    Ok(TrainedModel {
        method: LtoMethod::Ld,
        mode: config.mode,
        net: stopper.best_net,
        dual_net: None,
        dc3: None,
        ld_state: Some(LdState { lambda, mu }),
        pdl_rho: None,
        history,
        lr_used: lr,
    })
}

// ---------------------------------------------------------------------------
// PDL
// ---------------------------------------------------------------------------

fn pdl_train_at(
    problem: &dyn ParametricProblem,
    dataset: &Dataset,
    config: &TrainConfig,
    lr: f64,
) -> Result<TrainedModel> {
    let n = problem.n_decision();
    let dims = proxy_dims(dataset, config, n);
    let mi = problem
        .ineq_residuals(&vec![0.0; n], &dataset.zeta[0])
        .len();
    let me = problem.eq_residuals(&vec![0.0; n], &dataset.zeta[0]).len();
    let mut dual_dims = dims.clone();
    *dual_dims.last_mut().unwrap() = mi + me;

    let mut net = Mlp::init(&dims, Head::Linear, config.seed)?;
    let mut dual_net = Mlp::init(&dual_dims, Head::Linear, derive_seed(config.seed, 0xD0A1))?;
    let mut adam = Adam::new(&net);
    let mut adam_dual = Adam::new(&dual_net);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x9D1));
    let mut restorer = Restorer::new(problem)?;

    let mut rho = config.pdl.rho0;
    let mut prev_max_violation = f64::INFINITY;
    let mut history = Vec::new();
    // config.epochs budgets total inner epochs; each outer iteration spends a
    // long primal phase and a dual-regression phase on it
    let per_outer = config.pdl.primal_epochs.max(1) + config.pdl.dual_epochs.max(1);
    let outer_iters = (config.epochs / per_outer).max(1);
    let patience = (config.patience / per_outer).max(3);
    let mut stopper = EarlyStopper::new(&net, Some(&dual_net), patience);

    // multipliers predicted by the frozen dual net for one input row
    let duals_for = |dual_net: &Mlp, input: &[f64]| -> Result<(Vec<f64>, Vec<f64>)> {
        let out = dual_net.forward(input)?;
        let lambda: Vec<f64> = out[..mi].iter().map(|&v| v.max(0.0)).collect();
        let mu = out[mi..].to_vec();
        Ok((lambda, mu))
    };

    for outer in 0..outer_iters {
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        // primal phase: minimize the augmented Lagrangian with frozen duals
        for _ in 0..config.pdl.primal_epochs.max(1) {
            let batches = shuffled_batches(&dataset.splits.train, config.batch_size, &mut rng);
            for batch in &batches {
                let inputs = gather_inputs(dataset, config.mode, batch);
                let (out, tape) = net.forward_batch_train(&inputs, config.dropout, &mut rng)?;
                let mut dl_dy = Matrix::zeros(batch.len(), n);
                let scale = 1.0 / batch.len() as f64;
                for (r, &i) in batch.iter().enumerate() {
                    let x_hat = out.row(r);
                    let zeta = &dataset.zeta[i];
                    let (lambda, mu) = duals_for(&dual_net, model_input(dataset, config.mode, i))?;
                    let g = problem.ineq_residuals(x_hat, zeta);
                    let h = problem.eq_residuals(x_hat, zeta);
                    let pos_g: Vec<f64> = g.iter().map(|&v| v.max(0.0)).collect();
                    let mut loss = problem.objective(x_hat, zeta)
                        + linalg::dot(&lambda, &g)
                        + linalg::dot(&mu, &h);
                    loss += 0.5
                        * rho
                        * (pos_g.iter().map(|v| v * v).sum::<f64>()
                            + h.iter().map(|v| v * v).sum::<f64>());
                    epoch_loss += loss;
                    count += 1;
                    let mut dl = problem.grad_x_objective(x_hat, zeta);
                    if mi > 0 {
                        let jg = problem.ineq_jacobian(x_hat, zeta);
                        let mut wg = lambda.clone();
                        linalg::axpy(rho, &pos_g, &mut wg);
                        linalg::axpy(1.0, &jg.matvec_t(&wg), &mut dl);
                    }
                    if me > 0 {
                        let jh = problem.eq_jacobian(x_hat, zeta);
                        let mut wh = mu.clone();
                        linalg::axpy(rho, &h, &mut wh);
                        linalg::axpy(1.0, &jh.matvec_t(&wh), &mut dl);
                    }
                    for (o, &v) in dl_dy.row_mut(r).iter_mut().zip(&dl) {
                        *o = v * scale;
                    }
                }
                if !epoch_loss.is_finite() {
                    return Err(Error::TrainingDiverged("non-finite PDL loss".into()));
                }
                let (grads, _) = net.backward(&tape, &dl_dy)?;
                adam.step(&mut net, &grads, lr)?;
            }
        }

        // dual targets from the updated primal net
        let train = &dataset.splits.train;
        let mut targets = Vec::with_capacity(train.len());
        let mut max_violation: f64 = 0.0;
        for &i in train {
            let input = model_input(dataset, config.mode, i);
            let x_hat = net.forward(input)?;
            let zeta = &dataset.zeta[i];
            let (lambda, mu) = duals_for(&dual_net, input)?;
            let g = problem.ineq_residuals(&x_hat, zeta);
            let h = problem.eq_residuals(&x_hat, zeta);
            max_violation = max_violation.max(problem.max_violation(&x_hat, zeta));
            let mut t = Vec::with_capacity(mi + me);
            for (l, gi) in lambda.iter().zip(&g) {
                // standard augmented-Lagrangian inequality update: signed
                // residual inside the clamp so multipliers of strictly
                // feasible constraints decay instead of ratcheting up
                t.push((l + rho * gi).max(0.0));
            }
            for (m, hi) in mu.iter().zip(&h) {
                t.push(m + rho * hi);
            }
            targets.push(t);
        }

        // dual phase: regress the dual net onto the updated multipliers
        for _ in 0..config.pdl.dual_epochs.max(1) {
            let batches = shuffled_batches(train, config.batch_size, &mut rng);
            for batch in &batches {
                let inputs = gather_inputs(dataset, config.mode, batch);
                let (out, tape) = dual_net.forward_batch(&inputs)?;
                let mut dl_dy = Matrix::zeros(batch.len(), mi + me);
                let scale = 1.0 / batch.len() as f64;
                for (r, &i) in batch.iter().enumerate() {
                    let pos = train.iter().position(|&t| t == i).unwrap();
                    let target = &targets[pos];
                    for (c, (o, t)) in out.row(r).iter().zip(target).enumerate() {
                        dl_dy.set(r, c, 2.0 * (o - t) * scale);
                    }
                }
                let (grads, _) = dual_net.backward(&tape, &dl_dy)?;
                adam_dual.step(&mut dual_net, &grads, lr)?;
            }
        }

        // penalty growth when the worst violation fails to shrink by tau;
        // an already-negligible violation never escalates the penalty
        if max_violation > 1e-6 && max_violation > config.pdl.tau * prev_max_violation {
            rho = (config.pdl.alpha * rho).min(config.pdl.rho_max);
        }
        prev_max_violation = max_violation;

        let val = validation_metric(
            &net,
            None,
            config.mode,
            problem,
            dataset,
            &dataset.splits.val,
            &mut restorer,
        )?;
        history.push(EpochStats {
            epoch: outer,
            loss: epoch_loss / count.max(1) as f64,
            mean_violation: max_violation,
            val_regret_pct: dataset.x_star.as_ref().map(|_| val),
        });
        if stopper.observe(val, &net, Some(&dual_net)) {
            break;
        }
    }
    Ok(TrainedModel {
        method: LtoMethod::Pdl,
        mode: config.mode,
        net: stopper.best_net,
        dual_net: stopper.best_dual,
        dc3: None,
        ld_state: None,
        pdl_rho: Some(rho),
        history,
        lr_used: lr,
    })
}

// ---------------------------------------------------------------------------
// DC3
// ---------------------------------------------------------------------------

fn dc3_train_at(
    problem: &dyn ParametricProblem,
    dataset: &Dataset,
    config: &TrainConfig,
    lr: f64,
) -> Result<TrainedModel> {
    let constraints = problem.linear_constraints().ok_or_else(|| {
        Error::Unsupported("DC3 completion requires linear equality constraints".into())
    })?;
    let rt = Dc3Runtime::new(constraints, config.dc3, config.seed)?;
    let n = problem.n_decision();
    let np = rt.n_predicted();
    let dims = proxy_dims(dataset, config, np);
    let mut net = Mlp::init(&dims, Head::Linear, config.seed)?;
    let mut adam = Adam::new(&net);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xDC33));
    let mut restorer = Restorer::new(problem)?;

    let lam = config.dc3.penalty_total * config.dc3.ineq_fraction;
    let mu_w = config.dc3.penalty_total * (1.0 - config.dc3.ineq_fraction);

    let mut history = Vec::new();
    let mut stopper = EarlyStopper::new(&net, None, config.patience);

    for epoch in 0..config.epochs {
        let batches = shuffled_batches(&dataset.splits.train, config.batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_viol = 0.0;
        let mut count = 0usize;
        for batch in &batches {
            let inputs = gather_inputs(dataset, config.mode, batch);
            let (out, tape) = net.forward_batch_train(&inputs, config.dropout, &mut rng)?;
            let mut dl_dy = Matrix::zeros(batch.len(), np);
            let scale = 1.0 / batch.len() as f64;
            for (r, &i) in batch.iter().enumerate() {
                let z0 = out.row(r);
                let zeta = &dataset.zeta[i];
                let (z_corr, masks) = rt.correction_trace(z0, config.dc3.t_train);
                let x = rt.scatter(&z_corr);
                let g = problem.ineq_residuals(&x, zeta);
                let h = problem.eq_residuals(&x, zeta);
                let pos_g: Vec<f64> = g.iter().map(|&v| v.max(0.0)).collect();
                let loss = problem.objective(&x, zeta)
                    + lam * pos_g.iter().map(|v| v * v).sum::<f64>()
                    + mu_w * h.iter().map(|v| v * v).sum::<f64>();
                epoch_loss += loss;
                epoch_viol += problem.max_violation(&x, zeta);
                count += 1;
                // dL/dx in full space
                let mut dl_dx = problem.grad_x_objective(&x, zeta);
                if !pos_g.is_empty() {
                    let jg = problem.ineq_jacobian(&x, zeta);
                    let wg: Vec<f64> = pos_g.iter().map(|&v| 2.0 * lam * v).collect();
                    linalg::axpy(1.0, &jg.matvec_t(&wg), &mut dl_dx);
                }
                if !h.is_empty() {
                    let jh = problem.eq_jacobian(&x, zeta);
                    let wh: Vec<f64> = h.iter().map(|&v| 2.0 * mu_w * v).collect();
                    linalg::axpy(1.0, &jh.matvec_t(&wh), &mut dl_dx);
                }
                // into predicted space, then back through corrections
                let dz_corr = rt.gather_grad(&dl_dx);
                let dz0 = rt.backward_corrections(&masks, &dz_corr);
                for (o, &v) in dl_dy.row_mut(r).iter_mut().zip(&dz0) {
                    *o = v * scale;
                }
            }
            if !epoch_loss.is_finite() {
                return Err(Error::TrainingDiverged("non-finite DC3 loss".into()));
            }
            let (grads, _) = net.backward(&tape, &dl_dy)?;
            adam.step(&mut net, &grads, lr)?;
        }
        let val = validation_metric(
            &net,
            Some(&rt),
            config.mode,
            problem,
            dataset,
            &dataset.splits.val,
            &mut restorer,
        )?;
        history.push(EpochStats {
            epoch,
            loss: epoch_loss / count.max(1) as f64,
            mean_violation: epoch_viol / count.max(1) as f64,
            val_regret_pct: dataset.x_star.as_ref().map(|_| val),
        });
        if stopper.observe(val, &net, None) {
            break;
        }
    }
    let _ = n;
    Ok(TrainedModel {
        method: LtoMethod::Dc3,
        mode: config.mode,
        net: stopper.best_net,
        dual_net: None,
        dc3: Some(rt),
        ld_state: None,
        pdl_rho: None,
        history,
        lr_used: lr,
    })
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub regret_pct_post: f64,
    pub regret_pct_pre: f64,
    pub violation_pre: f64,
    pub violation_post: f64,
    /// Mean per-sample forward-pass time in seconds.
    pub infer_secs: f64,
    /// Mean per-sample restoration time in seconds.
    pub restore_secs: f64,
    pub n: usize,
}

/// Evaluates a trained proxy on a split: percent regret before and after
/// restoration, pre-restoration violation, and per-sample timings. Requires
/// precomputed targets.
pub fn evaluate_model(
    model: &TrainedModel,
    problem: &dyn ParametricProblem,
    dataset: &Dataset,
    idxs: &[usize],
) -> Result<EvalMetrics> {
    let x_star = dataset
        .x_star
        .as_ref()
        .ok_or_else(|| Error::contract("evaluation requires precomputed targets"))?;
    let mut restorer = Restorer::new(problem)?;
    let mut metrics = EvalMetrics {
        n: idxs.len(),
        ..EvalMetrics::default()
    };
    let mut pre_gap_sum = 0.0;
    let mut post_gap_sum = 0.0;
    let mut norm_sum = 0.0;
    for &i in idxs {
        let input = model_input(dataset, model.mode, i);
        let zeta = &dataset.zeta[i];
        let t0 = Instant::now();
        let x_hat = model.infer(input)?;
        metrics.infer_secs += t0.elapsed().as_secs_f64();
        let f_star = problem.objective(&x_star[i], zeta);
        pre_gap_sum += problem.objective(&x_hat, zeta) - f_star;
        norm_sum += f_star.abs();
        metrics.violation_pre += problem.max_violation(&x_hat, zeta);
        let restored = restorer.restore(&x_hat, zeta)?;
        metrics.restore_secs += restored.elapsed_secs;
        post_gap_sum += problem.objective(&restored.x, zeta) - f_star;
        metrics.violation_post += restored.max_violation();
    }
    let inv = 1.0 / idxs.len().max(1) as f64;
    metrics.regret_pct_post = 100.0 * post_gap_sum / norm_sum.max(1e-12);
    metrics.regret_pct_pre = 100.0 * pre_gap_sum / norm_sum.max(1e-12);
    metrics.violation_pre *= inv;
    metrics.violation_post *= inv;
    metrics.infer_secs *= inv;
    metrics.restore_secs *= inv;
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Persistence: checkpoint plus method-state sidecar
// ---------------------------------------------------------------------------

const MODEL_FORMAT: &str = "optprox-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
enum Sidecar {
    Ld {
        lambda: Vec<f64>,
        mu: Vec<f64>,
    },
    Pdl {
        rho: f64,
    },
    Dc3 {
        predicted: Vec<usize>,
        completed: Vec<usize>,
        params: Dc3Params,
    },
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    mode: InputMode,
    /// Checkpoint document for the primary network.
    net: String,
    dual_net: Option<String>,
    sidecar: Sidecar,
    lr_used: f64,
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let sidecar = match self.method {
            LtoMethod::Ld => {
                let s = self.ld_state.as_ref().ok_or_else(|| {
                    Error::contract("LD model missing multiplier state")
                })?;
                Sidecar::Ld {
                    lambda: s.lambda.clone(),
                    mu: s.mu.clone(),
                }
            }
            LtoMethod::Pdl => Sidecar::Pdl {
                rho: self.pdl_rho.unwrap_or_default(),
            },
            LtoMethod::Dc3 => {
                let rt = self
                    .dc3
                    .as_ref()
                    .ok_or_else(|| Error::contract("DC3 model missing runtime"))?;
                Sidecar::Dc3 {
                    predicted: rt.predicted.clone(),
                    completed: rt.completed.clone(),
                    params: rt.params,
                }
            }
        };
        let doc = ModelFile {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            mode: self.mode,
            net: self.net.to_json(),
            dual_net: self.dual_net.as_ref().map(Mlp::to_json),
            sidecar,
            lr_used: self.lr_used,
        };
        std::fs::write(path, serde_json::to_string_pretty(&doc).unwrap())?;
        Ok(())
    }

    /// Loads a model; the problem is needed to rebuild the DC3 completion
    /// pipeline from the stored partition.
    pub fn load(path: &Path, problem: &dyn ParametricProblem) -> Result<TrainedModel> {
        let text = std::fs::read_to_string(path)?;
        let doc: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        if doc.format != MODEL_FORMAT || doc.version != MODEL_VERSION {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: format!("unknown model format {:?} v{}", doc.format, doc.version),
            });
        }
        let net = Mlp::from_json(&doc.net)?;
        let dual_net = doc.dual_net.as_deref().map(Mlp::from_json).transpose()?;
        let (method, dc3, ld_state, pdl_rho) = match doc.sidecar {
            Sidecar::Ld { lambda, mu } => {
                (LtoMethod::Ld, None, Some(LdState { lambda, mu }), None)
            }
            Sidecar::Pdl { rho } => (LtoMethod::Pdl, None, None, Some(rho)),
            Sidecar::Dc3 {
                predicted,
                completed,
                params,
            } => {
                let constraints = problem.linear_constraints().ok_or_else(|| {
                    Error::Unsupported("DC3 model needs linear constraints".into())
                })?;
                let rt = Dc3Runtime::try_build(constraints, params, predicted, completed)?;
                (LtoMethod::Dc3, Some(rt), None, None)
            }
        };
        Ok(TrainedModel {
            method,
            mode: doc.mode,
            net,
            dual_net,
            dc3,
            ld_state,
            pdl_rho,
            history: Vec::new(),
            lr_used: doc.lr_used,
        })
    }
}
