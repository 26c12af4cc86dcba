//! Synthetic data: random feature mappings of increasing depth, parameter
//! synthesis for each benchmark problem, deterministic splits, and the
//! on-disk dataset format.
//!
//! Everything is a pure function of `(dims, seed)`; feature generation and
//! parameter synthesis use independent derived seeds so regenerating features
//! at a different depth never perturbs the parameters.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::nn::{Head, Mlp};
use crate::problems::{
    LinearConstraintSet, NonconvexQpProblem, ParametricProblem, PgdConfig, PortfolioProblem,
    Toy2dProblem, FEASIBILITY_TOL,
};

/// Serializable description of a problem instance, the boundary between
/// dataset files and the in-memory problem types.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    Portfolio {
        sigma: Matrix,
        risk_weight: f64,
    },
    NonconvexQp {
        mu: Vec<f64>,
        constraints: LinearConstraintSet,
        pgd: PgdConfig,
        gt_seed: u64,
    },
    Toy2d,
}

impl ProblemSpec {
    pub fn build(&self) -> Result<Box<dyn ParametricProblem>> {
        Ok(match self {
            ProblemSpec::Portfolio { sigma, risk_weight } => {
                Box::new(PortfolioProblem::new(sigma.clone(), *risk_weight)?)
            }
            ProblemSpec::NonconvexQp {
                mu,
                constraints,
                pgd,
                gt_seed,
            } => Box::new(NonconvexQpProblem::new(
                mu.clone(),
                constraints.clone(),
                *pgd,
                *gt_seed,
            )?),
            ProblemSpec::Toy2d => Box::new(Toy2dProblem::new()),
        })
    }

    pub fn tag(&self) -> &'static str {
        match self {
            ProblemSpec::Portfolio { .. } => "portfolio",
            ProblemSpec::NonconvexQp { .. } => "nonconvex_qp",
            ProblemSpec::Toy2d => "toy2d",
        }
    }
}

/// Frozen random network mapping problem parameters to observed features.
/// `depth` counts hidden layers of width 50; depth 0 is the identity.
#[derive(Clone, Debug)]
pub struct FeatureGenerator {
    net: Option<Mlp>,
    depth: usize,
    seed: u64,
}

pub const FEATURE_HIDDEN_WIDTH: usize = 50;

impl FeatureGenerator {
    pub fn new(n_param: usize, n_features: usize, depth: usize, seed: u64) -> Result<Self> {
        let net = if depth == 0 {
            None
        } else {
            let mut dims = Vec::with_capacity(depth + 2);
            dims.push(n_param);
            dims.extend(std::iter::repeat(FEATURE_HIDDEN_WIDTH).take(depth));
            dims.push(n_features);
            Some(Mlp::init(&dims, Head::Linear, seed)?)
        };
        Ok(FeatureGenerator { net, depth, seed })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn map(&self, zeta: &[f64]) -> Result<Vec<f64>> {
        match &self.net {
            None => Ok(zeta.to_vec()),
            Some(net) => net.forward(zeta),
        }
    }
}

/// Applies a freshly built generator to every parameter vector.
pub fn gen_features(
    zetas: &[Vec<f64>],
    n_features: usize,
    depth: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, FeatureGenerator)> {
    let n_param = zetas.first().map_or(0, Vec::len);
    let generator = FeatureGenerator::new(n_param, n_features, depth, seed)?;
    let z = zetas
        .iter()
        .map(|zeta| generator.map(zeta))
        .collect::<Result<Vec<_>>>()?;
    Ok((z, generator))
}

/// Train/validation/test index partition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    /// Proportional 10:1:1 split (2000/200/200 at the reference size).
    pub fn proportional(n: usize) -> Splits {
        let train = n * 10 / 12;
        let val = (n - train) / 2;
        Splits {
            train: (0..train).collect(),
            val: (train..train + val).collect(),
            test: (train + val..n).collect(),
        }
    }

    /// Proportional split over a seeded random permutation, so temporally
    /// correlated sample streams do not leave the held-out blocks in an
    /// unseen regime.
    pub fn proportional_shuffled(n: usize, seed: u64) -> Splits {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::problems::derive_seed(seed, 999));
        order.shuffle(&mut rng);
        let train = n * 10 / 12;
        let val = (n - train) / 2;
        Splits {
            train: order[..train].to_vec(),
            val: order[train..train + val].to_vec(),
            test: order[train + val..].to_vec(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.val).chain(&self.test) {
            if i >= n {
                return Err(Error::contract(format!("split index {i} out of range {n}")));
            }
            if seen[i] {
                return Err(Error::contract(format!("split index {i} appears twice")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::contract("splits do not cover all samples"));
        }
        Ok(())
    }
}

/// Aligned samples `(z, zeta, optional x_star)` with split indices.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub problem: ProblemSpec,
    /// Feature-map depth this dataset was generated with (0 = identity).
    pub k: usize,
    pub seed: u64,
    pub feature_seed: u64,
    pub z: Vec<Vec<f64>>,
    pub zeta: Vec<Vec<f64>>,
    pub x_star: Option<Vec<Vec<f64>>>,
    pub splits: Splits,
}

const DATASET_FORMAT: &str = "optprox-dataset";
const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    dataset: Dataset,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.zeta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zeta.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.z.first().map_or(0, Vec::len)
    }

    pub fn param_dim(&self) -> usize {
        self.zeta.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.z.len() != self.zeta.len() {
            return Err(Error::contract("z/zeta length mismatch"));
        }
        if let Some(xs) = &self.x_star {
            if xs.len() != self.zeta.len() {
                return Err(Error::contract("x_star length mismatch"));
            }
        }
        self.splits.validate(self.len())?;
        if let Some(xs) = &self.x_star {
            let problem = self.problem.build()?;
            for (x, zeta) in xs.iter().zip(&self.zeta) {
                let viol = problem.max_violation(x, zeta);
                if viol > FEASIBILITY_TOL {
                    return Err(Error::contract(format!(
                        "stored x_star violates constraints by {viol:.3e}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Canonical (compact JSON) serialization; hashing this is how tests pin
    /// generator stability.
    pub fn canonical_json(&self) -> String {
        let doc = DatasetFile {
            format: DATASET_FORMAT.to_string(),
            version: DATASET_VERSION,
            dataset: self.clone(),
        };
        serde_json::to_string(&doc).expect("dataset serialization cannot fail")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.canonical_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        let doc: DatasetFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        if doc.format != DATASET_FORMAT {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: format!("unknown format tag {:?}", doc.format),
            });
        }
        if doc.version != DATASET_VERSION {
            return Err(Error::Parse {
                path: path.display().to_string(),
                detail: format!("unsupported dataset version {}", doc.version),
            });
        }
        doc.dataset.validate()?;
        Ok(doc.dataset)
    }

    /// Columns: sample_id, z_*, zeta_*, xstar_*.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        use std::fmt::Write as _;
        let mut out = String::new();
        out.push_str("sample_id");
        for j in 0..self.feature_dim() {
            let _ = write!(out, ",z_{j}");
        }
        for j in 0..self.param_dim() {
            let _ = write!(out, ",zeta_{j}");
        }
        let x_dim = self
            .x_star
            .as_ref()
            .and_then(|xs| xs.first().map(Vec::len))
            .unwrap_or(0);
        for j in 0..x_dim {
            let _ = write!(out, ",xstar_{j}");
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{i}");
            for v in &self.z[i] {
                let _ = write!(out, ",{v}");
            }
            for v in &self.zeta[i] {
                let _ = write!(out, ",{v}");
            }
            if let Some(xs) = &self.x_star {
                for v in &xs[i] {
                    let _ = write!(out, ",{v}");
                }
            }
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Portfolio synthesis
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PortfolioParams {
    pub zetas: Vec<Vec<f64>>,
    pub sigma: Matrix,
}

pub const PORTFOLIO_ALPHA: f64 = 0.24;
pub const PORTFOLIO_SIGMA_EPS: f64 = 0.05;
const PORTFOLIO_FACTORS: usize = 3;

/// Synthesizes return parameters `zeta_t = alpha * (base_t + eps_t)` around
/// mean-reverting random walks (standing in for real price data), with
/// `eps_t ~ N(0, sigma_eps^2 I)`, plus a factor-structured covariance
/// `Sigma = F Sigma_F F' + D` with 3 factors and diagonal idiosyncratic risk.
///
/// The base return decomposes as `m_j + market_t + idio_jt`: a wide common
/// market level shared by every asset and a modest idiosyncratic walk per
/// asset. Allocations over the budget simplex are invariant to the level, so
/// most of the parameter variance is decision-irrelevant, as with real
/// returns.
pub fn gen_portfolio_params(
    n_samples: usize,
    n_assets: usize,
    seed: u64,
    sigma_eps: f64,
    alpha: f64,
) -> PortfolioParams {
    // walk, noise and covariance draw from independent streams, so the same
    // seed with sigma_eps = 0 produces exactly the de-noised path
    let mut rng_walk = ChaCha8Rng::seed_from_u64(crate::problems::derive_seed(seed, 10));
    let mut rng_noise = ChaCha8Rng::seed_from_u64(crate::problems::derive_seed(seed, 11));
    let mut rng_sigma = ChaCha8Rng::seed_from_u64(crate::problems::derive_seed(seed, 12));
    let gauss = Normal::new(0.0, 1.0).unwrap();

    let means: Vec<f64> = (0..n_assets).map(|_| rng_walk.gen_range(0.5..1.5)).collect();
    // fixed zero-sum spread direction: the decision-relevant factor
    let mut spread_dir: Vec<f64> = (0..n_assets).map(|_| gauss.sample(&mut rng_walk)).collect();
    let dm = spread_dir.iter().sum::<f64>() / n_assets as f64;
    for v in spread_dir.iter_mut() {
        *v -= dm;
    }
    let dn = crate::linalg::norm2(&spread_dir).max(1e-12);
    for v in spread_dir.iter_mut() {
        *v *= (n_assets as f64).sqrt() / dn;
    }
    let mut market = 0.0f64;
    let mut spread = 0.0f64;
    let mut idio = vec![0.0f64; n_assets];
    let mut zetas = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let zeta: Vec<f64> = means
            .iter()
            .zip(&idio)
            .zip(&spread_dir)
            .map(|((&m, &i), &d)| {
                alpha * (m + market + spread * d + i + sigma_eps * gauss.sample(&mut rng_noise))
            })
            .collect();
        zetas.push(zeta);
        market = 0.9 * market + 0.4 * gauss.sample(&mut rng_walk);
        spread = 0.85 * spread + 0.35 * gauss.sample(&mut rng_walk);
        for i in idio.iter_mut() {
            *i = 0.9 * *i + 0.05 * gauss.sample(&mut rng_walk);
        }
    }

    // Sigma = F Sigma_F F' + D
    let mut f = Matrix::zeros(n_assets, PORTFOLIO_FACTORS);
    for v in f.data_mut() {
        *v = 0.3 * gauss.sample(&mut rng_sigma);
    }
    let mut c = Matrix::zeros(PORTFOLIO_FACTORS, PORTFOLIO_FACTORS);
    for v in c.data_mut() {
        *v = gauss.sample(&mut rng_sigma);
    }
    let mut sigma_f = c.matmul(&c.transpose());
    sigma_f.scale(1.0 / PORTFOLIO_FACTORS as f64);
    let mut sigma = f.matmul(&sigma_f).matmul(&f.transpose());
    for i in 0..n_assets {
        let d_i = rng_sigma.gen_range(0.05..0.15);
        sigma.set(i, i, sigma.get(i, i) + d_i);
    }
    PortfolioParams { zetas, sigma }
}

/// Portfolio problem plus parameter samples, splits, no features yet.
pub fn gen_portfolio_base(
    n_samples: usize,
    n_assets: usize,
    seed: u64,
) -> Result<(ProblemSpec, Vec<Vec<f64>>, Splits)> {
    let params = gen_portfolio_params(n_samples, n_assets, seed, PORTFOLIO_SIGMA_EPS, PORTFOLIO_ALPHA);
    let spec = ProblemSpec::Portfolio {
        sigma: params.sigma,
        risk_weight: 2.0,
    };
    // constructing the problem validates PSD-ness
    spec.build()?;
    Ok((spec, params.zetas, Splits::proportional_shuffled(n_samples, seed)))
}

// ---------------------------------------------------------------------------
// Nonconvex QP synthesis
// ---------------------------------------------------------------------------

/// One random instance following the standard recipe: `Q = diag(mu)` with
/// `mu ~ U(0,1)`, `A, G ~ N(0,1)`, `b ~ U(-1,1)`, and
/// `h_i = sum_j |M_ij|` with `M = G A^+`, which guarantees that `A^+ b` is
/// feasible. Regenerates `A` when `A A^T` is singular; returns the retry count.
pub fn gen_nonconvex_problem(
    n: usize,
    n_eq: usize,
    n_ineq: usize,
    seed: u64,
) -> Result<(NonconvexQpProblem, usize)> {
    if n_eq >= n {
        return Err(Error::contract("need n_eq < n for a nontrivial problem"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 1.0).unwrap();
    let mu: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut retries = 0usize;
    let (a, a_pinv) = loop {
        let mut a = Matrix::zeros(n_eq, n);
        for v in a.data_mut() {
            *v = gauss.sample(&mut rng);
        }
        match linalg::pinv_wide(&a) {
            Ok(p) => break (a, p),
            Err(_) => {
                retries += 1;
                if retries > 50 {
                    return Err(Error::Singular(
                        "could not draw a full-rank equality block".to_string(),
                    ));
                }
            }
        }
    };
    let mut g = Matrix::zeros(n_ineq, n);
    for v in g.data_mut() {
        *v = gauss.sample(&mut rng);
    }
    let b: Vec<f64> = (0..n_eq).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let m = g.matmul(&a_pinv);
    let h: Vec<f64> = (0..n_ineq)
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum())
        .collect();
    let problem = NonconvexQpProblem::new(
        mu,
        LinearConstraintSet {
            a_eq: a,
            b_eq: b,
            g_ineq: g,
            h_ineq: h,
        },
        PgdConfig::default(),
        crate::problems::derive_seed(seed, 0xC0FFEE),
    )?;
    Ok((problem, retries))
}

/// Nonconvex problem plus `zeta ~ U(0,5)^n` samples and splits.
pub fn gen_nonconvex_base(
    n_samples: usize,
    n: usize,
    n_eq: usize,
    n_ineq: usize,
    seed: u64,
) -> Result<(ProblemSpec, Vec<Vec<f64>>, Splits)> {
    let (problem, _retries) = gen_nonconvex_problem(n, n_eq, n_ineq, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::problems::derive_seed(seed, 1));
    let zetas: Vec<Vec<f64>> = (0..n_samples)
        .map(|_| (0..n).map(|_| rng.gen_range(0.0..5.0)).collect())
        .collect();
    let constraints = problem.linear_constraints().unwrap().clone();
    let spec = ProblemSpec::NonconvexQp {
        mu: problem.mu.clone(),
        constraints,
        pgd: problem.pgd,
        gt_seed: problem.gt_seed,
    };
    Ok((spec, zetas, Splits::proportional_shuffled(n_samples, seed)))
}

/// 2-D toy problem with `zeta ~ U(0.5, 1.5)^2` (the in-distribution law used
/// by the shift probe).
pub fn gen_toy2d_base(n_samples: usize, seed: u64) -> (ProblemSpec, Vec<Vec<f64>>, Splits) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zetas: Vec<Vec<f64>> = (0..n_samples)
        .map(|_| vec![rng.gen_range(0.5..1.5), rng.gen_range(0.5..1.5)])
        .collect();
    (
        ProblemSpec::Toy2d,
        zetas,
        Splits::proportional_shuffled(n_samples, seed),
    )
}

// ---------------------------------------------------------------------------
// Assembly and targets
// ---------------------------------------------------------------------------

/// Builds the dataset for one `(problem base, k)` pair. `feature_seed`
/// determines the frozen generator; `k = 0` stores `z = zeta`.
pub fn assemble_dataset(
    spec: &ProblemSpec,
    zetas: &[Vec<f64>],
    splits: &Splits,
    k: usize,
    n_features: usize,
    seed: u64,
    feature_seed: u64,
) -> Result<Dataset> {
    let (z, _) = gen_features(zetas, n_features, k, feature_seed)?;
    Ok(Dataset {
        problem: spec.clone(),
        k,
        seed,
        feature_seed,
        z,
        zeta: zetas.to_vec(),
        x_star: None,
        splits: splits.clone(),
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PrecomputeStats {
    pub solved: usize,
    pub dropped: usize,
}

/// Fills `x_star` for every sample with a feasibility-certified ground-truth
/// solve (parallel across samples). Samples whose solve fails are dropped and
/// counted. Already-populated datasets are returned untouched.
pub fn precompute_targets(dataset: &mut Dataset, problem: &dyn ParametricProblem) -> Result<PrecomputeStats> {
    if dataset.x_star.is_some() {
        return Ok(PrecomputeStats {
            solved: dataset.len(),
            dropped: 0,
        });
    }
    let solves: Vec<Option<Vec<f64>>> = dataset
        .zeta
        .par_iter()
        .map(|zeta| match problem.ground_truth(zeta) {
            Ok(x) if problem.max_violation(&x, zeta) <= FEASIBILITY_TOL => Some(x),
            _ => None,
        })
        .collect();
    let dropped = solves.iter().filter(|s| s.is_none()).count();
    if dropped == 0 {
        dataset.x_star = Some(solves.into_iter().map(Option::unwrap).collect());
        return Ok(PrecomputeStats {
            solved: dataset.len(),
            dropped: 0,
        });
    }
    // drop failed samples and remap split indices
    let keep: Vec<usize> = (0..dataset.len()).filter(|&i| solves[i].is_some()).collect();
    let mut remap = vec![usize::MAX; dataset.len()];
    for (new, &old) in keep.iter().enumerate() {
        remap[old] = new;
    }
    let filter = |ids: &[usize]| -> Vec<usize> {
        ids.iter()
            .filter(|&&i| remap[i] != usize::MAX)
            .map(|&i| remap[i])
            .collect()
    };
    dataset.splits = Splits {
        train: filter(&dataset.splits.train),
        val: filter(&dataset.splits.val),
        test: filter(&dataset.splits.test),
    };
    dataset.z = keep.iter().map(|&i| dataset.z[i].clone()).collect();
    dataset.zeta = keep.iter().map(|&i| dataset.zeta[i].clone()).collect();
    dataset.x_star = Some(keep.iter().map(|&i| solves[i].clone().unwrap()).collect());
    Ok(PrecomputeStats {
        solved: keep.len(),
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_features_at_depth_zero() {
        let zetas = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        let (z, generator) = gen_features(&zetas, 30, 0, 7).unwrap();
        assert_eq!(z, zetas);
        assert_eq!(generator.depth(), 0);
    }

    #[test]
    fn feature_generation_is_deterministic() {
        let zetas: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64, 1.0, -0.5]).collect();
        let (z1, _) = gen_features(&zetas, 8, 2, 42).unwrap();
        let (z2, _) = gen_features(&zetas, 8, 2, 42).unwrap();
        assert_eq!(z1, z2);
        let (z3, _) = gen_features(&zetas, 8, 2, 43).unwrap();
        assert_ne!(z1, z3);
    }

    #[test]
    fn feature_generator_matches_manual_forward() {
        let generator = FeatureGenerator::new(3, 4, 1, 9).unwrap();
        let net = Mlp::init(&[3, FEATURE_HIDDEN_WIDTH, 4], Head::Linear, 9).unwrap();
        let zeta = vec![0.4, -0.2, 1.1];
        assert_eq!(generator.map(&zeta).unwrap(), net.forward(&zeta).unwrap());
    }

    #[test]
    fn portfolio_params_scale_and_noise() {
        // zero noise: zeta is exactly alpha * base path
        let a = gen_portfolio_params(50, 4, 3, 0.0, PORTFOLIO_ALPHA);
        let b = gen_portfolio_params(50, 4, 3, 0.0, 1.0);
        for (za, zb) in a.zetas.iter().zip(&b.zetas) {
            for (va, vb) in za.iter().zip(zb) {
                assert!((va - PORTFOLIO_ALPHA * vb).abs() < 1e-12);
            }
        }
        // Sigma is PSD by construction
        let eigs = linalg::sym_eigenvalues(&a.sigma);
        assert!(eigs[0] >= -1e-10, "min eigenvalue {}", eigs[0]);
    }

    #[test]
    fn portfolio_noise_moments_within_bands() {
        // recover eps exactly as the difference between noisy and noise-free
        // runs (same seed, independent noise stream), then check its moments
        let n = 10_000;
        let sigma_eps = 0.05;
        let noisy = gen_portfolio_params(n, 1, 11, sigma_eps, 1.0);
        let clean = gen_portfolio_params(n, 1, 11, 0.0, 1.0);
        let eps: Vec<f64> = noisy
            .zetas
            .iter()
            .zip(&clean.zetas)
            .map(|(a, b)| a[0] - b[0])
            .collect();
        let mean = eps.iter().sum::<f64>() / n as f64;
        let var = eps.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let se_mean = sigma_eps / (n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se_mean, "mean {mean}");
        let se_var = sigma_eps * sigma_eps * (2.0 / n as f64).sqrt();
        assert!(
            (var - sigma_eps * sigma_eps).abs() < 3.0 * se_var,
            "var {var}"
        );
    }

    #[test]
    fn nonconvex_instances_admit_feasible_points() {
        for seed in 0..5 {
            let (problem, _) = gen_nonconvex_problem(8, 4, 4, seed).unwrap();
            let c = problem.linear_constraints().unwrap();
            let x = c.projector().unwrap().project(&vec![0.0; 8]).unwrap();
            let (gi, eq) = c.violation(&x);
            assert!(gi < 1e-6 && eq < 1e-6, "seed {seed}: ({gi:.2e}, {eq:.2e})");
        }
    }

    #[test]
    fn splits_are_proportional_and_disjoint() {
        let s = Splits::proportional(2400);
        assert_eq!(s.train.len(), 2000);
        assert_eq!(s.val.len(), 200);
        assert_eq!(s.test.len(), 200);
        s.validate(2400).unwrap();
        let d = Splits::proportional(240);
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (200, 20, 20));
        d.validate(240).unwrap();
    }

    #[test]
    fn dataset_roundtrip_and_version_check() {
        let (spec, zetas, splits) = gen_toy2d_base(24, 5);
        let ds = assemble_dataset(&spec, &zetas, &splits, 1, 6, 5, 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.json");
        ds.save(&path).unwrap();
        let back = Dataset::load(&path).unwrap();
        assert_eq!(back.z, ds.z);
        assert_eq!(back.zeta, ds.zeta);
        assert_eq!(back.splits, ds.splits);
        // unknown version is an explicit error
        let tampered = ds.canonical_json().replace("\"version\":1", "\"version\":9");
        let bad_path = dir.path().join("bad.json");
        std::fs::write(&bad_path, tampered).unwrap();
        assert!(matches!(Dataset::load(&bad_path), Err(Error::Parse { .. })));
    }

    #[test]
    fn precompute_targets_is_idempotent_and_feasible() {
        let (spec, zetas, splits) = gen_portfolio_base(24, 4, 8).unwrap();
        let mut ds = assemble_dataset(&spec, &zetas, &splits, 0, 4, 8, 8).unwrap();
        let problem = spec.build().unwrap();
        let stats = precompute_targets(&mut ds, problem.as_ref()).unwrap();
        assert_eq!(stats.dropped, 0);
        let xs = ds.x_star.clone().unwrap();
        for (x, zeta) in xs.iter().zip(&ds.zeta) {
            // on-simplex to tolerance, and zero self-regret
            let s: f64 = x.iter().sum();
            assert!((s - 1.0).abs() < 1e-8);
            assert!(x.iter().all(|&v| v >= -1e-8));
            let r = crate::problems::regret_with_target(
                problem.as_ref(),
                x,
                zeta,
                x,
                FEASIBILITY_TOL,
            )
            .unwrap();
            assert_eq!(r, 0.0);
        }
        // rerun leaves the dataset unchanged
        let again = precompute_targets(&mut ds, problem.as_ref()).unwrap();
        assert_eq!(again.dropped, 0);
        assert_eq!(ds.x_star.unwrap(), xs);
    }
}
