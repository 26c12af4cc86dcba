//! Command-line harness: dataset generation, training, evaluation, the
//! distribution-shift probe, and full grid reproduction.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use optprox_core::datagen::{self, Dataset};
use optprox_core::harness::{reproduce_grid, ExperimentConfig, MethodTag, ProblemTag};
use optprox_core::lto::{
    evaluate_model, lto_train, InputMode, LtoMethod, TrainConfig, TrainedModel,
};
use optprox_core::problems::percent_of_optimum;
use optprox_core::pto::{
    distribution_shift_probe, predict_then_solve, two_stage_train, PredictorModel, PtoTrainConfig,
};
use optprox_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "optprox",
    version,
    about = "Learned optimization proxies and predict-then-optimize baselines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset for one (problem, k, seed) cell.
    GenData(GenDataArgs),
    /// Train a model on a dataset file.
    Train(TrainArgs),
    /// Evaluate a saved model on a dataset's test split.
    Eval(EvalArgs),
    /// Train a proxy on the 2-D toy and measure regret under input scaling.
    ShiftProbe(ShiftProbeArgs),
    /// Run the full (method x k x seed) grid and write reports.
    Reproduce(ReproduceArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// portfolio | nonconvex_qp | toy2d
    #[arg(long)]
    problem: String,
    /// Feature-map depth (0 = identity features).
    #[arg(long, default_value_t = 0)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of samples (split 10:1:1).
    #[arg(long, default_value_t = 240)]
    n: usize,
    /// Skip ground-truth target computation.
    #[arg(long, default_value_t = false)]
    skip_targets: bool,
    /// Optional CSV export path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Experiment config JSON providing dimensions.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// ld | pdl | dc3 | two_stage
    #[arg(long)]
    method: String,
    /// Dataset file produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Proxy input: features (ltof) or raw parameters (lto).
    #[arg(long, default_value = "ltof")]
    mode: String,
    /// Hidden layers for the two-stage predictor.
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, default_value_t = 64)]
    hidden_width: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Optional JSON output path (stdout otherwise).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ShiftProbeArgs {
    /// Comma-separated input scale factors (1.0 is always included).
    #[arg(long, default_value = "1,2,3,4")]
    scales: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training samples for the toy proxy.
    #[arg(long, default_value_t = 240)]
    n: usize,
    #[arg(long, default_value_t = 120)]
    epochs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReproduceArgs {
    /// portfolio | nonconvex_qp
    #[arg(long)]
    problem: Option<String>,
    /// Comma-separated feature depths, e.g. "0,2,4,8".
    #[arg(long)]
    k: Option<String>,
    /// Comma-separated methods, e.g. "ld,pdl,dc3,two_stage,epo".
    #[arg(long)]
    methods: Option<String>,
    /// Number of seeds (runs 0..seeds).
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    /// Experiment config JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit nonzero if any grid cell fails.
    #[arg(long, default_value_t = false)]
    strict: bool,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.trim()
                .parse::<T>()
                .map_err(|_| Error::Contract(format!("invalid {what} entry {p:?}")))
        })
        .collect()
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.problem = ProblemTag::parse(&args.problem)?;
    cfg.n_samples = args.n;
    let (spec, zetas, splits) = match cfg.problem {
        ProblemTag::Portfolio => datagen::gen_portfolio_base(args.n, cfg.dims.assets, args.seed)?,
        ProblemTag::NonconvexQp => datagen::gen_nonconvex_base(
            args.n,
            cfg.dims.n,
            cfg.dims.n_eq,
            cfg.dims.n_ineq,
            args.seed,
        )?,
        ProblemTag::Toy2d => datagen::gen_toy2d_base(args.n, args.seed),
    };
    let feature_seed = optprox_core::problems::derive_seed(args.seed, 1000 + args.k as u64);
    let mut ds = datagen::assemble_dataset(
        &spec,
        &zetas,
        &splits,
        args.k,
        cfg.feature_dim(),
        args.seed,
        feature_seed,
    )?;
    if !args.skip_targets {
        let problem = spec.build()?;
        let stats = datagen::precompute_targets(&mut ds, problem.as_ref())?;
        if stats.dropped > 0 {
            eprintln!(
                "warning: dropped {} samples whose ground-truth solve failed",
                stats.dropped
            );
        }
    }
    ds.save(&args.out)?;
    if let Some(csv) = &args.csv {
        ds.export_csv(csv)?;
    }
    eprintln!(
        "wrote {} samples ({} train / {} val / {} test) to {}",
        ds.len(),
        ds.splits.train.len(),
        ds.splits.val.len(),
        ds.splits.test.len(),
        args.out.display()
    );
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let ds = Dataset::load(&args.data)?;
    let problem = ds.problem.build()?;
    match args.method.as_str() {
        "ld" | "pdl" | "dc3" => {
            let method = match args.method.as_str() {
                "ld" => LtoMethod::Ld,
                "pdl" => LtoMethod::Pdl,
                _ => LtoMethod::Dc3,
            };
            let mode = match args.mode.as_str() {
                "ltof" => InputMode::Ltof,
                "lto" => InputMode::Lto,
                other => {
                    return Err(Error::Contract(format!(
                        "unknown mode {other:?}; valid: lto, ltof"
                    )))
                }
            };
            let mut tc = TrainConfig::new(method, mode, args.seed);
            if let Some(e) = args.epochs {
                tc.epochs = e;
            }
            tc.hidden_width = args.hidden_width;
            let model = lto_train(problem.as_ref(), &ds, &tc)?;
            model.save(&args.out)?;
            eprintln!(
                "trained {} ({} epochs run, lr {}), saved to {}",
                args.method,
                model.history.len(),
                model.lr_used,
                args.out.display()
            );
        }
        "two_stage" | "two-stage" => {
            let mut pc = PtoTrainConfig::new(args.seed);
            if let Some(e) = args.epochs {
                pc.epochs = e;
            }
            pc.hidden_width = args.hidden_width;
            let model = two_stage_train(&ds, args.m, &pc)?;
            model.save(&args.out)?;
            eprintln!(
                "trained two_stage (m={}), saved to {}",
                args.m,
                args.out.display()
            );
        }
        other => {
            return Err(Error::Contract(format!(
                "unknown method {other:?}; valid here: ld, pdl, dc3, two_stage (epo variants run via `reproduce`)"
            )))
        }
    }
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let ds = Dataset::load(&args.data)?;
    let problem = ds.problem.build()?;
    let text = std::fs::read_to_string(&args.model)?;
    let doc: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: args.model.display().to_string(),
        detail: e.to_string(),
    })?;
    let format = doc.get("format").and_then(|f| f.as_str()).unwrap_or("");
    let summary = match format {
        "optprox-model" => {
            let model = TrainedModel::load(&args.model, problem.as_ref())?;
            let metrics = evaluate_model(&model, problem.as_ref(), &ds, &ds.splits.test)?;
            serde_json::to_value(metrics).unwrap()
        }
        "optprox-predictor" => {
            let model = PredictorModel::load(&args.model)?;
            let x_star = ds
                .x_star
                .as_ref()
                .ok_or_else(|| Error::Contract("dataset has no targets for regret".into()))?;
            let mut regret = 0.0;
            for &i in &ds.splits.test {
                let x_hat = predict_then_solve(problem.as_ref(), &model, &ds.z[i])?;
                let f_star = problem.objective(&x_star[i], &ds.zeta[i]);
                let gap = problem.objective(&x_hat, &ds.zeta[i]) - f_star;
                regret += percent_of_optimum(gap, f_star);
            }
            regret /= ds.splits.test.len().max(1) as f64;
            serde_json::json!({ "regret_pct_post": regret, "n": ds.splits.test.len() })
        }
        other => {
            return Err(Error::Parse {
                path: args.model.display().to_string(),
                detail: format!("unknown model format tag {other:?}"),
            })
        }
    };
    let rendered = serde_json::to_string_pretty(&summary).unwrap();
    match &args.out {
        Some(path) => std::fs::write(path, rendered)?,
        None => println!("{rendered}"),
    }
    Ok(())
}

fn shift_probe(args: &ShiftProbeArgs) -> Result<()> {
    let scales: Vec<f64> = parse_list(&args.scales, "scale")?;
    let (spec, zetas, splits) = datagen::gen_toy2d_base(args.n, args.seed);
    let mut ds = datagen::assemble_dataset(&spec, &zetas, &splits, 0, 2, args.seed, args.seed)?;
    let problem = spec.build()?;
    datagen::precompute_targets(&mut ds, problem.as_ref())?;
    let mut tc = TrainConfig::new(LtoMethod::Pdl, InputMode::Lto, args.seed);
    tc.epochs = args.epochs;
    tc.hidden_width = 32;
    let proxy = lto_train(problem.as_ref(), &ds, &tc)?;
    let eval_zetas: Vec<Vec<f64>> = ds
        .splits
        .test
        .iter()
        .map(|&i| ds.zeta[i].clone())
        .collect();
    let report = distribution_shift_probe(&proxy, problem.as_ref(), &eval_zetas, &scales)?;
    std::fs::write(&args.out, report.to_csv())?;
    eprintln!(
        "wrote shift-probe series for {} scales to {}",
        report.scales.len(),
        args.out.display()
    );
    Ok(())
}

fn reproduce(args: &ReproduceArgs) -> Result<ExitCode> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &args.problem {
        cfg.problem = ProblemTag::parse(p)?;
    }
    if let Some(k) = &args.k {
        cfg.k_list = parse_list(k, "k")?;
    }
    if let Some(methods) = &args.methods {
        cfg.methods = methods
            .split(',')
            .filter(|p| !p.is_empty())
            .map(|p| MethodTag::parse(p.trim()))
            .collect::<Result<Vec<_>>>()?;
    }
    if let Some(seeds) = args.seeds {
        cfg.seeds = (0..seeds).collect();
    }
    if let Some(n) = args.samples {
        cfg.n_samples = n;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.strict = args.strict;
    eprintln!(
        "reproducing {} over k={:?}, {} methods, {} seeds, {} samples",
        cfg.problem.name(),
        cfg.k_list,
        cfg.methods.len(),
        cfg.seeds.len(),
        cfg.n_samples
    );
    let report = reproduce_grid(&cfg)?;
    report.write_files(&cfg.out_dir)?;
    print!("{}", optprox_core::harness::report_csv(&report.rows));
    for failure in &report.failures {
        eprintln!("failed cell: {failure}");
    }
    if cfg.strict && !report.failures.is_empty() {
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::GenData(args) => gen_data(args).map(|_| ExitCode::SUCCESS),
        Command::Train(args) => train(args).map(|_| ExitCode::SUCCESS),
        Command::Eval(args) => eval(args).map(|_| ExitCode::SUCCESS),
        Command::ShiftProbe(args) => shift_probe(args).map(|_| ExitCode::SUCCESS),
        Command::Reproduce(args) => reproduce(args),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
