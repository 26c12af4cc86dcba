//! Calibration sweep used during development; prints regret tables for the
//! desk-scale grids. Not part of the test suite.

use std::time::Instant;

use optprox_core::harness::{prepare_seed, run_cell, ExperimentConfig, MethodTag, ProblemTag};

fn main() {
    let phase: String = std::env::args().nth(1).unwrap_or_else(|| "portfolio".into());
    let seeds: u64 = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1);
    match phase.as_str() {
        "portfolio" => sweep(ProblemTag::Portfolio, seeds, vec![
            MethodTag::Ld,
            MethodTag::Pdl,
            MethodTag::Dc3,
            MethodTag::TwoStage,
            MethodTag::Epo,
        ]),
        "nonconvex" => sweep(ProblemTag::NonconvexQp, seeds, vec![
            MethodTag::Ld,
            MethodTag::Pdl,
            MethodTag::Dc3,
            MethodTag::TwoStage,
            MethodTag::Epo,
        ]),
        "proxy" => sweep(ProblemTag::Portfolio, seeds, vec![
            MethodTag::Ld,
            MethodTag::EpoProxy,
            MethodTag::EpoProxyPretrained,
        ]),
        "proxy_nc" => sweep(ProblemTag::NonconvexQp, seeds, vec![
            MethodTag::Ld,
            MethodTag::EpoProxy,
            MethodTag::EpoProxyPretrained,
        ]),
        other => eprintln!("unknown phase {other}"),
    }
}

fn sweep(problem: ProblemTag, n_seeds: u64, methods: Vec<MethodTag>) {
    let cfg = ExperimentConfig {
        problem,
        k_list: vec![2, 4, 8],
        methods,
        seeds: (0..n_seeds).collect(),
        ..ExperimentConfig::default()
    };
    println!(
        "problem={} n={} dims={:?} hidden={} seeds={:?}",
        cfg.problem.name(),
        cfg.n_samples,
        cfg.dims,
        cfg.hidden_width,
        cfg.seeds
    );
    for &seed in &cfg.seeds {
        let t0 = Instant::now();
        let mut cache = prepare_seed(&cfg, seed).expect("prepare");
        println!("seed {seed}: base data in {:.1}s", t0.elapsed().as_secs_f64());
        for &k in &cfg.k_list {
            for &method in &cfg.methods {
                let t1 = Instant::now();
                match run_cell(&cfg, &mut cache, method, k) {
                    Ok(cell) => println!(
                        "seed {seed} k={k} {:<22} m={:?} post={:>10.4} pre={:>10.4} viol_pre={:.3e} it={:.2e}s fct={:.2e}s et={:?} train={:.1}s",
                        method.name(),
                        cell.m_best,
                        cell.regret_pct_post,
                        cell.regret_pct_pre,
                        cell.violation_pre,
                        cell.it_secs,
                        cell.fct_secs,
                        cell.et_secs.map(|v| format!("{v:.2e}")),
                        t1.elapsed().as_secs_f64()
                    ),
                    Err(e) => println!("seed {seed} k={k} {} FAILED: {e}", method.name()),
                }
            }
        }
    }
}
