//! Hyperparameter probing for the proxy methods; development aid only.

use optprox_core::datagen::{assemble_dataset, gen_portfolio_base, precompute_targets};
use optprox_core::lto::{evaluate_model, lto_train, InputMode, LtoMethod, TrainConfig};
use optprox_core::problems::derive_seed;

fn main() {
    let method = match std::env::args().nth(1).as_deref() {
        Some("pdl") => LtoMethod::Pdl,
        Some("dc3") => LtoMethod::Dc3,
        _ => LtoMethod::Ld,
    };
    let k: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let seed = 0u64;
    let (spec, zetas, splits) = gen_portfolio_base(240, 10, seed).unwrap();
    let mut ds = assemble_dataset(&spec, &zetas, &splits, k, 30, seed, derive_seed(seed, 1000 + k as u64)).unwrap();
    let problem = spec.build().unwrap();
    precompute_targets(&mut ds, problem.as_ref()).unwrap();

    for &(lr, epochs, width, batch, patience) in &[
        (5e-3, 400usize, 64usize, 50usize, 60usize),
        (1e-2, 400, 64, 50, 60),
        (5e-3, 800, 64, 50, 100),
        (1e-2, 800, 128, 50, 100),
        (5e-3, 800, 128, 25, 100),
        (1e-2, 1500, 128, 50, 200),
    ] {
        let mut cfg = TrainConfig::new(method, InputMode::Ltof, seed);
        cfg.lr_grid = vec![lr, lr / 5.0, lr / 25.0];
        cfg.epochs = epochs;
        cfg.hidden_width = width;
        cfg.batch_size = batch;
        cfg.patience = patience;
        let t = std::time::Instant::now();
        match lto_train(problem.as_ref(), &ds, &cfg) {
            Ok(model) => {
                let m = evaluate_model(&model, problem.as_ref(), &ds, &ds.splits.test).unwrap();
                let best_val = model
                    .history
                    .iter()
                    .filter_map(|h| h.val_regret_pct)
                    .fold(f64::INFINITY, f64::min);
                println!(
                    "{:?} k={k} lr={lr} ep={epochs} w={width} b={batch} pat={patience}: test_post={:>9.3} pre={:>9.3} best_val={:>9.3} epochs_run={} t={:.1}s",
                    method, m.regret_pct_post, m.regret_pct_pre, best_val,
                    model.history.len(), t.elapsed().as_secs_f64()
                );
            }
            Err(e) => println!("{method:?} lr={lr}: FAILED {e}"),
        }
    }
}
