//! Prints the distribution of the optimal objective and allocations over a
//! generated dataset; development aid.

use optprox_core::datagen::{assemble_dataset, gen_portfolio_base, precompute_targets};
use optprox_core::linalg::norm2;

fn main() {
    let seed = 0;
    let (spec, zetas, splits) = gen_portfolio_base(240, 10, seed).unwrap();
    let mut ds = assemble_dataset(&spec, &zetas, &splits, 0, 30, seed, 1).unwrap();
    let problem = spec.build().unwrap();
    precompute_targets(&mut ds, problem.as_ref()).unwrap();
    let xs = ds.x_star.as_ref().unwrap();
    let mut fstars: Vec<f64> = Vec::new();
    let mut max_entries = Vec::new();
    for (x, zeta) in xs.iter().zip(&ds.zeta) {
        fstars.push(problem.objective(x, zeta));
        max_entries.push(x.iter().cloned().fold(0.0f64, f64::max));
    }
    fstars.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = fstars.len();
    println!(
        "f* quantiles: min={:.4} p10={:.4} p50={:.4} p90={:.4} max={:.4}",
        fstars[0],
        fstars[n / 10],
        fstars[n / 2],
        fstars[9 * n / 10],
        fstars[n - 1]
    );
    let near0 = fstars.iter().filter(|f| f.abs() < 0.02).count();
    println!("|f*| < 0.02: {near0} of {n}");
    max_entries.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "max allocation entry: p10={:.3} p50={:.3} p90={:.3}",
        max_entries[n / 10],
        max_entries[n / 2],
        max_entries[9 * n / 10]
    );
    // spread of optimal solutions around their mean
    let d = xs[0].len();
    let mut mean = vec![0.0; d];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n as f64;
        }
    }
    let avg_dist = xs
        .iter()
        .map(|x| {
            let diff: Vec<f64> = x.iter().zip(&mean).map(|(a, b)| a - b).collect();
            norm2(&diff)
        })
        .sum::<f64>()
        / n as f64;
    println!("mean ||x* - mean(x*)||_2 = {avg_dist:.4}");
}
