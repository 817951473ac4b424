//! Sweep the proxy weight over one set of pair scores, in both dash modes.
//!
//! `cargo run --release --example gamma_sweep -- [seed]`

use tvproxy::cli::{parse_gamma_sweep, RunConfig};
use tvproxy::generator::DashMode;
use tvproxy::parallel::Executor;
use tvproxy::retrieval::{evaluate, gamma_sweep, text_only_scores, PairScores};
use tvproxy::store::generate_synthetic;
use tvproxy::trainer::train;

fn main() -> tvproxy::Result<()> {
    let seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let gammas = parse_gamma_sweep("0.1:0.8:0.1")?;
    let exec = Executor::new(4)?;
    for mode in [DashMode::Scalar, DashMode::Vector] {
        let cfg = RunConfig {
            seed,
            dash_mode: mode,
            ..RunConfig::default()
        };
        let ds = generate_synthetic(&cfg.synth())?;
        let params = train(&ds, &cfg.train(), &cfg.adamw(), &exec)?.checkpoint.generator;
        let gt = ds.ground_truth();
        let base = evaluate(&text_only_scores(ds.text_queries(), ds.video_proxies())?, &gt)?;
        let pair = PairScores::compute(ds.text_queries(), ds.video_proxies(), &params, &exec)?;

        println!("{mode} dash, seed {seed}: text-only R@1 {:.2}", base.recall_at_1);
        for (g, r) in gamma_sweep(&pair, &gammas, &gt)? {
            let mark = if r.recall_at_1 > base.recall_at_1 { "+" } else { " " };
            println!("  gamma {g:.1}: R@1 {:6.2} {mark} MnR {:.3}", r.recall_at_1, r.mean_rank);
        }
    }
    Ok(())
}
