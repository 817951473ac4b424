//! Text-only versus combined scores on a freshly trained generator, plus the
//! factored form that turns each pair into a single query vector.

use tvproxy::cli::RunConfig;
use tvproxy::numkernel::Matrix;
use tvproxy::parallel::Executor;
use tvproxy::retrieval::{evaluate, export_report, factored_scores, text_only_scores, PairScores};
use tvproxy::store::generate_synthetic;
use tvproxy::trainer::train;

fn main() -> tvproxy::Result<()> {
    let cfg = RunConfig {
        epochs: 10,
        ..RunConfig::default()
    };
    let ds = generate_synthetic(&cfg.synth())?;
    let exec = Executor::new(4)?;
    let params = train(&ds, &cfg.train(), &cfg.adamw(), &exec)?.checkpoint.generator;
    let (texts, videos, gt) = (ds.text_queries(), ds.video_proxies(), ds.ground_truth());

    let text_only = text_only_scores(texts, videos)?;
    let pair = PairScores::compute(texts, videos, &params, &exec)?;
    let combined = pair.combined(cfg.gamma)?;
    for (name, s) in [("text-only", &text_only), ("combined", &combined)] {
        let r = evaluate(s, &gt)?;
        println!(
            "{name:<10} R@1 {:6.2} R@5 {:6.2} R@10 {:6.2} MdR {} MnR {:.2}",
            r.recall_at_1, r.recall_at_5, r.recall_at_10, r.median_rank, r.mean_rank
        );
    }
    println!("{} pipeline runs for {} x {} pairs", pair.invocations, texts.rows(), videos.len());

    let factored = factored_scores(texts, videos, &params, cfg.gamma, &exec)?;
    let gap = max_abs_diff(&factored.scores, &combined.scores);
    println!("max |combined - factored| = {gap:.2e}");

    let dir = tempfile::tempdir().expect("temp dir");
    export_report(&evaluate(&combined, &gt)?, &combined, dir.path(), None)?;
    println!("{}", std::fs::read_to_string(dir.path().join("report.json")).expect("report"));
    Ok(())
}

fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
