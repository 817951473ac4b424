//! Planted dataset: save it, reload it, and look at how noisy the text-only baseline is.
//!
//! `cargo run --example synth_dataset -- [n_pairs] [seed]`

use tvproxy::retrieval::{evaluate, text_only_scores};
use tvproxy::store::{generate_synthetic, EmbeddingDataset, SynthConfig};

fn main() -> tvproxy::Result<()> {
    let mut args = std::env::args().skip(1);
    let n_pairs = args.next().and_then(|a| a.parse().ok()).unwrap_or(256);
    let seed = args.next().and_then(|a| a.parse().ok()).unwrap_or(42);
    let cfg = SynthConfig {
        n_pairs,
        seed,
        ..SynthConfig::default()
    };
    let ds = generate_synthetic(&cfg)?;

    let dir = tempfile::tempdir().expect("temp dir");
    ds.save(dir.path())?;
    let back = EmbeddingDataset::load(dir.path())?;
    assert_eq!(back, ds);
    let m = back.manifest();
    println!("{} pairs, d={}, M={}, first pair {:?}", m.pairs.len(), back.dim(), back.num_video_proxies(), m.pairs[0]);

    let r = evaluate(&text_only_scores(back.text_queries(), back.video_proxies())?, &back.ground_truth())?;
    println!(
        "text-only on p_1: R@1 {:.2} R@5 {:.2} MdR {} MnR {:.2}",
        r.recall_at_1, r.recall_at_5, r.median_rank, r.mean_rank
    );
    Ok(())
}
