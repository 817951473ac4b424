//! Train on the planted dataset and save a run directory.
//!
//! `cargo run --release --example train_planted -- [out_dir] [scalar|vector]`

use tvproxy::cli::RunConfig;
use tvproxy::parallel::Executor;
use tvproxy::store::generate_synthetic;
use tvproxy::trainer::{save_run, train};

fn main() -> tvproxy::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "runs/planted".into());
    let mut cfg = RunConfig::default();
    if let Some(mode) = args.next() {
        cfg.dash_mode = mode.parse()?;
    }
    cfg.validate()?;

    let ds = generate_synthetic(&cfg.synth())?;
    let (tc, adamw) = (cfg.train(), cfg.adamw());
    let outcome = train(&ds, &tc, &adamw, &Executor::new(4)?)?;

    let per_epoch = ds.len() / tc.batch_size;
    for (epoch, rows) in outcome.log.chunks(per_epoch).enumerate().filter(|(e, _)| e % 5 == 0 || e + 1 == tc.epochs) {
        let mean = rows.iter().map(|r| r.total).sum::<f64>() / rows.len() as f64;
        println!("epoch {:>2}: mean total {:.4}, sigma {:.5}", epoch + 1, mean, rows.last().unwrap().sigma);
    }
    save_run(&out, &outcome, &tc, &adamw)?;
    println!("saved {out}/checkpoint and {out}/loss_log.csv");
    Ok(())
}
