//! The three score grids of a batch and the losses built on them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tvproxy::generator::{GeneratorConfig, GeneratorParams};
use tvproxy::numkernel::Matrix;
use tvproxy::objectives::{build_grids, infonce_bidirectional, loss_backward, loss_total, Temperature};
use tvproxy::parallel::Executor;
use tvproxy::store::{generate_synthetic, make_batches, SynthConfig};

fn main() -> tvproxy::Result<()> {
    let eye = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0])?;
    println!("identity grid at sigma 1: {:.6}", infonce_bidirectional(&eye, 1.0)?);
    println!("uniform 8x8 grid:         {:.6} (ln 8 = {:.6})", infonce_bidirectional(&Matrix::zeros(8, 8), 0.01)?, 8f64.ln());

    let ds = generate_synthetic(&SynthConfig {
        n_pairs: 32,
        ..SynthConfig::default()
    })?;
    let batch = &make_batches(&ds, 8, 0)?[0];
    let (texts, videos) = ds.gather(batch);
    let params = GeneratorParams::init(&GeneratorConfig::default(), ds.dim(), ds.num_video_proxies(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let exec = Executor::sequential();

    let grids = build_grids(&texts, &videos, &params, &exec)?;
    for sigma in [1.0, 0.1, Temperature::default().sigma()] {
        let l = loss_total(&grids, sigma, 0.5, 0.25)?;
        println!("sigma {sigma:<5.3} l_r {:.4} l_p {:.4} l_pos {:.4} total {:.4}", l.l_r, l.l_p, l.l_pos, l.total);
    }
    let g = loss_backward(&texts, &videos, &params, Temperature::default(), 0.5, 0.25, &exec)?;
    println!("dL/dlambda {:.4e}, dL/dtheta {:.4e}, {} pipeline runs", g.log_temperature, g.generator.theta, g.invocations);
    Ok(())
}
