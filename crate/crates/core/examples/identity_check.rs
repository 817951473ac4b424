//! The combined score of a pair equals a single cosine against a rescaled query.

use tvproxy::cli::{IDENTITY_DIM, IDENTITY_GAMMA};
use tvproxy::generator::{generate_proxy, GeneratorConfig, GeneratorParams};
use tvproxy::numkernel::{cosine_sim, Matrix};
use tvproxy::retrieval::{identity_check, CombinedQuery};

fn main() -> tvproxy::Result<()> {
    let cfg = GeneratorConfig::default();
    let params = GeneratorParams::identity(&cfg, 3, 2);
    let t_q = [1.0, 0.2, 0.0];
    let video = Matrix::new(2, 3, vec![0.0, 1.0, 0.0, 0.5, 0.5, 0.5])?;
    let t_p = generate_proxy(&t_q, &video, &params)?;
    let gamma = 0.5;

    let direct = cosine_sim(&t_q, video.row(0))? + gamma * cosine_sim(&t_p, video.row(0))?;
    let q = CombinedQuery::new(&t_q, &t_p, gamma)?;
    println!("direct {direct:.12}\nfactored {:.12}", q.score(video.row(0))?);
    println!("|q|^2 {:.12} vs 1 + g^2 + 2g s(t_q,t_p) = {:.12}", q.norm_sq(), q.expected_norm_sq());

    let r = identity_check(1000, IDENTITY_DIM, IDENTITY_GAMMA, 1e-9, 0)?;
    println!(
        "{} random trials: max diff {:.2e}, {} degenerate -> {}",
        r.trials,
        r.max_abs_diff,
        r.degenerate,
        if r.pass { "PASS" } else { "FAIL" }
    );
    Ok(())
}
