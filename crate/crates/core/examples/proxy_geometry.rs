//! One text, one video: trace the leader, director, dash and proxy in both dash modes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvproxy::generator::{
    compute_director, generate_proxy, leader_path, similarities, DashMode, GeneratorConfig, GeneratorParams,
};
use tvproxy::numkernel::{cosine_sim, l2_norm, Matrix};

fn main() -> tvproxy::Result<()> {
    let (d, m) = (6, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t_q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let video = Matrix::new(m, d, (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    for mode in [DashMode::Scalar, DashMode::Vector] {
        let cfg = GeneratorConfig {
            dash_mode: mode,
            ..GeneratorConfig::default()
        };
        let params = GeneratorParams::init(&cfg, d, m, &mut rng)?;
        let leader = leader_path(&t_q, &video, &params)?;
        let director = compute_director(&t_q, &leader, params.delta, params.eta)?;
        let proxy = generate_proxy(&t_q, &video, &params)?;
        let shift: Vec<f64> = proxy.iter().zip(&t_q).map(|(p, q)| p - q).collect();

        println!("{mode} dash");
        println!("  sims to proxies   {:?}", round(&similarities(&t_q, &video)?));
        println!("  |director|        {:.4}", l2_norm(&director));
        println!("  |t_p - t_q|       {:.4}", l2_norm(&shift));
        println!("  cos(shift, d)     {:.6}", cosine_sim(&shift, &director)?);
        println!("  s(t_q, p1) {:.4} -> s(t_p, p1) {:.4}", cosine_sim(&t_q, video.row(0))?, cosine_sim(&proxy, video.row(0))?);
    }
    Ok(())
}

fn round(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}
