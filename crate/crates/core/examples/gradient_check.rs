//! Analytic gradients against central differences, for every trainable scalar and λ.

use tvproxy::generator::{DashMode, GeneratorConfig};
use tvproxy::trainer::{grad_check, GradCheckConfig, FD_STEP};

fn main() -> tvproxy::Result<()> {
    for scaled_attention in [false, true] {
        for mode in [DashMode::Scalar, DashMode::Vector] {
            let cfg = GradCheckConfig {
                generator: GeneratorConfig {
                    dash_mode: mode,
                    scaled_attention,
                    ..GeneratorConfig::default()
                },
                ..GradCheckConfig::default()
            };
            let r = grad_check(&cfg, 1e-4, 7)?;
            println!(
                "{mode:<6} scaled={scaled_attention:<5} {} scalars, max rel err {:.2e} at {} -> {}",
                r.checked,
                r.max_rel_err,
                r.worst_param,
                if r.pass { "PASS" } else { "FAIL" }
            );
        }
    }
    // Below the rounding noise of a step-size-1e-6 difference nothing passes.
    let r = grad_check(&GradCheckConfig::default(), 1e-12, 7)?;
    println!("tol 1e-12 (step {FD_STEP:e}): pass = {}, worst {}", r.pass, r.worst_param);
    Ok(())
}
