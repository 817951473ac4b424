//! AdamW training of the generator and temperature, plus a finite-difference
//! gradient check.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Checkpoint, GeneratorConfig, GeneratorParams};
use crate::numkernel::relative_error;
use crate::objectives::{build_grids, loss_backward, loss_total, LossGradients, Temperature};
use crate::parallel::Executor;
use crate::store::{generate_synthetic, make_batches, EmbeddingDataset, SynthConfig};

pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.2,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// First and second moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl OptimizerState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            step: 0,
            moments: sizes
                .iter()
                .map(|&n| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                })
                .collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.moments.iter().map(|m| m.m.len()).collect()
    }
}

/// One tensor handed to [`adamw_step`].
pub struct ParamSlot<'a> {
    pub values: &'a mut [f64],
    pub grads: &'a [f64],
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// One AdamW update over every slot, in slot order.
pub fn adamw_step(slots: &mut [ParamSlot<'_>], state: &mut OptimizerState, cfg: &AdamWConfig) -> Result<()> {
    if slots.len() != state.moments.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameter tensors for {} optimizer slots",
            slots.len(),
            state.moments.len()
        )));
    }
    for (k, (slot, mom)) in slots.iter().zip(&state.moments).enumerate() {
        if slot.values.len() != slot.grads.len() || slot.values.len() != mom.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "slot {k}: {} values, {} grads, {} moments",
                slot.values.len(),
                slot.grads.len(),
                mom.m.len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (slot, mom) in slots.iter_mut().zip(&mut state.moments) {
        let wd = if slot.decay { cfg.weight_decay } else { 0.0 };
        for (((p, &g), m), v) in slot
            .values
            .iter_mut()
            .zip(slot.grads)
            .zip(&mut mom.m)
            .zip(&mut mom.v)
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) + cfg.lr * wd * *p;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub generator: GeneratorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            seed: 42,
            alpha: 0.5,
            beta: 0.25,
            generator: GeneratorConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::BatchTooSmall(self.batch_size));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::InvalidConfig("alpha and beta must be finite".into()));
        }
        self.generator.validate()
    }
}

/// One row of `loss_log.csv`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: u64,
    pub l_r: f64,
    pub l_p: f64,
    pub l_pos: f64,
    pub total: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Loss of each step's batch, measured before that step's update.
    pub log: Vec<LossRow>,
}

fn trainable_sizes(params: &GeneratorParams) -> Vec<usize> {
    let mut sizes: Vec<usize> = params.trainable().iter().map(|(_, v)| v.len()).collect();
    sizes.push(1);
    sizes
}

fn apply_update(
    params: &mut GeneratorParams,
    temperature: &mut Temperature,
    grads: &LossGradients,
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
) -> Result<()> {
    let mode = params.dash_mode;
    let grad_tensors = grads.generator.trainable(mode);
    let d_lambda = [grads.log_temperature];
    let mut slots: Vec<ParamSlot<'_>> = params
        .trainable_mut()
        .into_iter()
        .zip(&grad_tensors)
        .map(|((_, values), (_, g))| ParamSlot {
            values,
            grads: g,
            decay: true,
        })
        .collect();
    // Decay on λ would pull σ toward 1.
    slots.push(ParamSlot {
        values: std::slice::from_mut(&mut temperature.lambda),
        grads: &d_lambda,
        decay: false,
    });
    adamw_step(&mut slots, state, cfg)
}

fn locate_pair(err: Error, ds: &EmbeddingDataset, batch: &[usize]) -> Error {
    match err {
        Error::DegenerateDirector { pair: Some((i, j)), norm } => Error::DegenerateDirector {
            pair: Some((ds.pairs()[batch[i]].text_id, ds.pairs()[batch[j]].video_id)),
            norm,
        },
        other => other,
    }
}

/// Runs `epochs × ⌊N/B⌋` optimizer steps.
///
/// Parameters and per-epoch shuffles all derive from `cfg.seed`. With the same
/// seed the result does not depend on the executor's worker count.
pub fn train(ds: &EmbeddingDataset, cfg: &TrainConfig, adamw: &AdamWConfig, exec: &Executor) -> Result<TrainOutcome> {
    cfg.validate()?;
    adamw.validate()?;
    if cfg.batch_size > ds.len() {
        return Err(Error::InvalidConfig(format!(
            "batch size {} exceeds dataset size {}",
            cfg.batch_size,
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = GeneratorParams::init(&cfg.generator, ds.dim(), ds.num_video_proxies(), &mut rng)?;
    let mut temperature = Temperature::default();
    let mut state = OptimizerState::new(&trainable_sizes(&params));
    let mut log = Vec::new();

    for _ in 0..cfg.epochs {
        let batches = make_batches(ds, cfg.batch_size, rng.gen())?;
        for batch in &batches {
            let (texts, videos) = ds.gather(batch);
            let grads = loss_backward(&texts, &videos, &params, temperature, cfg.alpha, cfg.beta, exec)
                .map_err(|e| locate_pair(e, ds, batch))?;
            let b = &grads.breakdown;
            log.push(LossRow {
                step: state.step + 1,
                l_r: b.l_r,
                l_p: b.l_p,
                l_pos: b.l_pos,
                total: b.total,
                sigma: b.sigma,
            });
            apply_update(&mut params, &mut temperature, &grads, &mut state, adamw)?;
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            generator: params,
            log_temperature: Some(temperature.lambda),
        },
        log,
    })
}

pub fn write_loss_log(path: impl AsRef<Path>, rows: &[LossRow]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidConfig(format!("{other:?}")),
    })?;
    if rows.is_empty() {
        w.write_record(["step", "l_r", "l_p", "l_pos", "total", "sigma"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_loss_log(path: impl AsRef<Path>) -> Result<Vec<LossRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<LossRow>, _>>()?)
}

/// Writes `checkpoint/`, `loss_log.csv` and `train_config.json` into `dir`.
pub fn save_run(dir: impl AsRef<Path>, outcome: &TrainOutcome, cfg: &TrainConfig, adamw: &AdamWConfig) -> Result<()> {
    #[derive(Serialize)]
    struct Echo<'a> {
        train: &'a TrainConfig,
        adamw: &'a AdamWConfig,
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    outcome.checkpoint.save(dir.join(CHECKPOINT_DIR))?;
    write_loss_log(dir.join(LOSS_LOG_FILE), &outcome.log)?;
    let path = dir.join(TRAIN_CONFIG_FILE);
    let json = serde_json::to_string_pretty(&Echo { train: cfg, adamw }).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Instance used by [`grad_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub dim: usize,
    pub num_video_proxies: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub generator: GeneratorConfig,
    /// `ln σ` at which gradients are compared. The training default `ln 0.01`
    /// saturates the softmax on small batches, leaving only rounding noise.
    pub log_temperature: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            num_video_proxies: 3,
            batch_size: 4,
            alpha: 0.5,
            beta: 0.25,
            generator: GeneratorConfig::default(),
            log_temperature: 0.1f64.ln(),
        }
    }
}

impl GradCheckConfig {
    pub const MAX_DIM: usize = 16;
    pub const MAX_BATCH: usize = 8;
    pub const MAX_PROXIES: usize = 4;

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.dim > Self::MAX_DIM {
            return Err(Error::InvalidConfig(format!("gradcheck needs 2 <= d <= 16, got {}", self.dim)));
        }
        if self.batch_size < 2 || self.batch_size > Self::MAX_BATCH {
            return Err(Error::InvalidConfig(format!(
                "gradcheck needs 2 <= B <= 8, got {}",
                self.batch_size
            )));
        }
        if self.num_video_proxies < 1 || self.num_video_proxies > Self::MAX_PROXIES {
            return Err(Error::InvalidConfig(format!(
                "gradcheck needs 1 <= M <= 4, got {}",
                self.num_video_proxies
            )));
        }
        self.generator.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// e.g. `w_k.1[13]` or `lambda`.
    pub worst_param: String,
    pub checked: usize,
    pub tolerance: f64,
    pub pass: bool,
}

pub const FD_STEP: f64 = 1e-6;
/// Denominator floor for relative gradient errors. Central differences at
/// `FD_STEP` carry about 1e-10 of rounding noise on the loss scales used here.
pub const GRAD_REL_FLOOR: f64 = 1e-5;

/// Compares analytic gradients of the total loss with central differences for
/// every trainable scalar and `λ`.
pub fn grad_check(cfg: &GradCheckConfig, tolerance: f64, seed: u64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let ds = generate_synthetic(&SynthConfig {
        n_pairs: cfg.batch_size,
        dim: cfg.dim,
        num_video_proxies: cfg.num_video_proxies,
        seed,
        ..SynthConfig::default()
    })?;
    let (texts, videos) = ds.gather(&(0..cfg.batch_size).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = GeneratorParams::init(&cfg.generator, cfg.dim, cfg.num_video_proxies, &mut rng)?;
    let temperature = Temperature {
        lambda: cfg.log_temperature,
    };
    let exec = Executor::sequential();
    let analytic = loss_backward(&texts, &videos, &params, temperature, cfg.alpha, cfg.beta, &exec)?;

    let total = |p: &GeneratorParams, t: Temperature| -> Result<f64> {
        let grids = build_grids(&texts, &videos, p, &exec)?;
        Ok(loss_total(&grids, t.sigma(), cfg.alpha, cfg.beta)?.total)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        checked: 0,
        tolerance,
        pass: false,
    };
    let record = |name: String, a: f64, fd: f64, report: &mut GradCheckReport| {
        let rel = relative_error(a, fd, GRAD_REL_FLOOR);
        report.checked += 1;
        if rel > report.max_rel_err || report.worst_param.is_empty() {
            report.max_rel_err = rel;
            report.worst_param = name;
        }
    };

    for (k, (name, g)) in analytic.generator.trainable(params.dash_mode).into_iter().enumerate() {
        for (e, &a) in g.iter().enumerate() {
            let shifted = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                p.trainable_mut()[k].1[e] += delta;
                total(&p, temperature)
            };
            let fd = (shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP);
            let label = if g.len() == 1 { name.clone() } else { format!("{name}[{e}]") };
            record(label, a, fd, &mut report);
        }
    }
    let shifted = |delta: f64| {
        total(
            &params,
            Temperature {
                lambda: temperature.lambda + delta,
            },
        )
    };
    let fd = (shifted(FD_STEP)? - shifted(-FD_STEP)?) / (2.0 * FD_STEP);
    record("lambda".into(), analytic.log_temperature, fd, &mut report);

    report.pass = report.max_rel_err <= tolerance;
    Ok(report)
}

/// Flattened copy of every trainable tensor, for bit-level comparisons.
pub fn flatten_params(params: &GeneratorParams) -> Vec<f64> {
    params.trainable().into_iter().flat_map(|(_, v)| v.to_vec()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::DashMode;
    use proptest::prelude::*;

    fn one(values: &mut [f64], grads: &[f64], state: &mut OptimizerState, cfg: &AdamWConfig) {
        let mut slots = [ParamSlot {
            values,
            grads,
            decay: true,
        }];
        adamw_step(&mut slots, state, cfg).unwrap();
    }

    #[test]
    fn adamw_first_step() {
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = [1.0];
        let mut st = OptimizerState::new(&[1]);
        one(&mut p, &[0.5], &mut st, &cfg);
        assert!((p[0] - (1.0 - 0.1 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((p[0] - 0.9).abs() < 1e-7);

        let cfg = AdamWConfig { weight_decay: 0.2, ..cfg };
        let mut p = [1.0];
        let mut st = OptimizerState::new(&[1]);
        one(&mut p, &[0.5], &mut st, &cfg);
        assert!((p[0] - 0.88).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = [0.3, -2.0];
        let mut st = OptimizerState::new(&[2]);
        one(&mut p, &[1.0, -1.0], &mut st, &cfg);
        let after_one = p;
        let m_before = st.moments[0].m.clone();
        let mut st2 = st.clone();
        let mut q = after_one;
        one(&mut q, &[0.0, 0.0], &mut st2, &cfg);
        assert!(st2.moments[0].m[0].abs() < m_before[0].abs());
        assert!(st2.moments[0].v[0] < st.moments[0].v[0]);

        let mut fresh = [0.3, -2.0];
        let mut st = OptimizerState::new(&[2]);
        one(&mut fresh, &[0.0, 0.0], &mut st, &cfg);
        assert_eq!(fresh, [0.3, -2.0]);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut st = OptimizerState::new(&[2]);
        let mut p = [1.0];
        let mut slots = [ParamSlot {
            values: &mut p,
            grads: &[0.0],
            decay: true,
        }];
        assert!(matches!(
            adamw_step(&mut slots, &mut st, &AdamWConfig::default()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    proptest! {
        #[test]
        fn decoupled_decay_is_geometric(p0 in -10.0f64..10.0, steps in 1usize..30, lr in 1e-4f64..0.1) {
            let cfg = AdamWConfig { lr, ..AdamWConfig::default() };
            let mut p = [p0];
            let mut st = OptimizerState::new(&[1]);
            for _ in 0..steps {
                one(&mut p, &[0.0], &mut st, &cfg);
            }
            let expect = p0 * (1.0 - lr * cfg.weight_decay).powi(steps as i32);
            prop_assert!((p[0] - expect).abs() <= 1e-12 * p0.abs().max(1.0));
            prop_assert_eq!(st.sizes(), vec![1]);
            prop_assert_eq!(st.step, steps as u64);
        }

        #[test]
        fn state_shapes_track_params(sizes in proptest::collection::vec(1usize..6, 1..5), steps in 1usize..5) {
            let mut st = OptimizerState::new(&sizes);
            let mut values: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.5; n]).collect();
            let grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.1; n]).collect();
            for _ in 0..steps {
                let mut slots: Vec<ParamSlot<'_>> = values
                    .iter_mut()
                    .zip(&grads)
                    .map(|(v, g)| ParamSlot { values: v, grads: g, decay: true })
                    .collect();
                adamw_step(&mut slots, &mut st, &AdamWConfig::default()).unwrap();
            }
            prop_assert_eq!(st.sizes(), sizes);
        }
    }

    fn tiny(n: usize) -> EmbeddingDataset {
        generate_synthetic(&SynthConfig {
            n_pairs: n,
            dim: 6,
            num_video_proxies: 2,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn step_count_and_rejections() {
        let ds = tiny(8);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let out = train(&ds, &cfg, &AdamWConfig::default(), &Executor::sequential()).unwrap();
        let steps: Vec<u64> = out.log.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![1, 2]);

        let zero = TrainConfig { epochs: 0, ..cfg.clone() };
        assert!(matches!(
            train(&ds, &zero, &AdamWConfig::default(), &Executor::sequential()),
            Err(Error::InvalidConfig(_))
        ));
        let big = TrainConfig {
            batch_size: 9,
            ..cfg
        };
        assert!(train(&ds, &big, &AdamWConfig::default(), &Executor::sequential()).is_err());
    }

    #[test]
    fn training_is_deterministic_and_leaves_data_alone() {
        let ds = tiny(16);
        let before = ds.clone();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = train(&ds, &cfg, &AdamWConfig::default(), &Executor::sequential()).unwrap();
        let b = train(&ds, &cfg, &AdamWConfig::default(), &Executor::new(3).unwrap()).unwrap();
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.log, b.log);
        assert_eq!(ds, before);
        assert_ne!(
            flatten_params(&a.checkpoint.generator),
            flatten_params(&GeneratorParams::init(&cfg.generator, 6, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap())
        );
    }

    #[test]
    fn run_directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny(8);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let adamw = AdamWConfig::default();
        let out = train(&ds, &cfg, &adamw, &Executor::sequential()).unwrap();
        save_run(dir.path(), &out, &cfg, &adamw).unwrap();
        let raw = fs::read_to_string(dir.path().join(LOSS_LOG_FILE)).unwrap();
        assert_eq!(raw.lines().next().unwrap(), "step,l_r,l_p,l_pos,total,sigma");
        assert_eq!(raw.lines().count(), 5);
        assert_eq!(read_loss_log(dir.path().join(LOSS_LOG_FILE)).unwrap(), out.log);
        let ck = Checkpoint::load(dir.path().join(CHECKPOINT_DIR)).unwrap();
        assert_eq!(ck, out.checkpoint);
        assert!(dir.path().join(TRAIN_CONFIG_FILE).exists());
    }

    #[test]
    fn gradcheck_passes_and_fails_by_tolerance() {
        for mode in [DashMode::Scalar, DashMode::Vector] {
            let cfg = GradCheckConfig {
                generator: GeneratorConfig {
                    dash_mode: mode,
                    ..GeneratorConfig::default()
                },
                ..GradCheckConfig::default()
            };
            let r = grad_check(&cfg, 1e-4, 7).unwrap();
            assert!(r.pass, "{mode}: {r:?}");
            assert_eq!(r.checked, 6 * 64 + if mode == DashMode::Scalar { 1 } else { 24 } + 1);
            let r = grad_check(&cfg, 1e-12, 7).unwrap();
            assert!(!r.pass);
            assert!(!r.worst_param.is_empty());
        }
        let big = GradCheckConfig {
            dim: 32,
            ..GradCheckConfig::default()
        };
        assert!(grad_check(&big, 1e-4, 7).is_err());
    }
}
