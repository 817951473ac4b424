//! `tvproxy` command line: `synth`, `train`, `eval`, `gradcheck`,
//! `identity-check` and `inspect`.
//!
//! Exit codes: 0 success, 1 invalid input or usage, 2 numeric failure, 3 I/O.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{Checkpoint, DashMode, GeneratorConfig};
use crate::parallel::Executor;
use crate::retrieval::{evaluate, export_report, identity_check, text_only_scores, PairScores};
use crate::store::{generate_synthetic, read_header, EmbeddingDataset, SynthConfig};
use crate::trainer::{grad_check, save_run, train, AdamWConfig, GradCheckConfig, TrainConfig};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const SWEEP_FILE: &str = "sweep.csv";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// Every hyperparameter of a run. Missing keys take defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dim: usize,
    pub num_video_proxies: usize,
    pub k_iterations: usize,
    pub delta: f64,
    pub eta: f64,
    pub dash_mode: DashMode,
    pub scaled_attention: bool,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub sigma_text: f64,
    pub sigma_video: f64,
    pub sigma_corrupt: f64,
    pub n_pairs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            num_video_proxies: 4,
            k_iterations: 2,
            delta: 1.0,
            eta: 1.0,
            dash_mode: DashMode::Scalar,
            scaled_attention: false,
            alpha: 0.5,
            beta: 0.25,
            gamma: 0.5,
            lr: 1e-3,
            weight_decay: 0.2,
            epochs: 30,
            batch_size: 32,
            seed: 42,
            sigma_text: 0.4,
            sigma_video: 0.2,
            sigma_corrupt: 0.8,
            n_pairs: 256,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&raw).map_err(|e| Error::json(path, e))
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            k: self.k_iterations,
            delta: self.delta,
            eta: self.eta,
            dash_mode: self.dash_mode,
            scaled_attention: self.scaled_attention,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_pairs: self.n_pairs,
            dim: self.dim,
            num_video_proxies: self.num_video_proxies,
            sigma_text: self.sigma_text,
            sigma_video: self.sigma_video,
            sigma_corrupt: self.sigma_corrupt,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            alpha: self.alpha,
            beta: self.beta,
            generator: self.generator(),
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth().validate()?;
        self.train().validate()?;
        self.adamw().validate()?;
        if self.batch_size > self.n_pairs {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} exceeds n_pairs {}",
                self.batch_size, self.n_pairs
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !self.gamma.is_finite() {
            return Err(Error::InvalidConfig(format!("gamma must be finite, got {}", self.gamma)));
        }
        Ok(())
    }

    fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_CONFIG_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Parser, Debug)]
#[command(name = "tvproxy", version, about = "Pair-specific text proxies over precomputed embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a planted synthetic dataset.
    Synth(SynthArgs),
    /// Train the generator and temperature.
    Train(TrainArgs),
    /// Score a dataset with a trained checkpoint.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradArgs),
    /// Check the factored form of the combined score on random instances.
    IdentityCheck(IdentityArgs),
    /// Print tensor file headers.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    workers: u64,
}

impl Common {
    fn resolve(&self) -> Result<(RunConfig, Executor)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        let workers = usize::try_from(self.workers).map_err(|_| Error::InvalidConfig("workers out of range".into()))?;
        Ok((cfg, Executor::new(workers)?))
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, conflicts_with = "gamma_sweep")]
    gamma: Option<f64>,
    /// `LO:HI:STEP`, inclusive of `HI`.
    #[arg(long)]
    gamma_sweep: Option<String>,
}

#[derive(Args, Debug)]
struct GradArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IdentityArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 100)]
    trials: u64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Tensor files, or directories whose `.tvpx` files are listed.
    #[arg(required = true)]
    paths: Vec<PathBuf>,
}

/// Parses `LO:HI:STEP` into an inclusive grid.
pub fn parse_gamma_sweep(spec: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidConfig(format!("--gamma-sweep expects LO:HI:STEP, got {spec:?}"));
    let parts: Vec<f64> = spec
        .split(':')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [lo, hi, step] = parts[..] else {
        return Err(bad());
    };
    if !(lo.is_finite() && hi.is_finite() && step > 0.0 && step.is_finite() && lo <= hi) {
        return Err(bad());
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| ((lo + i as f64 * step) * 1e12).round() / 1e12).collect())
}

/// Maps an error to its exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::Csv(_) | Error::BadMagic { .. } | Error::TruncatedPayload { .. } => EXIT_IO,
        Error::UnsupportedVersion(_) | Error::UnsupportedDtype(_) => EXIT_IO,
        Error::Json { source, .. } if source.is_io() => EXIT_IO,
        Error::DegenerateDirector { .. } | Error::NonFiniteData(_) | Error::ZeroVector(_) => EXIT_NUMERIC,
        _ => EXIT_INVALID,
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth(a) => synth_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::IdentityCheck(a) => identity_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
    }
}

fn synth_cmd(a: SynthArgs) -> Result<i32> {
    let (cfg, _) = a.common.resolve()?;
    let ds = generate_synthetic(&cfg.synth())?;
    ds.save(&a.out)?;
    cfg.echo(&a.out)?;
    println!(
        "wrote {} pairs (d={}, M={}) to {}",
        ds.len(),
        ds.dim(),
        ds.num_video_proxies(),
        a.out.display()
    );
    Ok(EXIT_OK)
}

fn train_cmd(a: TrainArgs) -> Result<i32> {
    let (cfg, exec) = a.common.resolve()?;
    let ds = EmbeddingDataset::load(&a.data)?;
    let (tc, adamw) = (cfg.train(), cfg.adamw());
    let outcome = train(&ds, &tc, &adamw, &exec)?;
    save_run(&a.out, &outcome, &tc, &adamw)?;
    cfg.echo(&a.out)?;
    if let (Some(first), Some(last)) = (outcome.log.first(), outcome.log.last()) {
        println!(
            "{} steps: total loss {:.6} -> {:.6}, sigma {:.6}",
            outcome.log.len(),
            first.total,
            last.total,
            last.sigma
        );
    }
    Ok(EXIT_OK)
}

fn eval_cmd(a: EvalArgs) -> Result<i32> {
    let (cfg, exec) = a.common.resolve()?;
    let gammas = match (&a.gamma_sweep, a.gamma) {
        (Some(s), _) => parse_gamma_sweep(s)?,
        (None, Some(g)) => vec![g],
        (None, None) => vec![cfg.gamma],
    };
    if let Some(g) = gammas.iter().find(|g| !g.is_finite()) {
        return Err(Error::InvalidConfig(format!("gamma must be finite, got {g}")));
    }
    let ds = EmbeddingDataset::load(&a.data)?;
    let ck = Checkpoint::load(&a.params)?;
    let texts = ds.text_queries();
    let videos = ds.video_proxies();
    let gt = ds.ground_truth();
    let echo = serde_json::to_value(&cfg).expect("config serializes");

    let baseline = evaluate(&text_only_scores(texts, videos)?, &gt)?;
    println!(
        "text-only: R@1 {:.2} R@5 {:.2} R@10 {:.2} MdR {} MnR {:.2}",
        baseline.recall_at_1, baseline.recall_at_5, baseline.recall_at_10, baseline.median_rank, baseline.mean_rank
    );
    let pair_scores = PairScores::compute(texts, videos, &ck.generator, &exec)?;
    let sweep = a.gamma_sweep.is_some();
    let mut rows = Vec::new();
    for &g in &gammas {
        let scores = pair_scores.combined(g)?;
        let report = evaluate(&scores, &gt)?;
        let dir = if sweep { a.report.join(format!("gamma_{g}")) } else { a.report.clone() };
        export_report(&report, &scores, &dir, Some(echo.clone()))?;
        println!(
            "gamma {g}: R@1 {:.2} R@5 {:.2} R@10 {:.2} MdR {} MnR {:.2}",
            report.recall_at_1, report.recall_at_5, report.recall_at_10, report.median_rank, report.mean_rank
        );
        rows.push((g, report));
    }
    if sweep {
        let path = a.report.join(SWEEP_FILE);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["gamma", "r1", "r5", "r10", "mdr", "mnr"])?;
        for (g, r) in &rows {
            w.write_record([
                g.to_string(),
                r.recall_at_1.to_string(),
                r.recall_at_5.to_string(),
                r.recall_at_10.to_string(),
                r.median_rank.to_string(),
                r.mean_rank.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    cfg.echo(&a.report)?;
    Ok(EXIT_OK)
}

fn gradcheck_cmd(a: GradArgs) -> Result<i32> {
    let (cfg, _) = a.common.resolve()?;
    let seed = a.common.seed.unwrap_or(7);
    let mut all_pass = true;
    let mut reports = Vec::new();
    for mode in [DashMode::Scalar, DashMode::Vector] {
        let gc = GradCheckConfig {
            alpha: cfg.alpha,
            beta: cfg.beta,
            generator: GeneratorConfig {
                dash_mode: mode,
                ..cfg.generator()
            },
            ..GradCheckConfig::default()
        };
        let r = grad_check(&gc, a.tol, seed)?;
        println!(
            "{mode} dash: {} over {} scalars, max rel err {:.3e} at {} (tol {:e})",
            if r.pass { "PASS" } else { "FAIL" },
            r.checked,
            r.max_rel_err,
            r.worst_param,
            r.tolerance
        );
        all_pass &= r.pass;
        reports.push((mode, r));
    }
    if let Some(out) = &a.out {
        cfg.echo(out)?;
        let path = out.join("gradcheck.json");
        let json = serde_json::to_string_pretty(&reports).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(if all_pass { EXIT_OK } else { EXIT_NUMERIC })
}

/// Dimension and `γ` range of the identity check instances.
pub const IDENTITY_DIM: usize = 16;
pub const IDENTITY_GAMMA: (f64, f64) = (0.1, 0.8);

fn identity_cmd(a: IdentityArgs) -> Result<i32> {
    let (cfg, _) = a.common.resolve()?;
    let r = identity_check(a.trials, IDENTITY_DIM, IDENTITY_GAMMA, a.tol, cfg.seed)?;
    println!(
        "{}: {} trials ({} degenerate), max |combined - factored| {:.3e}, max norm err {:.3e} (tol {:e})",
        if r.pass { "PASS" } else { "FAIL" },
        r.trials,
        r.degenerate,
        r.max_abs_diff,
        r.max_norm_err,
        r.tolerance
    );
    if let Some(out) = &a.out {
        cfg.echo(out)?;
        let path = out.join("identity.json");
        let json = serde_json::to_string_pretty(&r).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(if r.pass { EXIT_OK } else { EXIT_NUMERIC })
}

fn inspect_cmd(a: InspectArgs) -> Result<i32> {
    for path in &a.paths {
        let files = if path.is_dir() {
            let mut v: Vec<PathBuf> = fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "tvpx"))
                .collect();
            v.sort();
            v
        } else {
            vec![path.clone()]
        };
        for f in files {
            let (h, size) = read_header(&f)?;
            println!(
                "{}: version {} dtype {} dims {:?} ({size} bytes)",
                f.display(),
                h.version,
                h.dtype,
                h.dims
            );
        }
    }
    Ok(EXIT_OK)
}
