//! Acceptance run. One PASS/FAIL line per criterion; exits non-zero if any fail.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tvproxy::cli::{run_command, RunConfig, EXIT_OK, IDENTITY_DIM, IDENTITY_GAMMA};
use tvproxy::generator::{
    compute_director, generate_proxy, leader_path, scalar_dash, vector_dash, DashMode, GeneratorConfig,
    GeneratorParams, InvocationCounter,
};
use tvproxy::numkernel::{cosine_sim, l2_norm, Matrix};
use tvproxy::objectives::{infonce_bidirectional, loss_backward, loss_total, ScoreGrids, Temperature};
use tvproxy::parallel::Executor;
use tvproxy::retrieval::{evaluate, identity_check, text_only_scores, PairScores};
use tvproxy::store::{generate_synthetic, make_batches};
use tvproxy::trainer::{grad_check, train, GradCheckConfig};
use tvproxy::Error;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("identity check", identity),
        ("gradient fidelity", gradients),
        ("proxy geometry", geometry),
        ("infonce closed forms", infonce),
        ("invocation accounting", invocations),
        ("planted-task improvement", planted),
        ("no-cheating guard", no_cheating),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let v = run();
        println!(
            "criterion {} {name}: {} ({}; {:.2}s)",
            n + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t.elapsed().as_secs_f64()
        );
        failed += usize::from(!v.pass);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn identity() -> Verdict {
    let t = Instant::now();
    let r = identity_check(100, IDENTITY_DIM, IDENTITY_GAMMA, 1e-9, 42).expect("identity check runs");
    let lib_time = t.elapsed();
    let code = run_command(["tvproxy", "identity-check", "--trials", "100", "--tol", "1e-9"]);
    let pass = r.pass && r.compared == 100 && code == EXIT_OK && lib_time < Duration::from_secs(5);
    Verdict::new(
        pass,
        format!(
            "{} of {} trials compared, max diff {:.2e}, cli exit {code}, {:.3}s",
            r.compared,
            r.trials,
            r.max_abs_diff,
            lib_time.as_secs_f64()
        ),
    )
}

fn gradients() -> Verdict {
    let t = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for mode in [DashMode::Scalar, DashMode::Vector] {
        let cfg = GradCheckConfig {
            generator: GeneratorConfig {
                dash_mode: mode,
                k: 2,
                ..GeneratorConfig::default()
            },
            ..GradCheckConfig::default()
        };
        assert_eq!((cfg.dim, cfg.num_video_proxies, cfg.batch_size), (8, 3, 4));
        let r = grad_check(&cfg, 1e-4, 7).expect("gradcheck runs");
        // 3 matrices × 2 rounds × 64 entries, the active dash parameters, and λ.
        let dash = match mode {
            DashMode::Scalar => 1,
            DashMode::Vector => 3 * 8,
        };
        pass &= r.pass && r.checked == 6 * 64 + dash + 1;
        parts.push(format!("{mode}: {} scalars, max rel err {:.2e}", r.checked, r.max_rel_err));
    }
    let elapsed = t.elapsed();
    pass &= elapsed < Duration::from_secs(30);
    let code = run_command(["tvproxy", "gradcheck", "--tol", "1e-4"]);
    pass &= code == EXIT_OK;
    Verdict::new(pass, format!("{}, cli exit {code}", parts.join("; ")))
}

fn random_params(rng: &mut ChaCha8Rng) -> (GeneratorParams, Vec<f64>, Matrix) {
    let d = rng.gen_range(2..=32);
    let m = rng.gen_range(1..=6);
    let cfg = GeneratorConfig {
        k: rng.gen_range(1..=3),
        delta: rng.gen_range(0.25..2.0),
        eta: rng.gen_range(0.25..2.0),
        dash_mode: DashMode::Scalar,
        scaled_attention: rng.gen_bool(0.5),
    };
    let mut params = GeneratorParams::init(&cfg, d, m, rng).expect("valid config");
    params.theta = rng.gen_range(-3.0..3.0);
    let t_q: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let video = Matrix::new(m, d, (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    (params, t_q, video)
}

fn geometry() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_disp, mut worst_cos, mut sign_errors, mut nonpositive, mut degenerate) = (0.0f64, 1.0f64, 0, 0, 0);
    for _ in 0..1000 {
        let (mut params, t_q, video) = random_params(&mut rng);
        let leader = leader_path(&t_q, &video, &params).unwrap();
        let director = match compute_director(&t_q, &leader, params.delta, params.eta) {
            Ok(d) => d,
            Err(Error::DegenerateDirector { .. }) => {
                degenerate += 1;
                continue;
            }
            Err(e) => panic!("{e}"),
        };
        let d_norm = l2_norm(&director);

        let ds = scalar_dash(&t_q, &video, params.theta).unwrap();
        let tp = generate_proxy(&t_q, &video, &params).unwrap();
        let disp: Vec<f64> = tp.iter().zip(&t_q).map(|(p, q)| p - q).collect();
        worst_disp = worst_disp.max((l2_norm(&disp) - ds).abs());
        worst_cos = worst_cos.min(cosine_sim(&disp, &director).unwrap());
        nonpositive += usize::from(!(ds > 0.0));

        params.dash_mode = DashMode::Vector;
        let dv = vector_dash(&t_q, &video, &params.w_dash).unwrap();
        nonpositive += dv.iter().filter(|v| !(**v > 0.0)).count();
        let tp = generate_proxy(&t_q, &video, &params).unwrap();
        for ((p, q), dc) in tp.iter().zip(&t_q).zip(&director) {
            if dc.abs() / d_norm > 1e-9 && (p - q).signum() != dc.signum() {
                sign_errors += 1;
            }
        }
    }
    let pass = degenerate < 1000 && worst_disp <= 1e-9 && worst_cos >= 1.0 - 1e-12 && sign_errors == 0 && nonpositive == 0;
    Verdict::new(
        pass,
        format!(
            "max displacement err {worst_disp:.2e}, min direction cos 1-{:.2e}, {sign_errors} sign errors, \
             {nonpositive} non-positive dashes, {degenerate} degenerate draws",
            1.0 - worst_cos
        ),
    )
}

fn infonce() -> Verdict {
    let mut worst_uniform = 0.0f64;
    for b in [2usize, 4, 8] {
        let grid = Matrix::new(b, b, vec![0.37; b * b]).unwrap();
        for sigma in [0.01, 1.0] {
            let l = infonce_bidirectional(&grid, sigma).unwrap();
            worst_uniform = worst_uniform.max((l - (b as f64).ln()).abs());
        }
    }
    let eye = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let l_eye = infonce_bidirectional(&eye, 1.0).unwrap();
    let closed = (1.0 + (-1.0f64).exp()).ln();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_lin = 0.0f64;
    for _ in 0..100 {
        let b = rng.gen_range(2..=8);
        let mut grid = || Matrix::new(b, b, (0..b * b).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let grids = ScoreGrids {
            r: grid(),
            g: grid(),
            h: grid(),
        };
        let (alpha, beta, sigma) = (rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.05..1.0));
        let lb = loss_total(&grids, sigma, alpha, beta).unwrap();
        worst_lin = worst_lin.max((lb.total - (lb.l_r + alpha * lb.l_p + beta * lb.l_pos)).abs());
    }
    let pass = worst_uniform <= 1e-12 && (l_eye - 0.313262).abs() <= 1e-6 && (l_eye - closed).abs() <= 1e-9 && worst_lin <= 1e-12;
    Verdict::new(
        pass,
        format!(
            "uniform err {worst_uniform:.2e}, identity grid {l_eye:.9} vs ln(1+e^-1) {closed:.9}, linearity err {worst_lin:.2e}"
        ),
    )
}

fn invocations() -> Verdict {
    let exec = Executor::new(2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = GeneratorConfig::default();
    let mut pass = true;
    let mut seen = Vec::new();
    for b in [2usize, 4, 8] {
        let params = GeneratorParams::init(&cfg, 8, 3, &mut rng).unwrap();
        let mut mat = |rows: usize| Matrix::new(rows, 8, (0..rows * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let texts = mat(b);
        let wide: Vec<Matrix> = (0..b + 3).map(|_| mat(3)).collect();
        let eval = PairScores::compute(&texts, &wide, &params, &exec).unwrap().invocations;
        let square = &wide[..b];
        let train = loss_backward(&texts, square, &params, Temperature::default(), 0.5, 0.25, &exec)
            .unwrap()
            .invocations;
        let counter = InvocationCounter::default();
        tvproxy::generator::map_pair_proxies(&texts, &wide, &params, &exec, &counter, |_, _, _| Ok(())).unwrap();
        pass &= eval == (b * (b + 3)) as u64 && counter.get() == eval && train == (b * b) as u64;
        seen.push(format!("B={b}: eval {eval}, train {train}"));
    }
    Verdict::new(pass, seen.join(", "))
}

fn planted() -> Verdict {
    let exec = Executor::sequential();
    let gammas: Vec<f64> = (1..=8).map(|g| g as f64 / 10.0).collect();
    let (mut ties_or_better, mut strict, mut slowest) = (0, 0, Duration::ZERO);
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let cfg = RunConfig {
            seed,
            ..RunConfig::default()
        };
        let ds = generate_synthetic(&cfg.synth()).unwrap();
        let t = Instant::now();
        let outcome = train(&ds, &cfg.train(), &cfg.adamw(), &exec).unwrap();
        slowest = slowest.max(t.elapsed());
        let params = &outcome.checkpoint.generator;
        let (texts, videos, gt) = (ds.text_queries(), ds.video_proxies(), ds.ground_truth());
        let base = evaluate(&text_only_scores(texts, videos).unwrap(), &gt).unwrap().recall_at_1;
        let ps = PairScores::compute(texts, videos, params, &exec).unwrap();
        let best = gammas
            .iter()
            .map(|&g| evaluate(&ps.combined(g).unwrap(), &gt).unwrap().recall_at_1)
            .fold(f64::NEG_INFINITY, f64::max);
        ties_or_better += usize::from(best >= base);
        strict += usize::from(best > base);
        lines.push(format!("seed {seed} {base:.2}->{best:.2}"));
    }
    let pass = ties_or_better == 5 && strict >= 4 && slowest < Duration::from_secs(120);
    Verdict::new(
        pass,
        format!(
            "R@1 text-only->best combined: {}; {strict}/5 strict; slowest training {:.1}s",
            lines.join(", "),
            slowest.as_secs_f64()
        ),
    )
}

fn no_cheating() -> Verdict {
    let cfg = RunConfig {
        n_pairs: 64,
        ..RunConfig::default()
    };
    let ds = generate_synthetic(&cfg.synth()).unwrap();
    let batch = &make_batches(&ds, 16, 3).unwrap()[0];
    let (texts, videos) = ds.gather(batch);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let exec = Executor::new(3).unwrap();
    let mut changed_elsewhere = 0;
    let mut own_changed = 0;
    let mut modes = 0;
    for mode in [DashMode::Scalar, DashMode::Vector] {
        let gcfg = GeneratorConfig {
            dash_mode: mode,
            ..cfg.generator()
        };
        let params = GeneratorParams::init(&gcfg, ds.dim(), ds.num_video_proxies(), &mut rng).unwrap();
        let before = PairScores::compute(&texts, &videos, &params, &exec).unwrap().combined(0.5).unwrap();
        for i in 0..videos.len() {
            let mut noisy = videos.clone();
            let (m, d) = (noisy[i].rows(), noisy[i].cols());
            noisy[i] = Matrix::new(m, d, (0..m * d).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap();
            let after = PairScores::compute(&texts, &noisy, &params, &exec).unwrap().combined(0.5).unwrap();
            for j in 0..videos.len() {
                if j == i {
                    continue;
                }
                changed_elsewhere += usize::from(before.scores.get(i, j).to_bits() != after.scores.get(i, j).to_bits());
            }
            own_changed += usize::from(before.scores.get(i, i) != after.scores.get(i, i));
        }
        modes += 1;
    }
    // The noisy video's own column must move, otherwise the test proves nothing.
    let pass = changed_elsewhere == 0 && own_changed == modes * videos.len();
    Verdict::new(
        pass,
        format!("{changed_elsewhere} off-video scores changed; own pair moved in {own_changed} of {} cases", modes * videos.len()),
    )
}

fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline_run(root: &Path, config: &Path) -> bool {
    let s = |p: &Path| p.to_str().unwrap().to_owned();
    let (data, run, report) = (root.join("data"), root.join("run"), root.join("report"));
    let cfg = s(config);
    let codes = [
        run_command(["tvproxy", "synth", "--config", &cfg, "--workers", "1", "--out", &s(&data)]),
        run_command(["tvproxy", "train", "--config", &cfg, "--workers", "1", "--data", &s(&data), "--out", &s(&run)]),
        run_command([
            "tvproxy",
            "eval",
            "--config",
            &cfg,
            "--workers",
            "1",
            "--data",
            &s(&data),
            "--params",
            &s(&run.join("checkpoint")),
            "--report",
            &s(&report),
            "--gamma-sweep",
            "0.1:0.8:0.1",
        ]),
    ];
    codes.iter().all(|c| *c == EXIT_OK)
}

fn determinism() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("config.json");
    let cfg = RunConfig {
        n_pairs: 128,
        epochs: 5,
        seed: 17,
        ..RunConfig::default()
    };
    fs::write(&config, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ran = pipeline_run(&a, &config) && pipeline_run(&b, &config);
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    let expected = ["run/checkpoint/params.json", "run/loss_log.csv", "report/sweep.csv", "report/gamma_0.5/report.json"];
    let present = expected.iter().all(|f| sa.contains_key(*f));
    let differing: Vec<&String> = sa.keys().filter(|k| sb.get(*k) != sa.get(*k)).collect();
    let pass = ran && present && sa.len() == sb.len() && differing.is_empty();
    Verdict::new(
        pass,
        format!("{} files compared, {} differ", sa.len(), differing.len() + sb.len().abs_diff(sa.len())),
    )
}
