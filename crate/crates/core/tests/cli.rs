use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use tvproxy::cli::{run_command, RunConfig, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC, EXIT_OK, RUN_CONFIG_FILE};
use tvproxy::retrieval::read_report;

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_owned()
}

fn tvproxy(args: &[&str]) -> i32 {
    run_command(std::iter::once("tvproxy").chain(args.iter().copied()))
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

struct Fixture {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

fn small_config() -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let cfg = RunConfig {
        n_pairs: 64,
        batch_size: 16,
        epochs: 2,
        dim: 12,
        ..RunConfig::default()
    };
    let path = root.join("cfg.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    Fixture {
        _tmp: tmp,
        config: s(&path),
        root,
    }
}

#[test]
fn synth_train_eval_round() {
    let f = small_config();
    let (data, run, out) = (f.root.join("data"), f.root.join("run"), f.root.join("out"));
    assert_eq!(tvproxy(&["synth", "--config", &f.config, "--out", &s(&data)]), EXIT_OK);
    assert!(data.join("manifest.json").exists());

    let data_before = tree(&data);
    assert_eq!(tvproxy(&["train", "--config", &f.config, "--data", &s(&data), "--out", &s(&run)]), EXIT_OK);
    assert_eq!(tree(&data), data_before);

    let run_before = tree(&run);
    let ck = s(&run.join("checkpoint"));
    assert_eq!(
        tvproxy(&["eval", "--config", &f.config, "--data", &s(&data), "--params", &ck, "--gamma", "0.5", "--report", &s(&out)]),
        EXIT_OK
    );
    assert_eq!(tree(&data), data_before);
    assert_eq!(tree(&run), run_before);

    let report = read_report(&out).unwrap();
    assert_eq!((report.n_text, report.n_video), (64, 64));
    assert_eq!(report.gamma, Some(0.5));
    assert!(out.join("scores.csv").exists() && out.join("ranks.csv").exists());
    assert_eq!(tvproxy(&["inspect", &s(&data)]), EXIT_OK);
}

#[test]
fn echoed_config_reproduces_training() {
    let f = small_config();
    let data = f.root.join("data");
    assert_eq!(tvproxy(&["synth", "--config", &f.config, "--seed", "9", "--out", &s(&data)]), EXIT_OK);
    let first = f.root.join("first");
    assert_eq!(
        tvproxy(&["train", "--config", &f.config, "--seed", "9", "--data", &s(&data), "--out", &s(&first)]),
        EXIT_OK
    );
    let echoed = RunConfig::load(first.join(RUN_CONFIG_FILE)).unwrap();
    assert_eq!(echoed.seed, 9);
    let second = f.root.join("second");
    let echo_path = s(&first.join(RUN_CONFIG_FILE));
    assert_eq!(tvproxy(&["train", "--config", &echo_path, "--data", &s(&data), "--out", &s(&second)]), EXIT_OK);
    let strip = |t: BTreeMap<PathBuf, Vec<u8>>, root: &Path| -> BTreeMap<PathBuf, Vec<u8>> {
        t.into_iter().map(|(k, v)| (k.strip_prefix(root).unwrap().to_path_buf(), v)).collect()
    };
    assert_eq!(strip(tree(&first), &first), strip(tree(&second), &second));
}

#[test]
fn gradcheck_exit_codes() {
    assert_eq!(tvproxy(&["gradcheck", "--seed", "7", "--tol", "1e-4"]), EXIT_OK);
    assert_eq!(tvproxy(&["gradcheck", "--seed", "7", "--tol", "1e-12"]), EXIT_NUMERIC);
}

#[test]
fn identity_check_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(tvproxy(&["identity-check", "--trials", "20", "--out", &s(tmp.path())]), EXIT_OK);
    assert!(tmp.path().join("identity.json").exists());
    assert!(tmp.path().join(RUN_CONFIG_FILE).exists());
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = s(&tmp.path().join("nope"));
    assert_eq!(tvproxy(&["train", "--data", &missing, "--out", &s(tmp.path())]), EXIT_IO);

    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"dim": 8, "learning_rate": 0.1}"#).unwrap();
    assert_eq!(tvproxy(&["synth", "--config", &s(&cfg), "--out", &s(tmp.path())]), EXIT_INVALID);
    fs::write(&cfg, r#"{"batch_size": 1}"#).unwrap();
    assert_eq!(tvproxy(&["synth", "--config", &s(&cfg), "--out", &s(tmp.path())]), EXIT_INVALID);

    let junk = tmp.path().join("junk.tvpx");
    fs::write(&junk, b"NOPE0000000000000000").unwrap();
    assert_eq!(tvproxy(&["inspect", &s(&junk)]), EXIT_IO);

    assert_eq!(tvproxy(&["eval", "--gamma", "0.5", "--gamma-sweep", "0:1:0.5"]), EXIT_INVALID);
}

#[test]
fn binary_rejects_unknown_flags() {
    let status = Command::new(env!("CARGO_BIN_EXE_tvproxy"))
        .args(["synth", "--bogus"])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(EXIT_INVALID));
    assert!(String::from_utf8_lossy(&status.stderr).contains("Usage"));

    let help = Command::new(env!("CARGO_BIN_EXE_tvproxy")).arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(EXIT_OK));
}
