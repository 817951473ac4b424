//! Inference scoring and ranking metrics.
//!
//! The combined logit of text `i` and video `j` is
//! `s(t_q_i, p1_j) + γ s(t_p(i,j), p1_j)`, where the proxy always comes from the
//! pair `(i, j)` itself. The factored form rewrites it as
//! `√(1 + γ² + 2γ s(t_q, t_p)) · s(q, p1)` with `q = t̂_q + γ t̂_p`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{map_pair_proxies, GeneratorConfig, GeneratorParams, InvocationCounter};
use crate::numkernel::{cosine_sim, dot, normalize, Matrix};
use crate::parallel::Executor;

pub const REPORT_FILE: &str = "report.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const RANKS_FILE: &str = "ranks.csv";
pub const TIE_RULE: &str = "strict-greater";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    TextOnly,
    Combined,
    Factored,
}

/// `N_t × N_v` retrieval logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub provenance: Provenance,
    pub gamma: Option<f64>,
    pub scores: Matrix,
    /// Pair pipeline runs spent building the matrix.
    pub invocations: u64,
}

impl ScoreMatrix {
    pub fn n_text(&self) -> usize {
        self.scores.rows()
    }

    pub fn n_video(&self) -> usize {
        self.scores.cols()
    }
}

fn check_videos(texts: &Matrix, videos: &[Matrix]) -> Result<()> {
    if texts.rows() == 0 || videos.is_empty() {
        return Err(Error::EmptyInput("retrieval batch"));
    }
    if let Some(v) = videos.iter().find(|v| v.rows() == 0 || v.cols() != texts.cols()) {
        return Err(Error::ShapeMismatch(format!(
            "video proxies {:?} for text dim {}",
            v.shape(),
            texts.cols()
        )));
    }
    Ok(())
}

/// `s(t_q_i, p1_j)`.
pub fn text_only_scores(texts: &Matrix, videos: &[Matrix]) -> Result<ScoreMatrix> {
    check_videos(texts, videos)?;
    let mut data = Vec::with_capacity(texts.rows() * videos.len());
    for t in texts.iter_rows() {
        for v in videos {
            data.push(cosine_sim(t, v.row(0))?);
        }
    }
    Ok(ScoreMatrix {
        provenance: Provenance::TextOnly,
        gamma: None,
        scores: Matrix::new(texts.rows(), videos.len(), data)?,
        invocations: 0,
    })
}

/// Text and proxy similarity grids from which any combined matrix follows.
#[derive(Clone, Debug, PartialEq)]
pub struct PairScores {
    /// `s(t_q_i, p1_j)`.
    pub text: Matrix,
    /// `s(t_p(i,j), p1_j)`.
    pub proxy: Matrix,
    pub invocations: u64,
}

impl PairScores {
    pub fn compute(texts: &Matrix, videos: &[Matrix], params: &GeneratorParams, exec: &Executor) -> Result<Self> {
        check_videos(texts, videos)?;
        let counter = InvocationCounter::default();
        let pairs = map_pair_proxies(texts, videos, params, exec, &counter, |i, j, tp| {
            let p1 = videos[j].row(0);
            Ok((cosine_sim(texts.row(i), p1)?, cosine_sim(tp, p1)?))
        })?;
        let (text, proxy): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        Ok(Self {
            text: Matrix::new(texts.rows(), videos.len(), text)?,
            proxy: Matrix::new(texts.rows(), videos.len(), proxy)?,
            invocations: counter.get(),
        })
    }

    pub fn combined(&self, gamma: f64) -> Result<ScoreMatrix> {
        if !gamma.is_finite() {
            return Err(Error::InvalidConfig(format!("gamma must be finite, got {gamma}")));
        }
        let data = self
            .text
            .data()
            .iter()
            .zip(self.proxy.data())
            .map(|(s, p)| s + gamma * p)
            .collect();
        Ok(ScoreMatrix {
            provenance: Provenance::Combined,
            gamma: Some(gamma),
            scores: Matrix::new(self.text.rows(), self.text.cols(), data)?,
            invocations: self.invocations,
        })
    }
}

/// `s(t_q_i, p1_j) + γ s(t_p(i,j), p1_j)`.
pub fn combined_scores(
    texts: &Matrix,
    videos: &[Matrix],
    params: &GeneratorParams,
    gamma: f64,
    exec: &Executor,
) -> Result<ScoreMatrix> {
    PairScores::compute(texts, videos, params, exec)?.combined(gamma)
}

/// `q = t̂_q + γ t̂_p` for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CombinedQuery {
    pub q: Vec<f64>,
    pub gamma: f64,
    /// `s(t_q, t_p)`.
    pub query_proxy_cos: f64,
}

impl CombinedQuery {
    pub fn new(t_q: &[f64], t_p: &[f64], gamma: f64) -> Result<Self> {
        let tq = normalize(t_q)?;
        let tp = normalize(t_p)?;
        let q = tq.iter().zip(&tp).map(|(a, b)| a + gamma * b).collect();
        Ok(Self {
            q,
            gamma,
            query_proxy_cos: cosine_sim(t_q, t_p)?,
        })
    }

    pub fn norm_sq(&self) -> f64 {
        dot(&self.q, &self.q)
    }

    /// `1 + γ² + 2γ s(t_q, t_p)`.
    pub fn expected_norm_sq(&self) -> f64 {
        1.0 + self.gamma * self.gamma + 2.0 * self.gamma * self.query_proxy_cos
    }

    /// `√(1 + γ² + 2γ s(t_q, t_p)) · s(q, p1)`.
    pub fn score(&self, p1: &[f64]) -> Result<f64> {
        Ok(self.expected_norm_sq().max(0.0).sqrt() * cosine_sim(&self.q, p1)?)
    }
}

/// Combined logits through the factored form.
pub fn factored_scores(
    texts: &Matrix,
    videos: &[Matrix],
    params: &GeneratorParams,
    gamma: f64,
    exec: &Executor,
) -> Result<ScoreMatrix> {
    check_videos(texts, videos)?;
    if !gamma.is_finite() {
        return Err(Error::InvalidConfig(format!("gamma must be finite, got {gamma}")));
    }
    let counter = InvocationCounter::default();
    let data = map_pair_proxies(texts, videos, params, exec, &counter, |i, j, tp| {
        CombinedQuery::new(texts.row(i), tp, gamma)?.score(videos[j].row(0))
    })?;
    Ok(ScoreMatrix {
        provenance: Provenance::Factored,
        gamma: Some(gamma),
        scores: Matrix::new(texts.rows(), videos.len(), data)?,
        invocations: counter.get(),
    })
}

/// Outcome of comparing the direct and factored scores of one pair.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrialOutcome {
    /// `|combined − factored|`.
    Compared(f64),
    /// `q` vanished, so `s(q, p1)` is undefined.
    Degenerate,
}

pub fn compare_forms(t_q: &[f64], t_p: &[f64], p1: &[f64], gamma: f64) -> Result<TrialOutcome> {
    let direct = cosine_sim(t_q, p1)? + gamma * cosine_sim(t_p, p1)?;
    let query = CombinedQuery::new(t_q, t_p, gamma)?;
    match query.score(p1) {
        Ok(f) => Ok(TrialOutcome::Compared((direct - f).abs())),
        Err(Error::ZeroVector(_)) => Ok(TrialOutcome::Degenerate),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub trials: u64,
    pub compared: u64,
    pub degenerate: u64,
    pub max_abs_diff: f64,
    /// Largest `| |q|² − (1 + γ² + 2γ s(t_q, t_p)) |`.
    pub max_norm_err: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Draws random embeddings, generator parameters and `γ`, and checks that the
/// direct and factored combined scores agree within `tolerance`.
pub fn identity_check(trials: u64, dim: usize, gamma_range: (f64, f64), tolerance: f64, seed: u64) -> Result<IdentityReport> {
    if trials < 1 {
        return Err(Error::InvalidConfig("trials must be >= 1".into()));
    }
    if dim < 2 {
        return Err(Error::InvalidConfig(format!("dim must be >= 2, got {dim}")));
    }
    let (lo, hi) = gamma_range;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
        return Err(Error::InvalidConfig(format!("bad gamma range [{lo}, {hi}]")));
    }
    const PROXIES: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = IdentityReport {
        trials,
        compared: 0,
        degenerate: 0,
        max_abs_diff: 0.0,
        max_norm_err: 0.0,
        tolerance,
        pass: false,
    };
    for _ in 0..trials {
        let params = GeneratorParams::init(&GeneratorConfig::default(), dim, PROXIES, &mut rng)?;
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        let t_q = draw(dim);
        let video = Matrix::new(PROXIES, dim, draw(PROXIES * dim))?;
        let gamma = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        let t_p = crate::generator::generate_proxy(&t_q, &video, &params)?;
        let query = CombinedQuery::new(&t_q, &t_p, gamma)?;
        report.max_norm_err = report.max_norm_err.max((query.norm_sq() - query.expected_norm_sq()).abs());
        match compare_forms(&t_q, &t_p, video.row(0), gamma)? {
            TrialOutcome::Compared(diff) => {
                report.compared += 1;
                report.max_abs_diff = report.max_abs_diff.max(diff);
            }
            TrialOutcome::Degenerate => report.degenerate += 1,
        }
    }
    report.pass = report.compared > 0 && report.max_abs_diff <= tolerance;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub median_rank: usize,
    pub mean_rank: f64,
    pub ranks: Vec<usize>,
    pub ground_truth: Vec<usize>,
}

/// Rank of each text's ground-truth video: `1 +` the number of strictly higher scores.
pub fn evaluate(scores: &ScoreMatrix, ground_truth: &[Option<usize>]) -> Result<RetrievalReport> {
    let m = &scores.scores;
    if ground_truth.len() != m.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} ground-truth entries for {} texts",
            ground_truth.len(),
            m.rows()
        )));
    }
    if m.rows() == 0 {
        return Err(Error::EmptyInput("score matrix"));
    }
    let gt = ground_truth
        .iter()
        .enumerate()
        .map(|(i, g)| match g {
            Some(j) if *j < m.cols() => Ok(*j),
            _ => Err(Error::MissingGroundTruth(i)),
        })
        .collect::<Result<Vec<usize>>>()?;
    let ranks: Vec<usize> = m
        .iter_rows()
        .zip(&gt)
        .map(|(row, &j)| 1 + row.iter().filter(|&&s| s > row[j]).count())
        .collect();
    Ok(report_from_ranks(ranks, gt))
}

fn report_from_ranks(ranks: Vec<usize>, ground_truth: Vec<usize>) -> RetrievalReport {
    let n = ranks.len() as f64;
    let recall = |k: usize| 100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let median_rank = sorted[(sorted.len() - 1) / 2];
    let mean_rank = ranks.iter().sum::<usize>() as f64 / n;
    RetrievalReport {
        recall_at_1: recall(1),
        recall_at_5: recall(5),
        recall_at_10: recall(10),
        median_rank,
        mean_rank,
        ranks,
        ground_truth,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub recall_at: std::collections::BTreeMap<String, f64>,
    pub mdr: usize,
    pub mnr: f64,
    pub gamma: Option<f64>,
    pub n_text: usize,
    pub n_video: usize,
    pub tie_rule: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl ReportJson {
    pub fn new(report: &RetrievalReport, scores: &ScoreMatrix, config: Option<serde_json::Value>) -> Self {
        let recall_at = [
            ("1", report.recall_at_1),
            ("5", report.recall_at_5),
            ("10", report.recall_at_10),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            recall_at,
            mdr: report.median_rank,
            mnr: report.mean_rank,
            gamma: scores.gamma,
            n_text: scores.n_text(),
            n_video: scores.n_video(),
            tie_rule: TIE_RULE.to_string(),
            config,
        }
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Writes `report.json`, `scores.csv` and `ranks.csv` into `dir`.
pub fn export_report(
    report: &RetrievalReport,
    scores: &ScoreMatrix,
    dir: impl AsRef<Path>,
    config: Option<serde_json::Value>,
) -> Result<()> {
    let dir = dir.as_ref();
    if dir.as_os_str().is_empty() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "empty report directory"),
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let path = dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(&ReportJson::new(report, scores, config)).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;

    let path = dir.join(SCORES_FILE);
    let mut w = csv_writer(&path)?;
    let mut header = vec!["text".to_string()];
    header.extend((0..scores.n_video()).map(|j| format!("video_{j}")));
    w.write_record(&header)?;
    for (i, row) in scores.scores.iter_rows().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(RANKS_FILE);
    let mut w = csv_writer(&path)?;
    w.write_record(["text", "ground_truth", "rank"])?;
    for (i, (r, g)) in report.ranks.iter().zip(&report.ground_truth).enumerate() {
        w.write_record([i.to_string(), g.to_string(), r.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_report(dir: impl AsRef<Path>) -> Result<ReportJson> {
    let path = dir.as_ref().join(REPORT_FILE);
    let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::json(&path, e))
}

/// Metrics for each `γ`, sharing one pass of proxy generation.
pub fn gamma_sweep(pair_scores: &PairScores, gammas: &[f64], ground_truth: &[Option<usize>]) -> Result<Vec<(f64, RetrievalReport)>> {
    gammas
        .iter()
        .map(|&g| Ok((g, evaluate(&pair_scores.combined(g)?, ground_truth)?)))
        .collect()
}
