use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tensor_file::{read_tensor, stack_matrices, write_tensor, Tensor};
use crate::error::{Error, Result};
use crate::numkernel::{l2_norm, Matrix, ZERO_NORM};

pub const TEXT_FILE: &str = "text_queries.tvpx";
pub const VIDEO_FILE: &str = "video_proxies.tvpx";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Ground-truth link between a text query and a video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pair {
    pub text_id: usize,
    pub video_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dim: usize,
    pub num_video_proxies: usize,
    pub text_queries: String,
    pub video_proxies: String,
    pub pairs: Vec<Pair>,
}

/// Text query embeddings, per-video proxy stacks and the pairing between them.
///
/// Row `m` of a video's stack is proxy `p_{m+1}`; row 0 is the retrieval feature.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    text_queries: Matrix,
    video_proxies: Vec<Matrix>,
    pairs: Vec<Pair>,
}

impl EmbeddingDataset {
    /// Validates shapes, id ranges and norms, then L2-normalizes every embedding.
    pub fn new(text_queries: Matrix, video_proxies: Vec<Matrix>, pairs: Vec<Pair>) -> Result<Self> {
        let d = text_queries.cols();
        if d == 0 || text_queries.rows() == 0 {
            return Err(Error::EmptyInput("text queries"));
        }
        let m = video_proxies
            .first()
            .ok_or(Error::EmptyInput("video proxies"))?
            .rows();
        if m == 0 {
            return Err(Error::EmptyInput("video proxy stack"));
        }
        for (j, v) in video_proxies.iter().enumerate() {
            if v.shape() != (m, d) {
                return Err(Error::ShapeMismatch(format!(
                    "video {j} proxies are {:?}, expected {:?}",
                    v.shape(),
                    (m, d)
                )));
            }
        }
        if pairs.len() != text_queries.rows() {
            return Err(Error::InvalidConfig(format!(
                "manifest has {} pairs for {} text queries",
                pairs.len(),
                text_queries.rows()
            )));
        }
        for p in &pairs {
            if p.text_id >= text_queries.rows() || p.video_id >= video_proxies.len() {
                return Err(Error::InvalidConfig(format!(
                    "pair {p:?} out of range ({} texts, {} videos)",
                    text_queries.rows(),
                    video_proxies.len()
                )));
            }
        }
        let mut text_queries = text_queries;
        normalize_rows(&mut text_queries, "text query")?;
        let mut video_proxies = video_proxies;
        for v in &mut video_proxies {
            normalize_rows(v, "video proxy")?;
        }
        Ok(Self {
            text_queries,
            video_proxies,
            pairs,
        })
    }

    pub fn dim(&self) -> usize {
        self.text_queries.cols()
    }

    pub fn num_video_proxies(&self) -> usize {
        self.video_proxies[0].rows()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn text_queries(&self) -> &Matrix {
        &self.text_queries
    }

    pub fn video_proxies(&self) -> &[Matrix] {
        &self.video_proxies
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    /// Retrieval features `p_1` of every video, one per row.
    pub fn video_features(&self) -> Matrix {
        let d = self.dim();
        let mut data = Vec::with_capacity(self.video_proxies.len() * d);
        for v in &self.video_proxies {
            data.extend_from_slice(v.row(0));
        }
        Matrix::new(self.video_proxies.len(), d, data).expect("proxy shapes validated")
    }

    /// Square training batch for the given pair indices: text `i` matches video `i`.
    pub fn gather(&self, pair_idx: &[usize]) -> (Matrix, Vec<Matrix>) {
        let texts: Vec<usize> = pair_idx.iter().map(|&i| self.pairs[i].text_id).collect();
        let videos = pair_idx
            .iter()
            .map(|&i| self.video_proxies[self.pairs[i].video_id].clone())
            .collect();
        (self.text_queries.select_rows(&texts), videos)
    }

    /// Ground-truth video for each text row, or `None` when a text is unpaired.
    pub fn ground_truth(&self) -> Vec<Option<usize>> {
        let mut gt = vec![None; self.text_queries.rows()];
        for p in &self.pairs {
            gt[p.text_id] = Some(p.video_id);
        }
        gt
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            dim: self.dim(),
            num_video_proxies: self.num_video_proxies(),
            text_queries: TEXT_FILE.to_string(),
            video_proxies: VIDEO_FILE.to_string(),
            pairs: self.pairs.clone(),
        }
    }

    /// Writes `text_queries.tvpx`, `video_proxies.tvpx` and `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_tensor(dir.join(TEXT_FILE), &Tensor::from(&self.text_queries))?;
        write_tensor(dir.join(VIDEO_FILE), &stack_matrices(&self.video_proxies)?)?;
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&self.manifest()).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Loads a dataset directory; embeddings are normalized on load.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&raw).map_err(|e| Error::json(&path, e))?;
        let texts = read_tensor(dir.join(&manifest.text_queries))?.into_matrix()?;
        let videos = read_tensor(dir.join(&manifest.video_proxies))?.into_matrices()?;
        let ds = Self::new(texts, videos, manifest.pairs)?;
        if ds.dim() != manifest.dim || ds.num_video_proxies() != manifest.num_video_proxies {
            return Err(Error::ShapeMismatch(format!(
                "manifest declares dim {} and {} proxies, tensors have {} and {}",
                manifest.dim,
                manifest.num_video_proxies,
                ds.dim(),
                ds.num_video_proxies()
            )));
        }
        Ok(ds)
    }
}

fn normalize_rows(m: &mut Matrix, what: &'static str) -> Result<()> {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let n = l2_norm(row);
        if n < ZERO_NORM {
            return Err(Error::ZeroVector(what));
        }
        // Rows already unit-norm to rounding are kept as-is so save/load is bit-exact.
        if (n - 1.0).abs() > 1e-12 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    Ok(())
}

/// Noise model for the planted dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_pairs: usize,
    pub dim: usize,
    pub num_video_proxies: usize,
    pub sigma_text: f64,
    pub sigma_video: f64,
    /// Extra noise applied to the retrieval feature `p_1` only.
    pub sigma_corrupt: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_pairs: 256,
            dim: 32,
            num_video_proxies: 4,
            sigma_text: 0.4,
            sigma_video: 0.2,
            sigma_corrupt: 0.8,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n_pairs < 2 {
            return bad(format!("n_pairs must be >= 2, got {}", self.n_pairs));
        }
        if self.dim < 2 {
            return bad(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.num_video_proxies < 1 {
            return bad("num_video_proxies must be >= 1".into());
        }
        for (name, v) in [
            ("sigma_text", self.sigma_text),
            ("sigma_video", self.sigma_video),
            ("sigma_corrupt", self.sigma_corrupt),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

/// Draws a latent `z_i` per pair and derives the text query and video proxies
/// from it with independent Gaussian noise.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<EmbeddingDataset> {
    cfg.validate()?;
    let (n, d, m) = (cfg.n_pairs, cfg.dim, cfg.num_video_proxies);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut normal = move || -> f64 { StandardNormal.sample(&mut rng) };

    let mut texts = Vec::with_capacity(n * d);
    let mut videos = Vec::with_capacity(n);
    for _ in 0..n {
        let z: Vec<f64> = (0..d).map(|_| normal()).collect();
        texts.extend(z.iter().map(|zc| zc + cfg.sigma_text * normal()));
        let mut proxies = Vec::with_capacity(m * d);
        for _ in 0..m {
            proxies.extend(z.iter().map(|zc| zc + cfg.sigma_video * normal()));
        }
        for c in 0..d {
            proxies[c] += cfg.sigma_corrupt * normal();
        }
        videos.push(Matrix::new(m, d, proxies)?);
    }
    let pairs = (0..n)
        .map(|i| Pair {
            text_id: i,
            video_id: i,
        })
        .collect();
    EmbeddingDataset::new(Matrix::new(n, d, texts)?, videos, pairs)
}

/// Seeded permutation of the pair indices cut into full batches; the short tail is dropped.
pub fn make_batches(ds: &EmbeddingDataset, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::BatchTooSmall(batch_size));
    }
    if batch_size > ds.len() {
        return Err(Error::InvalidConfig(format!(
            "batch size {batch_size} exceeds dataset size {}",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}
