use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::store::{read_tensor, write_tensor, Tensor};

/// How the proxy displacement magnitude is produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DashMode {
    /// One positive scalar `exp(θ · mean_m s_m)`.
    #[default]
    Scalar,
    /// Per-dimension magnitudes `exp(S · W)`.
    Vector,
}

impl std::str::FromStr for DashMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scalar" => Ok(DashMode::Scalar),
            "vector" => Ok(DashMode::Vector),
            other => Err(Error::InvalidConfig(format!(
                "unknown dash mode {other:?} (expected \"scalar\" or \"vector\")"
            ))),
        }
    }
}

impl std::fmt::Display for DashMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DashMode::Scalar => "scalar",
            DashMode::Vector => "vector",
        })
    }
}

/// Query/key/value projections of one leader round, each `d × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl ProjectionSet {
    pub fn zeros(d: usize) -> Self {
        Self {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
        }
    }

    pub fn identity(d: usize) -> Self {
        Self {
            w_q: Matrix::identity(d),
            w_k: Matrix::identity(d),
            w_v: Matrix::identity(d),
        }
    }
}

/// Hyperparameters that fix the generator's structure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Number of leader rounds.
    pub k: usize,
    pub delta: f64,
    pub eta: f64,
    pub dash_mode: DashMode,
    /// Divide attention logits by `√d`.
    pub scaled_attention: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            k: 2,
            delta: 1.0,
            eta: 1.0,
            dash_mode: DashMode::Scalar,
            scaled_attention: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if !self.delta.is_finite() || !self.eta.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "delta and eta must be finite, got {} and {}",
                self.delta, self.eta
            )));
        }
        Ok(())
    }
}

/// Parameters of the text proxy generator.
///
/// `delta` and `eta` are fixed hyperparameters. Of `theta` and `w_dash`, only the
/// one selected by `dash_mode` is trained; the other is carried along unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub projections: Vec<ProjectionSet>,
    pub delta: f64,
    pub eta: f64,
    pub dash_mode: DashMode,
    pub theta: f64,
    /// `M × d`.
    pub w_dash: Matrix,
    pub scaled_attention: bool,
}

impl GeneratorParams {
    /// Projections and `w_dash` drawn from `N(0, 1/d)`, `theta = 1`.
    pub fn init<R: Rng + ?Sized>(cfg: &GeneratorConfig, dim: usize, num_proxies: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if dim == 0 || num_proxies == 0 {
            return Err(Error::InvalidConfig(format!(
                "dim ({dim}) and proxy count ({num_proxies}) must be positive"
            )));
        }
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
        let mut draw = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
            Matrix::new(rows, cols, data).expect("finite draws")
        };
        let projections = (0..cfg.k)
            .map(|_| ProjectionSet {
                w_q: draw(dim, dim),
                w_k: draw(dim, dim),
                w_v: draw(dim, dim),
            })
            .collect();
        let w_dash = draw(num_proxies, dim);
        Ok(Self {
            projections,
            delta: cfg.delta,
            eta: cfg.eta,
            dash_mode: cfg.dash_mode,
            theta: 1.0,
            w_dash,
            scaled_attention: cfg.scaled_attention,
        })
    }

    /// Identity projections in every round, `theta = 1`, zero `w_dash`.
    pub fn identity(cfg: &GeneratorConfig, dim: usize, num_proxies: usize) -> Self {
        Self {
            projections: (0..cfg.k).map(|_| ProjectionSet::identity(dim)).collect(),
            delta: cfg.delta,
            eta: cfg.eta,
            dash_mode: cfg.dash_mode,
            theta: 1.0,
            w_dash: Matrix::zeros(num_proxies, dim),
            scaled_attention: cfg.scaled_attention,
        }
    }

    pub fn k(&self) -> usize {
        self.projections.len()
    }

    pub fn dim(&self) -> usize {
        self.w_dash.cols()
    }

    pub fn num_video_proxies(&self) -> usize {
        self.w_dash.rows()
    }

    pub fn config(&self) -> GeneratorConfig {
        GeneratorConfig {
            k: self.k(),
            delta: self.delta,
            eta: self.eta,
            dash_mode: self.dash_mode,
            scaled_attention: self.scaled_attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.config().validate()?;
        let d = self.dim();
        for (r, p) in self.projections.iter().enumerate() {
            for (name, w) in [("w_q", &p.w_q), ("w_k", &p.w_k), ("w_v", &p.w_v)] {
                if w.shape() != (d, d) {
                    return Err(Error::ShapeMismatch(format!(
                        "round {r} {name} is {:?}, expected {:?}",
                        w.shape(),
                        (d, d)
                    )));
                }
            }
        }
        if !self.theta.is_finite() {
            return Err(Error::NonFiniteData("theta".into()));
        }
        Ok(())
    }

    /// Trainable tensors of the active dash mode, in a fixed order.
    pub fn trainable(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(3 * self.k() + 1);
        for (r, p) in self.projections.iter().enumerate() {
            out.push((format!("w_q.{r}"), p.w_q.data()));
            out.push((format!("w_k.{r}"), p.w_k.data()));
            out.push((format!("w_v.{r}"), p.w_v.data()));
        }
        match self.dash_mode {
            DashMode::Scalar => out.push(("theta".into(), std::slice::from_ref(&self.theta))),
            DashMode::Vector => out.push(("w_dash".into(), self.w_dash.data())),
        }
        out
    }

    /// Mutable counterpart of [`trainable`](Self::trainable), same order.
    pub fn trainable_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::with_capacity(3 * self.projections.len() + 1);
        for (r, p) in self.projections.iter_mut().enumerate() {
            out.push((format!("w_q.{r}"), p.w_q.data_mut()));
            out.push((format!("w_k.{r}"), p.w_k.data_mut()));
            out.push((format!("w_v.{r}"), p.w_v.data_mut()));
        }
        match self.dash_mode {
            DashMode::Scalar => out.push(("theta".into(), std::slice::from_mut(&mut self.theta))),
            DashMode::Vector => out.push(("w_dash".into(), self.w_dash.data_mut())),
        }
        out
    }
}

/// Gradients with the same layout as [`GeneratorParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorGrads {
    pub projections: Vec<ProjectionSet>,
    pub theta: f64,
    pub w_dash: Matrix,
}

impl GeneratorGrads {
    pub fn zeros_like(params: &GeneratorParams) -> Self {
        Self {
            projections: (0..params.k())
                .map(|_| ProjectionSet::zeros(params.dim()))
                .collect(),
            theta: 0.0,
            w_dash: Matrix::zeros(params.num_video_proxies(), params.dim()),
        }
    }

    pub fn add_assign(&mut self, other: &GeneratorGrads) {
        for (a, b) in self.projections.iter_mut().zip(&other.projections) {
            a.w_q.add_scaled(&b.w_q, 1.0);
            a.w_k.add_scaled(&b.w_k, 1.0);
            a.w_v.add_scaled(&b.w_v, 1.0);
        }
        self.theta += other.theta;
        self.w_dash.add_scaled(&other.w_dash, 1.0);
    }

    /// Gradient tensors matching [`GeneratorParams::trainable`] for `mode`.
    pub fn trainable(&self, mode: DashMode) -> Vec<(String, &[f64])> {
        let mut out = Vec::with_capacity(3 * self.projections.len() + 1);
        for (r, p) in self.projections.iter().enumerate() {
            out.push((format!("w_q.{r}"), p.w_q.data()));
            out.push((format!("w_k.{r}"), p.w_k.data()));
            out.push((format!("w_v.{r}"), p.w_v.data()));
        }
        match mode {
            DashMode::Scalar => out.push(("theta".into(), std::slice::from_ref(&self.theta))),
            DashMode::Vector => out.push(("w_dash".into(), self.w_dash.data())),
        }
        out
    }
}

pub const PARAMS_FILE: &str = "params.json";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsJson {
    files: BTreeMap<String, String>,
    k: usize,
    delta: f64,
    eta: f64,
    dash_mode: DashMode,
    scaled_attention: bool,
    theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    log_temperature: Option<f64>,
}

/// Generator parameters plus the learned log-temperature, as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub generator: GeneratorParams,
    pub log_temperature: Option<f64>,
}

impl Checkpoint {
    /// Writes one `.tvpx` per matrix and a `params.json` index into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let g = &self.generator;
        let mut files = BTreeMap::new();
        let mut put = |name: String, m: &Matrix| -> Result<()> {
            let file = format!("{name}.tvpx");
            write_tensor(dir.join(&file), &Tensor::from(m))?;
            files.insert(name, file);
            Ok(())
        };
        for (r, p) in g.projections.iter().enumerate() {
            put(format!("w_q.{r}"), &p.w_q)?;
            put(format!("w_k.{r}"), &p.w_k)?;
            put(format!("w_v.{r}"), &p.w_v)?;
        }
        put("w_dash".into(), &g.w_dash)?;
        let index = ParamsJson {
            files,
            k: g.k(),
            delta: g.delta,
            eta: g.eta,
            dash_mode: g.dash_mode,
            scaled_attention: g.scaled_attention,
            theta: g.theta,
            log_temperature: self.log_temperature,
        };
        let path = dir.join(PARAMS_FILE);
        let json = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(PARAMS_FILE);
        let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: ParamsJson = serde_json::from_str(&raw).map_err(|e| Error::json(&path, e))?;
        let get = |name: &str| -> Result<Matrix> {
            let file = index.files.get(name).ok_or_else(|| {
                Error::InvalidConfig(format!("{PARAMS_FILE} has no entry for {name}"))
            })?;
            read_tensor(dir.join(file))?.into_matrix()
        };
        let projections = (0..index.k)
            .map(|r| {
                Ok(ProjectionSet {
                    w_q: get(&format!("w_q.{r}"))?,
                    w_k: get(&format!("w_k.{r}"))?,
                    w_v: get(&format!("w_v.{r}"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let generator = GeneratorParams {
            projections,
            delta: index.delta,
            eta: index.eta,
            dash_mode: index.dash_mode,
            theta: index.theta,
            w_dash: get("w_dash")?,
            scaled_attention: index.scaled_attention,
        };
        generator.validate()?;
        Ok(Self {
            generator,
            log_temperature: index.log_temperature,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_shapes_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GeneratorParams::init(&GeneratorConfig::default(), 64, 4, &mut rng).unwrap();
        assert_eq!(p.k(), 2);
        assert_eq!(p.w_dash.shape(), (4, 64));
        assert_eq!(p.theta, 1.0);
        let w = p.projections[1].w_k.data();
        let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        assert!((var - 1.0 / 64.0).abs() < 0.2 / 64.0, "variance {var}");
        assert_ne!(p.projections[0].w_q, p.projections[1].w_q);
    }

    #[test]
    fn trainable_follows_dash_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = GeneratorConfig::default();
        let p = GeneratorParams::init(&cfg, 4, 2, &mut rng).unwrap();
        let names: Vec<String> = p.trainable().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.last().unwrap(), "theta");
        assert_eq!(names.len(), 7);
        cfg.dash_mode = DashMode::Vector;
        let mut p = GeneratorParams::init(&cfg, 4, 2, &mut rng).unwrap();
        assert_eq!(p.trainable_mut().last().unwrap().1.len(), 8);
        let g = GeneratorGrads::zeros_like(&p);
        let lens: Vec<usize> = g.trainable(DashMode::Vector).iter().map(|(_, v)| v.len()).collect();
        let plens: Vec<usize> = p.trainable().iter().map(|(_, v)| v.len()).collect();
        assert_eq!(lens, plens);
    }

    #[test]
    fn zero_rounds_rejected() {
        let cfg = GeneratorConfig {
            k: 0,
            ..GeneratorConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(GeneratorParams::init(&cfg, 4, 2, &mut rng).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = GeneratorConfig {
            dash_mode: DashMode::Vector,
            scaled_attention: true,
            delta: -1.0,
            ..GeneratorConfig::default()
        };
        let ck = Checkpoint {
            generator: GeneratorParams::init(&cfg, 6, 3, &mut rng).unwrap(),
            log_temperature: Some(0.01f64.ln()),
        };
        ck.save(dir.path()).unwrap();
        assert!(dir.path().join("w_v.1.tvpx").exists());
        let back = Checkpoint::load(dir.path()).unwrap();
        assert_eq!(back, ck);
        let index: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(PARAMS_FILE)).unwrap()).unwrap();
        assert_eq!(index["dash_mode"], "vector");
        assert_eq!(index["files"]["w_dash"], "w_dash.tvpx");
    }
}
