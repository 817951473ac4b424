//! Contrastive objectives over the three training score grids.
//!
//! For a square batch with ground truth on the diagonal:
//!
//! * `R[i][j] = s(t_q_i, p1_j)` plain text-video scores,
//! * `G[i][j] = s(t_p(i,j), p1_j)` pair-specific proxy scores,
//! * `H[i][j] = s(t_p(i,i), p1_j)` the positive proxy of text `i` against every video.
//!
//! Each grid feeds a symmetric InfoNCE and the total is `l_r + α l_p + β l_pos`.

use crate::error::{Error, Result};
use crate::generator::{GeneratorGrads, GeneratorParams, TracedGrid};
use crate::numkernel::{cosine_backward, cosine_sim, log_sum_exp, Matrix};
use crate::parallel::Executor;

/// Learnable temperature `σ = exp(λ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature {
    pub lambda: f64,
}

impl Temperature {
    pub const INITIAL_SIGMA: f64 = 0.01;

    pub fn from_sigma(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::NonPositiveTemperature(sigma));
        }
        Ok(Self { lambda: sigma.ln() })
    }

    pub fn sigma(&self) -> f64 {
        self.lambda.exp()
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self {
            lambda: Self::INITIAL_SIGMA.ln(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreGrids {
    pub r: Matrix,
    pub g: Matrix,
    pub h: Matrix,
}

impl ScoreGrids {
    pub fn batch_size(&self) -> usize {
        self.r.rows()
    }
}

fn check_square(texts: &Matrix, videos: &[Matrix]) -> Result<()> {
    if texts.rows() != videos.len() {
        return Err(Error::NonSquareBatch {
            texts: texts.rows(),
            videos: videos.len(),
        });
    }
    Ok(())
}

fn grids_from_traced(texts: &Matrix, videos: &[Matrix], traced: &TracedGrid) -> Result<ScoreGrids> {
    let b = texts.rows();
    let mut r = Matrix::zeros(b, b);
    let mut g = Matrix::zeros(b, b);
    let mut h = Matrix::zeros(b, b);
    for i in 0..b {
        let positive = traced.proxy(i, i);
        for (j, video) in videos.iter().enumerate() {
            let p1 = video.row(0);
            r.set(i, j, cosine_sim(texts.row(i), p1)?);
            g.set(i, j, cosine_sim(traced.proxy(i, j), p1)?);
            h.set(i, j, cosine_sim(positive, p1)?);
        }
    }
    Ok(ScoreGrids { r, g, h })
}

/// Builds `R`, `G` and `H` for a square batch (text `i` matches video `i`).
pub fn build_grids(texts: &Matrix, videos: &[Matrix], params: &GeneratorParams, exec: &Executor) -> Result<ScoreGrids> {
    check_square(texts, videos)?;
    let traced = TracedGrid::forward(texts, videos, params, exec)?;
    grids_from_traced(texts, videos, &traced)
}

fn check_grid(grid: &Matrix, sigma: f64) -> Result<usize> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::NonPositiveTemperature(sigma));
    }
    let (b, c) = grid.shape();
    if b != c {
        return Err(Error::NonSquareBatch { texts: b, videos: c });
    }
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    Ok(b)
}

/// Mean of the row-direction and column-direction cross-entropies against the diagonal.
pub fn infonce_bidirectional(grid: &Matrix, sigma: f64) -> Result<f64> {
    let b = check_grid(grid, sigma)?;
    let z: Vec<Vec<f64>> = grid
        .iter_rows()
        .map(|row| row.iter().map(|v| v / sigma).collect())
        .collect();
    let mut rows = 0.0;
    for (i, zi) in z.iter().enumerate() {
        rows += log_sum_exp(zi) - zi[i];
    }
    let mut cols = 0.0;
    for j in 0..b {
        let col: Vec<f64> = z.iter().map(|zi| zi[j]).collect();
        cols += log_sum_exp(&col) - z[j][j];
    }
    Ok(0.5 * (rows / b as f64 + cols / b as f64))
}

/// `(∂L/∂grid, ∂L/∂λ)` for [`infonce_bidirectional`] with `σ = exp(λ)`.
pub fn infonce_backward(grid: &Matrix, sigma: f64) -> Result<(Matrix, f64)> {
    let b = check_grid(grid, sigma)?;
    let z: Vec<Vec<f64>> = grid
        .iter_rows()
        .map(|row| row.iter().map(|v| v / sigma).collect())
        .collect();
    let scale = 0.5 / b as f64;
    let mut dz = Matrix::zeros(b, b);
    for (i, zi) in z.iter().enumerate() {
        let lse = log_sum_exp(zi);
        for j in 0..b {
            let delta = if i == j { 1.0 } else { 0.0 };
            dz.set(i, j, scale * ((zi[j] - lse).exp() - delta));
        }
    }
    for j in 0..b {
        let col: Vec<f64> = z.iter().map(|zi| zi[j]).collect();
        let lse = log_sum_exp(&col);
        for i in 0..b {
            let delta = if i == j { 1.0 } else { 0.0 };
            dz.set(i, j, dz.get(i, j) + scale * ((col[i] - lse).exp() - delta));
        }
    }
    // z = grid / e^λ  =>  ∂z/∂λ = −z
    let mut d_lambda = 0.0;
    for i in 0..b {
        for j in 0..b {
            d_lambda -= dz.get(i, j) * z[i][j];
        }
    }
    let mut d_grid = dz;
    d_grid.data_mut().iter_mut().for_each(|v| *v /= sigma);
    Ok((d_grid, d_lambda))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_r: f64,
    pub l_p: f64,
    pub l_pos: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub sigma: f64,
}

pub fn loss_total(grids: &ScoreGrids, sigma: f64, alpha: f64, beta: f64) -> Result<LossBreakdown> {
    let l_r = infonce_bidirectional(&grids.r, sigma)?;
    let l_p = infonce_bidirectional(&grids.g, sigma)?;
    let l_pos = infonce_bidirectional(&grids.h, sigma)?;
    Ok(LossBreakdown {
        l_r,
        l_p,
        l_pos,
        total: l_r + alpha * l_p + beta * l_pos,
        alpha,
        beta,
        sigma,
    })
}

/// Loss value and gradients for one training batch.
#[derive(Clone, Debug)]
pub struct LossGradients {
    pub breakdown: LossBreakdown,
    pub generator: GeneratorGrads,
    /// `∂total/∂λ`.
    pub log_temperature: f64,
    /// Pair pipeline runs spent on the batch.
    pub invocations: u64,
}

/// Forward and backward pass of `l_r + α l_p + β l_pos` over a square batch.
///
/// Embeddings are inputs; only generator parameters and `λ` receive gradients.
pub fn loss_backward(
    texts: &Matrix,
    videos: &[Matrix],
    params: &GeneratorParams,
    temperature: Temperature,
    alpha: f64,
    beta: f64,
    exec: &Executor,
) -> Result<LossGradients> {
    check_square(texts, videos)?;
    let b = texts.rows();
    let sigma = temperature.sigma();
    let traced = TracedGrid::forward(texts, videos, params, exec)?;
    let grids = grids_from_traced(texts, videos, &traced)?;
    let breakdown = loss_total(&grids, sigma, alpha, beta)?;

    let (_, dl_r) = infonce_backward(&grids.r, sigma)?;
    let (dg, dl_p) = infonce_backward(&grids.g, sigma)?;
    let (dh, dl_pos) = infonce_backward(&grids.h, sigma)?;

    let d = params.dim();
    let mut cot: Vec<Option<Vec<f64>>> = vec![None; b * b];
    for i in 0..b {
        for (j, video) in videos.iter().enumerate() {
            let p1 = video.row(0);
            let mut acc = vec![0.0; d];
            let (da, _) = cosine_backward(traced.proxy(i, j), p1, alpha * dg.get(i, j))?;
            acc.iter_mut().zip(&da).for_each(|(a, g)| *a += g);
            if i == j {
                for (jj, other) in videos.iter().enumerate() {
                    let (da, _) = cosine_backward(traced.proxy(i, i), other.row(0), beta * dh.get(i, jj))?;
                    acc.iter_mut().zip(&da).for_each(|(a, g)| *a += g);
                }
            }
            cot[i * b + j] = Some(acc);
        }
    }
    let generator = traced.backward(videos, params, &cot, exec)?;
    Ok(LossGradients {
        breakdown,
        generator,
        log_temperature: dl_r + alpha * dl_p + beta * dl_pos,
        invocations: traced.invocations(),
    })
}
