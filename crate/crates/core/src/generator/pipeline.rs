//! Pair-local proxy pipeline: leader rounds, director, dash and assembly.
//!
//! For a text query `t_q` and one video's proxy stack `P` (`M × d`):
//!
//! ```text
//! x_0 = t_q
//! x_r = softmax(c · (P W_K) (x_{r-1} W_Q)ᵀ) · (P W_V) + x_{r-1} W_Q     r = 1..k
//! d   = δ t_q − η x_k
//! t_p = t_q + dash ⊙ d / |d|
//! ```
//!
//! with `c = 1/√d` only when `scaled_attention` is set. Keys and values depend
//! on the video alone, so they are computed once per video in [`VideoContext`].

use std::sync::atomic::{AtomicU64, Ordering};

use super::params::{DashMode, GeneratorGrads, GeneratorParams, ProjectionSet};
use crate::error::{Error, Result};
use crate::numkernel::{
    add_outer, cosine_sim, dot, l2_norm, matmul, matvec, matvec_backward, softmax_backward,
    softmax_row, vecmat, Matrix,
};
use crate::parallel::Executor;

/// Directors shorter than this have no usable direction.
pub const MIN_DIRECTOR_NORM: f64 = 1e-12;

/// Displacement magnitude: one scalar, or one value per embedding dimension.
#[derive(Clone, Debug, PartialEq)]
pub enum Dash {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Dash {
    pub fn values(&self) -> &[f64] {
        match self {
            Dash::Scalar(v) => std::slice::from_ref(v),
            Dash::Vector(v) => v,
        }
    }

    pub fn is_positive(&self) -> bool {
        self.values().iter().all(|v| *v > 0.0)
    }
}

fn attention_scale(scaled: bool, dim: usize) -> f64 {
    if scaled {
        1.0 / (dim as f64).sqrt()
    } else {
        1.0
    }
}

struct Attended {
    query: Vec<f64>,
    weights: Vec<f64>,
    out: Vec<f64>,
}

fn attend(x: &[f64], keys: &Matrix, values: &Matrix, w_q: &Matrix, scaled: bool) -> Result<Attended> {
    let query = vecmat(x, w_q)?;
    let c = attention_scale(scaled, query.len());
    let mut logits = matvec(keys, &query)?;
    if c != 1.0 {
        logits.iter_mut().for_each(|l| *l *= c);
    }
    let weights = softmax_row(&logits)?;
    let mut out = vecmat(&weights, values)?;
    for (o, q) in out.iter_mut().zip(&query) {
        *o += q;
    }
    Ok(Attended {
        query,
        weights,
        out,
    })
}

fn check_pair_shapes(t_q: &[f64], video_proxies: &Matrix) -> Result<()> {
    if video_proxies.rows() == 0 {
        return Err(Error::EmptyInput("video proxy stack"));
    }
    if t_q.len() != video_proxies.cols() {
        return Err(Error::ShapeMismatch(format!(
            "query of dim {} against proxies of dim {}",
            t_q.len(),
            video_proxies.cols()
        )));
    }
    Ok(())
}

/// One round of cross-attention from the previous leader onto a video's proxies.
///
/// The residual adds the projected query `prev · W_Q`, not `prev` itself.
pub fn leader_step(prev_leader: &[f64], video_proxies: &Matrix, proj: &ProjectionSet, scaled: bool) -> Result<Vec<f64>> {
    check_pair_shapes(prev_leader, video_proxies)?;
    let keys = matmul(video_proxies, &proj.w_k)?;
    let values = matmul(video_proxies, &proj.w_v)?;
    Ok(attend(prev_leader, &keys, &values, &proj.w_q, scaled)?.out)
}

/// Runs `k` leader rounds starting from the query, one projection set per round.
pub fn leader_path(t_q: &[f64], video_proxies: &Matrix, params: &GeneratorParams) -> Result<Vec<f64>> {
    if params.projections.is_empty() {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let mut leader = t_q.to_vec();
    for proj in &params.projections {
        leader = leader_step(&leader, video_proxies, proj, params.scaled_attention)?;
    }
    Ok(leader)
}

/// `δ t_q − η d_l`; fails when the result is too short to define a direction.
pub fn compute_director(t_q: &[f64], leader: &[f64], delta: f64, eta: f64) -> Result<Vec<f64>> {
    if t_q.len() != leader.len() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} vs leader dim {}",
            t_q.len(),
            leader.len()
        )));
    }
    let d: Vec<f64> = t_q
        .iter()
        .zip(leader)
        .map(|(t, l)| delta * t - eta * l)
        .collect();
    let norm = l2_norm(&d);
    if !(norm >= MIN_DIRECTOR_NORM) {
        return Err(Error::DegenerateDirector { pair: None, norm });
    }
    Ok(d)
}

/// Cosine similarity of the query with each proxy row.
pub fn similarities(t_q: &[f64], video_proxies: &Matrix) -> Result<Vec<f64>> {
    check_pair_shapes(t_q, video_proxies)?;
    video_proxies.iter_rows().map(|p| cosine_sim(t_q, p)).collect()
}

fn scalar_dash_from(sims: &[f64], theta: f64) -> f64 {
    let mut acc = 0.0;
    for s in sims {
        acc += theta * s;
    }
    (acc / sims.len() as f64).exp()
}

fn vector_dash_from(sims: &[f64], w_dash: &Matrix) -> Result<Vec<f64>> {
    let mut z = vecmat(sims, w_dash)?;
    z.iter_mut().for_each(|v| *v = v.exp());
    Ok(z)
}

/// `exp(mean_m θ · s_m)`.
pub fn scalar_dash(t_q: &[f64], video_proxies: &Matrix, theta: f64) -> Result<f64> {
    Ok(scalar_dash_from(&similarities(t_q, video_proxies)?, theta))
}

/// `exp(S · W)` elementwise, with `S` the `M` similarities and `W` an `M × d` matrix.
pub fn vector_dash(t_q: &[f64], video_proxies: &Matrix, w_dash: &Matrix) -> Result<Vec<f64>> {
    if w_dash.rows() != video_proxies.rows() {
        return Err(Error::ShapeMismatch(format!(
            "w_dash has {} rows for {} proxies",
            w_dash.rows(),
            video_proxies.rows()
        )));
    }
    vector_dash_from(&similarities(t_q, video_proxies)?, w_dash)
}

/// `t_q + dash ⊙ d/|d|`.
pub fn assemble_proxy(t_q: &[f64], director: &[f64], dash: &Dash) -> Result<Vec<f64>> {
    if t_q.len() != director.len() {
        return Err(Error::ShapeMismatch(format!(
            "query dim {} vs director dim {}",
            t_q.len(),
            director.len()
        )));
    }
    let norm = l2_norm(director);
    if !(norm >= MIN_DIRECTOR_NORM) {
        return Err(Error::DegenerateDirector { pair: None, norm });
    }
    match dash {
        Dash::Scalar(s) => Ok(t_q
            .iter()
            .zip(director)
            .map(|(t, d)| t + s * (d / norm))
            .collect()),
        Dash::Vector(v) => {
            if v.len() != t_q.len() {
                return Err(Error::ShapeMismatch(format!(
                    "dash of dim {} for query of dim {}",
                    v.len(),
                    t_q.len()
                )));
            }
            Ok(t_q
                .iter()
                .zip(director)
                .zip(v)
                .map(|((t, d), s)| t + s * (d / norm))
                .collect())
        }
    }
}

/// Full single-pair pipeline.
pub fn generate_proxy(t_q: &[f64], video_proxies: &Matrix, params: &GeneratorParams) -> Result<Vec<f64>> {
    let ctx = VideoContext::new(video_proxies, params)?;
    Ok(forward_pair(t_q, video_proxies, &ctx, params)?.proxy)
}

/// Per-round keys `P W_K` and values `P W_V` of one video.
#[derive(Clone, Debug)]
pub struct VideoContext {
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
}

impl VideoContext {
    pub fn new(video_proxies: &Matrix, params: &GeneratorParams) -> Result<Self> {
        if video_proxies.cols() != params.dim() || video_proxies.rows() != params.num_video_proxies() {
            return Err(Error::ShapeMismatch(format!(
                "video proxies {:?} do not match generator ({} proxies of dim {})",
                video_proxies.shape(),
                params.num_video_proxies(),
                params.dim()
            )));
        }
        let mut keys = Vec::with_capacity(params.k());
        let mut values = Vec::with_capacity(params.k());
        for proj in &params.projections {
            keys.push(matmul(video_proxies, &proj.w_k)?);
            values.push(matmul(video_proxies, &proj.w_v)?);
        }
        Ok(Self { keys, values })
    }
}

#[derive(Clone, Debug)]
struct RoundTrace {
    input: Vec<f64>,
    query: Vec<f64>,
    weights: Vec<f64>,
}

/// Forward intermediates of one pair, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct PairTrace {
    rounds: Vec<RoundTrace>,
    director: Vec<f64>,
    director_norm: f64,
    sims: Vec<f64>,
    dash: Dash,
    proxy: Vec<f64>,
}

impl PairTrace {
    pub fn proxy(&self) -> &[f64] {
        &self.proxy
    }

    pub fn dash(&self) -> &Dash {
        &self.dash
    }

    pub fn director(&self) -> &[f64] {
        &self.director
    }
}

pub fn forward_pair(t_q: &[f64], video_proxies: &Matrix, ctx: &VideoContext, params: &GeneratorParams) -> Result<PairTrace> {
    check_pair_shapes(t_q, video_proxies)?;
    let mut rounds = Vec::with_capacity(params.k());
    let mut x = t_q.to_vec();
    for (r, proj) in params.projections.iter().enumerate() {
        let a = attend(&x, &ctx.keys[r], &ctx.values[r], &proj.w_q, params.scaled_attention)?;
        rounds.push(RoundTrace {
            input: x,
            query: a.query,
            weights: a.weights,
        });
        x = a.out;
    }
    let director = compute_director(t_q, &x, params.delta, params.eta)?;
    let sims = similarities(t_q, video_proxies)?;
    let dash = match params.dash_mode {
        DashMode::Scalar => Dash::Scalar(scalar_dash_from(&sims, params.theta)),
        DashMode::Vector => Dash::Vector(vector_dash_from(&sims, &params.w_dash)?),
    };
    let proxy = assemble_proxy(t_q, &director, &dash)?;
    Ok(PairTrace {
        rounds,
        director_norm: l2_norm(&director),
        director,
        sims,
        dash,
        proxy,
    })
}

/// Gradients that do not depend on which video a pair uses.
struct SharedGrads {
    w_q: Vec<Matrix>,
    theta: f64,
    w_dash: Matrix,
}

impl SharedGrads {
    fn zeros(params: &GeneratorParams) -> Self {
        let d = params.dim();
        Self {
            w_q: (0..params.k()).map(|_| Matrix::zeros(d, d)).collect(),
            theta: 0.0,
            w_dash: Matrix::zeros(params.num_video_proxies(), d),
        }
    }

    fn add(&mut self, other: &SharedGrads) {
        for (a, b) in self.w_q.iter_mut().zip(&other.w_q) {
            a.add_scaled(b, 1.0);
        }
        self.theta += other.theta;
        self.w_dash.add_scaled(&other.w_dash, 1.0);
    }
}

/// Cotangents on one video's per-round keys and values.
struct VideoGrads {
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
}

impl VideoGrads {
    fn zeros(params: &GeneratorParams) -> Self {
        let (m, d) = (params.num_video_proxies(), params.dim());
        Self {
            keys: (0..params.k()).map(|_| Matrix::zeros(m, d)).collect(),
            values: (0..params.k()).map(|_| Matrix::zeros(m, d)).collect(),
        }
    }

    fn add(&mut self, other: &VideoGrads) {
        for (a, b) in self.keys.iter_mut().zip(&other.keys) {
            a.add_scaled(b, 1.0);
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_scaled(b, 1.0);
        }
    }
}

/// Pulls `d_proxy = ∂L/∂t_p` back through one pair's trace.
fn backward_pair(
    trace: &PairTrace,
    ctx: &VideoContext,
    params: &GeneratorParams,
    d_proxy: &[f64],
    shared: &mut SharedGrads,
    video: &mut VideoGrads,
) {
    let n = trace.director_norm;
    let unit: Vec<f64> = trace.director.iter().map(|v| v / n).collect();

    let d_unit: Vec<f64> = match &trace.dash {
        Dash::Scalar(s) => {
            let d_dash = dot(d_proxy, &unit);
            let mut mean = 0.0;
            for v in &trace.sims {
                mean += v;
            }
            mean /= trace.sims.len() as f64;
            shared.theta += d_dash * s * mean;
            d_proxy.iter().map(|g| s * g).collect()
        }
        Dash::Vector(ds) => {
            let dz: Vec<f64> = d_proxy
                .iter()
                .zip(&unit)
                .zip(ds)
                .map(|((g, u), s)| g * u * s)
                .collect();
            add_outer(&mut shared.w_dash, &trace.sims, &dz, 1.0);
            d_proxy.iter().zip(ds).map(|(g, s)| s * g).collect()
        }
    };

    // u = d/|d|  =>  ∂d = (∂u − u ⟨u, ∂u⟩) / |d|
    let along = dot(&unit, &d_unit);
    let mut d_x: Vec<f64> = d_unit
        .iter()
        .zip(&unit)
        .map(|(g, u)| -params.eta * (g - u * along) / n)
        .collect();

    let c = attention_scale(params.scaled_attention, params.dim());
    for r in (0..trace.rounds.len()).rev() {
        let rt = &trace.rounds[r];
        let values = &ctx.values[r];
        let keys = &ctx.keys[r];

        let mut d_query = d_x.clone();
        let d_weights = matvec(values, &d_x).expect("trace shapes");
        add_outer(&mut video.values[r], &rt.weights, &d_x, 1.0);
        let mut d_logits = softmax_backward(&rt.weights, &d_weights);
        if c != 1.0 {
            d_logits.iter_mut().for_each(|v| *v *= c);
        }
        let (d_keys, dq) = matvec_backward(keys, &rt.query, &d_logits);
        video.keys[r].add_scaled(&d_keys, 1.0);
        for (a, b) in d_query.iter_mut().zip(&dq) {
            *a += b;
        }
        let w_q = &params.projections[r].w_q;
        add_outer(&mut shared.w_q[r], &rt.input, &d_query, 1.0);
        d_x = matvec(w_q, &d_query).expect("trace shapes");
    }
}

/// Counts pair pipeline runs; safe to bump from any worker.
#[derive(Debug, Default)]
pub struct InvocationCounter(AtomicU64);

impl InvocationCounter {
    pub fn record(&self) {
        self.0.fetch_add(1, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }
}

fn check_batch(texts: &Matrix, videos: &[Matrix], params: &GeneratorParams) -> Result<()> {
    params.validate()?;
    if texts.rows() == 0 || videos.is_empty() {
        return Err(Error::EmptyInput("proxy grid batch"));
    }
    if texts.cols() != params.dim() {
        return Err(Error::ShapeMismatch(format!(
            "text batch dim {} vs generator dim {}",
            texts.cols(),
            params.dim()
        )));
    }
    Ok(())
}

fn with_pair(err: Error, i: usize, j: usize) -> Error {
    match err {
        Error::DegenerateDirector { norm, .. } => Error::DegenerateDirector {
            pair: Some((i, j)),
            norm,
        },
        other => other,
    }
}

/// Runs the pipeline on every `(text i, video j)` pair and hands each proxy to `f`.
///
/// Rows are distributed over the executor; results come back in row-major order.
pub fn map_pair_proxies<T, F>(
    texts: &Matrix,
    videos: &[Matrix],
    params: &GeneratorParams,
    exec: &Executor,
    counter: &InvocationCounter,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, usize, &[f64]) -> Result<T> + Sync + Send,
{
    check_batch(texts, videos, params)?;
    let contexts = exec.try_map(videos.len(), |j| VideoContext::new(&videos[j], params))?;
    let rows = exec.try_map(texts.rows(), |i| {
        let t_q = texts.row(i);
        (0..videos.len())
            .map(|j| {
                counter.record();
                let trace = forward_pair(t_q, &videos[j], &contexts[j], params).map_err(|e| with_pair(e, i, j))?;
                f(i, j, &trace.proxy)
            })
            .collect::<Result<Vec<T>>>()
    })?;
    Ok(rows.into_iter().flatten().collect())
}

/// `B_t × B_v` grid of pair-specific proxies.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyGrid {
    n_text: usize,
    n_video: usize,
    dim: usize,
    data: Vec<f64>,
    invocations: u64,
}

impl ProxyGrid {
    pub fn n_text(&self) -> usize {
        self.n_text
    }

    pub fn n_video(&self) -> usize {
        self.n_video
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Proxy of text `i` for video `j`.
    pub fn get(&self, i: usize, j: usize) -> &[f64] {
        let at = (i * self.n_video + j) * self.dim;
        &self.data[at..at + self.dim]
    }

    /// Number of pair pipeline runs that produced this grid.
    pub fn invocations(&self) -> u64 {
        self.invocations
    }
}

pub fn proxy_grid(texts: &Matrix, videos: &[Matrix], params: &GeneratorParams, exec: &Executor) -> Result<ProxyGrid> {
    let counter = InvocationCounter::default();
    let proxies = map_pair_proxies(texts, videos, params, exec, &counter, |_, _, p| Ok(p.to_vec()))?;
    Ok(ProxyGrid {
        n_text: texts.rows(),
        n_video: videos.len(),
        dim: params.dim(),
        data: proxies.concat(),
        invocations: counter.get(),
    })
}

/// Forward pass over a batch that keeps every pair's trace for [`TracedGrid::backward`].
pub struct TracedGrid {
    contexts: Vec<VideoContext>,
    traces: Vec<PairTrace>,
    n_text: usize,
    n_video: usize,
    invocations: u64,
}

impl TracedGrid {
    pub fn forward(texts: &Matrix, videos: &[Matrix], params: &GeneratorParams, exec: &Executor) -> Result<Self> {
        check_batch(texts, videos, params)?;
        let counter = InvocationCounter::default();
        let contexts = exec.try_map(videos.len(), |j| VideoContext::new(&videos[j], params))?;
        let rows = exec.try_map(texts.rows(), |i| {
            (0..videos.len())
                .map(|j| {
                    counter.record();
                    forward_pair(texts.row(i), &videos[j], &contexts[j], params).map_err(|e| with_pair(e, i, j))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        Ok(Self {
            contexts,
            traces: rows.into_iter().flatten().collect(),
            n_text: texts.rows(),
            n_video: videos.len(),
            invocations: counter.get(),
        })
    }

    pub fn proxy(&self, i: usize, j: usize) -> &[f64] {
        &self.traces[i * self.n_video + j].proxy
    }

    pub fn trace(&self, i: usize, j: usize) -> &PairTrace {
        &self.traces[i * self.n_video + j]
    }

    pub fn n_text(&self) -> usize {
        self.n_text
    }

    pub fn n_video(&self) -> usize {
        self.n_video
    }

    pub fn invocations(&self) -> u64 {
        self.invocations
    }

    /// Parameter gradients given `∂L/∂t_p(i,j)` for each pair (row-major, `None` = zero).
    ///
    /// Row partials are summed in row order, then per-video key/value cotangents
    /// are pulled through `W_K`, `W_V` in video order.
    pub fn backward(
        &self,
        videos: &[Matrix],
        params: &GeneratorParams,
        d_proxies: &[Option<Vec<f64>>],
        exec: &Executor,
    ) -> Result<GeneratorGrads> {
        if d_proxies.len() != self.traces.len() || videos.len() != self.n_video {
            return Err(Error::ShapeMismatch(format!(
                "{} proxy cotangents and {} videos for a {}x{} grid",
                d_proxies.len(),
                videos.len(),
                self.n_text,
                self.n_video
            )));
        }
        let rows = exec.map(self.n_text, |i| {
            let mut shared = SharedGrads::zeros(params);
            let mut per_video: Vec<VideoGrads> = (0..self.n_video).map(|_| VideoGrads::zeros(params)).collect();
            for (j, slot) in per_video.iter_mut().enumerate() {
                if let Some(g) = &d_proxies[i * self.n_video + j] {
                    backward_pair(self.trace(i, j), &self.contexts[j], params, g, &mut shared, slot);
                }
            }
            (shared, per_video)
        });

        let mut shared = SharedGrads::zeros(params);
        let mut per_video: Vec<VideoGrads> = (0..self.n_video).map(|_| VideoGrads::zeros(params)).collect();
        for (row_shared, row_videos) in &rows {
            shared.add(row_shared);
            for (acc, g) in per_video.iter_mut().zip(row_videos) {
                acc.add(g);
            }
        }

        let mut grads = GeneratorGrads::zeros_like(params);
        for (r, w_q) in shared.w_q.into_iter().enumerate() {
            grads.projections[r].w_q = w_q;
        }
        grads.theta = shared.theta;
        grads.w_dash = shared.w_dash;
        // keys = P W_K  =>  ∂W_K = Pᵀ ∂keys, summed over videos.
        for (j, vg) in per_video.iter().enumerate() {
            for r in 0..params.k() {
                for m in 0..videos[j].rows() {
                    let p = videos[j].row(m);
                    add_outer(&mut grads.projections[r].w_k, p, vg.keys[r].row(m), 1.0);
                    add_outer(&mut grads.projections[r].w_v, p, vg.values[r].row(m), 1.0);
                }
            }
        }
        Ok(grads)
    }
}
