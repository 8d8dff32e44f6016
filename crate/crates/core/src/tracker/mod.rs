//! Compact differentiable point tracker.
//!
//! Per-frame 2-D conv features at two strides, a global cost volume between
//! each query feature and every coarse cell, soft-argmax for the initial
//! position, and a refinement block that reads local correlations around the
//! current estimate and mixes them along time with replicate-padded 1-D
//! convolutions. The refinement output layer starts at zero, so at init every
//! refinement iteration reproduces iteration 0.
//!
//! Points never interact: each query's trajectory depends only on the video
//! and its own query.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Graph, Real, Tensor, Var};
use crate::rng::stream;
use crate::types::{QueryPoint, Video};

#[derive(Debug, Error)]
pub enum TrackerError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("query {index} at ({x}, {y}, t={t}) is outside the {frames}x{height}x{width} video")]
    QueryOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        t: usize,
        frames: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fine features live at stride 2, coarse features at stride 4.
pub const FINE_STRIDE: f64 = 2.0;
pub const COARSE_STRIDE: f64 = 4.0;
/// Local correlation window is `(2r + 1)^2` taps.
pub const LOCAL_RADIUS: i64 = 2;
const LOCAL_TAPS: usize = ((2 * LOCAL_RADIUS + 1) * (2 * LOCAL_RADIUS + 1)) as usize;
/// Pixels per unit of the refinement position output.
const DELTA_SCALE: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels of the stride-2 conv (also the fine feature width).
    pub fine_channels: usize,
    /// Channels of the stride-4 conv.
    pub mid_channels: usize,
    /// Coarse feature dimension.
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub refine_hidden: usize,
    /// Predictions per query: iteration 0 plus `iterations - 1` refinements.
    pub iterations: usize,
    /// Soft-argmax temperature on cosine similarities.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fine_channels: 16,
            mid_channels: 24,
            feature_dim: 32,
            head_hidden: 16,
            refine_hidden: 32,
            iterations: 2,
            temperature: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TrackerError> {
        let dims = [self.fine_channels, self.mid_channels, self.feature_dim, self.head_hidden, self.refine_hidden];
        if dims.iter().any(|&d| d == 0) {
            return Err(TrackerError::Config("all widths must be >= 1".into()));
        }
        if self.iterations < 2 {
            return Err(TrackerError::Config(format!("iterations must be >= 2, got {}", self.iterations)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(TrackerError::Config("temperature must be positive".into()));
        }
        Ok(())
    }

    fn local_features(&self) -> usize {
        2 * LOCAL_TAPS
    }

    /// Shapes of every parameter tensor, in name order.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (c1, c2, d) = (self.fine_channels, self.mid_channels, self.feature_dim);
        let head_in = self.local_features() + 2;
        let refine_in = self.local_features() + 2;
        let rh = self.refine_hidden;
        let mut m = BTreeMap::new();
        let mut put = |name: &str, shape: Vec<usize>| {
            m.insert(name.to_string(), shape);
        };
        put("backbone/conv1/w", vec![3, 3, 3, c1]);
        put("backbone/conv1/b", vec![c1]);
        put("backbone/conv2/w", vec![3, 3, c1, c2]);
        put("backbone/conv2/b", vec![c2]);
        put("backbone/conv3/w", vec![3, 3, c2, d]);
        put("backbone/conv3/b", vec![d]);
        put("head/fc1/w", vec![head_in, self.head_hidden]);
        put("head/fc1/b", vec![self.head_hidden]);
        put("head/fc2/w", vec![self.head_hidden, 2]);
        put("head/fc2/b", vec![2]);
        put("refine/tconv1/w", vec![3 * refine_in, rh]);
        put("refine/tconv1/b", vec![rh]);
        put("refine/tconv2/w", vec![3 * rh, rh]);
        put("refine/tconv2/b", vec![rh]);
        put("refine/out/w", vec![rh, 4]);
        put("refine/out/b", vec![4]);
        m
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().values().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Named parameter tensors plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&Tensor<f32>, TrackerError> {
        self.tensors.get(name).ok_or_else(|| TrackerError::MissingParam(name.into()))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.is_finite())
    }

    pub fn same_shapes(&self, other: &ModelParams) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }

    /// Check names and shapes against the config.
    pub fn validate(&self) -> Result<(), TrackerError> {
        self.config.validate()?;
        let want = self.config.param_shapes();
        for (name, shape) in &want {
            let t = self.get(name)?;
            if t.shape() != &shape[..] {
                return Err(TrackerError::Checkpoint(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !want.contains_key(*k)) {
            return Err(TrackerError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }

    /// Record every tensor on `g`, as trainable leaves or as constants.
    pub fn bind<F: Real>(&self, g: &mut Graph<F>, trainable: bool) -> Result<ParamVars, TrackerError> {
        let mut vars = BTreeMap::new();
        for (name, t) in &self.tensors {
            let v = if trainable { g.param(t.cast())? } else { g.constant(t.cast())? };
            vars.insert(name.clone(), v);
        }
        Ok(ParamVars { vars })
    }
}

/// Deterministic init: scaled-uniform weights, zero biases, and a zero
/// refinement output layer.
pub fn init_params(seed: u64, config: &ModelConfig) -> Result<ModelParams, TrackerError> {
    config.validate()?;
    let mut tensors = BTreeMap::new();
    for (i, (name, shape)) in config.param_shapes().into_iter().enumerate() {
        let numel: usize = shape.iter().product();
        let data = if name.ends_with("/b") || name.starts_with("refine/out/") {
            vec![0.0f32; numel]
        } else {
            let fan_in: usize = shape[..shape.len() - 1].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let mut rng = stream(seed, 0x7e1a_0000 + i as u64);
            (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        tensors.insert(name, Tensor::from_vec(&shape, data));
    }
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

/// Parameters recorded on one graph, by name.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub vars: BTreeMap<String, Var>,
}

impl ParamVars {
    fn get(&self, name: &str) -> Result<Var, TrackerError> {
        self.vars.get(name).copied().ok_or_else(|| TrackerError::MissingParam(name.into()))
    }
}

/// One iteration's outputs for all queries, rows ordered query-major then
/// frame: `pos` is `[N*T, 2]` in pixels, `occ` and `unc` are `[N*T]` logits.
#[derive(Debug, Clone, Copy)]
pub struct IterationVars {
    pub pos: Var,
    pub occ: Var,
    pub unc: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardVars {
    pub queries: usize,
    pub frames: usize,
    pub iterations: Vec<IterationVars>,
}

impl ForwardVars {
    pub fn last(&self) -> &IterationVars {
        self.iterations.last().expect("at least one iteration")
    }

    pub fn predictions<F: Real>(&self, g: &Graph<F>) -> Vec<TrajectoryPrediction> {
        let tn = self.frames;
        let mut out: Vec<TrajectoryPrediction> = (0..self.queries).map(|_| TrajectoryPrediction { iterations: Vec::new() }).collect();
        for it in &self.iterations {
            let p = g.value(it.pos).to_f64_vec();
            let o = g.value(it.occ).to_f64_vec();
            let u = g.value(it.unc).to_f64_vec();
            for (n, pred) in out.iter_mut().enumerate() {
                let rows = n * tn..(n + 1) * tn;
                pred.iterations.push(IterationOutput {
                    positions: rows.clone().map(|r| [p[2 * r], p[2 * r + 1]]).collect(),
                    occlusion: o[rows.clone()].to_vec(),
                    uncertainty: u[rows].to_vec(),
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationOutput {
    pub positions: Vec<[f64; 2]>,
    /// Logits, `> 0` means occluded.
    pub occlusion: Vec<f64>,
    /// Logits, `> 0` means the position error likely exceeds the threshold.
    pub uncertainty: Vec<f64>,
}

impl IterationOutput {
    pub fn frames(&self) -> usize {
        self.positions.len()
    }

    pub fn occluded(&self, t: usize) -> bool {
        self.occlusion[t] > 0.0
    }
}

/// Per-iteration outputs for one query; the last iteration is the answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPrediction {
    pub iterations: Vec<IterationOutput>,
}

impl TrajectoryPrediction {
    pub fn last(&self) -> &IterationOutput {
        self.iterations.last().expect("at least one iteration")
    }

    pub fn frames(&self) -> usize {
        self.last().frames()
    }
}

struct Features {
    fine: Var,
    coarse: Var,
    fine_dim: usize,
    dim: usize,
    h: usize,
    w: usize,
}

fn conv_layer<F: Real>(g: &mut Graph<F>, p: &ParamVars, x: Var, name: &str, stride: usize, act: bool) -> Result<Var, TrackerError> {
    let y = g.conv2d(x, p.get(&format!("{name}/w"))?, stride)?;
    let y = g.add(y, p.get(&format!("{name}/b"))?)?;
    Ok(if act { g.silu(y)? } else { y })
}

fn dense<F: Real>(g: &mut Graph<F>, p: &ParamVars, x: Var, name: &str) -> Result<Var, TrackerError> {
    let y = g.matmul(x, p.get(&format!("{name}/w"))?)?;
    Ok(g.add(y, p.get(&format!("{name}/b"))?)?)
}

/// Per-frame features. Frame `t`'s features depend on frame `t` only.
fn backbone<F: Real>(g: &mut Graph<F>, p: &ParamVars, cfg: &ModelConfig, video: &Video) -> Result<Features, TrackerError> {
    let shape = [video.frames(), video.height(), video.width(), 3];
    let x = g.constant(Tensor::from_vec(&shape, video.data().iter().map(|&v| F::of(v as f64 - 0.5)).collect()))?;
    let h1 = conv_layer(g, p, x, "backbone/conv1", 2, true)?;
    let h2 = conv_layer(g, p, h1, "backbone/conv2", 2, true)?;
    let h3 = conv_layer(g, p, h2, "backbone/conv3", 1, false)?;
    let fine = g.l2_normalize_last(h1, 1e-6)?;
    let coarse = g.l2_normalize_last(h3, 1e-6)?;
    let s = g.shape(coarse).to_vec();
    Ok(Features {
        fine,
        coarse,
        fine_dim: cfg.fine_channels,
        dim: cfg.feature_dim,
        h: s[1],
        w: s[2],
    })
}

/// Replicate-padded temporal convolution (kernel 3) over `[N*T, C]` rows.
fn temporal_conv<F: Real>(g: &mut Graph<F>, p: &ParamVars, x: Var, n: usize, tn: usize, name: &str) -> Result<Var, TrackerError> {
    let prev: Vec<Option<usize>> = (0..n * tn).map(|r| Some(r - (r % tn).min(1))).collect();
    let next: Vec<Option<usize>> = (0..n * tn).map(|r| Some(if r % tn + 1 < tn { r + 1 } else { r })).collect();
    let xp = g.gather_rows(x, &prev)?;
    let xn = g.gather_rows(x, &next)?;
    let stacked = g.concat_last(&[xp, x, xn])?;
    dense(g, p, stacked, name)
}

struct QueryContext {
    n: usize,
    tn: usize,
    /// Query index of each `[N*T]` row.
    row_query: Vec<Option<usize>>,
    /// Frame of each `[N*T]` row.
    row_frame: Vec<usize>,
    fine_q: Var,
    coarse_q: Var,
}

/// Correlation of the query feature with a `(2r+1)^2` window of `field`
/// around each row's position. Returns `[N*T, taps]`.
fn local_correlation<F: Real>(
    g: &mut Graph<F>,
    ctx: &QueryContext,
    field: Var,
    query_feat: Var,
    pos: Var,
    stride: f64,
) -> Result<Var, TrackerError> {
    let rows = ctx.n * ctx.tn;
    let scaled = g.scale(pos, 1.0 / stride)?;
    let scaled = g.reshape(scaled, &[rows, 1, 2])?;
    let mut offsets = Vec::with_capacity(LOCAL_TAPS * 2);
    for dy in -LOCAL_RADIUS..=LOCAL_RADIUS {
        for dx in -LOCAL_RADIUS..=LOCAL_RADIUS {
            offsets.push(F::of(dx as f64));
            offsets.push(F::of(dy as f64));
        }
    }
    let off = g.constant(Tensor::from_vec(&[LOCAL_TAPS, 2], offsets))?;
    let taps = g.add(scaled, off)?;
    let taps = g.reshape(taps, &[rows * LOCAL_TAPS, 2])?;
    let frames: Vec<usize> = ctx.row_frame.iter().flat_map(|&t| std::iter::repeat(t).take(LOCAL_TAPS)).collect();
    let sampled = g.bilinear_sample_frames(field, taps, &frames)?;
    let idx: Vec<Option<usize>> = ctx.row_query.iter().flat_map(|&q| std::iter::repeat(q).take(LOCAL_TAPS)).collect();
    let qrep = g.gather_rows(query_feat, &idx)?;
    let prod = g.mul(sampled, qrep)?;
    let corr = g.sum_last(prod)?;
    Ok(g.reshape(corr, &[rows, LOCAL_TAPS])?)
}

fn local_features<F: Real>(g: &mut Graph<F>, ctx: &QueryContext, feats: &Features, pos: Var) -> Result<Var, TrackerError> {
    let fine = local_correlation(g, ctx, feats.fine, ctx.fine_q, pos, FINE_STRIDE)?;
    let coarse = local_correlation(g, ctx, feats.coarse, ctx.coarse_q, pos, COARSE_STRIDE)?;
    Ok(g.concat_last(&[fine, coarse])?)
}

pub fn check_queries(video: &Video, queries: &[QueryPoint]) -> Result<(), TrackerError> {
    let (tn, h, w) = (video.frames(), video.height(), video.width());
    for (index, q) in queries.iter().enumerate() {
        if !q.in_bounds(tn, h, w) || !q.x.is_finite() || !q.y.is_finite() {
            return Err(TrackerError::QueryOutOfBounds {
                index,
                x: q.x,
                y: q.y,
                t: q.t,
                frames: tn,
                height: h,
                width: w,
            });
        }
    }
    Ok(())
}

/// Record the tracker on `g` for one video and its queries.
pub fn forward<F: Real>(g: &mut Graph<F>, params: &ParamVars, cfg: &ModelConfig, video: &Video, queries: &[QueryPoint]) -> Result<ForwardVars, TrackerError> {
    check_queries(video, queries)?;
    if queries.is_empty() {
        return Err(TrackerError::Config("at least one query is required".into()));
    }
    let (n, tn) = (queries.len(), video.frames());
    let feats = backbone(g, params, cfg, video)?;
    let (fh, fw) = (feats.h, feats.w);
    let hw = fh * fw;

    let qframes: Vec<usize> = queries.iter().map(|q| q.t).collect();
    let qxy = |stride: f64| -> Vec<F> { queries.iter().flat_map(|q| [F::of(q.x / stride), F::of(q.y / stride)]).collect() };
    let fine_xy = g.constant(Tensor::from_vec(&[n, 2], qxy(FINE_STRIDE)))?;
    let coarse_xy = g.constant(Tensor::from_vec(&[n, 2], qxy(COARSE_STRIDE)))?;
    let fine_q = g.bilinear_sample_frames(feats.fine, fine_xy, &qframes)?;
    let coarse_q = g.bilinear_sample_frames(feats.coarse, coarse_xy, &qframes)?;
    let ctx = QueryContext {
        n,
        tn,
        row_query: (0..n * tn).map(|r| Some(r / tn)).collect(),
        row_frame: (0..n * tn).map(|r| r % tn).collect(),
        fine_q,
        coarse_q,
    };
    debug_assert_eq!(feats.fine_dim, g.shape(fine_q)[1]);

    // Global cost volume: [N, T*HW] -> [N*T, HW].
    let flat = g.reshape(feats.coarse, &[tn * hw, feats.dim])?;
    let flat_t = g.transpose(flat)?;
    let cost = g.matmul(coarse_q, flat_t)?;
    let cost = g.reshape(cost, &[n * tn, hw])?;
    let logits = g.scale(cost, 1.0 / cfg.temperature)?;
    let prob = g.softmax_last(logits)?;
    let grid: Vec<F> = (0..hw).flat_map(|i| [F::of((i % fw) as f64 * COARSE_STRIDE), F::of((i / fw) as f64 * COARSE_STRIDE)]).collect();
    let grid = g.constant(Tensor::from_vec(&[hw, 2], grid))?;
    let pos0 = g.matmul(prob, grid)?;

    let cmax = g.max_last(cost)?;
    let cmax = g.reshape(cmax, &[n * tn, 1])?;
    let cmean = g.mean_last(cost)?;
    let cmean = g.reshape(cmean, &[n * tn, 1])?;
    let local0 = local_features(g, &ctx, &feats, pos0)?;
    let head_in = g.concat_last(&[local0, cmax, cmean])?;
    let hid = dense(g, params, head_in, "head/fc1")?;
    let hid = g.silu(hid)?;
    let logits0 = dense(g, params, hid, "head/fc2")?;
    let mut occ = g.narrow_last(logits0, 0, 1)?;
    let mut unc = g.narrow_last(logits0, 1, 1)?;
    let mut pos = pos0;

    let flat_logit = |g: &mut Graph<F>, v: Var| g.reshape(v, &[n * tn]);
    let mut iterations = vec![IterationVars {
        pos,
        occ: flat_logit(g, occ)?,
        unc: flat_logit(g, unc)?,
    }];
    for _ in 1..cfg.iterations {
        let local = local_features(g, &ctx, &feats, pos)?;
        let x = g.concat_last(&[local, occ, unc])?;
        let h = temporal_conv(g, params, x, n, tn, "refine/tconv1")?;
        let h = g.silu(h)?;
        let h = temporal_conv(g, params, h, n, tn, "refine/tconv2")?;
        let h = g.silu(h)?;
        let delta = dense(g, params, h, "refine/out")?;
        let dpos = g.narrow_last(delta, 0, 2)?;
        let dpos = g.scale(dpos, DELTA_SCALE)?;
        pos = g.add(pos, dpos)?;
        let docc = g.narrow_last(delta, 2, 1)?;
        occ = g.add(occ, docc)?;
        let dunc = g.narrow_last(delta, 3, 1)?;
        unc = g.add(unc, dunc)?;
        iterations.push(IterationVars {
            pos,
            occ: flat_logit(g, occ)?,
            unc: flat_logit(g, unc)?,
        });
    }
    Ok(ForwardVars {
        queries: n,
        frames: tn,
        iterations,
    })
}

/// Inference in 32-bit: bind params as constants, run, read out values.
pub fn predict(params: &ModelParams, video: &Video, queries: &[QueryPoint]) -> Result<Vec<TrajectoryPrediction>, TrackerError> {
    let mut g = Graph::<f32>::new();
    let vars = params.bind(&mut g, false)?;
    let out = forward(&mut g, &vars, &params.config, video, queries)?;
    Ok(out.predictions(&g))
}

/// Like [`predict`], in chunks of at most `chunk` queries to bound memory.
pub fn predict_chunked(params: &ModelParams, video: &Video, queries: &[QueryPoint], chunk: usize) -> Result<Vec<TrajectoryPrediction>, TrackerError> {
    let mut out = Vec::with_capacity(queries.len());
    for part in queries.chunks(chunk.max(1)) {
        out.extend(predict(params, video, part)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
