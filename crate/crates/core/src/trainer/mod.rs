//! Student–teacher co-training.
//!
//! Each step computes a supervised update on labeled clips and, when enabled,
//! a self-supervised update on unlabeled clips. The two tasks keep separate
//! Adam states; the SSL task runs at half the learning rate. Both deltas are
//! computed at the same parameters and summed, then the EMA teacher follows
//! the student.
//!
//! The self-supervised loss for one clip:
//!
//! 1. sample teacher queries Q1 uniformly over the frame and time;
//! 2. run the teacher on the clean clip, keep its final iteration;
//! 3. per query, pick Q2 (Q1 itself, or another teacher-visible point);
//! 4. degrade and warp the clip, run the student from the warped Q2;
//! 5. map the student's positions back through the per-frame inverse;
//! 6. compare against the teacher's pseudo-labels, with optional
//!    confidence and cycle filters.
//!
//! In siamese mode the teacher *is* the student on the same graph, so
//! gradients flow through both branches.

mod config;
pub mod optim;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{canonical_ablation, TrainConfig, ABLATIONS};
pub use optim::{apply_deltas, ema_update, ema_update_tensor, learning_rate, ssl_learning_rate, AdamState};

use crate::diffcore::{DiffError, Graph, Real, Tensor, Var};
use crate::evaltap::{self, EvalError, QueryMode};
use crate::losses::{cycle_mask, derive_pseudo_labels, ssl_loss_vars, tapir_loss_vars, LossConfig, PseudoLabels};
use crate::rng::{mix, stream};
use crate::synthdata::io::Clip;
use crate::tracker::{forward, init_params, predict, save_checkpoint, Checkpoint, IterationOutput, IterationVars, ModelConfig, ModelParams, ParamVars, TrackerError};
use crate::transforms::make_student_view;
use crate::types::{GroundTruthTrack, QueryPoint, Video};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{skipped} of {steps} steps skipped for non-finite losses (limit 1%)")]
    TooManySkips { skipped: usize, steps: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Teacher queries: `x ~ U[0, W-1]`, `y ~ U[0, H-1]`, `t ~ U{0..T-1}`.
pub fn sample_teacher_queries<R: Rng + ?Sized>(frames: usize, height: usize, width: usize, n: usize, rng: &mut R) -> Vec<QueryPoint> {
    (0..n)
        .map(|_| {
            let x = rng.gen_range(0.0..=(width - 1) as f64);
            let y = rng.gen_range(0.0..=(height - 1) as f64);
            QueryPoint::new(x, y, rng.gen_range(0..frames))
        })
        .collect()
}

/// Student query for one teacher trajectory: `q1` with probability `prob`,
/// otherwise a uniform pick among the teacher's other visible points that lie
/// inside the frame. Falls back to `q1` when there is no alternative.
pub fn sample_student_query<R: Rng + ?Sized>(labels: &PseudoLabels, q1: &QueryPoint, prob: f64, height: usize, width: usize, rng: &mut R) -> QueryPoint {
    let keep_q1 = rng.gen::<f64>() < prob;
    let frames = labels.frames();
    let others: Vec<usize> = (0..frames)
        .filter(|&t| t != q1.t && !labels.occluded[t])
        .filter(|&t| QueryPoint::new(labels.positions[t][0], labels.positions[t][1], t).in_bounds(frames, height, width))
        .collect();
    if keep_q1 || others.is_empty() {
        return *q1;
    }
    let t = others[rng.gen_range(0..others.len())];
    QueryPoint::new(labels.positions[t][0], labels.positions[t][1], t)
}

fn clamp_query(q: QueryPoint, height: usize, width: usize) -> QueryPoint {
    QueryPoint::new(q.x.clamp(0.0, (width - 1) as f64), q.y.clamp(0.0, (height - 1) as f64), q.t)
}

/// Where the teacher's predictions come from.
#[derive(Clone, Copy)]
pub enum Teacher<'a> {
    /// Separate EMA weights, evaluated off-graph (stop-gradient).
    Ema(&'a ModelParams),
    /// The student itself, on the same graph.
    Siamese,
}

/// Self-supervised terms for one clip.
pub struct SslClipLoss {
    /// `[N]` per-trajectory loss.
    pub per_trajectory: Var,
    pub masks: Vec<bool>,
    /// `[N*T, 2]` teacher positions as used by the loss.
    pub teacher_positions: Var,
    pub teacher_queries: Vec<QueryPoint>,
    pub student_queries: Vec<QueryPoint>,
}

/// Build the self-supervised loss for one unlabeled clip on `g`.
#[allow(clippy::too_many_arguments)]
pub fn ssl_clip_loss<F: Real, R: Rng + ?Sized>(
    g: &mut Graph<F>,
    student: &ParamVars,
    model: &ModelConfig,
    teacher: Teacher,
    video: &Video,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    rng: &mut R,
) -> Result<SslClipLoss, TrainError> {
    let (tn, h, w) = (video.frames(), video.height(), video.width());
    let q1 = sample_teacher_queries(tn, h, w, cfg.queries_per_video, rng);
    let n = q1.len();
    let (teacher_last, teacher_positions) = match teacher {
        Teacher::Ema(p) => {
            let preds = predict(p, video, &q1)?;
            let last: Vec<IterationOutput> = preds.into_iter().map(|p| p.last().clone()).collect();
            let pos = g.constant(Tensor::from_vec(&[n * tn, 2], last.iter().flat_map(|o| o.positions.iter().flat_map(|p| [F::of(p[0]), F::of(p[1])])).collect()))?;
            (last, pos)
        }
        Teacher::Siamese => {
            let fv = forward(g, student, model, video, &q1)?;
            let last = fv.predictions(g).into_iter().map(|p| p.last().clone()).collect();
            (last, fv.last().pos)
        }
    };
    // Occlusion-only labels are enough to choose Q2; uncertainty needs the
    // student's answer and is filled in below.
    let coarse: Vec<PseudoLabels> = teacher_last.iter().map(|t| derive_pseudo_labels(t, t, loss_cfg)).collect();
    let q2: Vec<QueryPoint> = coarse.iter().zip(&q1).map(|(l, q)| sample_student_query(l, q, cfg.q1_equals_q2_prob, h, w, rng)).collect();
    let view = make_student_view(video, &q2, rng, &cfg.degradation());
    let student_queries: Vec<QueryPoint> = view.queries.iter().map(|&q| clamp_query(q, h, w)).collect();
    let sf = forward(g, student, model, &view.video, &student_queries)?;

    // Per-row inverse of the frame's affine map: p = (p' - c) / s.
    let rows = n * tn;
    let (mut s, mut c) = (Vec::with_capacity(rows * 2), Vec::with_capacity(rows * 2));
    for _ in 0..n {
        for t in 0..tn {
            let (st, ct) = view.seq.coefficients(t);
            s.extend([F::of(st[0]), F::of(st[1])]);
            c.extend([F::of(ct[0]), F::of(ct[1])]);
        }
    }
    let s = g.constant(Tensor::from_vec(&[rows, 2], s))?;
    let c = g.constant(Tensor::from_vec(&[rows, 2], c))?;
    let mut mapped = Vec::with_capacity(sf.iterations.len());
    for it in &sf.iterations {
        let shifted = g.sub(it.pos, c)?;
        let pos = g.div(shifted, s)?;
        mapped.push(IterationVars { pos, occ: it.occ, unc: it.unc });
    }
    let last = mapped.last().expect("at least one iteration");
    let (p, o, u) = (g.value(last.pos).to_f64_vec(), g.value(last.occ).to_f64_vec(), g.value(last.unc).to_f64_vec());
    let student_last: Vec<IterationOutput> = (0..n)
        .map(|i| IterationOutput {
            positions: p[i * tn * 2..(i + 1) * tn * 2].chunks(2).map(|r| [r[0], r[1]]).collect(),
            occlusion: o[i * tn..(i + 1) * tn].to_vec(),
            uncertainty: u[i * tn..(i + 1) * tn].to_vec(),
        })
        .collect();
    let labels: Vec<PseudoLabels> = teacher_last.iter().zip(&student_last).map(|(t, s)| derive_pseudo_labels(t, s, loss_cfg)).collect();
    let masks: Vec<bool> = student_last.iter().zip(&q1).map(|(s, q)| !cfg.cycle_filter || cycle_mask(s, q, loss_cfg)).collect();
    let per_trajectory = ssl_loss_vars(g, &mapped, teacher_positions, &labels, tn, cfg.confidence_filter, loss_cfg)?;
    Ok(SslClipLoss {
        per_trajectory,
        masks,
        teacher_positions,
        teacher_queries: q1,
        student_queries,
    })
}

/// Pick up to `n` labeled (query, track) pairs from a clip.
pub fn sample_labeled<R: Rng + ?Sized>(clip: &Clip, n: usize, rng: &mut R) -> Result<(Vec<QueryPoint>, Vec<GroundTruthTrack>), TrainError> {
    let tracks = clip.tracks.as_ref().ok_or_else(|| TrainError::Data("labeled clip without tracks".into()))?;
    let (tn, h, w) = (clip.video.frames(), clip.video.height(), clip.video.width());
    let pairs: Vec<(QueryPoint, &GroundTruthTrack)> = match &clip.queries {
        Some(qs) => qs.iter().copied().zip(tracks).collect(),
        None => tracks.iter().flat_map(|tr| evaltap::extract_queries(tr, QueryMode::QFirst).into_iter().map(move |q| (q, tr))).collect(),
    };
    let pairs: Vec<_> = pairs.into_iter().filter(|(q, tr)| q.in_bounds(tn, h, w) && tr.len() == tn).collect();
    if pairs.is_empty() {
        return Err(TrainError::Data("labeled clip has no usable tracks".into()));
    }
    let idx = sample_indices(rng, pairs.len(), n.min(pairs.len()));
    Ok(idx.iter().map(|i| (pairs[i].0, pairs[i].1.clone())).unzip())
}

/// Keep a deterministic `fraction` of clips, selected by content hash
/// (always at least one).
pub fn select_fraction(clips: Vec<Clip>, fraction: f64, seed: u64) -> Vec<Clip> {
    if fraction >= 1.0 || clips.is_empty() {
        return clips;
    }
    let key = |c: &Clip| mix(c.video.content_hash(), seed) as f64 / u64::MAX as f64;
    let keep = ((clips.len() as f64 * fraction).round() as usize).max(1);
    let mut keyed: Vec<(f64, usize)> = clips.iter().enumerate().map(|(i, c)| (key(c), i)).collect();
    keyed.sort_by(|a, b| a.partial_cmp(b).expect("finite keys"));
    let mut chosen: Vec<usize> = keyed[..keep].iter().map(|k| k.1).collect();
    chosen.sort_unstable();
    let mut clips: Vec<Option<Clip>> = clips.into_iter().map(Some).collect();
    chosen.into_iter().map(|i| clips[i].take().expect("unique index")).collect()
}

fn param_grads<F: Real>(g: &Graph<F>, loss: Var, vars: &ParamVars, params: &ModelParams) -> Result<BTreeMap<String, Tensor<f32>>, TrainError> {
    let grads = g.backward(loss)?;
    Ok(vars
        .vars
        .iter()
        .map(|(name, &v)| (name.clone(), grads.get_or_zeros(v, params.tensors[name].shape()).cast()))
        .collect())
}

/// Scalar loss and per-parameter gradients of one task.
#[derive(Debug, Clone)]
pub struct TaskGrads {
    pub loss: f64,
    pub grads: BTreeMap<String, Tensor<f32>>,
    /// Fraction of trajectories kept by the masks (1 for supervised).
    pub mask_rate: f64,
}

impl TaskGrads {
    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.grads.values().all(|t| t.is_finite())
    }
}

/// Supervised loss and gradients over a batch of labeled clips.
pub fn supervised_grads<R: Rng + ?Sized>(params: &ModelParams, clips: &[&Clip], n_q: usize, loss_cfg: &LossConfig, rng: &mut R) -> Result<TaskGrads, TrainError> {
    let mut g = Graph::<f32>::new();
    let vars = params.bind(&mut g, true)?;
    let mut total: Option<Var> = None;
    let mut count = 0;
    for clip in clips {
        let (qs, gts) = sample_labeled(clip, n_q, rng)?;
        let fv = forward(&mut g, &vars, &params.config, &clip.video, &qs)?;
        let per = tapir_loss_vars(&mut g, &fv.iterations, &gts, clip.video.frames(), loss_cfg)?;
        let s = g.sum(per)?;
        count += qs.len();
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| TrainError::Data("empty supervised batch".into()))?;
    let loss = g.scale(total, 1.0 / count as f64)?;
    Ok(TaskGrads {
        loss: g.value(loss).item() as f64,
        grads: param_grads(&g, loss, &vars, params)?,
        mask_rate: 1.0,
    })
}

/// Self-supervised loss and gradients over a batch of unlabeled videos.
pub fn ssl_grads<R: Rng + ?Sized>(
    student: &ModelParams,
    teacher: &ModelParams,
    videos: &[Video],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    rng: &mut R,
) -> Result<TaskGrads, TrainError> {
    let mut g = Graph::<f32>::new();
    let vars = student.bind(&mut g, true)?;
    let mode = if cfg.siamese { Teacher::Siamese } else { Teacher::Ema(teacher) };
    let mut total: Option<Var> = None;
    let (mut kept, mut all) = (0, 0);
    for video in videos {
        let out = ssl_clip_loss(&mut g, &vars, &student.config, mode, video, cfg, loss_cfg, rng)?;
        kept += out.masks.iter().filter(|&&m| m).count();
        all += out.masks.len();
        let m = g.constant(Tensor::from_vec(&[out.masks.len()], out.masks.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect()))?;
        let masked = g.mul(out.per_trajectory, m)?;
        let s = g.sum(masked)?;
        total = Some(match total {
            Some(t) => g.add(t, s)?,
            None => s,
        });
    }
    let total = total.ok_or_else(|| TrainError::Data("empty self-supervised batch".into()))?;
    let loss = g.scale(total, 1.0 / kept.max(1) as f64)?;
    Ok(TaskGrads {
        loss: g.value(loss).item() as f64,
        grads: param_grads(&g, loss, &vars, student)?,
        mask_rate: kept as f64 / all.max(1) as f64,
    })
}

/// Datasets for one run.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub labeled: Vec<Clip>,
    pub unlabeled: Vec<Clip>,
    /// Labeled held-out clips scored during and after training.
    pub eval: Vec<Clip>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub lr: f64,
    pub sup_loss: Option<f64>,
    pub ssl_loss: Option<f64>,
    pub mask_rate: Option<f64>,
    pub skipped: bool,
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub sup_loss: Option<f64>,
    pub ssl_loss: Option<f64>,
    pub mask_rate: Option<f64>,
    pub skipped: usize,
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub aj: f64,
    pub delta_avg: f64,
    pub oa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub skipped: usize,
    pub final_sup_loss: Option<f64>,
    pub final_ssl_loss: Option<f64>,
    pub eval: Option<EvalSummary>,
    pub checkpoint: Option<PathBuf>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Complete trainer state; everything needed to resume is in the checkpoint.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub adam_sup: AdamState,
    pub adam_ssl: AdamState,
    pub step: usize,
    pub skipped: usize,
}

impl Trainer {
    /// Fresh trainer; `init` seeds both student and teacher (otherwise a
    /// random init from the config seed).
    pub fn new(mut cfg: TrainConfig, init: Option<ModelParams>) -> Result<Self, TrainError> {
        cfg.validate()?;
        let student = match init {
            Some(p) => {
                p.validate()?;
                cfg.set_model(&p.config);
                p
            }
            None => init_params(cfg.seed, &cfg.model())?,
        };
        Ok(Self {
            adam_sup: AdamState::new(&student),
            adam_ssl: AdamState::new(&student),
            teacher: student.clone(),
            student,
            cfg,
            step: 0,
            skipped: 0,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.student.clone());
        for (k, t) in &self.teacher.tensors {
            ck.extra.insert(format!("__teacher/{k}"), t.clone());
        }
        self.adam_sup.export("__adam_sup", &mut ck.extra);
        self.adam_ssl.export("__adam_ssl", &mut ck.extra);
        ck.extra.insert("__trainer/step".into(), Tensor::scalar(self.step as f32));
        ck.extra.insert("__trainer/skipped".into(), Tensor::scalar(self.skipped as f32));
        ck
    }

    /// Resume from a checkpoint written by [`Trainer::checkpoint`]. Plain
    /// model checkpoints start a new run from those weights.
    pub fn from_checkpoint(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self, TrainError> {
        let mut tr = Self::new(cfg, Some(ck.params.clone()))?;
        if !ck.extra.contains_key("__trainer/step") {
            return Ok(tr);
        }
        for (k, t) in tr.teacher.tensors.iter_mut() {
            let saved = ck.extra.get(&format!("__teacher/{k}")).ok_or_else(|| TrainError::Checkpoint(format!("missing __teacher/{k}")))?;
            if saved.shape() != t.shape() {
                return Err(TrainError::Checkpoint(format!("__teacher/{k}: bad shape")));
            }
            *t = saved.clone();
        }
        tr.adam_sup = AdamState::import("__adam_sup", &tr.student, &ck.extra)?;
        tr.adam_ssl = AdamState::import("__adam_ssl", &tr.student, &ck.extra)?;
        tr.step = ck.extra["__trainer/step"].item() as usize;
        tr.skipped = ck.extra.get("__trainer/skipped").map_or(0, |t| t.item() as usize);
        Ok(tr)
    }

    pub fn lr(&self) -> f64 {
        learning_rate(self.step, self.cfg.peak_lr, self.cfg.warmup, self.cfg.steps)
    }

    pub fn ssl_lr(&self) -> f64 {
        ssl_learning_rate(self.step, self.cfg.peak_lr, self.cfg.warmup, self.cfg.steps)
    }

    fn lr_for(&self, base: f64) -> impl Fn(&str) -> f64 {
        let mult = self.cfg.refine_lr_mult;
        move |name: &str| if name.starts_with("refine/") { base * mult } else { base }
    }

    /// Draw this step's unlabeled videos (windowed when `clip_frames` > 0).
    pub fn ssl_batch<R: Rng + ?Sized>(&self, unlabeled: &[Clip], rng: &mut R) -> Vec<Video> {
        (0..self.cfg.ssl_batch)
            .map(|_| {
                let v = &unlabeled[rng.gen_range(0..unlabeled.len())].video;
                let len = self.cfg.clip_frames;
                if len == 0 || len >= v.frames() {
                    v.clone()
                } else {
                    v.window(rng.gen_range(0..=v.frames() - len), len)
                }
            })
            .collect()
    }

    /// One optimizer step. Non-finite losses or gradients skip the update.
    pub fn step(&mut self, data: &TrainData) -> Result<StepStats, TrainError> {
        let lr = self.lr();
        let step_seed = mix(self.cfg.seed, self.step as u64);
        let resolution = data
            .labeled
            .first()
            .or(data.unlabeled.first())
            .map_or(256, |c| c.video.height().max(c.video.width()));
        let loss_cfg = LossConfig::at_resolution(resolution);

        let sup = if self.cfg.sup_batch > 0 && !data.labeled.is_empty() {
            let mut rng = stream(step_seed, 1);
            let clips: Vec<&Clip> = (0..self.cfg.sup_batch).map(|_| &data.labeled[rng.gen_range(0..data.labeled.len())]).collect();
            Some(supervised_grads(&self.student, &clips, self.cfg.queries_per_video, &loss_cfg, &mut rng)?)
        } else {
            None
        };
        let ssl = if self.cfg.ssl_enabled && !data.unlabeled.is_empty() {
            let mut rng = stream(step_seed, 2);
            let videos = self.ssl_batch(&data.unlabeled, &mut rng);
            Some(ssl_grads(&self.student, &self.teacher, &videos, &self.cfg, &loss_cfg, &mut rng)?)
        } else {
            None
        };
        let mut stats = StepStats {
            step: self.step,
            lr,
            sup_loss: sup.as_ref().map(|s| s.loss),
            ssl_loss: ssl.as_ref().map(|s| s.loss),
            mask_rate: ssl.as_ref().map(|s| s.mask_rate),
            skipped: false,
        };
        if sup.iter().chain(ssl.iter()).any(|t| !t.is_finite()) {
            self.skipped += 1;
            self.step += 1;
            stats.skipped = true;
            return Ok(stats);
        }
        let mut deltas = Vec::new();
        if let Some(s) = &sup {
            deltas.push(self.adam_sup.update(&s.grads, self.lr_for(lr))?);
        }
        if let Some(s) = &ssl {
            let f = self.lr_for(self.ssl_lr());
            deltas.push(self.adam_ssl.update(&s.grads, f)?);
        }
        apply_deltas(&mut self.student, &deltas.iter().collect::<Vec<_>>());
        if self.cfg.siamese {
            self.teacher = self.student.clone();
        } else {
            ema_update(&mut self.teacher, &self.student, self.cfg.ema_decay)?;
        }
        self.step += 1;
        Ok(stats)
    }

    pub fn evaluate(&self, clips: &[Clip]) -> Result<EvalSummary, TrainError> {
        let (r, _) = evaltap::evaluate(&self.student, clips, QueryMode::Strided, 64)?;
        Ok(EvalSummary {
            aj: r.aj,
            delta_avg: r.delta_avg,
            oa: r.oa,
        })
    }

    /// Run to `cfg.steps`, logging to `out/log.jsonl` and checkpointing to
    /// `out/` when `out` is given. `on_log` sees every log record.
    pub fn train(&mut self, data: &TrainData, out: Option<&Path>, mut on_log: impl FnMut(&LogRecord)) -> Result<TrainSummary, TrainError> {
        if self.cfg.sup_batch > 0 && data.labeled.is_empty() && !self.cfg.ssl_enabled {
            return Err(TrainError::Data("no labeled clips".into()));
        }
        if self.cfg.ssl_enabled && data.unlabeled.is_empty() && data.labeled.is_empty() {
            return Err(TrainError::Data("no training clips".into()));
        }
        let mut log = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(std::fs::OpenOptions::new().create(true).append(true).open(dir.join("log.jsonl"))?)
            }
            None => None,
        };
        let (mut sup, mut ssl, mut rate) = (Vec::new(), Vec::new(), Vec::new());
        let (mut last_sup, mut last_ssl) = (None, None);
        let mut last_eval = None;
        while self.step < self.cfg.steps {
            let st = self.step(data)?;
            if !st.skipped {
                sup.extend(st.sup_loss);
                ssl.extend(st.ssl_loss);
                rate.extend(st.mask_rate);
            }
            let done = self.step;
            let is_last = done == self.cfg.steps;
            let eval_due = !data.eval.is_empty() && (is_last || (self.cfg.eval_interval > 0 && done % self.cfg.eval_interval == 0));
            let log_due = is_last || (self.cfg.log_interval > 0 && done % self.cfg.log_interval == 0) || eval_due;
            if log_due {
                let eval = if eval_due { Some(self.evaluate(&data.eval)?) } else { None };
                if eval.is_some() {
                    last_eval = eval.clone();
                }
                let rec = LogRecord {
                    step: done,
                    lr: st.lr,
                    sup_loss: mean(&sup),
                    ssl_loss: mean(&ssl),
                    mask_rate: mean(&rate),
                    skipped: self.skipped,
                    eval,
                };
                last_sup = rec.sup_loss.or(last_sup);
                last_ssl = rec.ssl_loss.or(last_ssl);
                if let Some(f) = log.as_mut() {
                    writeln!(f, "{}", serde_json::to_string(&rec).expect("log record serializes"))?;
                }
                on_log(&rec);
                sup.clear();
                ssl.clear();
                rate.clear();
            }
            if let Some(dir) = out {
                if self.cfg.checkpoint_interval > 0 && done % self.cfg.checkpoint_interval == 0 && !is_last {
                    save_checkpoint(&dir.join(format!("step_{done:06}.btap")), &self.checkpoint())?;
                }
            }
        }
        if self.skipped as f64 > 0.01 * self.cfg.steps as f64 {
            return Err(TrainError::TooManySkips {
                skipped: self.skipped,
                steps: self.cfg.steps,
            });
        }
        let checkpoint = match out {
            Some(dir) => {
                let p = dir.join("final.btap");
                save_checkpoint(&p, &self.checkpoint())?;
                Some(p)
            }
            None => None,
        };
        Ok(TrainSummary {
            steps: self.step,
            skipped: self.skipped,
            final_sup_loss: last_sup,
            final_ssl_loss: last_ssl,
            eval: last_eval,
            checkpoint,
        })
    }
}
