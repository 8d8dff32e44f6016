//! Supervised tracking loss, pseudo-labels, self-supervised loss, cycle mask.
//!
//! Per-frame loss for one trajectory, with position target `p`, occlusion
//! target `o` and uncertainty target `u`:
//!
//! ```text
//! Huber(p_hat - p) * (1 - o) + BCE(o_hat, o) + BCE(u_hat, u) * (1 - o)
//! ```
//!
//! averaged over frames, then over refinement iterations. Supervised training
//! takes `u = 1(|p - p_hat| > delta)` per iteration from the detached
//! prediction; self-supervised training takes teacher-derived targets.
//!
//! Graph-level functions return one loss per trajectory (`[N]`) so masks and
//! batch reductions stay explicit. Value-level wrappers exist for inspection
//! and tests.

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, Real, Tensor, Var};
use crate::tracker::{IterationOutput, IterationVars, TrajectoryPrediction};
use crate::types::{distance, GroundTruthTrack, QueryPoint};

/// Reference resolution the pixel thresholds are quoted at.
pub const SCALE_REFERENCE: f64 = 256.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Uncertainty threshold at reference scale.
    pub delta: f64,
    /// Cycle threshold at reference scale.
    pub delta_cycle: f64,
    /// Huber knee in pixels (not rescaled).
    pub huber_knee: f64,
    /// Working resolution; thresholds scale by `resolution / 256`.
    pub resolution: f64,
    /// Teacher occlusion confidence below this drops the occlusion term.
    pub confidence_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta: 6.0,
            delta_cycle: 4.0,
            huber_knee: 1.0,
            resolution: SCALE_REFERENCE,
            confidence_threshold: 0.6,
        }
    }
}

impl LossConfig {
    pub fn at_resolution(resolution: usize) -> Self {
        Self {
            resolution: resolution as f64,
            ..Self::default()
        }
    }

    pub fn delta_px(&self) -> f64 {
        self.delta * self.resolution / SCALE_REFERENCE
    }

    pub fn delta_cycle_px(&self) -> f64 {
        self.delta_cycle * self.resolution / SCALE_REFERENCE
    }

    pub fn validate(&self) -> Result<(), String> {
        let all = [self.delta, self.delta_cycle, self.huber_knee, self.resolution, self.confidence_threshold];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err("loss thresholds must be positive".into())
        }
    }
}

/// Teacher-derived targets for one trajectory; plain values, no gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabels {
    pub positions: Vec<[f64; 2]>,
    pub occluded: Vec<bool>,
    pub uncertain: Vec<bool>,
    /// Teacher's `max(sigmoid(o), 1 - sigmoid(o))` per frame.
    pub occlusion_confidence: Vec<f64>,
}

impl PseudoLabels {
    pub fn frames(&self) -> usize {
        self.positions.len()
    }

    /// Frames whose occlusion term survives the confidence filter.
    pub fn confident(&self, cfg: &LossConfig) -> Vec<bool> {
        self.occlusion_confidence.iter().map(|&c| c >= cfg.confidence_threshold).collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Pseudo-labels from the teacher's final iteration and the student's final
/// (already inverse-mapped) positions.
pub fn derive_pseudo_labels(teacher: &IterationOutput, student: &IterationOutput, cfg: &LossConfig) -> PseudoLabels {
    let delta = cfg.delta_px();
    PseudoLabels {
        positions: teacher.positions.clone(),
        occluded: teacher.occlusion.iter().map(|&o| o > 0.0).collect(),
        uncertain: teacher
            .positions
            .iter()
            .zip(&student.positions)
            .map(|(&pt, &ps)| distance(pt, ps) > delta)
            .collect(),
        occlusion_confidence: teacher.occlusion.iter().map(|&o| sigmoid(o).max(1.0 - sigmoid(o))).collect(),
    }
}

/// 1 iff the student passes strictly within the cycle threshold of `q1` at
/// `q1.t` and predicts the point visible there.
pub fn cycle_mask(student: &IterationOutput, q1: &QueryPoint, cfg: &LossConfig) -> bool {
    distance(student.positions[q1.t], q1.xy()) < cfg.delta_cycle_px() && student.occlusion[q1.t] <= 0.0
}

/// Constant `[rows]` or `[rows, 2]` tensor.
fn constant<F: Real>(g: &mut Graph<F>, shape: &[usize], values: impl IntoIterator<Item = f64>) -> Result<Var, DiffError> {
    g.constant(Tensor::from_vec(shape, values.into_iter().map(F::of).collect()))
}

/// Targets shared by every iteration, rows ordered query-major then frame.
pub struct FrameTargets<'a> {
    /// `[N*T, 2]` position targets (constant, or live in siamese mode).
    pub positions: Var,
    pub occluded: &'a [bool],
    /// Weight of the occlusion term per row (confidence filter), or all 1.
    pub occlusion_weight: Option<&'a [bool]>,
    /// Fixed uncertainty targets; `None` derives them per iteration from the
    /// detached prediction against `positions` and `delta`.
    pub uncertain: Option<&'a [bool]>,
}

/// Per-trajectory loss `[N]`, averaged over frames and iterations.
pub fn trajectory_loss<F: Real>(
    g: &mut Graph<F>,
    iterations: &[IterationVars],
    targets: &FrameTargets,
    queries: usize,
    frames: usize,
    cfg: &LossConfig,
) -> Result<Var, DiffError> {
    let rows = queries * frames;
    if targets.occluded.len() != rows || iterations.is_empty() {
        return Err(DiffError::InvalidArgument {
            op: "trajectory_loss",
            msg: format!("expected {rows} target rows, got {}", targets.occluded.len()),
        });
    }
    let vis = constant(g, &[rows], targets.occluded.iter().map(|&o| if o { 0.0 } else { 1.0 }))?;
    let occ_t = constant(g, &[rows], targets.occluded.iter().map(|&o| if o { 1.0 } else { 0.0 }))?;
    let occ_w = match targets.occlusion_weight {
        Some(w) => Some(constant(g, &[rows], w.iter().map(|&k| if k { 1.0 } else { 0.0 }))?),
        None => None,
    };
    let fixed_unc = match targets.uncertain {
        Some(u) => Some(constant(g, &[rows], u.iter().map(|&b| if b { 1.0 } else { 0.0 }))?),
        None => None,
    };
    let delta = cfg.delta_px();
    let mut acc: Option<Var> = None;
    for it in iterations {
        let diff = g.sub(it.pos, targets.positions)?;
        let pos_term = g.huber_norm(diff, cfg.huber_knee)?;
        let pos_term = g.mul(pos_term, vis)?;
        let mut occ_term = g.bce_with_logits(it.occ, occ_t)?;
        if let Some(w) = occ_w {
            occ_term = g.mul(occ_term, w)?;
        }
        let unc_t = match fixed_unc {
            Some(u) => u,
            None => {
                let d = g.value(diff).to_f64_vec();
                constant(g, &[rows], d.chunks(2).map(|r| if (r[0] * r[0] + r[1] * r[1]).sqrt() > delta { 1.0 } else { 0.0 }))?
            }
        };
        let unc_term = g.bce_with_logits(it.unc, unc_t)?;
        let unc_term = g.mul(unc_term, vis)?;
        let frame = g.add(pos_term, occ_term)?;
        let frame = g.add(frame, unc_term)?;
        let frame = g.reshape(frame, &[queries, frames])?;
        let per_traj = g.mean_last(frame)?;
        acc = Some(match acc {
            Some(a) => g.add(a, per_traj)?,
            None => per_traj,
        });
    }
    g.scale(acc.unwrap(), 1.0 / iterations.len() as f64)
}

/// Supervised loss per trajectory `[N]` against ground truth.
pub fn tapir_loss_vars<F: Real>(
    g: &mut Graph<F>,
    iterations: &[IterationVars],
    gt: &[GroundTruthTrack],
    frames: usize,
    cfg: &LossConfig,
) -> Result<Var, DiffError> {
    let rows = gt.len() * frames;
    let pos = constant(g, &[rows, 2], gt.iter().flat_map(|tr| tr.positions.iter().flat_map(|p| [p[0], p[1]])))?;
    let occ: Vec<bool> = gt.iter().flat_map(|tr| tr.occluded.iter().copied()).collect();
    let targets = FrameTargets {
        positions: pos,
        occluded: &occ,
        occlusion_weight: None,
        uncertain: None,
    };
    trajectory_loss(g, iterations, &targets, gt.len(), frames, cfg)
}

/// Self-supervised loss per trajectory `[N]`. `teacher_positions` is the
/// `[N*T, 2]` target; pass a constant for a stop-gradient teacher or the
/// live teacher output for siamese training.
pub fn ssl_loss_vars<F: Real>(
    g: &mut Graph<F>,
    iterations: &[IterationVars],
    teacher_positions: Var,
    labels: &[PseudoLabels],
    frames: usize,
    confidence_filter: bool,
    cfg: &LossConfig,
) -> Result<Var, DiffError> {
    let occ: Vec<bool> = labels.iter().flat_map(|l| l.occluded.iter().copied()).collect();
    let unc: Vec<bool> = labels.iter().flat_map(|l| l.uncertain.iter().copied()).collect();
    let conf: Vec<bool> = labels.iter().flat_map(|l| l.confident(cfg)).collect();
    let targets = FrameTargets {
        positions: teacher_positions,
        occluded: &occ,
        occlusion_weight: confidence_filter.then_some(&conf[..]),
        uncertain: Some(&unc),
    };
    trajectory_loss(g, iterations, &targets, labels.len(), frames, cfg)
}

/// Mean of the unmasked per-trajectory losses; masked trajectories are
/// multiplied by an exact zero, so they carry no gradient. All-masked
/// batches give 0.
pub fn total_ssl_vars<F: Real>(g: &mut Graph<F>, per_trajectory: Var, masks: &[bool]) -> Result<Var, DiffError> {
    let kept = masks.iter().filter(|&&m| m).count();
    let m = constant(g, &[masks.len()], masks.iter().map(|&k| if k { 1.0 } else { 0.0 }))?;
    let masked = g.mul(per_trajectory, m)?;
    let sum = g.sum(masked)?;
    g.scale(sum, 1.0 / kept.max(1) as f64)
}

fn prediction_vars(g: &mut Graph<f64>, preds: &[&TrajectoryPrediction]) -> Result<(Vec<IterationVars>, usize), DiffError> {
    let frames = preds[0].frames();
    let k = preds[0].iterations.len();
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let its: Vec<&IterationOutput> = preds.iter().map(|p| &p.iterations[i]).collect();
        let rows = its.len() * frames;
        let pos = g.constant(Tensor::from_vec(&[rows, 2], its.iter().flat_map(|it| it.positions.iter().flat_map(|p| [p[0], p[1]])).collect()))?;
        let occ = g.constant(Tensor::from_vec(&[rows], its.iter().flat_map(|it| it.occlusion.iter().copied()).collect()))?;
        let unc = g.constant(Tensor::from_vec(&[rows], its.iter().flat_map(|it| it.uncertainty.iter().copied()).collect()))?;
        out.push(IterationVars { pos, occ, unc });
    }
    Ok((out, frames))
}

/// Supervised loss of one prediction against its ground truth.
pub fn tapir_loss(pred: &TrajectoryPrediction, gt: &GroundTruthTrack, cfg: &LossConfig) -> Result<f64, DiffError> {
    let mut g = Graph::<f64>::new();
    let (its, frames) = prediction_vars(&mut g, &[pred])?;
    let l = tapir_loss_vars(&mut g, &its, std::slice::from_ref(gt), frames, cfg)?;
    Ok(g.value(l).item())
}

/// Self-supervised loss of one (inverse-mapped) student prediction.
pub fn ssl_loss(student: &TrajectoryPrediction, labels: &PseudoLabels, confidence_filter: bool, cfg: &LossConfig) -> Result<f64, DiffError> {
    let mut g = Graph::<f64>::new();
    let (its, frames) = prediction_vars(&mut g, &[student])?;
    let pos = g.constant(Tensor::from_vec(&[frames, 2], labels.positions.iter().flat_map(|p| [p[0], p[1]]).collect()))?;
    let l = ssl_loss_vars(&mut g, &its, pos, std::slice::from_ref(labels), frames, confidence_filter, cfg)?;
    Ok(g.value(l).item())
}

/// Value-level mean over unmasked trajectories.
pub fn total_ssl(losses: &[f64], masks: &[bool]) -> f64 {
    let kept = masks.iter().filter(|&&m| m).count();
    losses.iter().zip(masks).filter(|(_, &m)| m).map(|(l, _)| l).sum::<f64>() / kept.max(1) as f64
}

#[cfg(test)]
mod tests;
