//! Finite-difference suites behind `gradcheck`: individual ops, the full
//! tracker forward, and both training losses, all in 64-bit.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::gradcheck::{max_relative_error, op_suite, CheckReport, Probe, FD_TOLERANCE};
use crate::diffcore::{DiffError, Fault, Graph, Tensor, Var};
use crate::losses::{ssl_loss_vars, tapir_loss_vars, total_ssl_vars, LossConfig, PseudoLabels};
use crate::rng::stream;
use crate::tracker::{forward, init_params, IterationVars, ModelConfig, ParamVars, TrackerError};
use crate::types::{GroundTruthTrack, QueryPoint, Video};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Op,
    Model,
    Loss,
    All,
}

impl std::str::FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "op" => Ok(Self::Op),
            "model" => Ok(Self::Model),
            "loss" => Ok(Self::Loss),
            "all" => Ok(Self::All),
            other => Err(format!("unknown scope {other:?} (op|model|loss|all)")),
        }
    }
}

fn report(name: &str, instances: usize, coords: usize, err: f64) -> CheckReport {
    CheckReport {
        name: name.into(),
        instances,
        coordinates: coords,
        max_rel_err: err,
        tolerance: FD_TOLERANCE,
        passed: err <= FD_TOLERANCE,
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_vec(shape, (0..shape.iter().product()).map(|_| rng.gen_range(lo..hi)).collect())
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        fine_channels: 4,
        mid_channels: 5,
        feature_dim: 6,
        head_hidden: 4,
        refine_hidden: 5,
        iterations: 2,
        temperature: 0.1,
    }
}

/// Full tracker forward plus supervised loss, differentiated with respect to
/// a few coordinates of every parameter tensor.
pub fn model_suite(seed: u64, coords_per_tensor: usize, fault: Option<Fault>) -> Result<Vec<CheckReport>, VerifyError> {
    let cfg = tiny_model();
    let mut params = init_params(seed, &cfg)?;
    let mut rng = stream(seed, 0x9c01);
    // Activate the refinement path, which is zero at init.
    for (name, t) in params.tensors.iter_mut() {
        if name.starts_with("refine/out") || name.ends_with("/b") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    let (tn, h, w) = (3, 16, 16);
    let video = Video::new(tn, h, w, (0..tn * h * w * 3).map(|_| rng.gen::<f32>()).collect());
    let queries: Vec<QueryPoint> = (0..2).map(|_| QueryPoint::new(rng.gen_range(1.0..14.0), rng.gen_range(1.0..14.0), rng.gen_range(0..tn))).collect();
    let gt: Vec<GroundTruthTrack> = (0..2)
        .map(|_| GroundTruthTrack {
            positions: (0..tn).map(|_| [rng.gen_range(0.0..15.0), rng.gen_range(0.0..15.0)]).collect(),
            occluded: (0..tn).map(|_| rng.gen_bool(0.3)).collect(),
        })
        .collect();
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor<f64>> = params.tensors.values().map(|t| t.cast()).collect();
    let probe: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| {
            let n = t.numel();
            let mut r = stream(seed, 0x9c02 + i as u64);
            (0..coords_per_tensor.min(n)).map(move |_| (i, r.gen_range(0..n))).collect::<Vec<_>>()
        })
        .collect();
    let loss_cfg = LossConfig::at_resolution(h);
    let build = |g: &mut Graph<f64>, vars: &[Var]| -> Result<Var, DiffError> {
        let pv = ParamVars {
            vars: names.iter().cloned().zip(vars.iter().copied()).collect::<BTreeMap<_, _>>(),
        };
        let out = forward(g, &pv, &cfg, &video, &queries).map_err(|e| DiffError::InvalidArgument { op: "forward", msg: e.to_string() })?;
        let per = tapir_loss_vars(g, &out.iterations, &gt, tn, &loss_cfg)?;
        g.sum(per)
    };
    let (err, n) = max_relative_error(&inputs, &Probe::Only(probe), fault, build)?;
    Ok(vec![report("tracker_forward+tapir_loss", 1, n, err)])
}

/// Inputs laid out as `[pos, occ, unc]` per iteration.
fn iterations(vars: &[Var], k: usize) -> Vec<IterationVars> {
    (0..k).map(|i| IterationVars { pos: vars[3 * i], occ: vars[3 * i + 1], unc: vars[3 * i + 2] }).collect()
}

/// Supervised and total self-supervised losses with respect to predicted
/// positions, occlusion and uncertainty logits.
pub fn loss_suite(seed: u64, instances: usize, fault: Option<Fault>) -> Result<Vec<CheckReport>, VerifyError> {
    let (n, tn, k) = (2, 4, 2);
    let rows = n * tn;
    let loss_cfg = LossConfig::at_resolution(32);
    let (mut sup_err, mut ssl_err, mut sup_c, mut ssl_c) = (0.0f64, 0.0f64, 0, 0);
    for inst in 0..instances {
        let mut rng = stream(seed, 0x1055 + inst as u64);
        let mut inputs = Vec::new();
        for _ in 0..k {
            inputs.push(uniform(&mut rng, &[rows, 2], 0.0, 31.0));
            inputs.push(uniform(&mut rng, &[rows], -3.0, 3.0));
            inputs.push(uniform(&mut rng, &[rows], -3.0, 3.0));
        }
        let gt: Vec<GroundTruthTrack> = (0..n)
            .map(|_| GroundTruthTrack {
                positions: (0..tn).map(|_| [rng.gen_range(0.0..31.0), rng.gen_range(0.0..31.0)]).collect(),
                occluded: (0..tn).map(|_| rng.gen_bool(0.3)).collect(),
            })
            .collect();
        let (err, c) = max_relative_error(&inputs, &Probe::All, fault, |g, v| {
            let its = iterations(v, k);
            let per = tapir_loss_vars(g, &its, &gt, tn, &loss_cfg)?;
            g.sum(per)
        })?;
        sup_err = sup_err.max(err);
        sup_c += c;

        // Teacher positions are a differentiable input too (siamese case).
        let mut ssl_inputs = inputs.clone();
        ssl_inputs.push(uniform(&mut rng, &[rows, 2], 0.0, 31.0));
        let labels: Vec<PseudoLabels> = (0..n)
            .map(|_| PseudoLabels {
                positions: vec![[0.0, 0.0]; tn],
                occluded: (0..tn).map(|_| rng.gen_bool(0.3)).collect(),
                uncertain: (0..tn).map(|_| rng.gen_bool(0.5)).collect(),
                occlusion_confidence: (0..tn).map(|_| rng.gen_range(0.5..1.0)).collect(),
            })
            .collect();
        let masks = [true, inst % 2 == 0];
        let (err, c) = max_relative_error(&ssl_inputs, &Probe::All, fault, |g, v| {
            let its = iterations(v, k);
            let per = ssl_loss_vars(g, &its, v[3 * k], &labels, tn, true, &loss_cfg)?;
            total_ssl_vars(g, per, &masks)
        })?;
        ssl_err = ssl_err.max(err);
        ssl_c += c;
    }
    Ok(vec![report("tapir_loss", instances, sup_c, sup_err), report("total_ssl_loss", instances, ssl_c, ssl_err)])
}

/// Run the suites for `scope`.
pub fn run(scope: Scope, seed: u64, fault: Option<Fault>) -> Result<Vec<CheckReport>, VerifyError> {
    let mut out = Vec::new();
    if matches!(scope, Scope::Op | Scope::All) {
        out.extend(op_suite(seed, 3, fault)?);
    }
    if matches!(scope, Scope::Model | Scope::All) {
        out.extend(model_suite(seed, 8, fault)?);
    }
    if matches!(scope, Scope::Loss | Scope::All) {
        out.extend(loss_suite(seed, 3, fault)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run(Scope::All, 0, None).unwrap() {
            assert!(r.passed, "{} rel err {}", r.name, r.max_rel_err);
        }
    }

    #[test]
    fn corrupted_conv_gradient_is_caught_by_model_suite() {
        let r = model_suite(0, 4, Some(Fault::ConvKernelGrad)).unwrap();
        assert!(!r[0].passed);
    }
}
