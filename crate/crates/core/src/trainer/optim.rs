//! Adam, the warmup + cosine schedule, and the EMA teacher update.

use std::collections::BTreeMap;

use crate::diffcore::{Real, Tensor};
use crate::tracker::ModelParams;

use super::TrainError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Linear warmup from 0 at step 0 to `peak` at `warmup`, then a cosine decay
/// to 0 at `total`.
pub fn learning_rate(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rate for the self-supervised task: half the supervised rate.
pub fn ssl_learning_rate(step: usize, peak: f64, warmup: usize, total: usize) -> f64 {
    learning_rate(step, peak, warmup, total) / 2.0
}

/// One task's Adam moments. Each task owns its own state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.tensors.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Advance the moments with `grads` and return the parameter deltas.
    /// `lr_for` gives the learning rate per parameter name.
    pub fn update(&mut self, grads: &BTreeMap<String, Tensor<f32>>, lr_for: impl Fn(&str) -> f64) -> Result<BTreeMap<String, Vec<f32>>, TrainError> {
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        let mut deltas = BTreeMap::new();
        for (name, m) in self.m.iter_mut() {
            let g = grads.get(name).ok_or_else(|| TrainError::Shape(format!("missing gradient for {name}")))?;
            let v = self.v.get_mut(name).expect("moments share keys");
            if g.shape() != m.shape() {
                return Err(TrainError::Shape(format!("{name}: gradient {:?} vs param {:?}", g.shape(), m.shape())));
            }
            let lr = lr_for(name);
            let mut delta = Vec::with_capacity(g.numel());
            for ((mi, vi), &gi) in m.data_mut().iter_mut().zip(v.data_mut().iter_mut()).zip(g.data()) {
                let gi = gi as f64;
                let mn = BETA1 * *mi as f64 + (1.0 - BETA1) * gi;
                let vn = BETA2 * *vi as f64 + (1.0 - BETA2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                delta.push((-lr * (mn / bc1) / ((vn / bc2).sqrt() + EPS)) as f32);
            }
            deltas.insert(name.clone(), delta);
        }
        Ok(deltas)
    }

    /// Store under `{prefix}/m/<name>`, `{prefix}/v/<name>`, `{prefix}/step`.
    pub fn export(&self, prefix: &str, out: &mut BTreeMap<String, Tensor<f32>>) {
        for (k, t) in &self.m {
            out.insert(format!("{prefix}/m/{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("{prefix}/v/{k}"), t.clone());
        }
        out.insert(format!("{prefix}/step"), Tensor::scalar(self.step as f32));
    }

    pub fn import(prefix: &str, params: &ModelParams, extra: &BTreeMap<String, Tensor<f32>>) -> Result<Self, TrainError> {
        let mut s = Self::new(params);
        let fetch = |key: String, shape: &[usize]| -> Result<Tensor<f32>, TrainError> {
            let t = extra.get(&key).ok_or_else(|| TrainError::Checkpoint(format!("missing {key}")))?;
            if t.shape() != shape {
                return Err(TrainError::Checkpoint(format!("{key}: bad shape {:?}", t.shape())));
            }
            Ok(t.clone())
        };
        for (k, t) in params.tensors.iter() {
            s.m.insert(k.clone(), fetch(format!("{prefix}/m/{k}"), t.shape())?);
            s.v.insert(k.clone(), fetch(format!("{prefix}/v/{k}"), t.shape())?);
        }
        let step = extra.get(&format!("{prefix}/step")).ok_or_else(|| TrainError::Checkpoint(format!("missing {prefix}/step")))?;
        s.step = step.item() as u64;
        Ok(s)
    }
}

/// `xi <- decay * xi + (1 - decay) * theta`, elementwise.
pub fn ema_update_tensor<F: Real>(xi: &mut Tensor<F>, theta: &Tensor<F>, decay: f64) -> Result<(), TrainError> {
    if xi.shape() != theta.shape() {
        return Err(TrainError::Shape(format!("ema: {:?} vs {:?}", xi.shape(), theta.shape())));
    }
    let (d, c) = (F::of(decay), F::of(1.0 - decay));
    for (a, &b) in xi.data_mut().iter_mut().zip(theta.data()) {
        *a = d * *a + c * b;
    }
    Ok(())
}

/// EMA of every student tensor into the teacher.
pub fn ema_update(teacher: &mut ModelParams, student: &ModelParams, decay: f64) -> Result<(), TrainError> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(TrainError::Config(format!("ema decay {decay} outside [0, 1]")));
    }
    if !teacher.same_shapes(student) {
        return Err(TrainError::Shape("teacher and student differ in layout".into()));
    }
    for (name, xi) in teacher.tensors.iter_mut() {
        ema_update_tensor(xi, &student.tensors[name], decay)?;
    }
    Ok(())
}

/// Add each task's deltas to the parameters (task updates are summed).
pub fn apply_deltas(params: &mut ModelParams, deltas: &[&BTreeMap<String, Vec<f32>>]) {
    for (name, t) in params.tensors.iter_mut() {
        for d in deltas {
            if let Some(d) = d.get(name) {
                for (p, &x) in t.data_mut().iter_mut().zip(d) {
                    *p += x;
                }
            }
        }
    }
}
