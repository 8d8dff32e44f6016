//! Training configuration, read from flat `key = value` text.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::tracker::ModelConfig;
use crate::transforms::DegradationConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub sup_batch: usize,
    pub ssl_batch: usize,
    pub queries_per_video: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    pub ema_decay: f64,
    pub q1_equals_q2_prob: f64,
    pub use_affine: bool,
    pub use_jpeg: bool,
    pub jpeg_quality_min: u8,
    pub jpeg_quality_max: u8,
    pub confidence_filter: bool,
    pub cycle_filter: bool,
    pub siamese: bool,
    pub ssl_enabled: bool,
    pub seed: u64,
    /// Window length for unlabeled clips; 0 keeps full clips.
    pub clip_frames: usize,
    /// Fraction of unlabeled clips kept, chosen by content hash.
    pub data_fraction: f64,
    /// Learning-rate multiplier for `refine/*` parameters.
    pub refine_lr_mult: f64,
    pub log_interval: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_interval: usize,
    /// 0 evaluates only at the end (when eval clips are given).
    pub eval_interval: usize,
    pub fine_channels: usize,
    pub mid_channels: usize,
    pub feature_dim: usize,
    pub head_hidden: usize,
    pub refine_hidden: usize,
    pub iterations: usize,
    pub temperature: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            steps: 5000,
            sup_batch: 8,
            ssl_batch: 4,
            queries_per_video: 32,
            peak_lr: 1e-3,
            warmup: 100,
            ema_decay: 0.99,
            q1_equals_q2_prob: 0.5,
            use_affine: true,
            use_jpeg: true,
            jpeg_quality_min: 30,
            jpeg_quality_max: 90,
            confidence_filter: true,
            cycle_filter: false,
            siamese: false,
            ssl_enabled: true,
            seed: 0,
            clip_frames: 0,
            data_fraction: 1.0,
            refine_lr_mult: 1.0,
            log_interval: 50,
            checkpoint_interval: 0,
            eval_interval: 0,
            fine_channels: m.fine_channels,
            mid_channels: m.mid_channels,
            feature_dim: m.feature_dim,
            head_hidden: m.head_hidden,
            refine_hidden: m.refine_hidden,
            iterations: m.iterations,
            temperature: m.temperature,
        }
    }
}

/// Named ablations and the single flag change each one makes.
pub const ABLATIONS: &[(&str, &str)] = &[
    ("base", "no change"),
    ("no-augm", "use_jpeg=false"),
    ("no-affine", "use_affine=false"),
    ("same-queries", "q1_equals_q2_prob=1"),
    ("uniform", "q1_equals_q2_prob=0"),
    ("no-filtering", "confidence_filter=false"),
    ("+cycle", "cycle_filter=true"),
    ("siamese", "siamese=true"),
    ("kubric-only", "ssl_enabled=false"),
];

/// Canonical ablation name; also accepts the `BASE-…`, `BASE+cycle`,
/// `SIAMESE` and `FULL-kubric-only` spellings.
pub fn canonical_ablation(name: &str) -> Option<&'static str> {
    let lower = name.to_ascii_lowercase();
    let stripped = lower
        .strip_prefix("base-")
        .or_else(|| lower.strip_prefix("base").filter(|s| s.starts_with('+')))
        .or_else(|| lower.strip_prefix("full-"))
        .unwrap_or(&lower);
    ABLATIONS.iter().map(|a| a.0).find(|&a| a == stripped)
}

impl TrainConfig {
    /// Parse `key = value` text, then apply `overrides` in order. Unknown
    /// keys are rejected.
    pub fn from_kv(text: &str, overrides: &[(String, String)]) -> Result<Self, TrainError> {
        let cfg: Self = crate::kv::from_kv(text, overrides).map_err(TrainError::Config)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Render back to `key = value` text; `from_kv` of this is the identity.
    pub fn to_kv(&self) -> String {
        crate::kv::to_kv(self)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..=1.0).contains(&self.q1_equals_q2_prob) {
            return bad(format!("q1_equals_q2_prob {} outside [0, 1]", self.q1_equals_q2_prob));
        }
        if self.ssl_enabled && self.ssl_batch == 0 {
            return bad("ssl_batch must be at least 1 when ssl_enabled".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} outside [0, 1]", self.ema_decay));
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad(format!("data_fraction {} outside (0, 1]", self.data_fraction));
        }
        if self.queries_per_video == 0 {
            return bad("queries_per_video must be positive".into());
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) || !(self.refine_lr_mult >= 0.0) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if self.clip_frames == 1 {
            return bad("clip_frames must be 0 (full) or at least 2".into());
        }
        self.degradation().validate().map_err(|e| TrainError::Config(e.to_string()))?;
        self.model().validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            fine_channels: self.fine_channels,
            mid_channels: self.mid_channels,
            feature_dim: self.feature_dim,
            head_hidden: self.head_hidden,
            refine_hidden: self.refine_hidden,
            iterations: self.iterations,
            temperature: self.temperature,
        }
    }

    pub fn set_model(&mut self, m: &ModelConfig) {
        self.fine_channels = m.fine_channels;
        self.mid_channels = m.mid_channels;
        self.feature_dim = m.feature_dim;
        self.head_hidden = m.head_hidden;
        self.refine_hidden = m.refine_hidden;
        self.iterations = m.iterations;
        self.temperature = m.temperature;
    }

    pub fn degradation(&self) -> DegradationConfig {
        DegradationConfig {
            jpeg: self.use_jpeg,
            jpeg_quality: [self.jpeg_quality_min, self.jpeg_quality_max],
            per_frame_quality: false,
            affine: self.use_affine,
        }
    }

    /// Apply a named ablation.
    pub fn apply_ablation(&mut self, name: &str) -> Result<(), TrainError> {
        match canonical_ablation(name).unwrap_or(name) {
            "base" => {}
            "no-augm" => self.use_jpeg = false,
            "no-affine" => self.use_affine = false,
            "same-queries" => self.q1_equals_q2_prob = 1.0,
            "uniform" => self.q1_equals_q2_prob = 0.0,
            "no-filtering" => self.confidence_filter = false,
            "+cycle" => self.cycle_filter = true,
            "siamese" => self.siamese = true,
            "kubric-only" => self.ssl_enabled = false,
            other => {
                let known: Vec<&str> = ABLATIONS.iter().map(|a| a.0).collect();
                return Err(TrainError::Config(format!("unknown ablation {other:?} (known: {})", known.join(", "))));
            }
        }
        Ok(())
    }
}
