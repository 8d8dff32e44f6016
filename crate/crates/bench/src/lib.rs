//! Shared fixtures for the benchmarks.

use tapkit::synthdata::io::Clip;
use tapkit::synthdata::{generate_scene, Domain, SceneConfig};
use tapkit::tracker::{init_params, ModelConfig, ModelParams};

/// `n` labeled clips of the given size.
pub fn clips(domain: Domain, n: usize, frames: usize, side: usize) -> Vec<Clip> {
    (0..n as u64).map(|s| Clip::labeled(&generate_scene(&SceneConfig::domain(domain, frames, side, side, s)).expect("scene"))).collect()
}

pub fn params() -> ModelParams {
    init_params(0, &ModelConfig::default()).expect("init")
}
