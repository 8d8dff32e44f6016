//! Self-supervised bootstrapping for Tracking-Any-Point at desk scale.
//!
//! The crate bundles every stage of the pipeline:
//!
//! - [`diffcore`]: a small reverse-mode autodiff engine,
//! - [`synthdata`]: synthetic videos with analytic ground-truth tracks,
//! - [`transforms`]: frame-wise affine warps and JPEG-style degradation,
//! - [`tracker`]: a compact differentiable point tracker,
//! - [`losses`]: supervised and self-supervised tracking losses,
//! - [`trainer`]: student-teacher co-training with an EMA teacher,
//! - [`evaltap`]: TAP-Vid style query extraction and metrics,
//! - [`verify`]: finite-difference gradient suites,
//! - [`render`]: track overlays for inspection.
//!
//! All coordinates are in pixels with `(0, 0)` at the center of the
//! top-left pixel.

pub mod diffcore;
pub mod evaltap;
pub mod kv;
pub mod losses;
pub mod render;
pub mod rng;
pub mod synthdata;
pub mod tracker;
pub mod trainer;
pub mod transforms;
pub mod types;
pub mod verify;

pub use diffcore::{DiffError, Graph, Real, Tensor, Var};
pub use types::{distance, GroundTruthTrack, QueryPoint, Video};
