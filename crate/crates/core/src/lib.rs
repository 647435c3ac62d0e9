//! Desk-scale engine for sparse-view dynamic 3D reconstruction.
//!
//! An explicit dynamic Gaussian scene (static field plus anchor-interpolated
//! dynamic field) is optimized against sparse multi-view video by a two-stage
//! loop: stochastic geometric purification first, then distillation from a
//! pluggable degradation-aware rectifier. Everything runs on CPU in f64 and is
//! bitwise reproducible from a single master seed.

pub mod camera;
pub mod checkpoint;
pub mod error;
pub mod image;
pub mod math;
pub mod metrics;
pub mod opt;
pub mod pipeline;
pub mod purify;
pub mod rectifier;
pub mod render;
pub mod runconfig;
pub mod scene;
pub mod seeding;
pub mod synth;

pub use error::{Error, Result};
