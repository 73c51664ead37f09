//! Segment-aligned attention for multi-scene sequence diffusion.
//!
//! A packed sequence holds `n` text groups followed by `n` video groups. The
//! [`mask`] module describes which groups may attend to each other, [`attention`]
//! executes that restriction densely or as per-group cross-attention, and the
//! remaining modules train and sample a small v-prediction denoiser on a synthetic
//! multi-scene task.

pub mod attention;
pub mod mask;
pub mod num;
pub mod diffusion;
pub mod checkpoint;
pub mod model;
pub mod synthetic;
pub mod training;
pub mod sampling;
pub mod eval;
