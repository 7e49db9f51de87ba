//! Desk-scale audio captioning pipeline.
//!
//! The pipeline maps a waveform to a caption in two stages: a trained
//! residual-vector-quantization codec produces a discrete acoustic code
//! matrix, a contrastively trained dual encoder produces a sequence-level
//! audio embedding, and an encoder-decoder transformer consumes both to
//! generate text. Training adds a masked codec modeling auxiliary loss on
//! top of the label-smoothed caption loss. Everything runs on a small
//! reverse-mode autodiff engine in 64-bit floats, single threaded and
//! deterministic given a seed.

pub mod audio;
pub mod autodiff;
pub mod captioner;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod joint;
pub mod metrics;
pub mod nn;
pub mod stages;
pub mod synth;

pub use autodiff::{Graph, ParamStore, Tensor, Var};
