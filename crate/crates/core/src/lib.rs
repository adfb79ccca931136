//! Two-stream RGB-D salient object detection toolkit.
//!
//! The crate trains and evaluates a dual-encoder saliency network in which
//! each modality (RGB appearance, depth geometry) is summarized per stage by
//! a low-dimensional embedding, and a redundancy regularizer pushes the two
//! embeddings apart. It ships a CPU autodiff engine, a synthetic RGB-D scene
//! generator for desk-scale experiments, and the standard saliency metrics.

pub mod config;
pub mod data;
pub mod decoder;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod synth;
pub mod train;

pub use config::{Ablation, Backbone, LossWeights, ModelConfig, TrainConfig};
pub use error::{Error, ErrorKind, Result};
