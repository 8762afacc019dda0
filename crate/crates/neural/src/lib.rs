//! Dense, 1D-convolution, GRU, ReLU and softmax layers wired into small
//! multi-input graphs, with reverse-mode gradients, Adam, and JSON checkpoints.
//!
//! All arithmetic is `f64`. A [`Network`] owns one flat parameter vector; each
//! parameterized layer is a named view into it, which keeps optimizer state,
//! gradient buffers and shared-parameter stores as plain `Vec<f64>`s.

mod adam;
mod checkpoint;
mod gradcheck;
mod layers;
mod network;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, NamedParams, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, grad_check_sampled};
pub use layers::{gru_step, GruShape, Padding};
pub use network::{
    Activations, InputGrads, LayerSpec, Network, NetworkBuilder, NodeId, ParamView, Shape,
};

#[derive(Debug, thiserror::Error)]
pub enum NetError {
    #[error("invalid network: {0}")]
    Build(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("no forward cache for this network")]
    MissingCache,
    #[error("unknown layer or output `{0}`")]
    UnknownName(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
