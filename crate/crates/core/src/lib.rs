//! Trace-driven simulation of real-time video sessions over variable links,
//! with a bitrate-range predictor, an actor-critic bitrate controller,
//! heuristic baselines and an experiment harness.
//!
//! The pipeline per simulated second: a controller picks a target bitrate,
//! the VBR encoder model turns it into frames, the network simulator carries
//! the packets through a trace-driven bottleneck, and the receiver reports
//! observations that feed the next decision.

pub mod abrn;
pub mod baselines;
pub mod cbpn;
pub mod harness;
pub mod media;
pub mod netsim;
pub mod trace_io;

use std::path::{Path, PathBuf};

use anableps_neural::NetError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("training diverged: {0}")]
    Diverged(String),
}

impl Error {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
