//! Encrypted traffic classification at packet and flow level from a single
//! model.
//!
//! Packets become pairs of byte co-occurrence graphs ([`graphs`]), graph
//! encoders turn them into packet vectors and an LSTM turns packet vectors
//! into flow vectors ([`model`]). Both levels are trained jointly with
//! classification and supervised contrastive losses ([`losses`],
//! [`train`]) on augmented views ([`augment`]). [`ingest`] turns pcap files
//! into datasets, [`eval`] scores checkpoints and [`synth`] produces
//! labeled synthetic captures.

pub mod augment;
pub mod dataset;
pub mod eval;
pub mod format;
pub mod graphs;
pub mod ingest;
pub mod losses;
pub mod model;
pub mod profile;
pub mod rng;
pub mod synth;
pub mod train;

use std::path::PathBuf;

use thiserror::Error;

pub use augment::AugmentConfig;
pub use dataset::{Dataset, DatasetFlow};
pub use eval::{evaluate, export_embeddings, Level, LevelSelection, MetricsReport};
pub use format::FormatError;
pub use graphs::{build_graph, Origin, PacketGraphs, TrafficGraph};
pub use ingest::{CleanPacket, FiveTuple, IngestError, PreprocessOptions, Split};
pub use losses::{LossError, LossSwitches, LossTerms, LossWeights};
pub use model::{ModelDims, ModelError, ModelParams, ParamGrads};
pub use profile::Profile;
pub use train::{train, TrainConfig, TrainError, TrainState, Trainer};

/// Any failure surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
}

/// Whether a failure stems from the inputs or from the computation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Runtime,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io { .. } | Error::Ingest(_) | Error::Format(_) => ErrorClass::Data,
            Error::Model(e) => match e {
                ModelError::Checkpoint(_) | ModelError::DimensionMismatch { .. } | ModelError::Dims(_) => {
                    ErrorClass::Data
                }
                _ => ErrorClass::Runtime,
            },
            Error::Train(e) => e.class(),
            Error::Eval(e) => e.class(),
        }
    }
}
