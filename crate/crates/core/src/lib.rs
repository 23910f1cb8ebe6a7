//! Zero-shot bitemporal change detection by matching segmentation-model
//! embeddings across two co-registered images.
//!
//! The pipeline: load a [`Session`](interchange::Session) (two embedding grids
//! plus mask proposals per time), pool each proposal on both grids, score the
//! pairs by negated cosine similarity and keep the ones that point apart.

pub mod baselines;
pub mod cli;
pub mod error;
pub mod grid;
pub mod interchange;
pub mod matching;
pub mod metrics;
pub mod probe;
pub mod proposal;
pub mod robustness;
pub mod service;
pub mod synthetic;

pub use error::{Error, Result};
pub use grid::EmbeddingGrid;
pub use interchange::{BinaryMask, ProposalRecord, RleMask, Session, Time};
pub use matching::{bitemporal_latent_match, ChangeMap, ChangeProposal, MatchConfig};
