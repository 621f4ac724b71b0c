//! Feature back-tracking with class alignment ("breadcrumbs") for
//! long-tailed classification.
//!
//! Stage one trains a small embedding network end-to-end and records every
//! epoch's feature snapshot into a [`TrailStore`]. Stage two retrains a linear
//! classifier on frozen features; the breadcrumb strategies feed it trail sets
//! in which under-represented classes are topped up to `n_B` features with
//! mean-aligned features from earlier epochs.

pub mod analysis;
pub mod classifier;
pub mod container;
pub mod datagen;
pub mod embedding;
pub mod error;
pub mod numkit;
pub mod registry;
pub mod trailstore;

pub use classifier::{strategy_registry, LinearClassifier, SamplingStrategy, StageTwoConfig, StageTwoContext};
pub use datagen::{Dataset, DatasetConfig};
pub use embedding::{EmbeddingParams, StageOneConfig};
pub use error::{Error, Result};
pub use numkit::{Matrix, SeededRng};
pub use registry::Registry;
pub use trailstore::{alignment_registry, Alignment, TrailStore};
