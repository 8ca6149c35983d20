//! Prototype-based slide embeddings built from patch-text contrast and a
//! parameter-free attention refinement, plus probes, metrics and a synthetic
//! data generator.

pub mod error;
pub mod init;
pub mod io;
pub mod matrix;
pub mod metrics;
pub mod pfam;
pub mod probe;
pub mod synth;
pub mod types;

pub use error::{Error, ErrorKind, Result};
pub use matrix::{l2_normalize_rows, similarity, EmbeddingMatrix, SimilarityMatrix};
pub use types::{
    AssignmentMap, BankStage, DatasetManifest, PrototypeBank, PrototypeDescriptor, PrototypeInitConfig,
    SlideEmbedding, SlideRecord, Split,
};
