//! Hybrid sparse/dense evidence retrieval with a learned per-query router,
//! an evaluation workbench and a lexical probe on query embeddings.

mod codec;
pub mod corpus;
pub mod dense_store;
pub mod error;
pub mod evaluation;
pub mod parallel;
pub mod pipeline;
pub mod probe;
pub mod router;
pub mod sparse_index;
pub mod synth;

pub use corpus::{AnalyzerConfig, Corpus, Document, Query, Vocab};
pub use dense_store::{EmbeddingStore, Hit, ScoredList};
pub use error::{Error, Result};
pub use parallel::ExecMode;
pub use pipeline::{Engine, System};
pub use router::{FeatureSpec, Route, RouterModel};
pub use sparse_index::InvertedIndex;
