//! A desk-scale laboratory for late-interaction reranking.
//!
//! The pipeline is the classic two-stage design: a native BM25 first stage
//! over an inverted index produces candidates, and a small trainable
//! cross-encoder rescores them. The cross-encoder carries two scoring heads
//! on its final layer:
//!
//! * a CLS head (linear score on the `[CLS]` vector), and
//! * a late-interaction head (MaxSim over projected token vectors),
//!
//! trained jointly with a listwise contrastive loss over one positive and
//! `n` sampled negatives. At inference the two scores are summed. An
//! exact-match-masked MaxSim variant removes interactions between identical
//! query/document tokens.
//!
//! Everything is computed in double precision with exact analytic gradients;
//! the gradient path is verified against central finite differences in the
//! test suite. All batch loops (reranking, retrieval, training, evaluation)
//! run data-parallel under the `parallel` feature (enabled by default) with
//! a sequential fallback, and are written so results are byte-identical
//! regardless of thread count.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod seeds;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
