//! Query-guided retrieval of pivot frames and pivot tokens for long-video
//! question answering.
//!
//! The engine works entirely on precomputed inputs:
//!
//! * a [`FeatureBundle`] with per-frame image embeddings, an aggregated text
//!   embedding and per-frame detections, consumed by [`pfr::run_pfr`] to pick
//!   the frames most relevant to a question;
//! * an [`AttentionTensor`] of text-to-visual cross-attention, consumed by
//!   [`ptr::run_ptr`] to pick which visual tokens each layer keeps in its KV
//!   cache;
//! * an [`ExpandedQuery`], the structured LLM expansion of the question,
//!   parsed from the reply grammar in [`query::grammar`].

mod codec;

pub mod attention;
pub mod board;
pub mod bundle;
pub mod config;
pub mod error;
pub mod pfr;
pub mod pipeline;
pub mod ptr;
pub mod query;
pub mod scoring;

pub use attention::AttentionTensor;
pub use board::FrameScoreBoard;
pub use bundle::{DetectionRecord, FeatureBundle};
pub use config::EngineConfig;
pub use error::{Error, Result};
pub use pfr::{run_pfr, PfrConfig, PivotSelection};
pub use ptr::{run_ptr, PtrConfig, TokenSelection};
pub use query::{ExpandedQuery, RelationTriplet, RelationType};
pub use scoring::ScoringConfig;
