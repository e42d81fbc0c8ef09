//! Concept-driven retrieval of formal library definitions for
//! autoformalization: knowledge-base construction from a documentation
//! export, dual-channel hybrid retrieval with reranking, and evaluation
//! metrics.

pub mod kb;
pub mod util;
pub mod ingest;
pub mod text;
pub mod provider;
pub mod populate;
pub mod index;
pub mod retrieval;
pub mod eval;
pub mod config;
