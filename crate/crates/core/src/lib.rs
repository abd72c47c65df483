//! Speculative decoding with a context-aware dynamic draft tree, at desk
//! scale: exact tabular language models, value-ranked tree expansion with
//! global reranking, lossless chain/tree verification, metrics, and a
//! brute-force oracle that certifies the whole pipeline.
//!
//! The core is generic over the probability scalar via [`Scalar`]; the
//! `*64` aliases below are the concrete types used by the CLI and the
//! certification suite.

pub mod engine;
pub mod metrics;
pub mod models;
pub mod oracle;
mod scalar;
pub mod tree;
pub mod verify;

pub use scalar::Scalar;

pub type TokenDistribution64 = models::TokenDistribution<f64>;
pub type TabularModel64 = models::TabularModel<f64>;
pub type DraftTree64 = tree::DraftTree<f64>;
pub type FlatDraft64 = tree::FlatDraft<f64>;
pub type EngineConfig64 = engine::EngineConfig<f64>;
pub type GenerationTrace64 = engine::GenerationTrace<f64>;
pub type CostModel64 = metrics::CostModel<f64>;
pub type ExactSequenceDistribution64 = oracle::ExactSequenceDistribution<f64>;

pub type TokenDistribution32 = models::TokenDistribution<f32>;
pub type TabularModel32 = models::TabularModel<f32>;
