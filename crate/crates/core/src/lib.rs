//! Discovery and evaluation of logits-level membership inference strategies.

pub mod dsl;
pub mod eval;
pub mod library;
pub mod logits;
pub mod metrics;
pub mod orchestrator;
pub mod simulate;
pub mod strategy;
