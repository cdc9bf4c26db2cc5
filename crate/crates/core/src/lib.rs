//! Lifelong skill learning on a frozen toy sequence model.
//!
//! Each skill is a gated low-rank adapter stored in a knowledge base next to
//! the semantic subspace of its instructions. New skills inherit shared
//! factors from related ones; at inference an unseen instruction is routed by
//! subspace similarity and the adapters are merged without a skill id.

pub mod adapter;
pub mod embed;
pub mod engine;
pub mod error;
pub mod kb;
pub mod mat;
pub mod model;
pub mod skillgen;
pub mod subspace;
pub mod tape;

pub use error::{Error, Result};
pub use mat::Mat;
