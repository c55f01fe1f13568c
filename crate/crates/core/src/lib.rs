//! Mixture-of-experts transformer with ReLU experts and a sparsity-aware
//! router, trained as a character-level chess PGN model, plus the
//! board-state interpretability metrics used to score its hidden code.

pub mod chess;
pub mod cli;
pub mod data;
pub mod error;
pub mod interp;
pub mod moe;
pub mod numerics;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
