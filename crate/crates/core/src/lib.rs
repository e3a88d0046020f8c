//! Object-level discrepancy memory and style compensation for semantic
//! segmentation under open compound domain shift.
//!
//! The crate contains a small reverse-mode differentiation engine
//! ([`tensor`]), a per-pixel segmentation network ([`segnet`]), the
//! discrepancy memory with its memorization and compensation operators
//! ([`oldm`]), pseudo-label generation ([`pseudo`]), the training loop
//! ([`training`]), a synthetic compound-domain benchmark ([`synthdata`]),
//! evaluation metrics ([`eval`]) and the ablation harness ([`ablation`]).

pub mod ablation;
pub mod artifacts;
pub mod cluster;
pub mod error;
pub mod eval;
pub mod labels;
pub mod oldm;
pub mod pseudo;
pub mod segnet;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
