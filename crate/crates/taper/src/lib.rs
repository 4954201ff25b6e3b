//! taper: distill a small transformer encoder while gradually pruning its
//! columns until a target width is reached.
//!
//! The student starts as an exact copy of the teacher. Every training step it
//! is (a) optimized against a weighted sum of masked-LM, prediction-KL,
//! hidden-state, embedding and attention-map losses, and (b) column-pruned by
//! a sensitivity score under a cubic kept-fraction schedule, with coupled
//! masks keeping every matrix rectangular. A compact export physically drops
//! the pruned columns and rows.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod pruning;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
