//! Free-grain hierarchical classification: taxonomies, synthetic data,
//! label pruning, a small reverse-mode autodiff engine, a hierarchical MLP,
//! training objectives, a trainer and evaluation metrics.

pub mod diffcore;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod model;
pub mod pruning;
pub mod rng;
pub mod synthgen;
pub mod taxonomy;
pub mod trainer;

pub use error::{Error, Result};
pub use taxonomy::{LabelPath, Taxonomy};
