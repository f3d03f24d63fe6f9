//! Zero-shot sketch-based image retrieval on precomputed feature grids.
//!
//! Sketch and photo encoders with soft-attention pooling are trained against
//! an optimal-transport alignment term, a compatibility loss, a domain
//! classifier behind gradient reversal, a seen-class classifier and a
//! semantic decoder whose targets come from a graph-transformer/GCN branch
//! over the class-similarity graph.

pub mod error;
pub mod ablation;
pub mod dataio;
pub mod encoder;
pub mod losses;
pub mod model;
pub mod numcore;
pub mod semgraph;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
