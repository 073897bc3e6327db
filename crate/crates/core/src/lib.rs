//! Flow-graph intrusion detection.
//!
//! Network flows become edges of a bipartite endpoint graph, which is padded
//! with virtual nodes and turned into a line graph so that flow
//! classification becomes node classification. Three models are provided:
//! a minibatch E-GraphSAGE variant with residual edge features, a
//! multi-head graph attention baseline, and GTCN-G, which fuses gated
//! temporal convolution, adaptive diffusion convolution, residual attention
//! and a residual feature branch.

pub mod diffcore;
pub mod dataio;
pub mod error;
pub mod flowgraph;
pub mod models;
pub mod sampler;
pub mod trainer;

pub use error::{Error, Result};
