//! Graph-based multi-modal reasoning for scene-text aware fine-grained
//! image classification and retrieval, on precomputed feature bundles.
//!
//! The model combines a self-attended global image descriptor with
//! region and text nodes that are enriched by a residual graph
//! convolution stack over a learned affinity matrix, then fused and
//! classified. Everything trains end-to-end on a reverse-mode autodiff
//! tape with RAdam + Lookahead.

pub mod ablation;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod head;
pub mod io;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
