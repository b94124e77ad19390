//! Topology-agnostic graph U-Net (TAG U-Net) for predicting a scalar field at
//! every node of an arbitrary 2-D or 3-D mesh or spatial graph.
//!
//! The crate is organised bottom-up:
//!
//! * [`meshgraph`] holds the graph data model, the MGF file format and batching.
//! * [`hierarchy`] builds the truncated k-d tree coarsening used for pooling.
//! * [`diffcore`] is a small dense reverse-mode autodiff engine.
//! * [`layers`] implements Linear/MLP, BatchNorm, EdgeConv and GCNConv.
//! * [`model`] assembles the U-Net and the plain GNN baseline.
//! * [`training`] provides the MSE loss, Adam and the epoch loop.
//! * [`evaluation`] computes per-shape R² and threshold classification metrics.
//! * [`synthgen`] generates deterministic synthetic datasets.

pub mod diffcore;
pub mod error;
pub mod evaluation;
pub mod hierarchy;
pub mod jsonfmt;
pub mod layers;
pub mod meshgraph;
pub mod model;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
