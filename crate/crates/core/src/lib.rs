//! Self-supervised ViT pretraining with a patch-graph consistency regularizer.
//!
//! The student-teacher pipeline distills class-token projections across two
//! augmented views and, in addition, builds a k-nearest-neighbor graph over
//! each view's patch tokens, runs a small GNN over it, pools the node features
//! and distills the pooled projection the same way.

pub mod augment;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod objective;
pub mod ops;
pub mod optim;
pub mod params;
pub mod probe;
pub mod rng;
pub mod schedule;
pub mod sweep;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
