//! Hierarchical part-whole contrastive pretraining for music audio.
//!
//! Modules follow the pipeline: [`dsp`] turns audio into log-mel clips,
//! [`hac`] cuts a root clip into a tree, [`model`] encodes the tree and
//! mixes its levels, [`loss`] scores a batch, [`train`] optimizes on top of
//! the [`diffcore`] autodiff engine, and [`eval`] measures the embeddings.

pub mod cli;
pub mod diffcore;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod hac;
pub mod loss;
pub mod model;
pub mod selftest;
pub mod train;

pub use error::{MartError, Result};
