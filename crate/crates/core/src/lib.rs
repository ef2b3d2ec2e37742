//! Patch-wise hypergraph contrastive learning with dual normal-distribution
//! negative weighting, for multi-domain stain transfer.
//!
//! The crate is organized bottom-up:
//!
//! - [`numeric`]: dense tensors and a reverse-mode tape.
//! - [`patch`]: feature stacks, co-located patch sampling and projection heads.
//! - [`hypergraph`]: soft k-means hyperedges and two-step hypergraph convolution.
//! - [`weighting`]: heatmap-based tissue/background partition and negative weights.
//! - [`losses`]: InfoNCE variants, the hypergraph contrastive terms, LSGAN and the total.
//! - [`models`]: desk-scale conditional generator, encoder and discriminator.
//! - [`data`]: procedural stain images, PPM/PGM codecs and dataset manifests.
//! - [`metrics`]: contrast-structure similarity and background whiteness.
//! - [`config`], [`checkpoint`], [`train`], [`eval`], [`suite`]: the operational harness.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod hypergraph;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod numeric;
pub mod optim;
pub mod params;
pub mod patch;
pub mod suite;
pub mod train;
pub mod weighting;

pub use error::{Error, Result};
pub use numeric::{Graph, Scalar, Tensor, Var};
