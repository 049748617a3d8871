//! Latent graph inference over products of constant-curvature model spaces.
//!
//! The crate is `no_std` (it needs `alloc`) and is organised bottom-up:
//!
//! * [`manifolds`]: distances, exponential maps and membership checks for the
//!   Euclidean plane (`E`), hyperboloid (`H`), hypersphere (`S`), Poincaré ball
//!   (`P`) and the stereographically projected sphere (`D`).
//! * [`product`]: signatures such as `"EHP"`, the concatenated exponential map
//!   and the aggregated product distance.
//! * [`autodiff`]: a small reverse-mode tape over dense tensors.
//! * [`geometry`]: batched, differentiable versions of the manifold formulas.
//! * [`dgm`]: geodesic edge logits, Gumbel top-k sampling and the reward loss
//!   that trains the graph generator.
//! * [`gnn`]: GCN/GAT/MLP layers and the end-to-end forward pass.
//! * [`trainer`]: Adam, training loop and repeated-run statistics.
//! * [`data`]: the in-memory dataset, stochastic block model generator and
//!   stratified splits.
//! * [`checks`]: property suites over the geometry, shared by tests and the CLI.
#![no_std]
// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod checks;
pub mod data;
pub mod dgm;
mod error;
pub mod geometry;
pub mod gnn;
pub mod manifolds;
pub mod product;
pub mod trainer;

pub use error::{Error, Result};
