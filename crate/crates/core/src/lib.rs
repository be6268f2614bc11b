//! Learning a distribution over latent graph structures by matching sampled
//! output distributions.
//!
//! The crate couples a product-Bernoulli [`edge_dist::EdgeDistribution`] with
//! a polynomial graph filter [`poly_gnn::PolyGnn`] and trains both through
//! sampled losses from [`losses`].

pub mod datagen;
pub mod edge_dist;
pub mod error;
pub mod harness;
pub mod kernels;
pub mod losses;
pub mod poly_gnn;
pub mod trainer;

pub use error::{Error, Result};

/// The chapters of the book under `book/src`, compiled so that their code
/// blocks run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/edge-distributions.md")]
    mod edge_distributions {}
    #[doc = include_str!("../../../book/src/predictor.md")]
    mod predictor {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/benchmark.md")]
    mod benchmark {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
