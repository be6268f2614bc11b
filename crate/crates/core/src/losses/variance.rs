//! Empirical variance of the edge-probability gradient on a fixed batch.

use ndarray::Array2;
use rand::Rng;

use super::{LossEstimator, PairRef};
use crate::edge_dist::EdgeDistribution;
use crate::error::{Error, Result};
use crate::poly_gnn::PolyGnn;

#[derive(Clone, Debug)]
pub struct VarianceProfile {
    /// Unbiased sample variance of every `grad_theta` entry.
    pub per_entry: Array2<f64>,
    /// Mean of `per_entry` over trainable entries.
    pub mean: f64,
    pub resamples: usize,
}

/// Recomputes `grad_theta` `resamples` times with fresh adjacency draws.
///
/// Stateful estimators (`lit2`) are cloned per call so that every resample
/// sees the same baselines.
pub fn estimator_variance_profile<R: Rng + ?Sized>(
    estimator: &LossEstimator,
    dist: &EdgeDistribution,
    model: &PolyGnn,
    batch: &[PairRef<'_>],
    resamples: usize,
    rng: &mut R,
) -> Result<VarianceProfile> {
    if resamples < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: resamples,
        });
    }
    let dim = dist.theta().dim();
    let mut mean = Array2::<f64>::zeros(dim);
    let mut m2 = Array2::<f64>::zeros(dim);
    for k in 0..resamples {
        let g = estimator.clone().estimate(dist, model, batch, rng)?.grad_theta;
        // Welford update.
        let delta = &g - &mean;
        mean.scaled_add(1.0 / (k + 1) as f64, &delta);
        let delta2 = &g - &mean;
        m2 += &(&delta * &delta2);
    }
    let per_entry = m2 / (resamples - 1) as f64;
    let trainable = dist.mask().iter().filter(|&&m| m).count();
    let total: f64 = per_entry
        .iter()
        .zip(dist.mask().iter())
        .filter(|(_, &m)| m)
        .map(|(v, _)| v)
        .sum();
    Ok(VarianceProfile {
        per_entry,
        mean: if trainable > 0 { total / trainable as f64 } else { 0.0 },
        resamples,
    })
}
