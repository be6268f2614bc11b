//! Calibration and point-prediction metrics.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{median_in_place, Pair};
use crate::edge_dist::EdgeDistribution;
use crate::error::{shape_err, Error, Result};
use crate::losses::Draws;
use crate::poly_gnn::{PolyGnn, Projected};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// `N^-2 sum |theta* - theta|`.
    pub mae: f64,
    pub max_ae: f64,
}

pub fn calibration_metrics(theta: &Array2<f64>, theta_star: &Array2<f64>) -> Result<Calibration> {
    if theta.dim() != theta_star.dim() {
        return Err(shape_err(format!("{:?}", theta_star.dim()), format!("{:?}", theta.dim())));
    }
    let mut sum = 0.0;
    let mut max = 0.0f64;
    for (a, b) in theta.iter().zip(theta_star) {
        let d = (a - b).abs();
        sum += d;
        max = max.max(d);
    }
    Ok(Calibration {
        mae: sum / theta.len() as f64,
        max_ae: max,
    })
}

/// Point-prediction errors per output entry, averaged over a split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    /// Squared error of the Monte-Carlo mean.
    pub mse_y: f64,
    /// Absolute error of the per-entry Monte-Carlo median.
    pub mae_y: f64,
    /// Absolute error of the Monte-Carlo mean.
    pub mae_y_mean: f64,
}

pub fn point_metrics<R: Rng + ?Sized>(
    dist: &EdgeDistribution,
    model: &PolyGnn,
    pairs: &[Pair],
    n_eval_adj: usize,
    rng: &mut R,
) -> Result<PointMetrics> {
    if n_eval_adj < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: n_eval_adj,
        });
    }
    if pairs.is_empty() {
        return Ok(PointMetrics::default());
    }
    let mut draws = Draws::new(model.hops());
    let mut column = vec![0.0; n_eval_adj];
    let mut out = PointMetrics::default();
    let mut entries = 0usize;
    for pair in pairs {
        let proj = Projected::new(model, pair.x.view());
        draws.fill(dist, &proj, n_eval_adj, rng);
        let ys = draws.outputs();
        for (e, &t) in pair.y.iter().enumerate() {
            for (c, y) in column.iter_mut().zip(ys) {
                *c = y[e];
            }
            let mean = column.iter().sum::<f64>() / n_eval_adj as f64;
            let med = median_in_place(&mut column);
            out.mse_y += (mean - t).powi(2);
            out.mae_y += (med - t).abs();
            out.mae_y_mean += (mean - t).abs();
        }
        entries += pair.y.len();
    }
    let k = entries as f64;
    Ok(PointMetrics {
        mse_y: out.mse_y / k,
        mae_y: out.mae_y / k,
        mae_y_mean: out.mae_y_mean / k,
    })
}
