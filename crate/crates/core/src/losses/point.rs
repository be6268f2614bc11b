//! Point-prediction loss with the Monte-Carlo mean as the prediction.
//!
//! The value is `|ybar - y*|^2 / M` with `M = N * d_out`. The edge gradient
//! targets `|E[y] - y*|^2 / M`, whose gradient `2 (E[y] - y*) . E[y s(A)] / M`
//! is estimated without bias by pairing every sample with the residual of the
//! *other* samples:
//!
//! ```text
//! 2 / (M n (n-1)) sum_i (n ybar - y_i - (n-1) y*) . y_i  s(A_i)
//! ```

use rand::Rng;

use super::{add_psi, check_batch, zero_psi, Draws, LossConfig, LossEstimate, LossKind, PairRef};
use crate::edge_dist::{EdgeDistribution, ScoreAccumulator};
use crate::error::Result;
use crate::poly_gnn::{PolyGnn, Projected};

pub fn point_mse_batch<R: Rng + ?Sized>(
    dist: &EdgeDistribution,
    model: &PolyGnn,
    batch: &[PairRef<'_>],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossEstimate> {
    cfg.expect(LossKind::PointMse)?;
    check_batch(dist, model, batch)?;
    let b = batch.len() as f64;
    let n = cfg.n_adj;
    let nf = n as f64;

    let mut grad_psi = zero_psi(model);
    let mut acc = ScoreAccumulator::new(dist.n());
    let mut draws = Draws::new(model.hops());
    let mut value = 0.0;

    for &(x, y) in batch {
        let proj = Projected::new(model, x.view());
        draws.fill(dist, &proj, n, rng);
        let ys = draws.outputs();
        let target = y.as_slice().expect("checked layout");
        let m = target.len() as f64;
        let mean = mean_output(ys);

        value += sq_residual(&mean, target) / m;

        let resid: Vec<f64> = mean.iter().zip(target).map(|(a, t)| a - t).collect();
        let g: Vec<f64> = resid.iter().map(|r| 2.0 * r / (m * nf * b)).collect();
        let grads = vec![g; n];
        add_psi(&mut grad_psi, &draws.backprop(&proj, &grads), 1.0);

        let scale = 2.0 / (m * nf * (nf - 1.0) * b);
        for (k, yk) in ys.iter().enumerate() {
            let dot: f64 = yk
                .iter()
                .zip(&mean)
                .zip(target)
                .map(|((yi, mu), t)| (nf * mu - yi - (nf - 1.0) * t) * yi)
                .sum();
            acc.add_sample(&draws.adj[k], scale * dot);
        }
    }

    Ok(LossEstimate {
        value: value / b,
        grad_theta: acc.finish(dist),
        grad_psi,
        aux: Default::default(),
    })
}

fn mean_output(ys: &[Vec<f64>]) -> Vec<f64> {
    let mut mean = vec![0.0; ys[0].len()];
    for y in ys {
        for (m, v) in mean.iter_mut().zip(y) {
            *m += v;
        }
    }
    let n = ys.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

fn sq_residual(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn pair_value(draws: &Draws, target: &[f64]) -> f64 {
    sq_residual(&mean_output(draws.outputs()), target) / target.len() as f64
}
