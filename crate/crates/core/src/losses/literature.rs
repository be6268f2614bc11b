//! Sample-averaged losses used by earlier graph-learning methods: an expected
//! per-sample error (`lit1`), its node-level rewriting (`lit2`) and a
//! variational bound with a Gaussian likelihood (`elbo`).
//!
//! `lit1` and `elbo` use a leave-one-out batch mean as baseline: sample `k`
//! is centred on the mean loss of every *other* sample in the mini-batch.

use std::f64::consts::PI;

use rand::Rng;

use super::{
    add_psi, check_batch, zero_psi, Draws, InnerMetric, LossConfig, LossEstimate, LossKind,
    PairRef,
};
use crate::edge_dist::{AdjacencySample, EdgeDistribution, ScoreAccumulator};
use crate::error::Result;
use crate::poly_gnn::{PolyGnn, Projected};

/// Per-node moving-average baselines of `lit2`, zero until first updated.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NodeBaselines {
    values: Vec<f64>,
}

impl NodeBaselines {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn ensure(&mut self, n: usize) {
        if self.values.len() != n {
            self.values = vec![0.0; n];
        }
    }

    /// `b <- momentum * b + (1 - momentum) * observed`.
    pub fn update(&mut self, observed: &[f64], momentum: f64) {
        self.ensure(observed.len());
        for (b, o) in self.values.iter_mut().zip(observed) {
            *b = momentum * *b + (1.0 - momentum) * o;
        }
    }
}

pub fn lit1_batch<R: Rng + ?Sized>(
    dist: &EdgeDistribution,
    model: &PolyGnn,
    batch: &[PairRef<'_>],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossEstimate> {
    cfg.expect(LossKind::Lit1)?;
    let metric = cfg.inner_metric;
    sample_loss_sfe(dist, model, batch, cfg, rng, |r| metric.value(r), |r| metric.derivative(r), true)
}

pub fn elbo_batch<R: Rng + ?Sized>(
    dist: &EdgeDistribution,
    model: &PolyGnn,
    batch: &[PairRef<'_>],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossEstimate> {
    cfg.expect(LossKind::Elbo)?;
    let prior = cfg.elbo_prior.as_ref().expect("validated");
    let s2 = cfg.elbo_sigma * cfg.elbo_sigma;
    let c = 0.5 * (2.0 * PI * s2).ln();
    let mut est = sample_loss_sfe(
        dist,
        model,
        batch,
        cfg,
        rng,
        |r| c + r * r / (2.0 * s2),
        |r| r / s2,
        false,
    )?;
    let kl = dist.kl_to(prior)?;
    est.value += kl;
    est.grad_theta += &dist.kl_gradient(prior)?;
    est.aux.insert("kl".into(), kl);
    Ok(est)
}

/// Shared body of `lit1` and the likelihood part of `elbo`: the per-sample
/// loss is `sum_e entry(r_e)`, divided by the entry count when `average`.
#[allow(clippy::too_many_arguments)]
fn sample_loss_sfe<R: Rng + ?Sized>(
    dist: &EdgeDistribution,
    model: &PolyGnn,
    batch: &[PairRef<'_>],
    cfg: &LossConfig,
    rng: &mut R,
    entry: impl Fn(f64) -> f64,
    entry_grad: impl Fn(f64) -> f64,
    average: bool,
) -> Result<LossEstimate> {
    check_batch(dist, model, batch)?;
    let n = cfg.n_adj;
    let total_samples = (batch.len() * n) as f64;

    let mut grad_psi = zero_psi(model);
    let mut draws = Draws::new(model.hops());
    let mut adj: Vec<AdjacencySample> = Vec::with_capacity(batch.len() * n);
    let mut losses = Vec::with_capacity(batch.len() * n);

    for &(x, y) in batch {
        let proj = Projected::new(model, x.view());
        draws.fill(dist, &proj, n, rng);
        let target = y.as_slice().expect("checked layout");
        let norm = if average { target.len() as f64 } else { 1.0 };
        let mut grads = Vec::with_capacity(n);
        for yk in draws.outputs() {
            let mut l = 0.0;
            let mut g = Vec::with_capacity(target.len());
            for (v, t) in yk.iter().zip(target) {
                l += entry(v - t);
                g.push(entry_grad(v - t) / (norm * total_samples));
            }
            losses.push(l / norm);
            grads.push(g);
        }
        add_psi(&mut grad_psi, &draws.backprop(&proj, &grads), 1.0);
        adj.extend_from_slice(&draws.adj[..n]);
    }

    let total: f64 = losses.iter().sum();
    let mut acc = ScoreAccumulator::new(dist.n());
    for (a, &l) in adj.iter().zip(&losses) {
        let b = if cfg.control_variates {
            super::loo_mean(total, l, total_samples - 1.0)
        } else {
            0.0
        };
        acc.add_sample(a, (l - b) / total_samples);
    }

    let mut est = LossEstimate {
        value: total / total_samples,
        grad_theta: acc.finish(dist),
        grad_psi,
        aux: Default::default(),
    };
    est.aux.insert("baseline".into(), total / total_samples);
    Ok(est)
}

/// Node-level rewriting: the loss at node `i` multiplies only the score of
/// row `i` of the sampled adjacency, centred on a moving-average baseline.
/// Baselines are updated after the gradient is formed.
pub fn lit2_batch<R: Rng + ?Sized>(
    dist: &EdgeDistribution,
    model: &PolyGnn,
    batch: &[PairRef<'_>],
    cfg: &LossConfig,
    baselines: &mut NodeBaselines,
    rng: &mut R,
) -> Result<LossEstimate> {
    cfg.expect(LossKind::Lit2)?;
    check_batch(dist, model, batch)?;
    let nodes = dist.n();
    let d_out = model.d_out();
    let n = cfg.n_adj;
    let total_samples = (batch.len() * n) as f64;
    let metric = cfg.inner_metric;
    baselines.ensure(nodes);

    let mut grad_psi = zero_psi(model);
    let mut acc = ScoreAccumulator::new(nodes);
    let mut draws = Draws::new(model.hops());
    let mut node_loss = vec![0.0; nodes];
    let mut node_mean = vec![0.0; nodes];
    let mut row_w = vec![0.0; nodes];
    let mut value = 0.0;

    for &(x, y) in batch {
        let proj = Projected::new(model, x.view());
        draws.fill(dist, &proj, n, rng);
        let target = y.as_slice().expect("checked layout");
        let m = target.len() as f64;
        let mut grads = Vec::with_capacity(n);
        for (k, yk) in draws.outputs().iter().enumerate() {
            let mut g = Vec::with_capacity(target.len());
            for node in 0..nodes {
                let mut l = 0.0;
                for e in node * d_out..(node + 1) * d_out {
                    let r = yk[e] - target[e];
                    l += metric.value(r);
                    g.push(metric.derivative(r) / (m * total_samples));
                }
                node_loss[node] = l / d_out as f64;
            }
            grads.push(g);
            for node in 0..nodes {
                value += node_loss[node];
                node_mean[node] += node_loss[node] / total_samples;
                let b = if cfg.control_variates { baselines.values[node] } else { 0.0 };
                row_w[node] = (node_loss[node] - b) / (nodes as f64 * total_samples);
            }
            acc.add_rows(&draws.adj[k], &row_w);
        }
        add_psi(&mut grad_psi, &draws.backprop(&proj, &grads), 1.0);
    }

    let grad_theta = acc.finish(dist);
    baselines.update(&node_mean, cfg.baseline_momentum);
    Ok(LossEstimate {
        value: value / (nodes as f64 * total_samples),
        grad_theta,
        grad_psi,
        aux: Default::default(),
    })
}

pub(crate) fn mean_sample_loss(metric: InnerMetric, draws: &Draws, target: &[f64]) -> f64 {
    let ys = draws.outputs();
    let total: f64 = ys
        .iter()
        .map(|y| y.iter().zip(target).map(|(v, t)| metric.value(v - t)).sum::<f64>())
        .sum();
    total / (ys.len() * target.len()) as f64
}

pub(crate) fn mean_nll(sigma: f64, draws: &Draws, target: &[f64]) -> f64 {
    let s2 = sigma * sigma;
    let c = 0.5 * (2.0 * PI * s2).ln();
    let ys = draws.outputs();
    let total: f64 = ys
        .iter()
        .map(|y| y.iter().zip(target).map(|(v, t)| c + (v - t).powi(2) / (2.0 * s2)).sum::<f64>())
        .sum();
    total / ys.len() as f64
}
