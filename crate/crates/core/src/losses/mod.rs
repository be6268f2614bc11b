//! Mini-batch loss estimators.
//!
//! Every estimator draws `n_adj` adjacency matrices per data pair, pushes them
//! through the predictor and returns the loss value together with
//!
//! * a pathwise gradient for the predictor weights, and
//! * a score-function gradient for the edge probabilities, optionally with a
//!   baseline subtracted from the per-sample weights.
//!
//! Scalar baselines are batch means taken over the *other* pairs of the
//! mini-batch, so a baseline never depends on the samples it multiplies and
//! the score-function estimate stays unbiased. With a single pair in the batch
//! the baseline is zero.

mod dist;
mod literature;
mod point;
mod variance;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::edge_dist::{AdjacencySample, EdgeDistribution};
use crate::error::{shape_err, Error, Result};
use crate::kernels::KernelSpec;
use crate::poly_gnn::{hop_matrices_into, NodeFeatures, PolyGnn, Projected};

pub use dist::{crps_batch, mmd2_batch, mmd2_unbiased};
pub use literature::{elbo_batch, lit1_batch, lit2_batch, NodeBaselines};
pub use point::point_mse_batch;
pub use variance::{estimator_variance_profile, VarianceProfile};

/// One `(x, y*)` pair of a mini-batch.
pub type PairRef<'a> = (&'a NodeFeatures, &'a NodeFeatures);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    DistMmd,
    DistCrps,
    PointMse,
    Lit1,
    Lit2,
    Elbo,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::DistMmd => "dist_mmd",
            LossKind::DistCrps => "dist_crps",
            LossKind::PointMse => "point_mse",
            LossKind::Lit1 => "lit1",
            LossKind::Lit2 => "lit2",
            LossKind::Elbo => "elbo",
        }
    }

    pub fn is_distributional(self) -> bool {
        matches!(self, LossKind::DistMmd | LossKind::DistCrps)
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMetric {
    Mae,
    #[default]
    Mse,
}

impl std::fmt::Display for InnerMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InnerMetric::Mae => "mae",
            InnerMetric::Mse => "mse",
        })
    }
}

impl InnerMetric {
    #[inline]
    pub(crate) fn value(self, r: f64) -> f64 {
        match self {
            InnerMetric::Mae => r.abs(),
            InnerMetric::Mse => r * r,
        }
    }

    #[inline]
    pub(crate) fn derivative(self, r: f64) -> f64 {
        match self {
            InnerMetric::Mae => {
                if r > 0.0 {
                    1.0
                } else if r < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            InnerMetric::Mse => 2.0 * r,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Per-entry error for `lit1` / `lit2`.
    pub inner_metric: InnerMetric,
    /// Adjacency samples per data pair.
    pub n_adj: usize,
    /// Subtract baselines inside the score-function estimator.
    pub control_variates: bool,
    pub kernel: KernelSpec,
    /// Output standard deviation of the Gaussian likelihood used by `elbo`.
    pub elbo_sigma: f64,
    pub elbo_prior: Option<EdgeDistribution>,
    /// Moving-average factor of the per-node `lit2` baselines.
    pub baseline_momentum: f64,
}

impl LossConfig {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            inner_metric: InnerMetric::Mse,
            n_adj: 16,
            control_variates: true,
            kernel: KernelSpec::default(),
            elbo_sigma: 0.1,
            elbo_prior: None,
            baseline_momentum: 0.99,
        }
    }

    pub fn with_n_adj(mut self, n_adj: usize) -> Self {
        self.n_adj = n_adj;
        self
    }

    pub fn with_control_variates(mut self, on: bool) -> Self {
        self.control_variates = on;
        self
    }

    pub fn with_metric(mut self, metric: InnerMetric) -> Self {
        self.inner_metric = metric;
        self
    }

    pub fn with_kernel(mut self, kernel: KernelSpec) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn with_elbo(mut self, sigma: f64, prior: EdgeDistribution) -> Self {
        self.elbo_sigma = sigma;
        self.elbo_prior = Some(prior);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let min_adj = match self.kind {
            LossKind::DistMmd | LossKind::DistCrps | LossKind::PointMse => 2,
            _ => 1,
        };
        if self.n_adj < min_adj {
            return Err(Error::Config(format!(
                "{} needs n_adj >= {min_adj}, got {}",
                self.kind, self.n_adj
            )));
        }
        self.kernel.validate()?;
        if self.kind == LossKind::Elbo {
            if !(self.elbo_sigma > 0.0) {
                return Err(Error::Config(format!("elbo_sigma must be > 0, got {}", self.elbo_sigma)));
            }
            let prior = self
                .elbo_prior
                .as_ref()
                .ok_or_else(|| Error::Config("elbo needs a prior distribution".into()))?;
            if prior.theta().iter().any(|&p| !(p > 0.0 && p < 1.0)) {
                return Err(Error::Config("elbo prior entries must lie in (0, 1)".into()));
            }
        }
        if !(0.0..1.0).contains(&self.baseline_momentum) {
            return Err(Error::Config(format!(
                "baseline_momentum must lie in [0, 1), got {}",
                self.baseline_momentum
            )));
        }
        Ok(())
    }

    fn expect(&self, called: LossKind) -> Result<()> {
        if self.kind != called {
            return Err(Error::ConfigMismatch {
                called: called.name(),
                configured: self.kind.name().to_string(),
            });
        }
        self.validate()
    }
}

/// Loss value and gradients from one mini-batch.
#[derive(Clone, Debug)]
pub struct LossEstimate {
    pub value: f64,
    pub grad_theta: Array2<f64>,
    pub grad_psi: Vec<Array2<f64>>,
    pub aux: BTreeMap<String, f64>,
}

/// Stateful front end dispatching on [`LossConfig::kind`]; owns the per-node
/// baselines needed by `lit2`.
#[derive(Clone, Debug)]
pub struct LossEstimator {
    cfg: LossConfig,
    baselines: NodeBaselines,
}

impl LossEstimator {
    pub fn new(cfg: LossConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            baselines: NodeBaselines::default(),
        })
    }

    pub fn config(&self) -> &LossConfig {
        &self.cfg
    }

    pub fn node_baselines(&self) -> &NodeBaselines {
        &self.baselines
    }

    pub fn estimate<R: Rng + ?Sized>(
        &mut self,
        dist: &EdgeDistribution,
        model: &PolyGnn,
        batch: &[PairRef<'_>],
        rng: &mut R,
    ) -> Result<LossEstimate> {
        let cfg = &self.cfg;
        match cfg.kind {
            LossKind::DistMmd => mmd2_batch(dist, model, batch, cfg, rng),
            LossKind::DistCrps => crps_batch(dist, model, batch, cfg, rng),
            LossKind::PointMse => point_mse_batch(dist, model, batch, cfg, rng),
            LossKind::Lit1 => lit1_batch(dist, model, batch, cfg, rng),
            LossKind::Lit2 => lit2_batch(dist, model, batch, cfg, &mut self.baselines, rng),
            LossKind::Elbo => elbo_batch(dist, model, batch, cfg, rng),
        }
    }

    /// Loss value only; skips every gradient computation.
    pub fn value<R: Rng + ?Sized>(
        &self,
        dist: &EdgeDistribution,
        model: &PolyGnn,
        batch: &[PairRef<'_>],
        rng: &mut R,
    ) -> Result<f64> {
        check_batch(dist, model, batch)?;
        let mut draws = Draws::new(model.hops());
        let mut total = 0.0;
        for &(x, y) in batch {
            let proj = Projected::new(model, x.view());
            draws.fill(dist, &proj, self.cfg.n_adj, rng);
            let target = y.as_slice().expect("contiguous target");
            total += match self.cfg.kind {
                LossKind::DistMmd => dist::pair_value(&self.cfg.kernel, &draws, target),
                LossKind::DistCrps => dist::pair_value(&KernelSpec::energy(), &draws, target),
                LossKind::PointMse => point::pair_value(&draws, target),
                LossKind::Lit1 | LossKind::Lit2 => {
                    literature::mean_sample_loss(self.cfg.inner_metric, &draws, target)
                }
                LossKind::Elbo => literature::mean_nll(self.cfg.elbo_sigma, &draws, target),
            };
        }
        let mut value = total / batch.len() as f64;
        if self.cfg.kind == LossKind::Elbo {
            value += dist.kl_to(self.cfg.elbo_prior.as_ref().expect("validated"))?;
        }
        Ok(value)
    }
}

/// Samples, hop matrices and flattened outputs for one data pair.
pub(crate) struct Draws {
    hops: usize,
    pub(crate) adj: Vec<AdjacencySample>,
    pub(crate) hop: Vec<Vec<AdjacencySample>>,
    pub(crate) y: Vec<Vec<f64>>,
    len: usize,
}

impl Draws {
    pub(crate) fn new(hops: usize) -> Self {
        Self {
            hops,
            adj: Vec::new(),
            hop: Vec::new(),
            y: Vec::new(),
            len: 0,
        }
    }

    pub(crate) fn outputs(&self) -> &[Vec<f64>] {
        &self.y[..self.len]
    }

    pub(crate) fn fill<R: Rng + ?Sized>(
        &mut self,
        dist: &EdgeDistribution,
        proj: &Projected<'_>,
        n_adj: usize,
        rng: &mut R,
    ) {
        let n = dist.n();
        let m = proj.out_len();
        while self.adj.len() < n_adj {
            self.adj.push(AdjacencySample::empty(n));
            self.hop.push(Vec::new());
            self.y.push(vec![0.0; m]);
        }
        for k in 0..n_adj {
            dist.sample_into(rng, &mut self.adj[k]);
            hop_matrices_into(&self.adj[k], self.hops, &mut self.hop[k]);
            self.y[k].resize(m, 0.0);
            proj.forward(&self.hop[k], &mut self.y[k]);
        }
        self.len = n_adj;
    }

    /// Scatters per-sample output gradients and returns weight gradients.
    pub(crate) fn backprop(&self, proj: &Projected<'_>, grads: &[Vec<f64>]) -> Vec<Array2<f64>> {
        let mut acc = proj.scatter_buffer();
        for k in 0..self.len {
            proj.scatter_back(&self.hop[k], &self.y[k], &grads[k], &mut acc);
        }
        proj.weight_gradients(&acc)
    }
}

/// Leave-one-out mean: the mean of `total - own` over `count_others` items.
#[inline]
pub(crate) fn loo_mean(total: f64, own: f64, count_others: f64) -> f64 {
    if count_others > 0.0 {
        (total - own) / count_others
    } else {
        0.0
    }
}

pub(crate) fn zero_psi(model: &PolyGnn) -> Vec<Array2<f64>> {
    model.layers().iter().map(|w| Array2::zeros(w.dim())).collect()
}

pub(crate) fn add_psi(acc: &mut [Array2<f64>], g: &[Array2<f64>], scale: f64) {
    for (a, g) in acc.iter_mut().zip(g) {
        a.scaled_add(scale, g);
    }
}

pub(crate) fn check_batch(
    dist: &EdgeDistribution,
    model: &PolyGnn,
    batch: &[PairRef<'_>],
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("empty mini-batch".into()));
    }
    let n = dist.n();
    for &(x, y) in batch {
        if x.dim() != (n, model.d_in()) {
            return Err(shape_err(format!("{n}x{} input", model.d_in()), format!("{:?}", x.dim())));
        }
        if y.dim() != (n, model.d_out()) {
            return Err(shape_err(format!("{n}x{} target", model.d_out()), format!("{:?}", y.dim())));
        }
        if !y.is_standard_layout() {
            return Err(Error::InvalidShape("targets must be in standard layout".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(LossConfig::new(LossKind::DistMmd).with_n_adj(1).validate().is_err());
        assert!(LossConfig::new(LossKind::Lit1).with_n_adj(1).validate().is_ok());
        assert!(LossConfig::new(LossKind::Elbo).validate().is_err());
        let prior = EdgeDistribution::uniform(2, 0.5).unwrap();
        let mut cfg = LossConfig::new(LossKind::Elbo).with_elbo(0.1, prior);
        assert!(cfg.validate().is_ok());
        cfg.elbo_sigma = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn loo_mean_excludes_own_share() {
        assert_eq!(loo_mean(10.0, 4.0, 3.0), 2.0);
        assert_eq!(loo_mean(10.0, 10.0, 0.0), 0.0);
    }
}
