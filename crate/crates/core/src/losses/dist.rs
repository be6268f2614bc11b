//! Sampled output-distribution losses (squared MMD and energy distance).
//!
//! Per data pair the estimate is
//!
//! ```text
//! 2/(n(n-1)) sum_{j<i} k(y_i, y_j) - 2/n sum_i k(y*, y_i)
//! ```
//!
//! which drops the target-only term of the squared MMD since it carries no
//! parameter dependence. The score weights of a sample `A_i` collect every
//! kernel value it took part in: for an unordered pair the score of the joint
//! sample is `s(A_i) + s(A_j)`.

use rand::Rng;

use super::{
    add_psi, check_batch, loo_mean, zero_psi, Draws, LossConfig, LossEstimate, LossKind, PairRef,
};
use crate::edge_dist::{AdjacencySample, EdgeDistribution, ScoreAccumulator};
use crate::error::Result;
use crate::kernels::KernelSpec;
use crate::poly_gnn::{PolyGnn, Projected};

pub fn mmd2_batch<R: Rng + ?Sized>(
    dist: &EdgeDistribution,
    model: &PolyGnn,
    batch: &[PairRef<'_>],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossEstimate> {
    cfg.expect(LossKind::DistMmd)?;
    distributional(dist, model, batch, cfg, &cfg.kernel, rng)
}

/// Energy-distance variant; always uses the `-|a - b|` kernel.
pub fn crps_batch<R: Rng + ?Sized>(
    dist: &EdgeDistribution,
    model: &PolyGnn,
    batch: &[PairRef<'_>],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<LossEstimate> {
    cfg.expect(LossKind::DistCrps)?;
    distributional(dist, model, batch, cfg, &KernelSpec::energy(), rng)
}

struct PairKernels {
    adj: Vec<AdjacencySample>,
    /// `sum_{j != i} k(y_i, y_j)` per sample.
    row_sum: Vec<f64>,
    /// `k(y*, y_i)` per sample.
    cross: Vec<f64>,
    pair_total: f64,
    cross_total: f64,
}

fn distributional<R: Rng + ?Sized>(
    dist: &EdgeDistribution,
    model: &PolyGnn,
    batch: &[PairRef<'_>],
    cfg: &LossConfig,
    kernel: &KernelSpec,
    rng: &mut R,
) -> Result<LossEstimate> {
    check_batch(dist, model, batch)?;
    let b = batch.len() as f64;
    let n = cfg.n_adj;
    let nf = n as f64;
    let pair_norm = 2.0 / (nf * (nf - 1.0));
    let cross_norm = 2.0 / nf;
    let pairs_per_item = nf * (nf - 1.0) / 2.0;

    let mut grad_psi = zero_psi(model);
    let mut draws = Draws::new(model.hops());
    let mut records = Vec::with_capacity(batch.len());
    let mut value = 0.0;

    for &(x, y) in batch {
        let proj = Projected::new(model, x.view());
        draws.fill(dist, &proj, n, rng);
        let ys = draws.outputs();
        let target = y.as_slice().expect("checked layout");
        let mut grads = vec![vec![0.0; target.len()]; n];
        let mut row_sum = vec![0.0; n];
        let mut cross = vec![0.0; n];
        let mut pair_total = 0.0;
        let mut cross_total = 0.0;
        for i in 0..n {
            for j in 0..i {
                let k = kernel.eval_unchecked(&ys[i], &ys[j]);
                row_sum[i] += k;
                row_sum[j] += k;
                pair_total += k;
                kernel.add_grad_wrt_first(&ys[i], &ys[j], pair_norm / b, &mut grads[i]);
                kernel.add_grad_wrt_first(&ys[j], &ys[i], pair_norm / b, &mut grads[j]);
            }
            let k = kernel.eval_unchecked(target, &ys[i]);
            cross[i] = k;
            cross_total += k;
            kernel.add_grad_wrt_first(&ys[i], target, -cross_norm / b, &mut grads[i]);
        }
        value += pair_norm * pair_total - cross_norm * cross_total;
        add_psi(&mut grad_psi, &draws.backprop(&proj, &grads), 1.0);
        records.push(PairKernels {
            adj: draws.adj[..n].to_vec(),
            row_sum,
            cross,
            pair_total,
            cross_total,
        });
    }

    let total_pair: f64 = records.iter().map(|r| r.pair_total).sum();
    let total_cross: f64 = records.iter().map(|r| r.cross_total).sum();
    let mut acc = ScoreAccumulator::new(dist.n());
    for r in &records {
        let (beta1, beta2) = if cfg.control_variates {
            (
                loo_mean(total_pair, r.pair_total, (b - 1.0) * pairs_per_item),
                loo_mean(total_cross, r.cross_total, (b - 1.0) * nf),
            )
        } else {
            (0.0, 0.0)
        };
        for i in 0..n {
            let w = pair_norm * (r.row_sum[i] - (nf - 1.0) * beta1) - cross_norm * (r.cross[i] - beta2);
            acc.add_sample(&r.adj[i], w / b);
        }
    }

    let mut est = LossEstimate {
        value: value / b,
        grad_theta: acc.finish(dist),
        grad_psi,
        aux: Default::default(),
    };
    est.aux.insert("beta1".into(), total_pair / (b * pairs_per_item));
    est.aux.insert("beta2".into(), total_cross / (b * nf));
    Ok(est)
}

pub(crate) fn pair_value(kernel: &KernelSpec, draws: &Draws, target: &[f64]) -> f64 {
    let ys = draws.outputs();
    let n = ys.len() as f64;
    let mut pair = 0.0;
    let mut cross = 0.0;
    for i in 0..ys.len() {
        for j in 0..i {
            pair += kernel.eval_unchecked(&ys[i], &ys[j]);
        }
        cross += kernel.eval_unchecked(target, &ys[i]);
    }
    2.0 * pair / (n * (n - 1.0)) - 2.0 * cross / n
}

/// Unbiased three-term squared MMD between two samples, including the
/// target-only term. Useful when several targets are available for one input.
pub fn mmd2_unbiased(kernel: &KernelSpec, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let within = |s: &[Vec<f64>]| {
        let n = s.len() as f64;
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in 0..i {
                t += kernel.eval_unchecked(&s[i], &s[j]);
            }
        }
        2.0 * t / (n * (n - 1.0))
    };
    let mut cross = 0.0;
    for u in a {
        for v in b {
            cross += kernel.eval_unchecked(u, v);
        }
    }
    within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge_dist::EdgeDistribution;
    use crate::error::Error;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (EdgeDistribution, PolyGnn, Array2<f64>) {
        let theta = Array2::from_shape_vec((2, 2), vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let dist = EdgeDistribution::fixed(theta).unwrap();
        let model = PolyGnn::new(vec![array![[1.0]]]).unwrap();
        let x = array![[0.5], [-0.3]];
        (dist, model, x)
    }

    #[test]
    fn degenerate_distribution_on_target() {
        let (dist, model, x) = toy();
        let y = model.forward(&x, &dist.sample(&mut ChaCha8Rng::seed_from_u64(0))).unwrap();
        let cfg = LossConfig::new(LossKind::DistMmd).with_n_adj(2);
        let est = mmd2_batch(&dist, &model, &[(&x, &y)], &cfg, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_abs_diff_eq!(est.value, -1.0, epsilon = 1e-12);
        assert!(est.grad_theta.iter().all(|&g| g == 0.0));
        assert!(est.grad_psi[0].iter().all(|&g| g.abs() < 1e-12));

        let cfg = LossConfig::new(LossKind::DistCrps).with_n_adj(4);
        let est = crps_batch(&dist, &model, &[(&x, &y)], &cfg, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let (dist, model, x) = toy();
        let cfg = LossConfig::new(LossKind::Lit1);
        let r = mmd2_batch(&dist, &model, &[(&x, &x)], &cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(r, Err(Error::ConfigMismatch { called: "dist_mmd", .. })));
    }

    #[test]
    fn unbiased_mmd_of_identical_atoms_is_zero() {
        let k = KernelSpec::default();
        let a = vec![vec![0.1, 0.2]; 5];
        assert_abs_diff_eq!(mmd2_unbiased(&k, &a, &a), 0.0, epsilon = 1e-12);
    }
}
