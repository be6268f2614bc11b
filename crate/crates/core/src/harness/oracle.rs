//! Exact population objectives by enumerating every adjacency outcome, and
//! the closed-form single-edge counterexample.

use std::f64::consts::PI;

use ndarray::Array2;

use crate::edge_dist::{AdjacencySample, EdgeDistribution};
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::losses::{LossConfig, LossKind};
use crate::poly_gnn::{NodeFeatures, PolyGnn};

/// Largest number of stochastic entries the enumeration accepts.
pub const ENUMERATION_LIMIT: usize = 12;

#[derive(Clone, Debug)]
pub struct ExactObjective {
    pub value: f64,
    pub grad_theta: Array2<f64>,
}

struct Outcome {
    prob: f64,
    adj: AdjacencySample,
    y: Vec<f64>,
}

fn enumerate(dist: &EdgeDistribution, model: &PolyGnn, x: &NodeFeatures) -> Result<Vec<Outcome>> {
    let n = dist.n();
    let theta = dist.theta();
    let mut base = AdjacencySample::empty(n);
    let mut free = Vec::new();
    for ((i, j), &t) in theta.indexed_iter() {
        if t >= 1.0 {
            base.set(i, j, true);
        } else if t > 0.0 {
            free.push((i, j, t));
        }
    }
    if free.len() > ENUMERATION_LIMIT {
        return Err(Error::TooManyEdges {
            stochastic: free.len(),
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut out = Vec::with_capacity(1 << free.len());
    for code in 0u32..(1u32 << free.len()) {
        let mut adj = base.clone();
        let mut prob = 1.0;
        for (b, &(i, j, t)) in free.iter().enumerate() {
            let on = code >> b & 1 == 1;
            adj.set(i, j, on);
            prob *= if on { t } else { 1.0 - t };
        }
        let y = model.forward(x, &adj)?.iter().copied().collect();
        out.push(Outcome { prob, adj, y });
    }
    Ok(out)
}

/// Exact population loss of one `(x, y*)` pair and its exact gradient with
/// respect to the trainable edge probabilities.
///
/// For `lit2` the returned gradient is the expectation of the node-level
/// estimator (each node's loss times the score of its own row), which is what
/// that estimator targets.
pub fn enumeration_oracle(
    dist: &EdgeDistribution,
    model: &PolyGnn,
    x: &NodeFeatures,
    y_star: &NodeFeatures,
    cfg: &LossConfig,
) -> Result<ExactObjective> {
    cfg.validate()?;
    let outcomes = enumerate(dist, model, x)?;
    let target: Vec<f64> = y_star.iter().copied().collect();
    let n = dist.n();
    let m = target.len() as f64;
    let score = |a: &AdjacencySample| dist.score_gradient(a);
    let mut grad = Array2::<f64>::zeros((n, n));
    let mut value = 0.0;

    match cfg.kind {
        LossKind::DistMmd | LossKind::DistCrps => {
            let kernel = if cfg.kind == LossKind::DistCrps { KernelSpec::energy() } else { cfg.kernel };
            for a in &outcomes {
                let mut pair = 0.0;
                for b in &outcomes {
                    pair += b.prob * kernel.eval(&a.y, &b.y)?;
                }
                let cross = kernel.eval(&target, &a.y)?;
                value += a.prob * (pair - 2.0 * cross);
                // d/dtheta of sum_ab p_a p_b k_ab is 2 sum_a p_a s_a (sum_b p_b k_ab).
                grad.scaled_add(a.prob * 2.0 * (pair - cross), &score(&a.adj));
            }
        }
        LossKind::PointMse => {
            let mut mean = vec![0.0; target.len()];
            for o in &outcomes {
                for (mu, v) in mean.iter_mut().zip(&o.y) {
                    *mu += o.prob * v;
                }
            }
            value = mean.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / m;
            for o in &outcomes {
                let dot: f64 = mean.iter().zip(&target).zip(&o.y).map(|((mu, t), v)| (mu - t) * v).sum();
                grad.scaled_add(o.prob * 2.0 * dot / m, &score(&o.adj));
            }
        }
        LossKind::Lit1 => {
            for o in &outcomes {
                let l = o.y.iter().zip(&target).map(|(v, t)| cfg.inner_metric.value(v - t)).sum::<f64>() / m;
                value += o.prob * l;
                grad.scaled_add(o.prob * l, &score(&o.adj));
            }
        }
        LossKind::Lit2 => {
            let d_out = model.d_out();
            for o in &outcomes {
                let s = score(&o.adj);
                for i in 0..n {
                    let l = (i * d_out..(i + 1) * d_out)
                        .map(|e| cfg.inner_metric.value(o.y[e] - target[e]))
                        .sum::<f64>()
                        / d_out as f64;
                    value += o.prob * l / n as f64;
                    let mut row = grad.row_mut(i);
                    row.scaled_add(o.prob * l / n as f64, &s.row(i));
                }
            }
        }
        LossKind::Elbo => {
            let s2 = cfg.elbo_sigma * cfg.elbo_sigma;
            let c = 0.5 * (2.0 * PI * s2).ln();
            let prior = cfg.elbo_prior.as_ref().expect("validated");
            for o in &outcomes {
                let nll: f64 = o.y.iter().zip(&target).map(|(v, t)| c + (v - t).powi(2) / (2.0 * s2)).sum();
                value += o.prob * nll;
                grad.scaled_add(o.prob * nll, &score(&o.adj));
            }
            value += dist.kl_to(prior)?;
            grad += &dist.kl_gradient(prior)?;
        }
    }
    Ok(ExactObjective { value, grad_theta: grad })
}

/// Population point loss with absolute error and the median functional for a
/// single Bernoulli edge: the model outputs `f1` with probability `theta` and
/// `f0` otherwise, the truth does the same with `theta_star`. At
/// `theta = 1/2` the median is taken as the midpoint.
pub fn two_atom_point_mae(theta: f64, theta_star: f64, f0: f64, f1: f64) -> f64 {
    let median = if theta > 0.5 {
        f1
    } else if theta < 0.5 {
        f0
    } else {
        0.5 * (f0 + f1)
    };
    theta_star * (f1 - median).abs() + (1.0 - theta_star) * (f0 - median).abs()
}

/// Full squared MMD (all three terms) between the model and true two-atom
/// output distributions.
pub fn two_atom_mmd2(theta: f64, theta_star: f64, f0: f64, f1: f64, kernel: &KernelSpec) -> f64 {
    let k = |a: f64, b: f64| kernel.eval_unchecked(&[a], &[b]);
    let e = |p: f64, q: f64| {
        p * q * k(f1, f1) + (1.0 - p) * (1.0 - q) * k(f0, f0) + (p * (1.0 - q) + q * (1.0 - p)) * k(f0, f1)
    };
    e(theta, theta) - 2.0 * e(theta, theta_star) + e(theta_star, theta_star)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn setup() -> (EdgeDistribution, PolyGnn, NodeFeatures, NodeFeatures) {
        let dist = EdgeDistribution::trainable(array![[0.2, 0.7], [0.4, 0.9]]).unwrap();
        let model = PolyGnn::new(vec![array![[0.8, -0.3]], array![[0.2, 0.5]]]).unwrap();
        let x = array![[1.0, 0.4], [-0.6, 0.9]];
        let y = array![[0.3], [-0.2]];
        (dist, model, x, y)
    }

    fn all_configs() -> Vec<LossConfig> {
        let prior = EdgeDistribution::uniform(2, 0.3).unwrap();
        vec![
            LossConfig::new(LossKind::DistMmd).with_kernel(KernelSpec::rational_quadratic(0.5, 0.5).unwrap()),
            LossConfig::new(LossKind::DistCrps),
            LossConfig::new(LossKind::PointMse),
            LossConfig::new(LossKind::Lit1).with_metric(crate::losses::InnerMetric::Mae),
            LossConfig::new(LossKind::Lit1),
            LossConfig::new(LossKind::Elbo).with_elbo(0.5, prior),
        ]
    }

    #[test]
    fn uniform_weights_average_outcomes() {
        let (_, model, x, y) = setup();
        let dist = EdgeDistribution::uniform(2, 0.5).unwrap();
        let cfg = LossConfig::new(LossKind::Lit1);
        let exact = enumeration_oracle(&dist, &model, &x, &y, &cfg).unwrap();
        let mut avg = 0.0;
        for code in 0..16 {
            let mut a = AdjacencySample::empty(2);
            for e in 0..4 {
                a.set(e / 2, e % 2, code >> e & 1 == 1);
            }
            let out = model.forward(&x, &a).unwrap();
            avg += out.iter().zip(&y).map(|(v, t)| (v - t).powi(2)).sum::<f64>() / 2.0 / 16.0;
        }
        assert_abs_diff_eq!(exact.value, avg, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences_of_value() {
        let (dist, model, x, y) = setup();
        for cfg in all_configs() {
            let exact = enumeration_oracle(&dist, &model, &x, &y, &cfg).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let h = 1e-6;
                    let shifted = |d: f64| {
                        let mut t = dist.theta().clone();
                        t[(i, j)] += d;
                        let dd = EdgeDistribution::trainable(t).unwrap();
                        enumeration_oracle(&dd, &model, &x, &y, &cfg).unwrap().value
                    };
                    let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
                    assert_abs_diff_eq!(exact.grad_theta[(i, j)], fd, epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn rejects_large_supports() {
        let dist = EdgeDistribution::uniform(4, 0.5).unwrap();
        let model = PolyGnn::new(vec![array![[1.0]]]).unwrap();
        let x = NodeFeatures::zeros((4, 1));
        let r = enumeration_oracle(&dist, &model, &x, &x, &LossConfig::new(LossKind::Lit1));
        assert!(matches!(r, Err(Error::TooManyEdges { stochastic: 16, limit: 12 })));
    }

    #[test]
    fn two_atom_examples() {
        let k = KernelSpec::default();
        let v = two_atom_point_mae(0.6, 0.75, 0.0, 1.0);
        assert_eq!(v, two_atom_point_mae(0.75, 0.75, 0.0, 1.0));
        assert_eq!(v, two_atom_point_mae(0.9, 0.75, 0.0, 1.0));
        assert_abs_diff_eq!(two_atom_mmd2(0.75, 0.75, 0.0, 1.0, &k), 0.0, epsilon = 1e-15);
        assert!(two_atom_mmd2(0.6, 0.75, 0.0, 1.0, &k) > 0.0);
    }
}
