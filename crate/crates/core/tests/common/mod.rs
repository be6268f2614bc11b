//! Checks shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use lgc::edge_dist::{AdjacencySample, EdgeDistribution};
use lgc::harness::oracle::enumeration_oracle;
use lgc::kernels::KernelSpec;
use lgc::losses::{InnerMetric, LossConfig, LossEstimator, LossKind, PairRef};
use lgc::poly_gnn::{NodeFeatures, PolyGnn};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error with a floor so that vanishing gradients compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// One configuration per loss, plus both inner metrics for `lit1`.
pub fn every_loss(n: usize, kernel: KernelSpec) -> Vec<LossConfig> {
    let prior = EdgeDistribution::uniform(n, 0.3).expect("valid prior");
    vec![
        LossConfig::new(LossKind::DistMmd).with_kernel(kernel),
        LossConfig::new(LossKind::DistCrps),
        LossConfig::new(LossKind::PointMse),
        LossConfig::new(LossKind::Lit1),
        LossConfig::new(LossKind::Lit1).with_metric(InnerMetric::Mae),
        LossConfig::new(LossKind::Lit2),
        LossConfig::new(LossKind::Lit2).with_metric(InnerMetric::Mae),
        LossConfig::new(LossKind::Elbo).with_elbo(0.7, prior),
    ]
}

pub struct Instance {
    pub dist: EdgeDistribution,
    pub model: PolyGnn,
    pub pairs: Vec<(NodeFeatures, NodeFeatures)>,
    pub kernel: KernelSpec,
    pub n_adj: usize,
}

impl Instance {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..=5);
        let d_in = rng.gen_range(1..=3);
        let d_out = rng.gen_range(1..=2);
        let hops = rng.gen_range(1..=3);
        let theta = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.05..0.95));
        let dist = EdgeDistribution::trainable(theta).expect("valid theta");
        let model = PolyGnn::random(hops, d_in, d_out, -1.0, 1.0, &mut rng).expect("valid model");
        let batch = rng.gen_range(1..=4);
        let pairs = (0..batch)
            .map(|_| {
                let x = Array2::from_shape_fn((n, d_in), |_| rng.gen_range(-1.5..1.5));
                let y = Array2::from_shape_fn((n, d_out), |_| rng.gen_range(-0.9..0.9));
                (x, y)
            })
            .collect();
        let kernel = KernelSpec::rational_quadratic(rng.gen_range(0.3..2.0), rng.gen_range(0.5..2.0))
            .expect("valid kernel");
        Self {
            dist,
            model,
            pairs,
            kernel,
            n_adj: rng.gen_range(2..=6),
        }
    }

    pub fn refs(&self) -> Vec<PairRef<'_>> {
        self.pairs.iter().map(|(x, y)| (x, y)).collect()
    }
}

/// Worst relative error between analytic psi-gradients and central finite
/// differences over every loss, holding the adjacency draws fixed.
pub fn psi_gradient_error(inst: &Instance) -> f64 {
    let refs = inst.refs();
    let params = inst.model.flat_params();
    let mut worst: f64 = 0.0;
    for cfg in every_loss(inst.dist.n(), inst.kernel) {
        let cfg = cfg.with_n_adj(inst.n_adj);
        let run = |model: &PolyGnn| {
            let mut est = LossEstimator::new(cfg.clone()).expect("valid config");
            est.estimate(&inst.dist, model, &refs, &mut ChaCha8Rng::seed_from_u64(7)).expect("estimate")
        };
        let analytic: Vec<f64> = run(&inst.model).grad_psi.iter().flat_map(|g| g.iter().copied()).collect();
        for k in 0..params.len() {
            let h = 1e-5;
            let value_at = |d: f64| {
                let mut p = params.clone();
                p[k] += d;
                let mut m = inst.model.clone();
                m.set_flat_params(&p).expect("same shape");
                run(&m).value
            };
            let fd = (value_at(h) - value_at(-h)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[k], fd));
        }
    }
    worst
}

/// Worst relative error between the score gradient and central finite
/// differences of the log-likelihood for a few random adjacencies.
pub fn score_gradient_error(inst: &Instance, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = inst.dist.n();
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let a = inst.dist.sample(&mut rng);
        let score = inst.dist.score_gradient(&a);
        for i in 0..n {
            for j in 0..n {
                let h = 1e-6;
                let ll = |d: f64| {
                    let mut t = inst.dist.theta().clone();
                    t[(i, j)] += d;
                    EdgeDistribution::trainable(t).expect("inside bounds").log_likelihood(&a).expect("same n")
                };
                let fd = (ll(h) - ll(-h)) / (2.0 * h);
                worst = worst.max(rel_err(score[(i, j)], fd));
            }
        }
    }
    worst
}

/// The two-node instance used by the unbiasedness check.
pub fn two_node_setup() -> (EdgeDistribution, PolyGnn, Vec<(NodeFeatures, NodeFeatures)>) {
    use ndarray::array;
    let dist = EdgeDistribution::trainable(array![[0.2, 0.7], [0.4, 0.9]]).expect("valid");
    let model = PolyGnn::new(vec![array![[0.8, -0.3]], array![[0.2, 0.5]]]).expect("valid");
    let pairs = vec![
        (array![[1.0, 0.4], [-0.6, 0.9]], array![[0.3], [-0.2]]),
        (array![[-0.5, 1.2], [0.7, -0.1]], array![[-0.4], [0.6]]),
    ];
    (dist, model, pairs)
}

pub struct Unbiasedness {
    pub label: String,
    /// Largest `|mc - exact| / se` over the N x N entries.
    pub max_z: f64,
}

/// Averages `reps` independent gradient estimates of every loss on the
/// two-node instance and compares them with the enumerated expectation.
pub fn unbiasedness(reps: usize, control_variates: bool, seed: u64) -> Vec<Unbiasedness> {
    let (dist, model, pairs) = two_node_setup();
    let refs: Vec<PairRef<'_>> = pairs.iter().map(|(x, y)| (x, y)).collect();
    let kernel = KernelSpec::rational_quadratic(0.5, 0.5).expect("valid");
    let mut out = Vec::new();
    for cfg in every_loss(2, kernel) {
        let cfg = cfg.with_n_adj(4).with_control_variates(control_variates);
        let mut exact = Array2::<f64>::zeros((2, 2));
        for (x, y) in &pairs {
            exact += &enumeration_oracle(&dist, &model, x, y, &cfg).expect("enumerable").grad_theta;
        }
        exact /= pairs.len() as f64;
        let mut est = LossEstimator::new(cfg.clone()).expect("valid config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sum = Array2::<f64>::zeros((2, 2));
        let mut sum_sq = Array2::<f64>::zeros((2, 2));
        for _ in 0..reps {
            let g = est.estimate(&dist, &model, &refs, &mut rng).expect("estimate").grad_theta;
            sum_sq += &g.mapv(|v| v * v);
            sum += &g;
        }
        let r = reps as f64;
        let mean = &sum / r;
        let max_z = mean
            .iter()
            .zip(sum_sq.iter())
            .zip(exact.iter())
            .map(|((m, s2), e)| {
                let var = (s2 / r - m * m) * r / (r - 1.0);
                let se = (var / r).sqrt();
                if se == 0.0 {
                    if (m - e).abs() < 1e-12 { 0.0 } else { f64::INFINITY }
                } else {
                    (m - e).abs() / se
                }
            })
            .fold(0.0, f64::max);
        let label = match cfg.kind {
            LossKind::Lit1 | LossKind::Lit2 => format!("{}({})", cfg.kind, cfg.inner_metric),
            k => k.to_string(),
        };
        out.push(Unbiasedness { label, max_z });
    }
    out
}

/// A sample whose edges are exactly the listed pairs.
pub fn adjacency(n: usize, edges: &[(usize, usize)]) -> AdjacencySample {
    AdjacencySample::from_edges(n, edges).expect("edges inside the graph")
}
