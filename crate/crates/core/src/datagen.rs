//! Synthetic community benchmark: ground truth, dataset generation, on-disk
//! layout and the irreducible point-prediction error.
//!
//! Every community of `community_size` nodes carries the same directed
//! template on its local nodes `0..4`:
//!
//! ```text
//! 0 -> 1, 1 -> 0, 0 -> 2, 2 -> 3, 3 -> 1
//! ```
//!
//! and local node 3 of community `c` links to local node 0 of community
//! `(c + 1) mod C`, closing the communities into a ring. Every template edge
//! has probability `theta_on`; all other entries are zero.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::edge_dist::{AdjacencySample, EdgeDistribution};
use crate::error::{Error, Result};
use crate::losses::InnerMetric;
use crate::poly_gnn::{hop_matrices_into, NodeFeatures, PolyGnn, Projected};

pub const DEFAULT_THETA_ON: f64 = 0.75;
pub const DEFAULT_SIGMA_X: f64 = 1.5;
pub const DEFAULT_N_PAIRS: usize = 35_000;
pub const PSI1_STAR: [f64; 4] = [0.3, -0.2, 0.1, -0.2];
pub const PSI2_STAR: [f64; 4] = [-0.3, 0.1, 0.2, -0.1];

const INTRA_TEMPLATE: [(usize, usize); 5] = [(0, 1), (1, 0), (0, 2), (2, 3), (3, 1)];

/// Generator parameters; also the `[dataset]` config section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_communities: usize,
    pub community_size: usize,
    pub theta_on: f64,
    pub sigma_x: f64,
    pub n_pairs: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_communities: 3,
            community_size: 4,
            theta_on: DEFAULT_THETA_ON,
            sigma_x: DEFAULT_SIGMA_X,
            n_pairs: DEFAULT_N_PAIRS,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn ground_truth(&self) -> Result<GroundTruth> {
        build_ground_truth(
            self.n_communities,
            self.community_size,
            self.theta_on,
            default_psi(),
            self.sigma_x,
        )
    }
}

/// `[psi1*, psi2*]` as `1 x 4` layers.
pub fn default_psi() -> Vec<Array2<f64>> {
    vec![
        Array2::from_shape_vec((1, 4), PSI1_STAR.to_vec()).expect("1x4"),
        Array2::from_shape_vec((1, 4), PSI2_STAR.to_vec()).expect("1x4"),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub dist_star: EdgeDistribution,
    pub model_star: PolyGnn,
    pub sigma_x: f64,
    pub n_communities: usize,
    pub community_size: usize,
    pub theta_on: f64,
}

impl GroundTruth {
    /// The 12-node, three-community benchmark.
    pub fn canonical() -> Self {
        DatasetConfig::default().ground_truth().expect("canonical parameters are valid")
    }

    pub fn n(&self) -> usize {
        self.n_communities * self.community_size
    }

    pub fn theta_star(&self) -> &Array2<f64> {
        self.dist_star.theta()
    }

    pub fn template(&self) -> Vec<(usize, usize)> {
        template_edges(self.n_communities, self.community_size)
    }
}

/// Directed template edges in global node indices.
pub fn template_edges(n_communities: usize, community_size: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(n_communities * (INTRA_TEMPLATE.len() + 1));
    for c in 0..n_communities {
        let base = c * community_size;
        edges.extend(INTRA_TEMPLATE.iter().map(|&(i, j)| (base + i, base + j)));
    }
    if n_communities > 1 {
        for c in 0..n_communities {
            let next = (c + 1) % n_communities;
            edges.push((c * community_size + 3, next * community_size));
        }
    }
    edges
}

pub fn build_ground_truth(
    n_communities: usize,
    community_size: usize,
    theta_on: f64,
    psi_layers: Vec<Array2<f64>>,
    sigma_x: f64,
) -> Result<GroundTruth> {
    if n_communities == 0 || community_size < 4 {
        return Err(Error::InvalidShape(format!(
            "template needs >= 1 community of >= 4 nodes, got {n_communities} x {community_size}"
        )));
    }
    if !(0.0..=1.0).contains(&theta_on) {
        return Err(Error::Config(format!("theta_on must lie in [0, 1], got {theta_on}")));
    }
    if !(sigma_x > 0.0) {
        return Err(Error::Config(format!("sigma_x must be > 0, got {sigma_x}")));
    }
    let n = n_communities * community_size;
    let mut theta = Array2::zeros((n, n));
    for (i, j) in template_edges(n_communities, community_size) {
        theta[(i, j)] = theta_on;
    }
    Ok(GroundTruth {
        dist_star: EdgeDistribution::fixed(theta)?,
        model_star: PolyGnn::new(psi_layers)?,
        sigma_x,
        n_communities,
        community_size,
        theta_on,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub x: NodeFeatures,
    pub y: NodeFeatures,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Everything needed to regenerate a dataset bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: DatasetConfig,
    pub n: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub psi_star: Vec<Vec<Vec<f64>>>,
    pub template_edges: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl Manifest {
    pub fn ground_truth(&self) -> Result<GroundTruth> {
        let layers = self
            .psi_star
            .iter()
            .map(|rows| {
                let cols = rows.first().map_or(0, Vec::len);
                Array2::from_shape_vec((rows.len(), cols), rows.concat())
                    .map_err(|e| Error::InvalidShape(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let g = &self.generator;
        build_ground_truth(g.n_communities, g.community_size, g.theta_on, layers, g.sigma_x)
    }
}

/// Pairs stored in generation order; splits are consecutive ranges
/// (train, then validation, then test) of `pair_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pairs: Vec<Pair>,
}

fn split_sizes(n_pairs: usize) -> (usize, usize, usize) {
    let train = n_pairs * 8 / 10;
    let validation = n_pairs / 10;
    (train, validation, n_pairs - train - validation)
}

/// Draws `x ~ N(0, sigma_x^2 I)`, `A ~ theta*` and sets `y = f*(x, A)`.
pub fn generate(gt: &GroundTruth, cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.n_pairs == 0 {
        return Err(Error::Config("n_pairs must be >= 1".into()));
    }
    let n = gt.n();
    let d_in = gt.model_star.d_in();
    let d_out = gt.model_star.d_out();
    let normal = Normal::new(0.0, gt.sigma_x).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut a = AdjacencySample::empty(n);
    let mut hops = Vec::new();
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    for _ in 0..cfg.n_pairs {
        let x = Array2::from_shape_simple_fn((n, d_in), || normal.sample(&mut rng));
        gt.dist_star.sample_into(&mut rng, &mut a);
        hop_matrices_into(&a, gt.model_star.hops(), &mut hops);
        let mut y = vec![0.0; n * d_out];
        Projected::new(&gt.model_star, x.view()).forward(&hops, &mut y);
        let y = Array2::from_shape_vec((n, d_out), y).expect("sized");
        pairs.push(Pair { x, y });
    }
    let (train, validation, test) = split_sizes(cfg.n_pairs);
    let manifest = Manifest {
        generator: DatasetConfig {
            n_communities: gt.n_communities,
            community_size: gt.community_size,
            theta_on: gt.theta_on,
            sigma_x: gt.sigma_x,
            ..cfg.clone()
        },
        n,
        d_in,
        d_out,
        psi_star: gt
            .model_star
            .layers()
            .iter()
            .map(|w| w.outer_iter().map(|r| r.to_vec()).collect())
            .collect(),
        template_edges: gt.template().len(),
        train,
        validation,
        test,
    };
    Ok(Dataset { manifest, pairs })
}

impl Dataset {
    pub fn regenerate(manifest: &Manifest) -> Result<Self> {
        generate(&manifest.ground_truth()?, &manifest.generator)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pairs(&self) -> &[Pair] {
        &self.pairs
    }

    pub fn split_range(&self, split: Split) -> std::ops::Range<usize> {
        let m = &self.manifest;
        match split {
            Split::Train => 0..m.train,
            Split::Validation => m.train..m.train + m.validation,
            Split::Test => m.train + m.validation..m.train + m.validation + m.test,
        }
    }

    pub fn split(&self, split: Split) -> &[Pair] {
        &self.pairs[self.split_range(split)]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        for split in Split::ALL {
            let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", split.name())))?;
            let m = &self.manifest;
            let mut header = vec!["pair_id".to_string(), "node".to_string()];
            header.extend((0..m.d_in).map(|k| format!("x{k}")));
            header.extend((0..m.d_out).map(|k| format!("y{k}")));
            w.write_record(&header)?;
            let range = self.split_range(split);
            for (id, pair) in range.clone().zip(&self.pairs[range]) {
                for node in 0..m.n {
                    let mut rec = vec![id.to_string(), node.to_string()];
                    rec.extend(pair.x.row(node).iter().map(|v| v.to_string()));
                    rec.extend(pair.y.row(node).iter().map(|v| v.to_string()));
                    w.write_record(&rec)?;
                }
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let (n, d_in, d_out) = (manifest.n, manifest.d_in, manifest.d_out);
        let mut pairs = Vec::with_capacity(manifest.train + manifest.validation + manifest.test);
        for split in Split::ALL {
            let mut r = csv::Reader::from_path(dir.join(format!("{}.csv", split.name())))?;
            let mut x = Vec::with_capacity(n * d_in);
            let mut y = Vec::with_capacity(n * d_out);
            for (row_idx, rec) in r.records().enumerate() {
                let rec = rec?;
                if rec.len() != 2 + d_in + d_out {
                    return Err(Error::InvalidShape(format!(
                        "{}.csv row {row_idx}: expected {} columns, got {}",
                        split.name(),
                        2 + d_in + d_out,
                        rec.len()
                    )));
                }
                let parse = |k: usize| -> Result<f64> {
                    rec[k].parse().map_err(|e| {
                        Error::InvalidShape(format!("{}.csv row {row_idx}: {e}", split.name()))
                    })
                };
                for k in 0..d_in {
                    x.push(parse(2 + k)?);
                }
                for k in 0..d_out {
                    y.push(parse(2 + d_in + k)?);
                }
                if x.len() == n * d_in {
                    pairs.push(Pair {
                        x: Array2::from_shape_vec((n, d_in), std::mem::take(&mut x)).expect("sized"),
                        y: Array2::from_shape_vec((n, d_out), std::mem::take(&mut y)).expect("sized"),
                    });
                }
            }
            if !x.is_empty() {
                return Err(Error::InvalidShape(format!("{}.csv ends mid-pair", split.name())));
            }
        }
        let expected = manifest.train + manifest.validation + manifest.test;
        if pairs.len() != expected {
            return Err(Error::InvalidShape(format!(
                "manifest declares {expected} pairs, files hold {}",
                pairs.len()
            )));
        }
        Ok(Self { manifest, pairs })
    }
}

/// Monte-Carlo estimate of the best achievable point-prediction error per
/// output entry: the mean squared deviation from `E_A[y]` (MSE) or the mean
/// absolute deviation from the per-entry median of `y` (MAE), over
/// `n_x` input draws with `n_a` adjacency draws each.
pub fn optimal_error_oracle(
    gt: &GroundTruth,
    metric: InnerMetric,
    n_x: usize,
    n_a: usize,
    seed: u64,
) -> Result<f64> {
    if n_x == 0 || n_a < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: n_a.min(n_x),
        });
    }
    let n = gt.n();
    let d_in = gt.model_star.d_in();
    let m = n * gt.model_star.d_out();
    let normal = Normal::new(0.0, gt.sigma_x).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = AdjacencySample::empty(n);
    let mut hops = Vec::new();
    let mut ys = vec![0.0; n_a * m];
    let mut column = vec![0.0; n_a];
    let mut total = 0.0;
    for _ in 0..n_x {
        let x = Array2::from_shape_simple_fn((n, d_in), || normal.sample(&mut rng));
        let proj = Projected::new(&gt.model_star, x.view());
        for k in 0..n_a {
            gt.dist_star.sample_into(&mut rng, &mut a);
            hop_matrices_into(&a, gt.model_star.hops(), &mut hops);
            proj.forward(&hops, &mut ys[k * m..(k + 1) * m]);
        }
        for e in 0..m {
            for k in 0..n_a {
                column[k] = ys[k * m + e];
            }
            total += match metric {
                InnerMetric::Mse => {
                    let mean = column.iter().sum::<f64>() / n_a as f64;
                    column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_a - 1) as f64
                }
                InnerMetric::Mae => {
                    let med = median_in_place(&mut column);
                    column.iter().map(|v| (v - med).abs()).sum::<f64>() / n_a as f64
                }
            };
        }
    }
    Ok(total / (n_x * m) as f64)
}

/// Median of a non-empty slice; reorders it.
pub(crate) fn median_in_place(v: &mut [f64]) -> f64 {
    let n = v.len();
    let mid = n / 2;
    let (_, &mut hi, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        hi
    } else {
        let lo = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    }
}
