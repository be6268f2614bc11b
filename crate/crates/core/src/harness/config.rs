//! TOML run and experiment configuration.
//!
//! A file has up to four sections: `[dataset]`, `[loss]`, `[train]` and
//! `[experiment]`. Each arm in `experiment.arms` may carry `loss` and `train`
//! tables whose keys override the top-level sections for that arm only.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use toml::Table;

use crate::datagen::{DatasetConfig, GroundTruth};
use crate::edge_dist::EdgeDistribution;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::losses::{InnerMetric, LossConfig, LossKind};
use crate::trainer::TrainConfig;

/// Prior of the `elbo` loss: `uniform:<p>` or `pattern` (0.75 on template
/// edges, 0.05 elsewhere).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PriorSpec {
    Uniform(f64),
    Pattern { on: f64, off: f64 },
}

impl PriorSpec {
    pub const PATTERN: PriorSpec = PriorSpec::Pattern { on: 0.75, off: 0.05 };

    pub fn build(&self, gt: &GroundTruth) -> Result<EdgeDistribution> {
        let n = gt.n();
        let theta = match *self {
            PriorSpec::Uniform(p) => Array2::from_elem((n, n), p),
            PriorSpec::Pattern { on, off } => gt.theta_star().mapv(|t| if t > 0.0 { on } else { off }),
        };
        EdgeDistribution::fixed(theta)
    }
}

impl fmt::Display for PriorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PriorSpec::Uniform(p) => write!(f, "uniform:{p}"),
            PriorSpec::Pattern { on, off } if (*on, *off) == (0.75, 0.05) => f.write_str("pattern"),
            PriorSpec::Pattern { on, off } => write!(f, "pattern:{on}:{off}"),
        }
    }
}

impl FromStr for PriorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown prior `{s}`; use uniform:<p>, pattern or pattern:<on>:<off>"));
        let parts: Vec<&str> = s.split(':').collect();
        let num = |t: &str| t.parse::<f64>().map_err(|_| bad());
        match parts.as_slice() {
            ["pattern"] => Ok(Self::PATTERN),
            ["pattern", on, off] => Ok(PriorSpec::Pattern { on: num(on)?, off: num(off)? }),
            ["uniform", p] => Ok(PriorSpec::Uniform(num(p)?)),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for PriorSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PriorSpec> for String {
    fn from(p: PriorSpec) -> String {
        p.to_string()
    }
}

/// The `[loss]` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub kind: LossKind,
    pub inner_metric: InnerMetric,
    pub n_adj: usize,
    pub control_variates: bool,
    pub kernel: KernelSpec,
    pub elbo_sigma: f64,
    pub elbo_prior: PriorSpec,
    pub baseline_momentum: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let c = LossConfig::new(LossKind::DistMmd);
        Self {
            kind: c.kind,
            inner_metric: c.inner_metric,
            n_adj: c.n_adj,
            control_variates: c.control_variates,
            kernel: c.kernel,
            elbo_sigma: c.elbo_sigma,
            elbo_prior: PriorSpec::Uniform(0.5),
            baseline_momentum: c.baseline_momentum,
        }
    }
}

impl LossSection {
    pub fn build(&self, gt: &GroundTruth) -> Result<LossConfig> {
        let cfg = LossConfig {
            kind: self.kind,
            inner_metric: self.inner_metric,
            n_adj: self.n_adj,
            control_variates: self.control_variates,
            kernel: self.kernel,
            elbo_sigma: self.elbo_sigma,
            elbo_prior: if self.kind == LossKind::Elbo { Some(self.elbo_prior.build(gt)?) } else { None },
            baseline_momentum: self.baseline_momentum,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Where the predictor comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSource {
    /// Random initialisation, trained jointly with the edge probabilities.
    #[default]
    Joint,
    /// The data-generating weights, kept frozen.
    TruePsi,
    /// Data-generating weights scaled by `1 + U[-p, p]` per entry, kept frozen.
    Perturbed(f64),
}

/// Entries of the edge distribution pinned to wrong values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Template edges of community 0 touching its local nodes 2 and 3 are
    /// pinned at 0.25.
    MisconfiguredP,
}

pub const MISCONFIGURED_VALUE: f64 = 0.25;

impl Constraint {
    pub fn frozen_entries(&self, gt: &GroundTruth) -> Vec<(usize, usize, f64)> {
        let cs = gt.community_size;
        gt.template()
            .into_iter()
            .filter(|&(i, j)| (i < cs && i % cs >= 2) || (j < cs && j % cs >= 2))
            .map(|(i, j)| (i, j, MISCONFIGURED_VALUE))
            .collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmSpec {
    pub name: String,
    pub loss: Table,
    pub train: Table,
    pub model: ModelSource,
    pub constraint: Option<Constraint>,
    /// Select `elbo_sigma` and `elbo_prior` over the fixed grid by validation
    /// point MSE, on the first seed.
    pub elbo_grid: bool,
    /// Epoch budget of every grid run; defaults to the arm's `train.epochs`.
    pub elbo_grid_epochs: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSpec>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub dataset: DatasetConfig,
    pub loss: Table,
    pub train: Table,
    pub experiment: ExperimentSection,
}

/// A fully resolved arm.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub name: String,
    pub loss: LossSection,
    pub train: TrainConfig,
    pub model: ModelSource,
    pub constraint: Option<Constraint>,
    pub elbo_grid: bool,
    pub elbo_grid_epochs: Option<usize>,
}

fn merge(base: &Table, over: &Table) -> Table {
    let mut out = base.clone();
    for (k, v) in over {
        match (out.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => *b = merge(b, o),
            _ => {
                out.insert(k.clone(), v.clone());
            }
        }
    }
    out
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    fn check(&self) -> Result<()> {
        self.loss_section(&Table::new())?;
        self.train_config(&Table::new())?;
        let mut seen = std::collections::HashSet::new();
        if !self.experiment.seeds.iter().all(|s| seen.insert(*s)) {
            return Err(Error::Config("experiment seeds must be distinct".into()));
        }
        let mut names = std::collections::HashSet::new();
        for arm in &self.experiment.arms {
            if arm.name.is_empty() || !names.insert(arm.name.as_str()) {
                return Err(Error::Config(format!("arm names must be non-empty and unique, got `{}`", arm.name)));
            }
            self.arm(arm)?;
        }
        Ok(())
    }

    pub fn loss_section(&self, over: &Table) -> Result<LossSection> {
        Ok(LossSection::deserialize(toml::Value::Table(merge(&self.loss, over)))?)
    }

    pub fn train_config(&self, over: &Table) -> Result<TrainConfig> {
        let t = TrainConfig::deserialize(toml::Value::Table(merge(&self.train, over)))?;
        t.validate()?;
        Ok(t)
    }

    pub fn arm(&self, spec: &ArmSpec) -> Result<Arm> {
        let mut train = self.train_config(&spec.train)?;
        if spec.model != ModelSource::Joint {
            train.freeze_psi = true;
        }
        if let ModelSource::Perturbed(p) = spec.model {
            if !(p >= 0.0) {
                return Err(Error::Config(format!("perturbation must be >= 0, got {p}")));
            }
        }
        Ok(Arm {
            name: spec.name.clone(),
            loss: self.loss_section(&spec.loss)?,
            train,
            model: spec.model,
            constraint: spec.constraint,
            elbo_grid: spec.elbo_grid,
            elbo_grid_epochs: spec.elbo_grid_epochs,
        })
    }

    /// Resolved arms; a config without arms yields one arm named `default`.
    pub fn arms(&self) -> Result<Vec<Arm>> {
        if self.experiment.arms.is_empty() {
            return Ok(vec![self.arm(&ArmSpec {
                name: "default".into(),
                ..ArmSpec::default()
            })?]);
        }
        self.experiment.arms.iter().map(|a| self.arm(a)).collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.experiment.seeds.is_empty() {
            vec![self.train_config(&Table::new()).map(|t| t.seed).unwrap_or(0)]
        } else {
            self.experiment.seeds.clone()
        }
    }
}

/// The fixed ELBO hyper-parameter grid.
pub fn elbo_grid() -> Vec<(PriorSpec, f64)> {
    let priors = [PriorSpec::Uniform(0.01), PriorSpec::Uniform(0.5), PriorSpec::PATTERN];
    let sigmas = [0.001, 0.005, 0.01, 0.05, 0.1, 0.5];
    priors.iter().flat_map(|&p| sigmas.iter().map(move |&s| (p, s))).collect()
}
