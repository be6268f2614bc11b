//! Experiment runner: resolves arms, executes every `(arm, seed)` run,
//! aggregates mean and standard deviation per metric and compares arms with
//! Welch's t-test.

pub mod config;
pub mod metrics;
pub mod oracle;
pub mod stats;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, GroundTruth};
use crate::error::{Error, Result};
use crate::trainer::{init_candidate, train, train_restarts, InitModel, RunRecord, RunSummary};

pub use config::{Arm, Config, Constraint, ModelSource, PriorSpec};
pub use metrics::{calibration_metrics, point_metrics, Calibration, PointMetrics};
pub use oracle::{enumeration_oracle, two_atom_mmd2, two_atom_point_mae, ExactObjective};
pub use stats::{welch_t_test, WelchTest};

/// Worker count: `LGC_THREADS` when set to a positive integer, otherwise the
/// number of available cores.
pub fn worker_threads() -> usize {
    match std::env::var("LGC_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n >= 1 => n,
        _ => std::thread::available_parallelism().map_or(1, |n| n.get()),
    }
}

/// Applies `f` to every item on up to `threads` scoped workers, keeping order.
pub fn parallel_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<U>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= items.len() {
                    break;
                }
                let r = f(&items[k]);
                out.lock().expect("worker panicked")[k] = Some(r);
            });
        }
    });
    out.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every item ran")).collect()
}

pub fn run_dir(out: &Path, arm: &str, seed: u64) -> PathBuf {
    out.join("runs").join(arm).join(format!("seed_{seed}"))
}

/// Trains one arm with one seed. Writes `metrics.csv`, `summary.json` and the
/// final checkpoint into `dir` when given.
pub fn run_single(arm: &Arm, seed: u64, data: &Dataset, gt: &GroundTruth, dir: Option<&Path>) -> Result<RunRecord> {
    let mut tcfg = arm.train.clone();
    tcfg.seed = seed;
    let init = match arm.model {
        ModelSource::Joint => InitModel::Random {
            hops: gt.model_star.hops(),
            d_in: gt.model_star.d_in(),
            d_out: gt.model_star.d_out(),
        },
        ModelSource::TruePsi => InitModel::Given(gt.model_star.clone()),
        ModelSource::Perturbed(p) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(3);
            InitModel::Given(gt.model_star.perturb(p, &mut rng)?)
        }
    };
    let frozen = arm.constraint.map(|c| c.frozen_entries(gt)).unwrap_or_default();
    let mut candidates = Vec::with_capacity(tcfg.restarts);
    for k in 0..tcfg.restarts {
        let mut state = init_candidate(&tcfg, gt.n(), init.clone(), k)?;
        for &(i, j, v) in &frozen {
            state.freeze(i, j, v)?;
        }
        candidates.push(state);
    }
    let loss = arm.loss.build(gt)?;
    let (state, mut record) = if candidates.len() == 1 {
        let mut state = candidates.pop().expect("one candidate");
        let record = train(&mut state, data, &loss, gt.theta_star())?;
        (state, record)
    } else {
        train_restarts(candidates, data, &loss, gt.theta_star())?
    };
    if arm.constraint.is_some() {
        let cs = gt.community_size;
        let theta = state.dist.theta();
        let star = gt.theta_star();
        let mut max = 0.0f64;
        let mut sum = 0.0;
        let mut count = 0usize;
        for ((i, j), &t) in theta.indexed_iter() {
            if i >= cs && j >= cs {
                let d = (t - star[(i, j)]).abs();
                max = max.max(d);
                sum += d;
                count += 1;
            }
        }
        record.summary.extra.insert("max_ae_unperturbed".into(), max);
        record.summary.extra.insert("mae_unperturbed".into(), sum / count.max(1) as f64);
    }
    if let Some(dir) = dir {
        record.save(dir)?;
        state.save_checkpoint(dir)?;
    }
    Ok(record)
}

/// Chooses the ELBO prior and likelihood scale on the fixed grid by the final
/// validation point MSE of a run with `seed`.
pub fn select_elbo(
    arm: &Arm,
    seed: u64,
    data: &Dataset,
    gt: &GroundTruth,
    threads: usize,
    out: Option<&Path>,
) -> Result<(PriorSpec, f64)> {
    let grid = config::elbo_grid();
    let mut probe = arm.clone();
    probe.elbo_grid = false;
    if let Some(e) = arm.elbo_grid_epochs {
        probe.train.epochs = e;
    }
    let scores = parallel_map(&grid, threads, |&(prior, sigma)| {
        let mut a = probe.clone();
        a.loss.elbo_prior = prior;
        a.loss.elbo_sigma = sigma;
        run_single(&a, seed, data, gt, None).map(|r| r.rows.last().map_or(f64::INFINITY, |row| row.val_mse_y))
    });
    let mut lines = vec!["prior,sigma,val_mse_y".to_string()];
    let mut best: Option<(f64, PriorSpec, f64)> = None;
    for (&(prior, sigma), score) in grid.iter().zip(scores) {
        let score = match score {
            Ok(s) if s.is_finite() => s,
            Ok(_) => f64::INFINITY,
            Err(e) => {
                log::warn!("elbo grid point {prior}/{sigma} failed: {e}");
                f64::INFINITY
            }
        };
        lines.push(format!("{prior},{sigma},{score}"));
        if best.map_or(true, |(b, _, _)| score < b) {
            best = Some((score, prior, sigma));
        }
    }
    if let Some(out) = out {
        let dir = out.join("runs").join(&arm.name);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("elbo_grid.csv"), lines.join("\n") + "\n")?;
    }
    let (_, prior, sigma) = best.expect("grid is non-empty");
    Ok((prior, sigma))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    pub metrics: BTreeMap<String, MeanStd>,
    pub failures: Vec<RunFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub name: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmReport>,
    /// Arm with the lowest mean per metric.
    pub best: BTreeMap<String, String>,
    /// Welch p-values of every other arm against the best arm, per metric.
    pub welch_vs_best: BTreeMap<String, BTreeMap<String, f64>>,
}

impl ComparisonReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.arm == name)
    }

    pub fn mean(&self, arm: &str, metric: &str) -> Option<f64> {
        self.arm(arm)?.metrics.get(metric).map(|m| m.mean)
    }
}

/// Scalar metrics of a run summary in report order.
pub fn summary_metrics(s: &RunSummary) -> Vec<(String, f64)> {
    let mut v = vec![
        ("mae_theta".to_string(), s.mae_theta),
        ("max_ae_theta".to_string(), s.max_ae_theta),
        ("test_mae_y".to_string(), s.test_mae_y),
        ("test_mae_y_mean".to_string(), s.test_mae_y_mean),
        ("test_mse_y".to_string(), s.test_mse_y),
        ("test_dist".to_string(), s.test_dist),
    ];
    v.extend(s.extra.iter().map(|(k, x)| (k.clone(), *x)));
    v
}

/// One finished or failed run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub arm: String,
    pub seed: u64,
    pub result: std::result::Result<RunRecord, String>,
}

pub fn aggregate(name: &str, seeds: &[u64], arm_order: &[String], runs: &[RunOutcome]) -> ComparisonReport {
    let mut samples: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let mut arms = Vec::new();
    let mut metric_names: Vec<String> = Vec::new();
    for arm in arm_order {
        let mut failures = Vec::new();
        for r in runs.iter().filter(|r| &r.arm == arm) {
            match &r.result {
                Ok(rec) => {
                    for (m, v) in summary_metrics(&rec.summary) {
                        if !metric_names.contains(&m) {
                            metric_names.push(m.clone());
                        }
                        samples.entry((arm.clone(), m)).or_default().push(v);
                    }
                }
                Err(e) => failures.push(RunFailure {
                    seed: r.seed,
                    error: e.clone(),
                }),
            }
        }
        let metrics = samples
            .iter()
            .filter(|((a, _), _)| a == arm)
            .map(|((_, m), xs)| {
                (
                    m.clone(),
                    MeanStd {
                        mean: stats::mean(xs),
                        std: stats::std_dev(xs),
                        n: xs.len(),
                    },
                )
            })
            .collect();
        arms.push(ArmReport {
            arm: arm.clone(),
            metrics,
            failures,
        });
    }
    let mut best = BTreeMap::new();
    let mut welch_vs_best = BTreeMap::new();
    for m in &metric_names {
        let Some(winner) = arms
            .iter()
            .filter_map(|a| a.metrics.get(m).map(|s| (a.arm.clone(), s.mean)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
        else {
            continue;
        };
        let reference = &samples[&(winner.0.clone(), m.clone())];
        let mut ps = BTreeMap::new();
        for a in &arms {
            if a.arm == winner.0 {
                continue;
            }
            if let Some(xs) = samples.get(&(a.arm.clone(), m.clone())) {
                if let Ok(w) = welch_t_test(reference, xs) {
                    ps.insert(a.arm.clone(), w.p);
                }
            }
        }
        best.insert(m.clone(), winner.0);
        welch_vs_best.insert(m.clone(), ps);
    }
    ComparisonReport {
        name: name.to_string(),
        seeds: seeds.to_vec(),
        arms,
        best,
        welch_vs_best,
    }
}

/// Writes `report.csv` (long format) and `report.json`.
pub fn write_report(out: &Path, report: &ComparisonReport, runs: &[RunOutcome]) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("report.csv"))?;
    w.write_record(["arm", "seed", "metric", "value"])?;
    for arm in &report.arms {
        let mut mine: Vec<&RunOutcome> = runs.iter().filter(|r| r.arm == arm.arm).collect();
        mine.sort_by_key(|r| r.seed);
        for r in mine {
            if let Ok(rec) = &r.result {
                for (m, v) in summary_metrics(&rec.summary) {
                    w.write_record([arm.arm.clone(), r.seed.to_string(), m, v.to_string()])?;
                }
            }
        }
    }
    w.flush()?;
    fs::write(out.join("report.json"), serde_json::to_string_pretty(report)?)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub report: ComparisonReport,
    pub runs: Vec<RunOutcome>,
    /// Arms as actually run, with grid selections applied.
    pub arms: Vec<Arm>,
}

/// Runs every `(arm, seed)` pair of `cfg` on `data`. Failed runs are recorded
/// in the report and do not stop the others.
pub fn run_experiment(cfg: &Config, data: &Dataset, out: Option<&Path>) -> Result<ExperimentOutcome> {
    let gt = data.manifest.ground_truth()?;
    let seeds = cfg.seeds();
    let threads = worker_threads();
    let mut arms = cfg.arms()?;
    for arm in arms.iter_mut().filter(|a| a.elbo_grid) {
        let (prior, sigma) = select_elbo(arm, seeds[0], data, &gt, threads, out)?;
        log::info!("arm {}: selected elbo prior {prior}, sigma {sigma}", arm.name);
        arm.loss.elbo_prior = prior;
        arm.loss.elbo_sigma = sigma;
        arm.elbo_grid = false;
    }
    let jobs: Vec<(usize, u64)> = (0..arms.len()).flat_map(|a| seeds.iter().map(move |&s| (a, s))).collect();
    let runs = parallel_map(&jobs, threads, |&(a, seed)| {
        let arm = &arms[a];
        let dir = out.map(|o| run_dir(o, &arm.name, seed));
        let result = run_single(arm, seed, data, &gt, dir.as_deref()).map_err(|e| e.to_string());
        match &result {
            Ok(r) => log::info!(
                "{} seed {seed}: mae_theta {:.4} test_mse_y {:.4} ({:.0}s)",
                arm.name,
                r.summary.mae_theta,
                r.summary.test_mse_y,
                r.summary.seconds
            ),
            Err(e) => log::warn!("{} seed {seed} failed: {e}", arm.name),
        }
        RunOutcome {
            arm: arm.name.clone(),
            seed,
            result,
        }
    });
    let names: Vec<String> = arms.iter().map(|a| a.name.clone()).collect();
    let report = aggregate(&cfg.experiment.name, &seeds, &names, &runs);
    if let Some(out) = out {
        write_report(out, &report, &runs)?;
        fs::write(
            out.join("arms.json"),
            serde_json::to_string_pretty(
                &arms
                    .iter()
                    .map(|a| {
                        serde_json::json!({
                            "name": a.name,
                            "loss": a.loss,
                            "train": a.train,
                            "model": a.model,
                            "constraint": a.constraint,
                        })
                    })
                    .collect::<Vec<_>>(),
            )?,
        )?;
    }
    Ok(ExperimentOutcome { report, runs, arms })
}

/// Rebuilds the report from persisted run records under `out`.
pub fn regenerate_report(cfg: &Config, out: &Path) -> Result<ComparisonReport> {
    let seeds = cfg.seeds();
    let arms = cfg.arms()?;
    let mut runs = Vec::new();
    for arm in &arms {
        for &seed in &seeds {
            let dir = run_dir(out, &arm.name, seed);
            let result = RunRecord::load(&dir).map_err(|e| match e {
                Error::Io(io) => format!("missing run record: {io}"),
                other => other.to_string(),
            });
            runs.push(RunOutcome {
                arm: arm.name.clone(),
                seed,
                result,
            });
        }
    }
    let names: Vec<String> = arms.iter().map(|a| a.name.clone()).collect();
    Ok(aggregate(&cfg.experiment.name, &seeds, &names, &runs))
}
