use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use lgc::datagen::{generate, optimal_error_oracle, Dataset, Split};
use lgc::edge_dist::EdgeDistribution;
use lgc::harness::{self, calibration_metrics, point_metrics, run_experiment, Config};
use lgc::losses::InnerMetric;
use lgc::poly_gnn::PolyGnn;

#[derive(Parser)]
#[command(name = "lgc", version, about = "Latent graph calibration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from the `[dataset]` section.
    Datagen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one arm with one seed.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Arm name from `experiment.arms`; the top-level sections otherwise.
        #[arg(long)]
        arm: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint directory on a dataset split.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        /// Directory holding `dist.json` and `model.json`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 256)]
        n_adj: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run every arm and seed of an experiment and write reports.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Rebuild the report from existing run records without training.
        #[arg(long)]
        report_only: bool,
    },
    /// Irreducible point-prediction error of the configured ground truth.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        n_x: usize,
        #[arg(long, default_value_t = 256)]
        n_a: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: &Path) -> anyhow::Result<Config> {
    Config::load(path).with_context(|| format!("loading config from {}", path.display()))
}

fn dataset(cfg: &Config, data: Option<&Path>) -> anyhow::Result<Dataset> {
    match data {
        Some(dir) => Dataset::load(dir).with_context(|| format!("loading dataset from {}", dir.display())),
        None => Ok(generate(&cfg.dataset.ground_truth()?, &cfg.dataset)?),
    }
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Datagen { config, out } => {
            let cfg = load_config(&config)?;
            let data = generate(&cfg.dataset.ground_truth()?, &cfg.dataset)?;
            data.save(&out)?;
            println!("wrote {} pairs to {}", data.len(), out.display());
        }
        Command::Train { config, data, out, arm, seed } => {
            let cfg = load_config(&config)?;
            let arms = cfg.arms()?;
            let arm = match arm {
                Some(name) => arms
                    .into_iter()
                    .find(|a| a.name == name)
                    .with_context(|| format!("no arm named `{name}`"))?,
                None => cfg.arm(&harness::config::ArmSpec {
                    name: "default".into(),
                    ..Default::default()
                })?,
            };
            let data = dataset(&cfg, data.as_deref())?;
            let gt = data.manifest.ground_truth()?;
            let mut arm = arm;
            let seed = seed.unwrap_or(arm.train.seed);
            if arm.elbo_grid {
                let (prior, sigma) =
                    harness::select_elbo(&arm, seed, &data, &gt, harness::worker_threads(), Some(&out))?;
                arm.loss.elbo_prior = prior;
                arm.loss.elbo_sigma = sigma;
            }
            let rec = harness::run_single(&arm, seed, &data, &gt, Some(&out))?;
            println!("{}", serde_json::to_string_pretty(&rec.summary)?);
        }
        Command::Evaluate { data, run, split, n_adj, seed } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "validation" => Split::Validation,
                "test" => Split::Test,
                other => bail!("unknown split `{other}`"),
            };
            let data = Dataset::load(&data)?;
            let gt = data.manifest.ground_truth()?;
            let dist: EdgeDistribution = serde_json::from_str(&fs::read_to_string(run.join("dist.json"))?)?;
            let model: PolyGnn = serde_json::from_str(&fs::read_to_string(run.join("model.json"))?)?;
            let cal = calibration_metrics(dist.theta(), gt.theta_star())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let point = point_metrics(&dist, &model, data.split(split), n_adj, &mut rng)?;
            let out = serde_json::json!({ "split": split.name(), "calibration": cal, "point": point });
            fs::write(run.join("evaluation.json"), serde_json::to_string_pretty(&out)?)?;
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Experiment { config, out, data, report_only } => {
            let cfg = load_config(&config)?;
            let report = if report_only {
                harness::regenerate_report(&cfg, &out)?
            } else {
                let data = dataset(&cfg, data.as_deref())?;
                run_experiment(&cfg, &data, Some(&out))?.report
            };
            for arm in &report.arms {
                let m = |k: &str| arm.metrics.get(k).map_or(f64::NAN, |s| s.mean);
                let s = |k: &str| arm.metrics.get(k).map_or(f64::NAN, |s| s.std);
                println!(
                    "{:<20} mae_theta {:.4} ± {:.4}  mae_y {:.4} ± {:.4}  mse_y {:.4} ± {:.4}  failures {}",
                    arm.arm,
                    m("mae_theta"),
                    s("mae_theta"),
                    m("test_mae_y"),
                    s("test_mae_y"),
                    m("test_mse_y"),
                    s("test_mse_y"),
                    arm.failures.len()
                );
            }
        }
        Command::Oracle { config, n_x, n_a, seed } => {
            let cfg = load_config(&config)?;
            let gt = cfg.dataset.ground_truth()?;
            let mse = optimal_error_oracle(&gt, InnerMetric::Mse, n_x, n_a, seed)?;
            let mae = optimal_error_oracle(&gt, InnerMetric::Mae, n_x, n_a, seed)?;
            println!("{}", serde_json::json!({ "mse": mse, "mae": mae, "n_x": n_x, "n_a": n_a }));
        }
    }
    Ok(())
}
