//! Mini-batch training loop with Adam on both the edge probabilities and the
//! predictor weights.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Dataset, Split};
use crate::edge_dist::EdgeDistribution;
use crate::error::{shape_err, Error, Result};
use crate::harness::metrics::{calibration_metrics, point_metrics, Calibration, PointMetrics};
use crate::losses::{LossConfig, LossEstimator, LossKind, PairRef};
use crate::poly_gnn::PolyGnn;

/// RNG stream ids; each run seed owns independent streams per purpose.
const STREAM_INIT: u64 = 0;
const STREAM_VALIDATION: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_EPOCH0: u64 = 16;
const STREAM_RESTART0: u64 = 1 << 32;

/// The `[train]` config section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_initial: f64,
    pub lr_after_drop: f64,
    /// Epochs `>= drop_epoch` (zero-based) use `lr_after_drop`.
    pub drop_epoch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub theta_init_low: f64,
    pub theta_init_high: f64,
    pub psi_init_low: f64,
    pub psi_init_high: f64,
    pub freeze_psi: bool,
    pub seed: u64,
    /// Adjacency samples per pair for validation point metrics.
    pub eval_adj: usize,
    /// Adjacency samples per pair for the final test metrics.
    pub test_eval_adj: usize,
    /// Independent initialisations tried; 1 disables restarts.
    pub restarts: usize,
    /// Epochs each restart candidate trains before the best one, by its own
    /// loss on the validation split, continues.
    pub restart_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_initial: 0.05,
            lr_after_drop: 0.01,
            drop_epoch: 5,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            batch_size: 128,
            epochs: 15,
            theta_init_low: 0.0,
            theta_init_high: 0.1,
            psi_init_low: -0.5,
            psi_init_high: 0.5,
            freeze_psi: false,
            seed: 0,
            eval_adj: 64,
            test_eval_adj: 256,
            restarts: 1,
            restart_epochs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr_after_drop >= 0.0 && self.lr_after_drop <= self.lr_initial) {
            return bad(format!(
                "need 0 <= lr_after_drop <= lr_initial, got {} and {}",
                self.lr_after_drop, self.lr_initial
            ));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be > 0, got {}", self.adam_eps));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(0.0 <= self.theta_init_low && self.theta_init_low <= self.theta_init_high && self.theta_init_high <= 1.0) {
            return bad(format!(
                "theta init range [{}, {}] must lie inside [0, 1]",
                self.theta_init_low, self.theta_init_high
            ));
        }
        if !(self.psi_init_low <= self.psi_init_high) {
            return bad("psi_init_low must not exceed psi_init_high".into());
        }
        if self.eval_adj < 2 || self.test_eval_adj < 2 {
            return bad("evaluation needs at least 2 adjacency samples".into());
        }
        if self.restarts == 0 {
            return bad("restarts must be >= 1".into());
        }
        if self.restarts > 1 && !(1..=self.epochs).contains(&self.restart_epochs) {
            return bad(format!(
                "restart_epochs must lie in [1, epochs], got {}",
                self.restart_epochs
            ));
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch < self.drop_epoch {
            self.lr_initial
        } else {
            self.lr_after_drop
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Adam moment buffers for one flat parameter vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(shape_err(params.len(), format!("{} grads, {} moments", grads.len(), state.m.len())));
    }
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
    Ok(())
}

/// How the predictor is initialised.
#[derive(Clone, Debug, PartialEq)]
pub enum InitModel {
    /// I.i.d. uniform weights in `[psi_init_low, psi_init_high)`.
    Random { hops: usize, d_in: usize, d_out: usize },
    Given(PolyGnn),
}

#[derive(Clone, Debug)]
pub struct TrainerState {
    pub cfg: TrainConfig,
    pub dist: EdgeDistribution,
    pub model: PolyGnn,
    pub adam_theta: AdamState,
    pub adam_psi: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    estimator: Option<LossEstimator>,
}

/// Draws `theta ~ U(theta_init_low, theta_init_high)` on every entry and sets
/// up the predictor.
pub fn init_run(cfg: &TrainConfig, n: usize, init: InitModel) -> Result<TrainerState> {
    init_candidate(cfg, n, init, 0)
}

/// [`init_run`] for restart candidate `k`; candidate 0 is the plain run and
/// the others draw from their own random streams.
pub fn init_candidate(cfg: &TrainConfig, n: usize, init: InitModel, k: usize) -> Result<TrainerState> {
    cfg.validate()?;
    let mut rng = cfg.rng(if k == 0 { STREAM_INIT } else { STREAM_RESTART0 + k as u64 });
    let (lo, hi) = (cfg.theta_init_low, cfg.theta_init_high);
    let theta = Array2::from_shape_simple_fn((n, n), || lo + (hi - lo) * rng.gen::<f64>());
    let dist = EdgeDistribution::trainable(theta)?;
    let model = match init {
        InitModel::Random { hops, d_in, d_out } => {
            PolyGnn::random(hops, d_in, d_out, cfg.psi_init_low, cfg.psi_init_high, &mut rng)?
        }
        InitModel::Given(m) => m,
    };
    Ok(TrainerState {
        cfg: cfg.clone(),
        adam_theta: AdamState::new(n * n),
        adam_psi: AdamState::new(model.num_params()),
        dist,
        model,
        epoch: 0,
        estimator: None,
    })
}

impl TrainerState {
    /// Pins entry `(i, j)` to `value` for the rest of training.
    pub fn freeze(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        self.dist.freeze(i, j, value)
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("dist.json"), &serde_json::to_vec_pretty(&self.dist)?)?;
        write_atomic(&dir.join("model.json"), &serde_json::to_vec_pretty(&self.model)?)?;
        Ok(())
    }

    /// Runs one epoch of mini-batch updates over the training split.
    pub fn train_epoch(&mut self, data: &Dataset, loss: &LossConfig) -> Result<f64> {
        if self.estimator.as_ref().map(|e| e.config()) != Some(loss) {
            self.estimator = Some(LossEstimator::new(loss.clone())?);
        }
        let train = data.split(Split::Train);
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let epoch = self.epoch;
        let lr = self.cfg.learning_rate(epoch);
        let mut rng = self.cfg.rng(STREAM_EPOCH0 + epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let c = &self.cfg;
        let (b1, b2, eps) = (c.adam_beta1, c.adam_beta2, c.adam_eps);
        let freeze_psi = c.freeze_psi;
        let estimator = self.estimator.as_mut().expect("set above");

        let mut value_sum = 0.0;
        let mut steps = 0usize;
        let mut batch: Vec<PairRef<'_>> = Vec::with_capacity(c.batch_size);
        for (step, chunk) in order.chunks(c.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&k| (&train[k].x, &train[k].y)));
            let est = estimator.estimate(&self.dist, &self.model, &batch, &mut rng)?;
            let diverged = |what: &str| Error::NumericalDivergence {
                epoch,
                step,
                what: what.to_string(),
            };
            if !est.value.is_finite() {
                return Err(diverged("loss value"));
            }
            if est.grad_theta.iter().any(|g| !g.is_finite()) {
                return Err(diverged("theta gradient"));
            }
            value_sum += est.value;
            steps += 1;

            let grad = est.grad_theta.as_slice().expect("standard layout");
            let adam = &mut self.adam_theta;
            let mut res = Ok(());
            self.dist.update(|theta| res = adam_step(theta, grad, adam, lr, b1, b2, eps));
            res?;

            if !freeze_psi {
                let g: Vec<f64> = est.grad_psi.iter().flat_map(|w| w.iter().copied()).collect();
                let mut p = self.model.flat_params();
                adam_step(&mut p, &g, &mut self.adam_psi, lr, b1, b2, eps)?;
                if p.iter().any(|v| !v.is_finite()) {
                    return Err(diverged("predictor weights"));
                }
                self.model.set_flat_params(&p)?;
            }
        }
        self.epoch += 1;
        Ok(value_sum / steps as f64)
    }

    /// Validation metrics; uses a fixed random stream so successive epochs
    /// are compared on common random numbers.
    pub fn evaluate(&self, data: &Dataset, split: Split, theta_star: &Array2<f64>) -> Result<EvalMetrics> {
        let (stream, n_adj) = match split {
            Split::Test => (STREAM_TEST, self.cfg.test_eval_adj),
            _ => (STREAM_VALIDATION, self.cfg.eval_adj),
        };
        let mut rng = self.cfg.rng(stream);
        let pairs = data.split(split);
        let refs: Vec<PairRef<'_>> = pairs.iter().map(|p| (&p.x, &p.y)).collect();
        let dist_value = if refs.is_empty() {
            0.0
        } else {
            LossEstimator::new(LossConfig::new(LossKind::DistMmd))?.value(&self.dist, &self.model, &refs, &mut rng)?
        };
        Ok(EvalMetrics {
            dist: dist_value,
            calibration: calibration_metrics(self.dist.theta(), theta_star)?,
            point: point_metrics(&self.dist, &self.model, pairs, n_adj, &mut rng)?,
        })
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Sampled squared MMD without the target-only term.
    pub dist: f64,
    pub calibration: Calibration,
    pub point: PointMetrics,
}

/// One row of `metrics.csv`; row 0 holds the metrics before any update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dist: f64,
    pub mae_theta: f64,
    pub max_ae_theta: f64,
    pub val_mse_y: f64,
    pub val_mae_y: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub loss: String,
    pub seed: u64,
    pub epochs: usize,
    pub mae_theta: f64,
    pub max_ae_theta: f64,
    pub test_dist: f64,
    pub test_mse_y: f64,
    pub test_mae_y: f64,
    pub test_mae_y_mean: f64,
    pub seconds: f64,
    /// Experiment-specific metrics, e.g. errors restricted to a subset of entries.
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<EpochRow>,
    pub summary: RunSummary,
}

impl RunRecord {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        write_atomic(&dir.join("summary.json"), &serde_json::to_vec_pretty(&self.summary)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(dir.join("metrics.csv"))?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<EpochRow>, _>>()?;
        let summary = serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)?;
        Ok(Self { rows, summary })
    }
}

/// Trains for the configured number of epochs, evaluating on the validation
/// split after every epoch and on the test split at the end.
pub fn train(
    state: &mut TrainerState,
    data: &Dataset,
    loss: &LossConfig,
    theta_star: &Array2<f64>,
) -> Result<RunRecord> {
    train_with(state, data, loss, theta_star, |_| {})
}

/// [`train`] with a callback invoked on every completed row.
pub fn train_with(
    state: &mut TrainerState,
    data: &Dataset,
    loss: &LossConfig,
    theta_star: &Array2<f64>,
    mut on_row: impl FnMut(&EpochRow),
) -> Result<RunRecord> {
    let start = Instant::now();
    let mut rows = Vec::with_capacity(state.cfg.epochs + 1);
    advance(state, data, loss, theta_star, state.cfg.epochs, start, &mut rows, &mut on_row)?;
    finish(state, data, loss, theta_star, start, rows)
}

/// Trains every candidate for `restart_epochs`, keeps the one with the lowest
/// value of `loss` on the validation split and finishes its run. The record
/// holds the winner's rows plus the index and score of every candidate.
pub fn train_restarts(
    candidates: Vec<TrainerState>,
    data: &Dataset,
    loss: &LossConfig,
    theta_star: &Array2<f64>,
) -> Result<(TrainerState, RunRecord)> {
    let start = Instant::now();
    let mut best: Option<(f64, usize, TrainerState, Vec<EpochRow>)> = None;
    let mut scores = Vec::with_capacity(candidates.len());
    for (k, mut state) in candidates.into_iter().enumerate() {
        let mut rows = Vec::new();
        let until = state.cfg.restart_epochs.min(state.cfg.epochs);
        advance(&mut state, data, loss, theta_star, until, start, &mut rows, &mut |_| {})?;
        let score = state.validation_objective(data, loss)?;
        log::info!("restart candidate {k}: validation {} {score:+.5}", loss.kind);
        scores.push(score);
        if best.as_ref().map_or(true, |(b, ..)| score < *b) {
            best = Some((score, k, state, rows));
        }
    }
    let (_, choice, mut state, mut rows) = best.ok_or_else(|| Error::Config("no restart candidates".into()))?;
    let epochs = state.cfg.epochs;
    advance(&mut state, data, loss, theta_star, epochs, start, &mut rows, &mut |_| {})?;
    let mut record = finish(&state, data, loss, theta_star, start, rows)?;
    record.summary.extra.insert("restart_choice".into(), choice as f64);
    for (k, s) in scores.into_iter().enumerate() {
        record.summary.extra.insert(format!("restart_score_{k}"), s);
    }
    Ok((state, record))
}

impl TrainerState {
    /// The training loss itself, evaluated on the validation split with the
    /// fixed validation stream.
    pub fn validation_objective(&self, data: &Dataset, loss: &LossConfig) -> Result<f64> {
        let pairs = data.split(Split::Validation);
        let refs: Vec<PairRef<'_>> = pairs.iter().map(|p| (&p.x, &p.y)).collect();
        if refs.is_empty() {
            return Err(Error::Config("validation split is empty".into()));
        }
        let mut rng = self.cfg.rng(STREAM_VALIDATION);
        LossEstimator::new(loss.clone())?.value(&self.dist, &self.model, &refs, &mut rng)
    }
}

#[allow(clippy::too_many_arguments)]
fn advance(
    state: &mut TrainerState,
    data: &Dataset,
    loss: &LossConfig,
    theta_star: &Array2<f64>,
    until: usize,
    start: Instant,
    rows: &mut Vec<EpochRow>,
    on_row: &mut dyn FnMut(&EpochRow),
) -> Result<()> {
    let mut push = |epoch, train_loss, m: EvalMetrics, rows: &mut Vec<EpochRow>| {
        let row = EpochRow {
            epoch,
            train_loss,
            val_dist: m.dist,
            mae_theta: m.calibration.mae,
            max_ae_theta: m.calibration.max_ae,
            val_mse_y: m.point.mse_y,
            val_mae_y: m.point.mae_y,
            seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {:>3}  loss {:+.5}  val_dist {:+.5}  mae_theta {:.4}  val_mse_y {:.4}",
            row.epoch,
            row.train_loss,
            row.val_dist,
            row.mae_theta,
            row.val_mse_y
        );
        on_row(&row);
        rows.push(row);
    };
    if state.epoch == 0 && rows.is_empty() {
        let m = state.evaluate(data, Split::Validation, theta_star)?;
        push(0, f64::NAN, m, rows);
    }
    while state.epoch < until {
        let train_loss = state.train_epoch(data, loss)?;
        let m = state.evaluate(data, Split::Validation, theta_star)?;
        push(state.epoch, train_loss, m, rows);
    }
    Ok(())
}

fn finish(
    state: &TrainerState,
    data: &Dataset,
    loss: &LossConfig,
    theta_star: &Array2<f64>,
    start: Instant,
    rows: Vec<EpochRow>,
) -> Result<RunRecord> {
    let test = state.evaluate(data, Split::Test, theta_star)?;
    let summary = RunSummary {
        loss: loss.kind.name().to_string(),
        seed: state.cfg.seed,
        epochs: state.epoch,
        mae_theta: test.calibration.mae,
        max_ae_theta: test.calibration.max_ae,
        test_dist: test.dist,
        test_mse_y: test.point.mse_y,
        test_mae_y: test.point.mae_y,
        test_mae_y_mean: test.point.mae_y_mean,
        seconds: start.elapsed().as_secs_f64(),
        extra: BTreeMap::new(),
    };
    Ok(RunRecord { rows, summary })
}
