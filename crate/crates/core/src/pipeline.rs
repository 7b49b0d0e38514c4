//! Training protocol: chronological splits, mini-batch Adam with early
//! stopping and best-epoch restoration, MSE/MAE evaluation, multi-seed
//! averaging, the five-variant ablation and the lookback sweep.
//!
//! Every run is a pure function of (dataset, configs, seed). Multi-run
//! drivers fan out over [`crate::runner::map_jobs`], which preserves input
//! order, so reports are byte-identical with or without parallelism.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, TextedSeries};
use crate::error::{Error, Result};
use crate::hashing;
use crate::model::{prepare_window, FrozenAssets, Model, ModelConfig, PreparedWindow, Variant};
use crate::optim::Adam;
use crate::runner;
use crate::tape::Tape;

fn default_lr() -> f64 { 0.001 }
fn default_max_epochs() -> usize { 20 }
fn default_patience() -> usize { 3 }
fn default_seeds() -> Vec<u64> { vec![1, 2, 3] }
fn default_batch_size() -> usize { 16 }
fn default_split() -> [f64; 3] { [0.7, 0.2, 0.1] }
fn default_lookback() -> usize { 15 }
fn default_horizon() -> usize { 7 }
fn default_variant() -> Variant { Variant::Full }

/// Protocol knobs; defaults follow the fixed protocol (lr 0.001, 20
/// epochs, patience 3, 7:2:1 split, three seeds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    #[serde(default = "default_lookback")]
    pub lookback: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_variant")]
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            violations.push(format!("learning_rate {} must be finite and >= 0", self.learning_rate));
        }
        if self.max_epochs == 0 {
            violations.push("max_epochs must be >= 1".into());
        }
        if self.patience == 0 {
            violations.push("patience must be >= 1".into());
        } else if self.patience >= self.max_epochs {
            violations.push(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if self.seeds.is_empty() {
            violations.push("at least one seed is required".into());
        }
        if self.batch_size == 0 {
            violations.push("batch_size must be >= 1".into());
        }
        let sum: f64 = self.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.split.iter().any(|&r| r <= 0.0) {
            violations.push(format!("split {:?} must be positive and sum to 1", self.split));
        }
        if self.lookback < 2 {
            violations.push(format!("lookback {} must be >= 2", self.lookback));
        }
        if self.horizon == 0 {
            violations.push("horizon must be >= 1".into());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { violations })
        }
    }
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    NoImprovement,
    Stop,
}

/// Strict-improvement early stopping: training halts once the validation
/// loss has failed to improve for `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    streak: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: None, streak: 0 }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        match self.best {
            Some((_, best_loss)) if val_loss >= best_loss => {
                self.streak += 1;
                if self.streak >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::NoImprovement
                }
            }
            _ => {
                self.best = Some((epoch, val_loss));
                self.streak = 0;
                StopDecision::Improved
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Prepared datasets
// ---------------------------------------------------------------------------

/// The three segments with every frozen per-window quantity precomputed.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub train: Vec<PreparedWindow>,
    pub validation: Vec<PreparedWindow>,
    pub test: Vec<PreparedWindow>,
    pub lookback: usize,
    pub horizon: usize,
}

/// Splits chronologically, forms stride-1 windows inside each segment and
/// precomputes prompts, summary encodings and RevIN statistics.
pub fn prepare_dataset(
    series: &TextedSeries,
    assets: &FrozenAssets,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<PreparedDataset> {
    train_cfg.validate()?;
    series.validate()?;
    let split = data::chronological_split(series, train_cfg.split, train_cfg.lookback, train_cfg.horizon)?;
    let prep = |segment: &[data::Observation]| -> Result<Vec<PreparedWindow>> {
        data::make_windows(segment, train_cfg.lookback, train_cfg.horizon)?
            .iter()
            .map(|w| prepare_window(assets, model_cfg, train_cfg.lookback, train_cfg.horizon, w))
            .collect()
    };
    Ok(PreparedDataset {
        train: prep(&split.train)?,
        validation: prep(&split.validation)?,
        test: prep(&split.test)?,
        lookback: train_cfg.lookback,
        horizon: train_cfg.horizon,
    })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    /// Mean training loss per epoch (denormalized scale).
    pub train_curve: Vec<f64>,
    /// Validation MSE per epoch.
    pub val_curve: Vec<f64>,
    /// 1-based epoch whose weights were restored.
    pub best_epoch: usize,
    /// Last epoch that actually ran.
    pub stopped_epoch: usize,
    pub test_mse: f64,
    pub test_mae: f64,
}

/// Multi-seed run summary; the averages are the arithmetic means of the
/// per-seed metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub variant: Variant,
    pub lookback: usize,
    pub horizon: usize,
    pub prompt_sample: String,
    pub per_seed: Vec<SeedReport>,
    pub avg_mse: f64,
    pub avg_mae: f64,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
}

/// One trained run: its report, the restored model and which trainable
/// parameters ever received a nonzero gradient.
pub struct TrainOutcome {
    pub report: SeedReport,
    pub model: Model,
    pub grad_activity: BTreeMap<String, bool>,
}

// ---------------------------------------------------------------------------
// Training and evaluation
// ---------------------------------------------------------------------------

/// Denormalized-scale (MSE, MAE) over a window set.
pub fn evaluate(model: &Model, windows: &[PreparedWindow]) -> Result<(f64, f64)> {
    if windows.is_empty() {
        return Err(Error::Contract("evaluate called with an empty window list".into()));
    }
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut count = 0usize;
    for window in windows {
        let pred = model.forward_window(window)?;
        for (p, t) in pred.iter().zip(&window.targets) {
            let e = p - t;
            sq += e * e;
            abs += e.abs();
            count += 1;
        }
    }
    Ok((sq / count as f64, abs / count as f64))
}

/// Trains one (variant, seed) model on a prepared dataset: seeded shuffled
/// mini-batches, Adam over the trainable partition, strict-improvement
/// early stopping with best-epoch restoration, then test metrics.
pub fn train_single(
    prepared: &PreparedDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    assets: Arc<FrozenAssets>,
    variant: Variant,
    seed: u64,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    if prepared.train.is_empty() || prepared.validation.is_empty() || prepared.test.is_empty() {
        return Err(Error::InsufficientData("every split segment needs at least one window".into()));
    }
    let mut model = Model::build_with_assets(
        model_cfg.clone(),
        assets,
        prepared.lookback,
        prepared.horizon,
        variant,
        seed,
    )?;
    let mut adam = Adam::new(train_cfg.learning_rate);
    let mut stopper = EarlyStopping::new(train_cfg.patience);
    let mut shuffle_rng = ChaCha20Rng::seed_from_u64(hashing::mix(seed) ^ hashing::hash_str("shuffle"));
    let mut grad_activity: BTreeMap<String, bool> = model
        .store
        .iter()
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), false))
        .collect();

    let mut train_curve = Vec::new();
    let mut val_curve = Vec::new();
    let mut best_snapshot = model.store.snapshot_trainable();
    let mut best_epoch = 0usize;
    let mut stopped_epoch = 0usize;

    let n_train = prepared.train.len();
    let mut order: Vec<usize> = (0..n_train).collect();

    for epoch in 1..=train_cfg.max_epochs {
        stopped_epoch = epoch;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(train_cfg.batch_size).enumerate() {
            model.store.zero_grads();
            let mut tape = Tape::new();
            let binds = model.bind(&mut tape)?;
            let mut total = None;
            for &wi in batch {
                let window = &prepared.train[wi];
                let pred = model.forward_prepared(&mut tape, &binds, window)?;
                let target = tape.constant(vec![window.targets.len()], window.targets.clone())?;
                let loss = tape.mse_loss(pred, target)?;
                total = Some(match total {
                    None => loss,
                    Some(acc) => tape.add(acc, loss)?,
                });
            }
            let total = total.expect("batch is never empty");
            let mean = tape.mul_const(total, 1.0 / batch.len() as f64)?;
            let loss_value = tape.data(mean)[0];
            if !loss_value.is_finite() {
                return Err(Error::Divergence { epoch, batch: batch_idx });
            }
            tape.backward(mean)?;
            tape.grads_into(&mut model.store)?;
            for p in model.store.iter() {
                if p.trainable {
                    if let Some(g) = p.tensor.grad() {
                        if g.iter().any(|&v| v != 0.0) {
                            grad_activity.insert(p.name.clone(), true);
                        }
                    }
                }
            }
            adam.step(&mut model.store)?;
            epoch_loss += loss_value * batch.len() as f64;
        }
        train_curve.push(epoch_loss / n_train as f64);

        let (val_mse, _) = evaluate(&model, &prepared.validation)?;
        val_curve.push(val_mse);
        match stopper.observe(epoch, val_mse) {
            StopDecision::Improved => {
                best_snapshot = model.store.snapshot_trainable();
                best_epoch = epoch;
            }
            StopDecision::NoImprovement => {}
            StopDecision::Stop => break,
        }
    }

    model.store.restore_trainable(&best_snapshot)?;
    let (test_mse, test_mae) = evaluate(&model, &prepared.test)?;
    Ok(TrainOutcome {
        report: SeedReport {
            seed,
            train_curve,
            val_curve,
            best_epoch,
            stopped_epoch,
            test_mse,
            test_mae,
        },
        model,
        grad_activity,
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let collected: Vec<f64> = values.collect();
    collected.iter().sum::<f64>() / collected.len() as f64
}

fn assemble_run_report(
    variant: Variant,
    prepared: &PreparedDataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    outcomes: &[TrainOutcome],
) -> RunReport {
    RunReport {
        variant,
        lookback: prepared.lookback,
        horizon: prepared.horizon,
        prompt_sample: prepared
            .train
            .first()
            .map(|w| w.prompt_text.clone())
            .unwrap_or_default(),
        per_seed: outcomes.iter().map(|o| o.report.clone()).collect(),
        avg_mse: mean(outcomes.iter().map(|o| o.report.test_mse)),
        avg_mae: mean(outcomes.iter().map(|o| o.report.test_mae)),
        model_config: model_cfg.clone(),
        train_config: train_cfg.clone(),
    }
}

/// Trains the configured variant across all seeds (in parallel when
/// enabled) and averages the metrics.
pub fn train_multi(
    series: &TextedSeries,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(RunReport, Vec<TrainOutcome>)> {
    let assets = Arc::new(FrozenAssets::new(model_cfg)?);
    let prepared = Arc::new(prepare_dataset(series, &assets, model_cfg, train_cfg)?);
    let results = runner::map_jobs(&train_cfg.seeds, |&seed| {
        train_single(&prepared, model_cfg, train_cfg, assets.clone(), train_cfg.variant, seed)
    });
    let mut outcomes = Vec::with_capacity(results.len());
    for r in results {
        outcomes.push(r?);
    }
    let report = assemble_run_report(train_cfg.variant, &prepared, model_cfg, train_cfg, &outcomes);
    Ok((report, outcomes))
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

/// Results for all five variants under identical seeds, data order and
/// hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub lookback: usize,
    pub horizon: usize,
    pub rows: Vec<RunReport>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&RunReport> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Trains FULL, SEP, STP, DP-NTSA and SPET with shared frozen assets,
/// identical window sequences and identical seeds.
pub fn run_ablation(
    series: &TextedSeries,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<AblationReport> {
    let assets = Arc::new(FrozenAssets::new(model_cfg)?);
    let prepared = Arc::new(prepare_dataset(series, &assets, model_cfg, train_cfg)?);
    let jobs: Vec<(Variant, u64)> = Variant::ALL
        .iter()
        .flat_map(|&v| train_cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results = runner::map_jobs(&jobs, |&(variant, seed)| {
        train_single(&prepared, model_cfg, train_cfg, assets.clone(), variant, seed)
    });
    let mut iter = results.into_iter();
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let mut outcomes = Vec::with_capacity(train_cfg.seeds.len());
        for _ in 0..train_cfg.seeds.len() {
            outcomes.push(iter.next().expect("one result per job")?);
        }
        rows.push(assemble_run_report(variant, &prepared, model_cfg, train_cfg, &outcomes));
    }
    Ok(AblationReport { lookback: train_cfg.lookback, horizon: train_cfg.horizon, rows })
}

/// Aligned plain-text table: variant columns, metric rows.
pub fn render_ablation_table(report: &AblationReport) -> String {
    let mut out = String::new();
    let width = 12;
    out.push_str(&format!("{:<12}", "metric"));
    for row in &report.rows {
        out.push_str(&format!("{:>width$}", row.variant.to_string()));
    }
    out.push('\n');
    out.push_str(&format!("{:<12}", "avg MSE"));
    for row in &report.rows {
        out.push_str(&format!("{:>width$.6}", row.avg_mse));
    }
    out.push('\n');
    out.push_str(&format!("{:<12}", "avg MAE"));
    for row in &report.rows {
        out.push_str(&format!("{:>width$.6}", row.avg_mae));
    }
    out.push('\n');
    let seeds: Vec<u64> = report
        .rows
        .first()
        .map(|r| r.per_seed.iter().map(|s| s.seed).collect())
        .unwrap_or_default();
    for (i, seed) in seeds.iter().enumerate() {
        out.push_str(&format!("{:<12}", format!("seed {seed} MSE")));
        for row in &report.rows {
            out.push_str(&format!("{:>width$.6}", row.per_seed[i].test_mse));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Lookback sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lookback: usize,
    pub avg_mse: f64,
    pub avg_mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub horizon: usize,
    pub rows: Vec<SweepRow>,
}

/// Trains FULL at each lookback (ascending) with the configured seeds.
pub fn sweep_lookback(
    series: &TextedSeries,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    lookbacks: &[usize],
) -> Result<SweepReport> {
    if lookbacks.is_empty() {
        return Err(Error::Config { violations: vec!["at least one lookback is required".into()] });
    }
    let mut sorted: Vec<usize> = lookbacks.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for &l in &sorted {
        if l < model_cfg.patch_len + 1 {
            return Err(Error::Config {
                violations: vec![format!(
                    "lookback {l} must be at least patch_len + 1 = {}",
                    model_cfg.patch_len + 1
                )],
            });
        }
    }
    let assets = Arc::new(FrozenAssets::new(model_cfg)?);
    let mut rows = Vec::with_capacity(sorted.len());
    for lookback in sorted {
        let cfg = TrainConfig { lookback, variant: Variant::Full, ..train_cfg.clone() };
        let prepared = Arc::new(prepare_dataset(series, &assets, model_cfg, &cfg)?);
        let results = runner::map_jobs(&cfg.seeds, |&seed| {
            train_single(&prepared, model_cfg, &cfg, assets.clone(), Variant::Full, seed)
        });
        let mut outcomes = Vec::with_capacity(results.len());
        for r in results {
            outcomes.push(r?);
        }
        rows.push(SweepRow {
            lookback,
            avg_mse: mean(outcomes.iter().map(|o| o.report.test_mse)),
            avg_mae: mean(outcomes.iter().map(|o| o.report.test_mae)),
        });
    }
    Ok(SweepReport { horizon: train_cfg.horizon, rows })
}

/// Test-set predictions as CSV: window start timestamp, horizon step,
/// prediction, target.
pub fn predictions_csv(model: &Model, windows: &[PreparedWindow]) -> Result<String> {
    let mut out = String::from("start_timestamp,horizon_step,prediction,target\n");
    for window in windows {
        let pred = model.forward_window(window)?;
        for (step, (p, t)) in pred.iter().zip(&window.targets).enumerate() {
            out.push_str(&format!("{},{},{},{}\n", window.start_timestamp, step + 1, p, t));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_spec_sequence() {
        // losses [5, 4, 4.1, 4.2, 4.3] with patience 3: stop after epoch 5,
        // best weights from epoch 2.
        let mut stopper = EarlyStopping::new(3);
        assert_eq!(stopper.observe(1, 5.0), StopDecision::Improved);
        assert_eq!(stopper.observe(2, 4.0), StopDecision::Improved);
        assert_eq!(stopper.observe(3, 4.1), StopDecision::NoImprovement);
        assert_eq!(stopper.observe(4, 4.2), StopDecision::NoImprovement);
        assert_eq!(stopper.observe(5, 4.3), StopDecision::Stop);
        assert_eq!(stopper.best_epoch(), Some(2));
    }

    #[test]
    fn early_stopping_requires_strict_improvement() {
        let mut stopper = EarlyStopping::new(2);
        assert_eq!(stopper.observe(1, 1.0), StopDecision::Improved);
        // equal loss is NOT an improvement
        assert_eq!(stopper.observe(2, 1.0), StopDecision::NoImprovement);
        assert_eq!(stopper.observe(3, 1.0), StopDecision::Stop);
        assert_eq!(stopper.best_epoch(), Some(1));
    }

    #[test]
    fn streak_resets_on_improvement() {
        let mut stopper = EarlyStopping::new(2);
        stopper.observe(1, 5.0);
        assert_eq!(stopper.observe(2, 6.0), StopDecision::NoImprovement);
        assert_eq!(stopper.observe(3, 4.0), StopDecision::Improved);
        assert_eq!(stopper.observe(4, 4.5), StopDecision::NoImprovement);
        assert_eq!(stopper.observe(5, 4.4), StopDecision::Stop);
        assert_eq!(stopper.best_epoch(), Some(3));
    }

    #[test]
    fn config_validation_collects_all_violations() {
        let cfg = TrainConfig {
            learning_rate: f64::NAN,
            patience: 30,
            max_epochs: 20,
            batch_size: 0,
            split: [0.5, 0.2, 0.1],
            ..TrainConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        let msg = err.to_string();
        for needle in ["learning_rate", "patience", "batch_size", "split"] {
            assert!(msg.contains(needle), "missing {needle} in {msg}");
        }
    }

    #[test]
    fn strict_config_rejects_unknown_keys() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"learning_rte": 0.1}"#).unwrap_err();
        assert!(err.to_string().contains("learning_rte"));
    }
}
