//! Command implementations behind the `dualprompt` binary, exposed as a
//! library so integration tests can drive them directly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dualprompt_core::data::{self, Manifest, ManifestEntry};
use dualprompt_core::datagen::{self, GeneratorSpec};
use dualprompt_core::error::{Error, Result};
use dualprompt_core::gradcheck;
use dualprompt_core::model::{Model, ModelConfig};
use dualprompt_core::pipeline::{self, TrainConfig};

/// Environment variable overriding the configured output directory.
pub const OUT_DIR_ENV: &str = "DUALPROMPT_OUT_DIR";

/// On-disk run configuration. Unknown keys are rejected so typos fail
/// loudly instead of silently falling back to defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub dataset: PathBuf,
    #[serde(default)]
    pub series_id: Option<String>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Also dump test-set predictions as CSV after training.
    #[serde(default)]
    pub dump_predictions: bool,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config {
            violations: vec![format!("{}: {e}", path.display())],
        })?;
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Collects every violated field at once.
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.dataset.as_os_str().is_empty() {
            violations.push("dataset: path must not be empty".to_string());
        } else if !self.dataset.exists() {
            violations.push(format!("dataset: file {} does not exist", self.dataset.display()));
        }
        if self.output_dir.as_os_str().is_empty() {
            violations.push("output_dir: path must not be empty".to_string());
        }
        if let Err(Error::Config { violations: v }) = self.model.validate() {
            violations.extend(v.into_iter().map(|m| format!("model: {m}")));
        }
        if let Err(Error::Config { violations: v }) = self.train.validate() {
            violations.extend(v.into_iter().map(|m| format!("train: {m}")));
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { violations })
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
    write_text(path, &(text + "\n"))
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// Writes either the canonical four-dataset suite or a single series from
/// a generator-spec JSON, plus a manifest.
pub fn cmd_generate(spec_path: Option<&Path>, suite: bool, out_dir: &Path) -> Result<()> {
    if spec_path.is_some() == suite {
        return Err(Error::Config {
            violations: vec!["exactly one of --spec and --suite is required".into()],
        });
    }
    ensure_dir(out_dir)?;
    let specs: Vec<GeneratorSpec> = if suite {
        datagen::suite_specs()
    } else {
        let path = spec_path.expect("spec path present");
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let spec: GeneratorSpec = serde_json::from_str(&text).map_err(|e| Error::Config {
            violations: vec![format!("{}: {e}", path.display())],
        })?;
        vec![spec]
    };
    let mut entries = Vec::with_capacity(specs.len());
    for spec in &specs {
        let series = datagen::generate(spec)?;
        let file = format!("{}.jsonl", series.series_id);
        data::save_series(&series, &out_dir.join(&file))?;
        entries.push(ManifestEntry {
            id: series.series_id.clone(),
            file,
            frequency: series.frequency.clone(),
        });
        eprintln!("wrote {} ({} observations)", out_dir.join(format!("{}.jsonl", series.series_id)).display(), series.len());
    }
    data::save_manifest(&Manifest { series: entries }, &out_dir.join("manifest.json"))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// train / evaluate
// ---------------------------------------------------------------------------

/// Trains every configured seed, writes the run report, one checkpoint per
/// seed and (optionally) test-set prediction CSVs.
pub fn cmd_train(config_path: &Path) -> Result<()> {
    let cfg = RunConfigFile::load(config_path)?;
    ensure_dir(&cfg.output_dir)?;
    let series = data::load_dataset(&cfg.dataset, cfg.series_id.as_deref())?;
    let (report, outcomes) = pipeline::train_multi(&series, &cfg.model, &cfg.train)?;
    write_json(&cfg.output_dir.join("train-report.json"), &report)?;
    for outcome in &outcomes {
        let seed = outcome.report.seed;
        outcome.model.save(&cfg.output_dir.join(format!("checkpoint-seed{seed}.json")))?;
        if cfg.dump_predictions {
            let assets = outcome.model.assets.clone();
            let prepared = pipeline::prepare_dataset(&series, &assets, &cfg.model, &cfg.train)?;
            let csv = pipeline::predictions_csv(&outcome.model, &prepared.test)?;
            write_text(&cfg.output_dir.join(format!("predictions-seed{seed}.csv")), &csv)?;
        }
    }
    eprintln!(
        "trained {} seed(s): avg test MSE {:.6}, avg test MAE {:.6}",
        report.per_seed.len(),
        report.avg_mse,
        report.avg_mae
    );
    Ok(())
}

/// Metrics reported by `evaluate`.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub checkpoint: PathBuf,
    pub variant: dualprompt_core::model::Variant,
    pub seed: u64,
    pub test_mse: f64,
    pub test_mae: f64,
}

/// Loads a checkpoint, rebuilds the configured test split and reports
/// test MSE/MAE.
pub fn cmd_evaluate(config_path: &Path, checkpoint: &Path) -> Result<EvaluationReport> {
    let cfg = RunConfigFile::load(config_path)?;
    ensure_dir(&cfg.output_dir)?;
    let model = Model::load(checkpoint)?;
    if model.lookback != cfg.train.lookback || model.horizon != cfg.train.horizon {
        return Err(Error::Config {
            violations: vec![format!(
                "checkpoint was trained for lookback {} / horizon {}, config says {} / {}",
                model.lookback, model.horizon, cfg.train.lookback, cfg.train.horizon
            )],
        });
    }
    let series = data::load_dataset(&cfg.dataset, cfg.series_id.as_deref())?;
    let prepared = pipeline::prepare_dataset(&series, &model.assets, &model.config, &cfg.train)?;
    let (test_mse, test_mae) = pipeline::evaluate(&model, &prepared.test)?;
    let report = EvaluationReport {
        checkpoint: checkpoint.to_path_buf(),
        variant: model.variant,
        seed: model.run_seed,
        test_mse,
        test_mae,
    };
    write_json(&cfg.output_dir.join("evaluation.json"), &report)?;
    eprintln!("test MSE {test_mse:.6}, test MAE {test_mae:.6}");
    Ok(report)
}

// ---------------------------------------------------------------------------
// ablate / sweep / gradcheck
// ---------------------------------------------------------------------------

/// Runs all five variants and writes the comparative report as JSON plus
/// an aligned plain-text table.
pub fn cmd_ablate(config_path: &Path) -> Result<()> {
    let cfg = RunConfigFile::load(config_path)?;
    ensure_dir(&cfg.output_dir)?;
    let series = data::load_dataset(&cfg.dataset, cfg.series_id.as_deref())?;
    let report = pipeline::run_ablation(&series, &cfg.model, &cfg.train)?;
    write_json(&cfg.output_dir.join("ablation-report.json"), &report)?;
    let table = pipeline::render_ablation_table(&report);
    write_text(&cfg.output_dir.join("ablation-table.txt"), &table)?;
    eprint!("{table}");
    Ok(())
}

/// Trains FULL at each lookback and writes (lookback, averaged MSE) rows
/// as JSON and CSV.
pub fn cmd_sweep_lookback(config_path: &Path, lookbacks: &[usize]) -> Result<()> {
    let cfg = RunConfigFile::load(config_path)?;
    ensure_dir(&cfg.output_dir)?;
    let series = data::load_dataset(&cfg.dataset, cfg.series_id.as_deref())?;
    let report = pipeline::sweep_lookback(&series, &cfg.model, &cfg.train, lookbacks)?;
    write_json(&cfg.output_dir.join("lookback-sweep.json"), &report)?;
    let mut csv = String::from("lookback,avg_mse,avg_mae\n");
    for row in &report.rows {
        csv.push_str(&format!("{},{},{}\n", row.lookback, row.avg_mse, row.avg_mae));
    }
    write_text(&cfg.output_dir.join("lookback-sweep.csv"), &csv)?;
    for row in &report.rows {
        eprintln!("lookback {:>3}: avg MSE {:.6}, avg MAE {:.6}", row.lookback, row.avg_mse);
    }
    Ok(())
}

/// Runs the finite-difference suite; prints one line per check and errors
/// if any check exceeds its tolerance.
pub fn cmd_gradcheck() -> Result<()> {
    let mut failed = Vec::new();
    for check in gradcheck::standard_suite() {
        let result = check.execute()?;
        println!(
            "{:<24} max_rel_err {:>12.3e}  tolerance {:>8.0e}  {}",
            result.name,
            result.max_rel_err,
            result.tolerance,
            if result.passed() { "PASS" } else { "FAIL" }
        );
        if !result.passed() {
            failed.push(result.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Contract(format!("gradient checks failed: {failed:?}")))
    }
}
