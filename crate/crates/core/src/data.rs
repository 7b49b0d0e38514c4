//! Textual-numerical series, JSONL persistence, chronological splitting
//! and sliding-window construction.
//!
//! On disk a series is one JSON object per line: `{"t": "...", "x": ...,
//! "s": "..."}` with ISO-8601 date timestamps. A manifest JSON lists the
//! series files of a dataset directory together with frequency labels.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One timestamped observation: a numeric value and its textual summary
/// (possibly empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: String,
    pub x: f64,
    pub s: String,
}

/// A textual-numerical time series with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct TextedSeries {
    pub series_id: String,
    pub frequency: String,
    pub observations: Vec<Observation>,
}

fn parse_date(t: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(t, "%Y-%m-%d")
        .map_err(|e| Error::Dataset(format!("timestamp {t:?} is not an ISO-8601 date: {e}")))
}

impl TextedSeries {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Checks strictly increasing timestamps and finite values.
    pub fn validate(&self) -> Result<()> {
        let mut prev: Option<NaiveDate> = None;
        for obs in &self.observations {
            let date = parse_date(&obs.t)?;
            if let Some(p) = prev {
                if date <= p {
                    return Err(Error::Dataset(format!(
                        "timestamps must be strictly increasing; {p} is followed by {date} in series {:?}",
                        self.series_id
                    )));
                }
            }
            if !obs.x.is_finite() {
                return Err(Error::Dataset(format!(
                    "non-finite value at {} in series {:?}",
                    obs.t, self.series_id
                )));
            }
            prev = Some(date);
        }
        Ok(())
    }
}

/// One supervised sample: L aligned (value, summary) inputs and the T
/// values that immediately follow them.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub values: Vec<f64>,
    pub summaries: Vec<String>,
    pub targets: Vec<f64>,
    pub start_timestamp: String,
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub frequency: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub series: Vec<ManifestEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

/// Reads a JSONL series file. Series id defaults to the file stem.
pub fn load_series(path: &Path, id: Option<&str>, frequency: Option<&str>) -> Result<TextedSeries> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut observations = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let obs: Observation = serde_json::from_str(line).map_err(|e| Error::Dataset(format!(
            "{}:{}: {e}",
            path.display(),
            lineno + 1
        )))?;
        observations.push(obs);
    }
    let series = TextedSeries {
        series_id: id
            .map(str::to_string)
            .unwrap_or_else(|| path.file_stem().and_then(|s| s.to_str()).unwrap_or("series").to_string()),
        frequency: frequency.unwrap_or("daily").to_string(),
        observations,
    };
    series.validate()?;
    Ok(series)
}

/// Writes a series as JSONL, one observation per line.
pub fn save_series(series: &TextedSeries, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(io_err(path))?;
        }
    }
    let mut out = Vec::new();
    for obs in &series.observations {
        serde_json::to_writer(&mut out, obs)
            .map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(io_err(path))?;
    file.write_all(&out).map_err(io_err(path))?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Loads a dataset given either a JSONL series file or a manifest JSON;
/// with a manifest, `series_id` selects the entry (first entry otherwise).
pub fn load_dataset(path: &Path, series_id: Option<&str>) -> Result<TextedSeries> {
    if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
        return load_series(path, series_id, None);
    }
    let manifest = load_manifest(path)?;
    let entry = match series_id {
        Some(id) => manifest
            .series
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::Dataset(format!("manifest has no series with id {id:?}")))?,
        None => manifest
            .series
            .first()
            .ok_or_else(|| Error::Dataset("manifest lists no series".into()))?,
    };
    let dir = path.parent().map(PathBuf::from).unwrap_or_default();
    load_series(&dir.join(&entry.file), Some(&entry.id), Some(&entry.frequency))
}

// ---------------------------------------------------------------------------
// Splitting and windowing
// ---------------------------------------------------------------------------

/// Time-ordered train/validation/test segments. Windows are always formed
/// strictly within one segment, so no sample straddles a boundary.
#[derive(Debug, Clone)]
pub struct SplitSegments {
    pub train: Vec<Observation>,
    pub validation: Vec<Observation>,
    pub test: Vec<Observation>,
}

/// Splits by time order with boundary indices by floor: the first
/// `ratio[0]` fraction trains, the next `ratio[1]` validates, the rest
/// tests. Errors if any segment is too short for a single (L, T) window.
pub fn chronological_split(
    series: &TextedSeries,
    ratio: [f64; 3],
    lookback: usize,
    horizon: usize,
) -> Result<SplitSegments> {
    let sum: f64 = ratio.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratio.iter().any(|&r| r <= 0.0) {
        return Err(Error::Config {
            violations: vec![format!("split ratio {ratio:?} must be positive and sum to 1")],
        });
    }
    let n = series.len();
    let n_train = (n as f64 * ratio[0]).floor() as usize;
    let n_val = (n as f64 * ratio[1]).floor() as usize;
    let train = series.observations[..n_train].to_vec();
    let validation = series.observations[n_train..n_train + n_val].to_vec();
    let test = series.observations[n_train + n_val..].to_vec();
    let min_len = lookback + horizon;
    for (name, segment) in [("train", &train), ("validation", &validation), ("test", &test)] {
        if segment.len() < min_len {
            return Err(Error::InsufficientData(format!(
                "{name} segment has {} observations but one window needs {min_len}",
                segment.len()
            )));
        }
    }
    Ok(SplitSegments { train, validation, test })
}

/// Stride-1 sliding windows: inputs cover [i, i+L), targets [i+L, i+L+T).
pub fn make_windows(segment: &[Observation], lookback: usize, horizon: usize) -> Result<Vec<WindowSample>> {
    if segment.len() < lookback + horizon {
        return Err(Error::InsufficientData(format!(
            "segment has {} observations but one window needs {}",
            segment.len(),
            lookback + horizon
        )));
    }
    let count = segment.len() - lookback - horizon + 1;
    let mut windows = Vec::with_capacity(count);
    for start in 0..count {
        let inputs = &segment[start..start + lookback];
        let targets = &segment[start + lookback..start + lookback + horizon];
        windows.push(WindowSample {
            values: inputs.iter().map(|o| o.x).collect(),
            summaries: inputs.iter().map(|o| o.s.clone()).collect(),
            targets: targets.iter().map(|o| o.x).collect(),
            start_timestamp: inputs[0].t.clone(),
        });
    }
    Ok(windows)
}
