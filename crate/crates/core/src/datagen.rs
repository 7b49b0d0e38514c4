//! Deterministic synthetic textual-numerical series.
//!
//! Each series is seasonal + trend + AR(1) noise plus event shocks whose
//! impact starts one step AFTER the event's timestamp and decays linearly
//! to zero over the following `event_horizon` steps. The summary at an
//! event timestamp announces the shock before it shows up numerically, so
//! text genuinely leads the numbers; event placement is independent of
//! past values.
//!
//! Noise, event placement and phrase choice draw from separate seeded
//! streams, so regenerating with a different event rate leaves the noise
//! path untouched; the difference between two such runs is exactly the sum
//! of the event impacts.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Observation, TextedSeries};
use crate::error::{Error, Result};
use crate::hashing;

fn default_name() -> String {
    "synthetic".into()
}

/// Full recipe for one synthetic series; generation is a pure function of
/// this struct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    #[serde(default = "default_name")]
    pub name: String,
    pub length: usize,
    /// AR(1) coefficient, |phi| < 1.
    pub ar_coeff: f64,
    /// 0 disables seasonality.
    #[serde(default)]
    pub seasonal_period: usize,
    #[serde(default)]
    pub seasonal_amplitude: f64,
    pub noise_std: f64,
    #[serde(default)]
    pub trend_slope: f64,
    /// Probability of an event at each timestamp, in [0, 1).
    pub event_rate: f64,
    #[serde(default)]
    pub event_impact: f64,
    /// Decay horizon h: the shock reaches zero h+1 steps after the event.
    #[serde(default = "default_event_horizon")]
    pub event_horizon: usize,
    #[serde(default = "default_event_vocab")]
    pub event_vocab: Vec<String>,
    #[serde(default = "default_neutral_vocab")]
    pub neutral_vocab: Vec<String>,
    pub seed: u64,
}

fn default_event_horizon() -> usize {
    5
}

fn default_event_vocab() -> Vec<String> {
    ["flood", "strike", "outage", "merger", "storm"]
        .map(String::from)
        .to_vec()
}

fn default_neutral_vocab() -> Vec<String> {
    [
        "calm markets today",
        "routine operations continue",
        "no notable activity",
        "steady conditions reported",
        "quiet session overall",
    ]
    .map(String::from)
    .to_vec()
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.length == 0 {
            violations.push("length must be >= 1".to_string());
        }
        if self.ar_coeff.abs() >= 1.0 {
            violations.push(format!("AR coefficient {} must be in (-1, 1)", self.ar_coeff));
        }
        if !(0.0..1.0).contains(&self.event_rate) {
            violations.push(format!("event rate {} must be in [0, 1)", self.event_rate));
        }
        if self.noise_std < 0.0 {
            violations.push("noise std must be non-negative".to_string());
        }
        if self.event_horizon == 0 {
            violations.push("event horizon must be >= 1".to_string());
        }
        if self.event_vocab.is_empty() {
            violations.push("event vocabulary must not be empty".to_string());
        }
        if self.neutral_vocab.is_empty() {
            violations.push("neutral vocabulary must not be empty".to_string());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { violations })
        }
    }
}

fn stream(seed: u64, label: &str) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(hashing::mix(seed) ^ hashing::hash_str(label))
}

/// Standard normal via Box-Muller; always consumes exactly two uniforms.
fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Generates the series together with the per-timestamp event flags.
pub fn generate_flagged(spec: &GeneratorSpec) -> Result<(TextedSeries, Vec<bool>)> {
    spec.validate()?;
    let n = spec.length;

    let mut rng_events = stream(spec.seed, "events");
    let mut rng_noise = stream(spec.seed, "noise");
    let mut rng_text = stream(spec.seed, "text");

    let flags: Vec<bool> = (0..n).map(|_| rng_events.gen::<f64>() < spec.event_rate).collect();

    // AR(1) noise; the two uniform draws happen even when std is zero so
    // the stream stays aligned across spec tweaks.
    let mut ar = vec![0.0; n];
    let mut prev = 0.0;
    for slot in ar.iter_mut() {
        let z = standard_normal(&mut rng_noise);
        prev = spec.ar_coeff * prev + spec.noise_std * z;
        *slot = prev;
    }

    // Event shock at t from an event at tau: impact * (1 - (t-tau-1)/h)
    // for 1 <= t-tau <= h.
    let mut shock = vec![0.0; n];
    for (tau, &flag) in flags.iter().enumerate() {
        if !flag {
            continue;
        }
        for k in 1..=spec.event_horizon {
            if tau + k < n {
                let decay = 1.0 - (k as f64 - 1.0) / spec.event_horizon as f64;
                shock[tau + k] += spec.event_impact * decay;
            }
        }
    }

    let start = NaiveDate::from_ymd_opt(2020, 1, 1).expect("valid epoch");
    let mut observations = Vec::with_capacity(n);
    for t in 0..n {
        let seasonal = if spec.seasonal_period > 0 {
            spec.seasonal_amplitude
                * (std::f64::consts::TAU * t as f64 / spec.seasonal_period as f64).sin()
        } else {
            0.0
        };
        let x = spec.trend_slope * t as f64 + seasonal + ar[t] + shock[t];
        // Both indices are drawn every step so the text stream stays
        // aligned whether or not an event fires.
        let event_idx = rng_text.gen_range(0..spec.event_vocab.len());
        let neutral_idx = rng_text.gen_range(0..spec.neutral_vocab.len());
        let s = if flags[t] {
            format!("{} announced, expect surge", spec.event_vocab[event_idx])
        } else {
            spec.neutral_vocab[neutral_idx].clone()
        };
        observations.push(Observation {
            t: (start + chrono::Duration::days(t as i64)).format("%Y-%m-%d").to_string(),
            x,
            s,
        });
    }
    let series = TextedSeries {
        series_id: spec.name.clone(),
        frequency: "daily".into(),
        observations,
    };
    Ok((series, flags))
}

/// Generates one synthetic series.
pub fn generate(spec: &GeneratorSpec) -> Result<TextedSeries> {
    generate_flagged(spec).map(|(series, _)| series)
}

/// The four canonical suite datasets, with fixed specs and seeds.
pub fn suite_specs() -> Vec<GeneratorSpec> {
    let base = GeneratorSpec {
        name: String::new(),
        length: 240,
        ar_coeff: 0.3,
        seasonal_period: 0,
        seasonal_amplitude: 0.0,
        noise_std: 0.15,
        trend_slope: 0.0,
        event_rate: 0.0,
        event_impact: 0.0,
        event_horizon: 5,
        event_vocab: default_event_vocab(),
        neutral_vocab: default_neutral_vocab(),
        seed: 0,
    };
    vec![
        GeneratorSpec {
            name: "linear-trend".into(),
            trend_slope: 0.05,
            seed: 101,
            ..base.clone()
        },
        GeneratorSpec {
            name: "pure-seasonal".into(),
            seasonal_period: 12,
            seasonal_amplitude: 3.0,
            ar_coeff: 0.0,
            noise_std: 0.0,
            seed: 102,
            ..base.clone()
        },
        GeneratorSpec {
            name: "event-signal".into(),
            length: 360,
            ar_coeff: 0.5,
            noise_std: 0.25,
            seasonal_period: 12,
            seasonal_amplitude: 0.5,
            event_rate: 0.1,
            event_impact: 8.0,
            seed: 103,
            ..base.clone()
        },
        GeneratorSpec {
            name: "noise-only".into(),
            ar_coeff: 0.4,
            noise_std: 1.0,
            seed: 104,
            ..base
        },
    ]
}

/// Generates the canonical suite: linear-trend, pure-seasonal,
/// event-signal, noise-only.
pub fn generate_suite() -> Result<Vec<TextedSeries>> {
    suite_specs().iter().map(generate).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_process_is_constant() {
        let spec = GeneratorSpec {
            noise_std: 0.0,
            event_rate: 0.0,
            seasonal_amplitude: 0.0,
            seasonal_period: 0,
            ..suite_specs()[0].clone()
        };
        let spec = GeneratorSpec { trend_slope: 0.0, ..spec };
        let series = generate(&spec).unwrap();
        assert!(series.observations.iter().all(|o| o.x == 0.0));
    }

    #[test]
    fn identical_specs_generate_identical_series() {
        let spec = suite_specs()[2].clone();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn event_counterfactual_difference_is_the_decay_profile() {
        // Find a seed with exactly one event, away from the series end,
        // then compare against the rate-0 counterfactual.
        let mut template = GeneratorSpec {
            name: "counterfactual".into(),
            length: 80,
            ar_coeff: 0.4,
            seasonal_period: 6,
            seasonal_amplitude: 1.0,
            noise_std: 0.3,
            trend_slope: 0.01,
            event_rate: 0.02,
            event_impact: 5.0,
            event_horizon: 5,
            event_vocab: default_event_vocab(),
            neutral_vocab: default_neutral_vocab(),
            seed: 0,
        };
        let mut found = None;
        for seed in 0..200 {
            template.seed = seed;
            let (_, flags) = generate_flagged(&template).unwrap();
            let events: Vec<usize> =
                flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect();
            if events.len() == 1 && events[0] + template.event_horizon + 1 < template.length {
                found = Some((seed, events[0]));
                break;
            }
        }
        let (seed, tau) = found.expect("some seed under 200 has exactly one interior event");
        template.seed = seed;
        let with_event = generate(&template).unwrap();
        let without = generate(&GeneratorSpec { event_rate: 0.0, ..template.clone() }).unwrap();
        for t in 0..template.length {
            let diff = with_event.observations[t].x - without.observations[t].x;
            if t > tau && t <= tau + template.event_horizon {
                let k = t - tau;
                let expect = 5.0 * (1.0 - (k as f64 - 1.0) / 5.0);
                assert!((diff - expect).abs() < 1e-12, "t={t}: {diff} vs {expect}");
            } else {
                assert!(diff.abs() < 1e-12, "t={t} should be untouched, diff {diff}");
            }
        }
        // the event announcement precedes the numeric shock
        assert!(with_event.observations[tau].s.contains("expect surge"));
    }

    #[test]
    fn suite_has_four_datasets_with_expected_specs() {
        let specs = suite_specs();
        assert_eq!(specs.len(), 4);
        let names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["linear-trend", "pure-seasonal", "event-signal", "noise-only"]);
        let noise_only = &specs[3];
        assert_eq!(noise_only.event_rate, 0.0);
        let series = generate_suite().unwrap();
        assert_eq!(series.len(), 4);
        for s in &series {
            assert!(s.observations.iter().all(|o| o.x.is_finite()));
            assert!(s.observations.iter().all(|o| !o.s.is_empty()));
        }
    }

    #[test]
    fn event_signal_shocks_are_unpredictable_from_history() {
        // Cross-correlation between the event indicator and lagged values
        // must stay small for every lag up to a lookback of 15.
        let spec = suite_specs()[2].clone();
        let (series, flags) = generate_flagged(&spec).unwrap();
        let xs: Vec<f64> = series.observations.iter().map(|o| o.x).collect();
        let ind: Vec<f64> = flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect();
        let n = xs.len();
        let mean_x = xs.iter().sum::<f64>() / n as f64;
        let mean_i = ind.iter().sum::<f64>() / n as f64;
        let sd_x = (xs.iter().map(|x| (x - mean_x).powi(2)).sum::<f64>() / n as f64).sqrt();
        let sd_i = (ind.iter().map(|i| (i - mean_i).powi(2)).sum::<f64>() / n as f64).sqrt();
        for lag in 1..=15usize {
            let cov = (lag..n)
                .map(|t| (ind[t] - mean_i) * (xs[t - lag] - mean_x))
                .sum::<f64>()
                / (n - lag) as f64;
            let corr = cov / (sd_x * sd_i);
            assert!(corr.abs() < 0.1, "lag {lag}: corr {corr}");
        }
    }

    #[test]
    fn event_rate_zero_uses_only_neutral_phrases() {
        let spec = GeneratorSpec { event_rate: 0.0, ..suite_specs()[2].clone() };
        let series = generate(&spec).unwrap();
        for obs in &series.observations {
            assert!(spec.neutral_vocab.contains(&obs.s), "unexpected phrase {:?}", obs.s);
        }
    }

    #[test]
    fn invalid_specs_are_rejected_with_field_lists() {
        let mut spec = suite_specs()[0].clone();
        spec.ar_coeff = 1.5;
        spec.event_rate = 1.0;
        let err = generate(&spec).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("AR coefficient") && msg.contains("event rate"), "{msg}");
    }
}
