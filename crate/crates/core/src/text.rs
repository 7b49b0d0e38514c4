//! Deterministic hashed tokenizer, the tiny frozen CLS-style summary
//! encoder, and numeric window statistics.
//!
//! The tokenizer and encoder stand in for a pretrained tokenizer/encoder
//! pair at desk scale: word-level hashing instead of a learned subword
//! vocabulary, and a single frozen transformer block instead of a deep
//! stack. Both are pure functions of their seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hashing;
use crate::init;
use crate::kernels;
use crate::tensor::{Parameter, Tensor};

pub const HASH_SCHEME: &str = "fnv1a-64";

/// Hashed word-level vocabulary. Token ids are stable across processes:
/// same text, size and seed always produce the same ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub size: usize,
    pub scheme: String,
    pub seed: u64,
}

impl Vocabulary {
    pub fn new(size: usize, seed: u64) -> Result<Self> {
        if size < 2 {
            return Err(Error::Config {
                violations: vec![format!("vocabulary size must be >= 2, got {size}")],
            });
        }
        Ok(Self { size, scheme: HASH_SCHEME.into(), seed })
    }

    /// Lowercases, splits on whitespace/punctuation, canonicalizes numeric
    /// literals to 4 significant digits, and hashes each word modulo the
    /// vocabulary size. Empty text yields an empty sequence.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let lower = text.to_lowercase();
        let mixed = hashing::mix(self.seed);
        lower
            .split(|c: char| !(c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '+'))
            .filter_map(|raw| {
                let canon = canonical_word(raw)?;
                Some(((hashing::hash_str(&canon) ^ mixed) % self.size as u64) as usize)
            })
            .collect()
    }
}

/// Canonical form of one raw word: numbers re-rendered to 4 significant
/// digits, other words trimmed of leading/trailing sign and dot characters.
fn canonical_word(raw: &str) -> Option<String> {
    if raw.is_empty() {
        return None;
    }
    if let Ok(v) = raw.parse::<f64>() {
        if v.is_finite() {
            return Some(format_sig4(v));
        }
    }
    let trimmed = raw.trim_matches(|c| c == '.' || c == '-' || c == '+');
    if trimmed.is_empty() {
        None
    } else {
        Some(trimmed.to_string())
    }
}

/// Renders a float with exactly 4 significant digits, in plain decimal
/// notation for moderate magnitudes and scientific notation otherwise.
pub fn format_sig4(x: f64) -> String {
    if x == 0.0 {
        return "0.000".into();
    }
    let sci = format!("{:.3e}", x); // e.g. "1.500e1", "-2.345e-3"
    let (mantissa, exp) = sci.split_once('e').expect("exponential format");
    let exp: i32 = exp.parse().expect("exponent parses");
    if !(-4..=5).contains(&exp) {
        return sci;
    }
    let (sign, digits_part) = match mantissa.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", mantissa),
    };
    let digits: String = digits_part.chars().filter(|c| *c != '.').collect();
    debug_assert_eq!(digits.len(), 4);
    let mut out = String::from(sign);
    if exp < 0 {
        out.push_str("0.");
        for _ in 0..(-exp - 1) {
            out.push('0');
        }
        out.push_str(&digits);
    } else {
        let int_len = exp as usize + 1;
        if int_len >= 4 {
            out.push_str(&digits);
            for _ in 0..(int_len - 4) {
                out.push('0');
            }
        } else {
            out.push_str(&digits[..int_len]);
            out.push('.');
            out.push_str(&digits[int_len..]);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Frozen summary encoder
// ---------------------------------------------------------------------------

/// One frozen post-norm transformer block over hashed token embeddings
/// with a prepended CLS position. `encode` returns the CLS output.
///
/// All weights are fixed at construction from the seed and are never
/// updated; gradients do not flow through the encoder because its outputs
/// enter the differentiable graph as constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryEncoder {
    pub hidden: usize, // M
    pub vocab_size: usize,
    pub eps: f64,
    tok_embed: Vec<f64>, // V x M
    cls: Vec<f64>,       // M
    wq: Vec<f64>,        // M x M
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    ff1_w: Vec<f64>, // M x 2M
    ff1_b: Vec<f64>,
    ff2_w: Vec<f64>, // 2M x M
    ff2_b: Vec<f64>,
    ln1_gamma: Vec<f64>,
    ln1_beta: Vec<f64>,
    ln2_gamma: Vec<f64>,
    ln2_beta: Vec<f64>,
}

impl SummaryEncoder {
    pub fn new(vocab: &Vocabulary, hidden: usize, seed: u64) -> Result<Self> {
        if hidden < 2 {
            return Err(Error::Config {
                violations: vec![format!("encoder hidden dimension must be >= 2, got {hidden}")],
            });
        }
        let m = hidden;
        let v = vocab.size;
        let ff = 2 * m;
        Ok(Self {
            hidden: m,
            vocab_size: v,
            eps: 1e-5,
            tok_embed: init::uniform_fan_in(seed, "encoder.tok_embed", m, v * m),
            cls: init::uniform_fan_in(seed, "encoder.cls", m, m),
            wq: init::uniform_fan_in(seed, "encoder.wq", m, m * m),
            wk: init::uniform_fan_in(seed, "encoder.wk", m, m * m),
            wv: init::uniform_fan_in(seed, "encoder.wv", m, m * m),
            wo: init::uniform_fan_in(seed, "encoder.wo", m, m * m),
            ff1_w: init::uniform_fan_in(seed, "encoder.ff1_w", m, m * ff),
            ff1_b: vec![0.0; ff],
            ff2_w: init::uniform_fan_in(seed, "encoder.ff2_w", ff, ff * m),
            ff2_b: vec![0.0; m],
            ln1_gamma: vec![1.0; m],
            ln1_beta: vec![0.0; m],
            ln2_gamma: vec![1.0; m],
            ln2_beta: vec![0.0; m],
        })
    }

    /// CLS encoding of one summary string. Empty text encodes the bare CLS
    /// token.
    pub fn encode(&self, text: &str, vocab: &Vocabulary) -> Vec<f64> {
        let m = self.hidden;
        let tokens = vocab.tokenize(text);
        let rows = tokens.len() + 1;
        let mut x = Vec::with_capacity(rows * m);
        x.extend_from_slice(&self.cls);
        for &tok in &tokens {
            x.extend_from_slice(&self.tok_embed[tok * m..(tok + 1) * m]);
        }

        // Single-head self-attention, bidirectional.
        let mut q = vec![0.0; rows * m];
        let mut k = vec![0.0; rows * m];
        let mut v = vec![0.0; rows * m];
        kernels::mm_nn(&mut q, &x, &self.wq, rows, m, m);
        kernels::mm_nn(&mut k, &x, &self.wk, rows, m, m);
        kernels::mm_nn(&mut v, &x, &self.wv, rows, m, m);
        let mut scores = vec![0.0; rows * rows];
        kernels::mm_nt(&mut scores, &q, &k, rows, m, rows);
        let scale = 1.0 / (m as f64).sqrt();
        for s in &mut scores {
            *s *= scale;
        }
        let mut attn = vec![0.0; rows * rows];
        kernels::softmax_rows(&mut attn, &scores, rows, rows);
        let mut ctx = vec![0.0; rows * m];
        kernels::mm_nn(&mut ctx, &attn, &v, rows, rows, m);
        let mut proj = vec![0.0; rows * m];
        kernels::mm_nn(&mut proj, &ctx, &self.wo, rows, m, m);

        // Residual + LN1
        let mut x1_in: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
        let mut x1 = vec![0.0; rows * m];
        kernels::layer_norm_rows(&mut x1, &x1_in, &self.ln1_gamma, &self.ln1_beta, rows, m, self.eps);

        // Feed-forward with GELU, residual + LN2
        let ff = 2 * m;
        let mut h = vec![0.0; rows * ff];
        kernels::mm_nn(&mut h, &x1, &self.ff1_w, rows, m, ff);
        for (i, hv) in h.iter_mut().enumerate() {
            *hv = kernels::gelu(*hv + self.ff1_b[i % ff]);
        }
        let mut f = vec![0.0; rows * m];
        kernels::mm_nn(&mut f, &h, &self.ff2_w, rows, ff, m);
        for (i, fv) in f.iter_mut().enumerate() {
            *fv += self.ff2_b[i % m];
        }
        x1_in.clear();
        x1_in.extend(x1.iter().zip(&f).map(|(a, b)| a + b));
        let mut x2 = vec![0.0; rows * m];
        kernels::layer_norm_rows(&mut x2, &x1_in, &self.ln2_gamma, &self.ln2_beta, rows, m, self.eps);

        x2[..m].to_vec()
    }

    /// All weight arrays with their names, for checksums and freeze audits.
    pub fn named_arrays(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("encoder.tok_embed", &self.tok_embed),
            ("encoder.cls", &self.cls),
            ("encoder.wq", &self.wq),
            ("encoder.wk", &self.wk),
            ("encoder.wv", &self.wv),
            ("encoder.wo", &self.wo),
            ("encoder.ff1_w", &self.ff1_w),
            ("encoder.ff1_b", &self.ff1_b),
            ("encoder.ff2_w", &self.ff2_w),
            ("encoder.ff2_b", &self.ff2_b),
            ("encoder.ln1_gamma", &self.ln1_gamma),
            ("encoder.ln1_beta", &self.ln1_beta),
            ("encoder.ln2_gamma", &self.ln2_gamma),
            ("encoder.ln2_beta", &self.ln2_beta),
        ]
    }

    /// Frozen [`Parameter`] snapshots, used by the parameter partition.
    pub fn parameters(&self) -> Vec<Parameter> {
        self.named_arrays()
            .into_iter()
            .map(|(name, data)| Parameter::new(name, Tensor::vector(data.to_vec()), false))
            .collect()
    }
}

/// Row t is the encoding of summaries[t]; errors unless exactly
/// `expected_len` summaries are supplied.
pub fn encode_window_texts(
    summaries: &[String],
    expected_len: usize,
    encoder: &SummaryEncoder,
    vocab: &Vocabulary,
) -> Result<Tensor> {
    if summaries.len() != expected_len {
        return Err(Error::Alignment(format!(
            "expected {expected_len} summaries aligned to the window, got {}",
            summaries.len()
        )));
    }
    let m = encoder.hidden;
    let mut data = Vec::with_capacity(summaries.len() * m);
    for s in summaries {
        data.extend(encoder.encode(s, vocab));
    }
    Tensor::new(vec![summaries.len(), m], data)
}

// ---------------------------------------------------------------------------
// Window statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trend {
    Upward,
    Downward,
    Flat,
}

impl std::fmt::Display for Trend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Trend::Upward => write!(f, "upward"),
            Trend::Downward => write!(f, "downward"),
            Trend::Flat => write!(f, "flat"),
        }
    }
}

/// Summary statistics of one lookback window, rendered into the explicit
/// prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowStats {
    pub min: f64,
    pub max: f64,
    pub median: f64,
    pub slope: f64,
    pub trend: Trend,
    /// Up to 5 lags in [1, L-1], ranked by sample autocorrelation, ties
    /// broken toward the smaller lag. Empty for constant windows.
    pub top_lags: Vec<usize>,
}

/// Slope threshold separating genuine trends from floating-point dust.
const TREND_EPS: f64 = 1e-9;

/// Computes min/max/median, the least-squares slope over indices 0..L-1,
/// and the top autocorrelation lags (biased estimator, mean removed).
pub fn compute_stats(window: &[f64]) -> Result<WindowStats> {
    let l = window.len();
    if l < 2 {
        return Err(Error::InsufficientData(format!(
            "window statistics need at least 2 values, got {l}"
        )));
    }
    let mut sorted = window.to_vec();
    sorted.sort_by(f64::total_cmp);
    let min = sorted[0];
    let max = sorted[l - 1];
    let median = if l % 2 == 1 {
        sorted[l / 2]
    } else {
        0.5 * (sorted[l / 2 - 1] + sorted[l / 2])
    };

    let t_mean = (l as f64 - 1.0) / 2.0;
    let x_mean = window.iter().sum::<f64>() / l as f64;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, &x) in window.iter().enumerate() {
        let dt = t as f64 - t_mean;
        num += dt * (x - x_mean);
        den += dt * dt;
    }
    let slope = num / den;
    let trend = if slope > TREND_EPS {
        Trend::Upward
    } else if slope < -TREND_EPS {
        Trend::Downward
    } else {
        Trend::Flat
    };

    let top_lags = if max == min {
        Vec::new()
    } else {
        let denom: f64 = window.iter().map(|&x| (x - x_mean) * (x - x_mean)).sum();
        let mut lags: Vec<(usize, f64)> = (1..l)
            .map(|k| {
                let r: f64 = (k..l)
                    .map(|t| (window[t] - x_mean) * (window[t - k] - x_mean))
                    .sum::<f64>()
                    / denom;
                (k, r)
            })
            .collect();
        lags.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        lags.into_iter().take(5).map(|(k, _)| k).collect()
    };

    Ok(WindowStats { min, max, median, slope, trend, top_lags })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(512, 7).unwrap()
    }

    #[test]
    fn tokenize_empty_is_empty() {
        assert!(vocab().tokenize("").is_empty());
        assert!(vocab().tokenize("  ,.;  ").is_empty());
    }

    #[test]
    fn tokenize_is_deterministic_and_in_range() {
        let v = vocab();
        let a = v.tokenize("Flood warning issued, expect 3.5 inch surge.");
        let b = v.tokenize("Flood warning issued, expect 3.5 inch surge.");
        assert_eq!(a, b);
        assert!(!a.is_empty());
        assert!(a.iter().all(|&id| id < v.size));
    }

    #[test]
    fn numbers_canonicalize_to_four_significant_digits() {
        let v = vocab();
        // 3.5 and 3.500 must map to the same token
        assert_eq!(v.tokenize("3.5"), v.tokenize("3.500"));
        assert_eq!(v.tokenize("15"), v.tokenize("15.00"));
    }

    #[test]
    fn format_sig4_cases() {
        assert_eq!(format_sig4(1.0), "1.000");
        assert_eq!(format_sig4(8.0), "8.000");
        assert_eq!(format_sig4(15.0), "15.00");
        assert_eq!(format_sig4(0.0), "0.000");
        assert_eq!(format_sig4(-2.345), "-2.345");
        assert_eq!(format_sig4(0.001234), "0.001234");
        assert_eq!(format_sig4(123456.0), "123500"); // rounded at 4 digits
        assert_eq!(format_sig4(1.5e7), "1.500e7");
        assert_eq!(format_sig4(2.5e-6), "2.500e-6");
    }

    #[test]
    fn encoder_output_has_hidden_length_and_is_deterministic() {
        let v = vocab();
        let enc = SummaryEncoder::new(&v, 16, 7).unwrap();
        let a = enc.encode("flood warning", &v);
        assert_eq!(a.len(), 16);
        let b = enc.encode("flood warning", &v);
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn encoder_distinguishes_distinct_texts() {
        let v = vocab();
        let enc = SummaryEncoder::new(&v, 16, 7).unwrap();
        let a = enc.encode("flood warning", &v);
        let b = enc.encode("sunny holiday", &v);
        let max_diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(max_diff > 1e-6, "encodings too close: {max_diff}");
    }

    #[test]
    fn encoder_empty_text_is_bare_cls() {
        let v = vocab();
        let enc = SummaryEncoder::new(&v, 16, 7).unwrap();
        let empty = enc.encode("", &v);
        assert_eq!(empty.len(), 16);
        // punctuation-only text also reduces to the bare CLS path
        assert_eq!(empty, enc.encode(" .,! ", &v));
    }

    #[test]
    fn window_texts_match_per_row_encoding() {
        let v = vocab();
        let enc = SummaryEncoder::new(&v, 8, 7).unwrap();
        let summaries = vec!["a day".to_string(), "another day".to_string(), "quiet".to_string()];
        let s = encode_window_texts(&summaries, 3, &enc, &v).unwrap();
        assert_eq!(s.shape(), &[3, 8]);
        for (i, text) in summaries.iter().enumerate() {
            assert_eq!(&s.data()[i * 8..(i + 1) * 8], enc.encode(text, &v).as_slice());
        }
        assert!(encode_window_texts(&summaries, 4, &enc, &v).is_err());
    }

    #[test]
    fn stats_exact_line() {
        let s = compute_stats(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(s.min, 1.0);
        assert_eq!(s.max, 5.0);
        assert_eq!(s.median, 3.0);
        assert_eq!(s.slope, 1.0);
        assert_eq!(s.trend, Trend::Upward);
    }

    #[test]
    fn stats_constant_window() {
        let s = compute_stats(&[7.0; 10]).unwrap();
        assert_eq!(s.trend, Trend::Flat);
        assert!(s.top_lags.is_empty());
        assert_eq!(s.median, 7.0);
    }

    #[test]
    fn stats_rejects_tiny_windows() {
        assert!(compute_stats(&[1.0]).is_err());
    }

    #[test]
    fn sawtooth_period_three_ranks_lag_three_first() {
        let window: Vec<f64> = (0..15).map(|t| (t % 3) as f64).collect();
        let s = compute_stats(&window).unwrap();
        // Brute-force oracle: evaluate every lag directly.
        let mean = window.iter().sum::<f64>() / 15.0;
        let denom: f64 = window.iter().map(|&x| (x - mean) * (x - mean)).sum();
        let mut best = (0usize, f64::NEG_INFINITY);
        for k in 1..15 {
            let r: f64 = (k..15)
                .map(|t| (window[t] - mean) * (window[t - k] - mean))
                .sum::<f64>()
                / denom;
            if r > best.1 {
                best = (k, r);
            }
        }
        assert_eq!(best.0, 3);
        assert_eq!(s.top_lags[0], 3);
    }

    #[test]
    fn even_length_median_averages_middle_pair() {
        let s = compute_stats(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.median, 2.5);
    }
}
