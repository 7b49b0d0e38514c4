//! The two prompt prefixes.
//!
//! The explicit prompt is a rendered instruction/statistics string embedded
//! row-by-row through the frozen tokenizer table: prefix `E`, never
//! trainable. The textual prompt refines per-timestamp summary encodings
//! with a trainable projection, multi-head self-attention, a projection to
//! the backbone width and a ReLU: prefix `I`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::tape::{Bindings, Tape, ValueId};
use crate::tensor::{ParamStore, Parameter, Tensor};
use crate::text::{format_sig4, Vocabulary, WindowStats};

// ---------------------------------------------------------------------------
// Explicit prompt
// ---------------------------------------------------------------------------

/// Template for the explicit prompt string. Placeholders: `{lookback}`,
/// `{horizon}` in the task clause; `{min}`, `{max}`, `{median}`, `{trend}`,
/// `{lags}` in the statistics clause.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplicitPromptTemplate {
    pub description: String,
    pub task_template: String,
    pub stats_template: String,
}

impl ExplicitPromptTemplate {
    pub fn with_description(description: impl Into<String>) -> Self {
        Self {
            description: description.into(),
            task_template: "Task: given the previous {lookback} steps, forecast the next {horizon} steps."
                .into(),
            stats_template:
                "Statistics: min {min}, max {max}, median {median}, the trend is {trend}, top lags are {lags}."
                    .into(),
        }
    }

    /// Deterministic rendering; numbers use 4 significant digits and an
    /// empty lag list renders as "none".
    pub fn render(&self, stats: &WindowStats, lookback: usize, horizon: usize) -> String {
        let task = self
            .task_template
            .replace("{lookback}", &lookback.to_string())
            .replace("{horizon}", &horizon.to_string());
        let lags = if stats.top_lags.is_empty() {
            "none".to_string()
        } else {
            stats
                .top_lags
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        };
        let stats_clause = self
            .stats_template
            .replace("{min}", &format_sig4(stats.min))
            .replace("{max}", &format_sig4(stats.max))
            .replace("{median}", &format_sig4(stats.median))
            .replace("{trend}", &stats.trend.to_string())
            .replace("{lags}", &lags);
        format!("{} {} {}", self.description, task, stats_clause)
    }
}

/// Frozen V x D embedding table for the explicit prompt, seeded like the
/// rest of the frozen stand-ins.
pub fn build_prompt_table(vocab_size: usize, hidden: usize, seed: u64) -> Tensor {
    let data = init::uniform_fan_in(seed, "prompt.table", hidden, vocab_size * hidden);
    Tensor::new(vec![vocab_size, hidden], data).expect("table shape is consistent")
}

/// Embeds a prompt string through the frozen table: row j is the table row
/// of token j. Errors if the prompt tokenizes to nothing; `max_tokens`
/// caps the prefix length.
pub fn embed_explicit_prompt(
    prompt: &str,
    table: &Tensor,
    vocab: &Vocabulary,
    max_tokens: usize,
) -> Result<Tensor> {
    let mut tokens = vocab.tokenize(prompt);
    if tokens.is_empty() {
        return Err(Error::InvalidPrompt(format!(
            "prompt {prompt:?} tokenizes to zero tokens"
        )));
    }
    tokens.truncate(max_tokens.max(1));
    let d = table.shape()[1];
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &tok in &tokens {
        data.extend_from_slice(&table.data()[tok * d..(tok + 1) * d]);
    }
    Tensor::new(vec![tokens.len(), d], data)
}

// ---------------------------------------------------------------------------
// Textual prompt
// ---------------------------------------------------------------------------

/// Dimensions of the trainable textual-prompt block. Head width is
/// `attn_dim / heads`; construction rejects indivisible configurations so
/// the concatenated head outputs recover the full attention width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextualPromptParams {
    pub input_dim: usize,  // M
    pub attn_dim: usize,   // d_m
    pub heads: usize,      // K
    pub head_dim: usize,   // d_k
    pub output_dim: usize, // D
}

impl TextualPromptParams {
    pub fn new(input_dim: usize, attn_dim: usize, heads: usize, output_dim: usize) -> Result<Self> {
        let mut violations = Vec::new();
        if heads == 0 {
            violations.push("attention head count must be >= 1".to_string());
        } else if attn_dim % heads != 0 {
            violations.push(format!(
                "attention width {attn_dim} must be divisible by head count {heads}"
            ));
        }
        if input_dim == 0 || attn_dim == 0 || output_dim == 0 {
            violations.push("textual prompt dimensions must be positive".to_string());
        }
        if !violations.is_empty() {
            return Err(Error::Config { violations });
        }
        Ok(Self { input_dim, attn_dim, heads, head_dim: attn_dim / heads, output_dim })
    }

    /// Registers the block's trainable parameters. `with_attention = false`
    /// registers only the two projections (the attention-free variant).
    pub fn register(&self, store: &mut ParamStore, seed: u64, with_attention: bool) -> Result<()> {
        let m = self.input_dim;
        let dm = self.attn_dim;
        let dk = self.head_dim;
        let d = self.output_dim;
        let add = |store: &mut ParamStore, name: String, rows: usize, cols: usize, fan_in: usize| -> Result<()> {
            let data = init::uniform_fan_in(seed, &name, fan_in, rows * cols);
            store.insert(Parameter::new(name, Tensor::new(vec![rows, cols], data)?, true))
        };
        add(store, "textual.in_proj.w".into(), m, dm, m)?;
        store.insert(Parameter::new("textual.in_proj.b", Tensor::vector(vec![0.0; dm]), true))?;
        if with_attention {
            for k in 0..self.heads {
                add(store, format!("textual.head{k}.wq"), dm, dk, dm)?;
                add(store, format!("textual.head{k}.wk"), dm, dk, dm)?;
                add(store, format!("textual.head{k}.wv"), dm, dk, dm)?;
            }
        }
        add(store, "textual.out_proj.w".into(), dm, d, dm)?;
        store.insert(Parameter::new("textual.out_proj.b", Tensor::vector(vec![0.0; d]), true))?;
        Ok(())
    }
}

/// Output of the textual prompt block plus the per-head attention weight
/// matrices, exposed for invariant checks.
pub struct TextualForward {
    pub output: ValueId,
    pub attention: Vec<ValueId>,
}

/// S' = in_proj(S); per head k: Z_k = softmax(Q_k K_k^T / sqrt(d_k)) V_k;
/// Z = [Z_1 .. Z_K]; I = relu(out_proj(Z)).
pub fn textual_prompt_forward(
    tape: &mut Tape,
    binds: &Bindings,
    params: &TextualPromptParams,
    s: ValueId,
) -> Result<TextualForward> {
    check_input_cols(tape, params, s)?;
    let w_in = binds.get("textual.in_proj.w")?;
    let b_in = binds.get("textual.in_proj.b")?;
    let s_proj = tape.linear(s, w_in, b_in)?;

    let scale = 1.0 / (params.head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(params.heads);
    let mut attention = Vec::with_capacity(params.heads);
    for k in 0..params.heads {
        let q = tape.matmul(s_proj, binds.get(&format!("textual.head{k}.wq"))?)?;
        let key = tape.matmul(s_proj, binds.get(&format!("textual.head{k}.wk"))?)?;
        let v = tape.matmul(s_proj, binds.get(&format!("textual.head{k}.wv"))?)?;
        let scores = tape.matmul_nt(q, key)?;
        let scaled = tape.mul_const(scores, scale)?;
        let attn = tape.softmax_rows(scaled)?;
        let z = tape.matmul(attn, v)?;
        heads.push(z);
        attention.push(attn);
    }
    let z = tape.concat_cols(&heads)?;
    let w_out = binds.get("textual.out_proj.w")?;
    let b_out = binds.get("textual.out_proj.b")?;
    let projected = tape.linear(z, w_out, b_out)?;
    let output = tape.relu(projected)?;
    Ok(TextualForward { output, attention })
}

/// Attention-free textual path: I' = relu(out_proj(in_proj(S))).
pub fn textual_prompt_forward_no_attention(
    tape: &mut Tape,
    binds: &Bindings,
    params: &TextualPromptParams,
    s: ValueId,
) -> Result<ValueId> {
    check_input_cols(tape, params, s)?;
    let w_in = binds.get("textual.in_proj.w")?;
    let b_in = binds.get("textual.in_proj.b")?;
    let s_proj = tape.linear(s, w_in, b_in)?;
    let w_out = binds.get("textual.out_proj.w")?;
    let b_out = binds.get("textual.out_proj.b")?;
    let projected = tape.linear(s_proj, w_out, b_out)?;
    tape.relu(projected)
}

fn check_input_cols(tape: &Tape, params: &TextualPromptParams, s: ValueId) -> Result<()> {
    let shape = tape.shape(s);
    if shape.len() != 2 || shape[1] != params.input_dim {
        return Err(Error::Dimension {
            op: "textual_prompt_forward",
            detail: format!("summary matrix {:?} must have {} columns", shape, params.input_dim),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Bundle assembly
// ---------------------------------------------------------------------------

/// Which prefix comes first in the assembled sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefixOrder {
    ExplicitFirst,
    TextualFirst,
}

/// Prefix lengths of one assembled backbone input; the output head uses
/// `patch_len` to discard everything except the final patch rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptBundle {
    pub explicit_len: usize,
    pub textual_len: usize,
    pub patch_len: usize,
}

impl PromptBundle {
    pub fn total(&self) -> usize {
        self.explicit_len + self.textual_len + self.patch_len
    }
}

/// Stacks the present prefixes and the patch rows into one sequence.
/// Row order is prefixes first (per `order`), patches always last.
pub fn assemble_bundle(
    tape: &mut Tape,
    explicit: Option<ValueId>,
    textual: Option<ValueId>,
    patches: ValueId,
    order: PrefixOrder,
) -> Result<(PromptBundle, ValueId)> {
    let rows_of = |tape: &Tape, id: ValueId| -> Result<usize> {
        let s = tape.shape(id);
        if s.len() != 2 {
            return Err(Error::Dimension {
                op: "assemble_bundle",
                detail: format!("expected a matrix, got {s:?}"),
            });
        }
        Ok(s[0])
    };
    let bundle = PromptBundle {
        explicit_len: explicit.map(|e| rows_of(tape, e)).transpose()?.unwrap_or(0),
        textual_len: textual.map(|t| rows_of(tape, t)).transpose()?.unwrap_or(0),
        patch_len: rows_of(tape, patches)?,
    };
    let mut parts = Vec::with_capacity(3);
    match order {
        PrefixOrder::ExplicitFirst => {
            parts.extend(explicit);
            parts.extend(textual);
        }
        PrefixOrder::TextualFirst => {
            parts.extend(textual);
            parts.extend(explicit);
        }
    }
    parts.push(patches);
    let seq = tape.concat_rows(&parts)?;
    Ok((bundle, seq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::compute_stats;

    fn template() -> ExplicitPromptTemplate {
        ExplicitPromptTemplate::with_description("Synthetic sensor readings.")
    }

    #[test]
    fn render_is_deterministic() {
        let stats = compute_stats(&[1.0, 2.0, 3.0]).unwrap();
        let a = template().render(&stats, 3, 2);
        let b = template().render(&stats, 3, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn render_flat_window_mentions_flat_and_none() {
        let stats = compute_stats(&[4.0; 8]).unwrap();
        let s = template().render(&stats, 8, 2);
        assert!(s.contains("the trend is flat"), "{s}");
        assert!(s.contains("top lags are none"), "{s}");
    }

    #[test]
    fn render_one_to_fifteen_has_expected_numbers() {
        let window: Vec<f64> = (1..=15).map(|v| v as f64).collect();
        let stats = compute_stats(&window).unwrap();
        let s = template().render(&stats, 15, 7);
        assert!(s.contains("min 1.000"), "{s}");
        assert!(s.contains("median 8.000"), "{s}");
        assert!(s.contains("previous 15 steps"), "{s}");
        assert!(s.contains("next 7 steps"), "{s}");
    }

    #[test]
    fn explicit_embedding_matches_table_lookup() {
        let vocab = Vocabulary::new(64, 3).unwrap();
        let table = build_prompt_table(64, 8, 3);
        let prompt = "storm surge expected at noon";
        let e = embed_explicit_prompt(prompt, &table, &vocab, 32).unwrap();
        let tokens = vocab.tokenize(prompt);
        assert_eq!(e.shape(), &[tokens.len(), 8]);
        for (j, &tok) in tokens.iter().enumerate() {
            assert_eq!(&e.data()[j * 8..(j + 1) * 8], &table.data()[tok * 8..(tok + 1) * 8]);
        }
    }

    #[test]
    fn one_word_prompt_is_single_row_and_empty_prompt_errors() {
        let vocab = Vocabulary::new(64, 3).unwrap();
        let table = build_prompt_table(64, 8, 3);
        let e = embed_explicit_prompt("hello", &table, &vocab, 32).unwrap();
        assert_eq!(e.shape(), &[1, 8]);
        assert!(matches!(
            embed_explicit_prompt(" ... ", &table, &vocab, 32),
            Err(Error::InvalidPrompt(_))
        ));
    }

    #[test]
    fn divisibility_is_validated_at_construction() {
        assert!(TextualPromptParams::new(6, 8, 2, 10).is_ok());
        assert!(matches!(
            TextualPromptParams::new(6, 9, 2, 10),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn single_row_attention_weight_is_one_and_output_shape_holds() {
        let params = TextualPromptParams::new(4, 6, 2, 5).unwrap();
        let mut store = ParamStore::new();
        params.register(&mut store, 99, true).unwrap();
        let mut tape = Tape::new();
        let binds = Bindings::bind_all(&mut tape, &store).unwrap();
        let s = tape.constant(vec![1, 4], vec![0.3, -0.2, 0.8, 0.1]).unwrap();
        let fwd = textual_prompt_forward(&mut tape, &binds, &params, s).unwrap();
        for &attn in &fwd.attention {
            assert_eq!(tape.data(attn), &[1.0]);
        }
        assert_eq!(tape.shape(fwd.output), &[1, 5]);
    }

    #[test]
    fn output_is_nonnegative() {
        let params = TextualPromptParams::new(4, 8, 4, 6).unwrap();
        let mut store = ParamStore::new();
        params.register(&mut store, 5, true).unwrap();
        let mut tape = Tape::new();
        let binds = Bindings::bind_all(&mut tape, &store).unwrap();
        let data: Vec<f64> = (0..12).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let s = tape.constant(vec![3, 4], data).unwrap();
        let fwd = textual_prompt_forward(&mut tape, &binds, &params, s).unwrap();
        assert!(tape.data(fwd.output).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn bundle_orders_rows_and_strips_back_to_patches() {
        let mut tape = Tape::new();
        let d = 4;
        let e = tape.constant(vec![2, d], (0..8).map(|v| v as f64).collect()).unwrap();
        let i = tape.constant(vec![3, d], (100..112).map(|v| v as f64).collect()).unwrap();
        let x = tape.constant(vec![4, d], (200..216).map(|v| v as f64).collect()).unwrap();
        let (bundle, seq) =
            assemble_bundle(&mut tape, Some(e), Some(i), x, PrefixOrder::ExplicitFirst).unwrap();
        assert_eq!(bundle.total(), 9);
        assert_eq!(tape.shape(seq), &[9, d]);
        assert_eq!(&tape.data(seq)[..8], tape.data(e));
        assert_eq!(&tape.data(seq)[8..20], tape.data(i));
        let stripped = tape
            .slice_rows(seq, bundle.explicit_len + bundle.textual_len, bundle.total())
            .unwrap();
        assert_eq!(tape.data(stripped), tape.data(x));

        // Swapped order puts I before E.
        let (b2, seq2) =
            assemble_bundle(&mut tape, Some(e), Some(i), x, PrefixOrder::TextualFirst).unwrap();
        assert_eq!(&tape.data(seq2)[..12], tape.data(i));
        assert_eq!(&tape.data(seq2)[12..20], tape.data(e));
        assert_eq!(b2.total(), 9);
    }

    #[test]
    fn bundle_rejects_column_mismatch() {
        let mut tape = Tape::new();
        let e = tape.constant(vec![2, 4], vec![0.0; 8]).unwrap();
        let x = tape.constant(vec![2, 5], vec![0.0; 10]).unwrap();
        assert!(assemble_bundle(&mut tape, Some(e), None, x, PrefixOrder::ExplicitFirst).is_err());
    }
}
