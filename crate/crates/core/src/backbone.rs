//! Small decoder-style transformer with frozen body weights.
//!
//! Pre-norm blocks, causal multi-head attention and a GELU feed-forward,
//! mirroring the GPT-2 layout at desk scale. The attention and
//! feed-forward weights are frozen random stand-ins for pretrained
//! weights; the trainable set is exactly the positional embedding table
//! plus every layer-norm gamma/beta. The output head keeps only the final
//! patch rows, flattens them and projects to the forecast horizon.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::prompts::PromptBundle;
use crate::tape::{Bindings, Tape, ValueId};
use crate::tensor::{ParamStore, Parameter, Tensor};

/// Additive pre-softmax penalty for masked positions. Large enough that
/// masked logits underflow to exactly zero probability in f64.
const CAUSAL_MASK: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub hidden: usize, // D
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.hidden < 2 {
            violations.push(format!("backbone hidden dim must be >= 2, got {}", self.hidden));
        }
        if self.heads == 0 {
            violations.push("backbone head count must be >= 1".to_string());
        } else if self.hidden % self.heads != 0 {
            violations.push(format!(
                "backbone hidden dim {} must be divisible by head count {}",
                self.hidden, self.heads
            ));
        }
        if self.layers == 0 {
            violations.push("backbone must have at least one layer".to_string());
        }
        if self.ff == 0 {
            violations.push("feed-forward width must be >= 1".to_string());
        }
        if self.max_seq == 0 {
            violations.push("max sequence length must be >= 1".to_string());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { violations })
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Registers the backbone parameters. Frozen weights draw from
/// `cfg.seed`; the trainable positional table draws from `run_seed` and
/// layer norms start at the identity.
pub fn register_backbone_params(cfg: &BackboneConfig, store: &mut ParamStore, run_seed: u64) -> Result<()> {
    cfg.validate()?;
    let d = cfg.hidden;
    let dh = cfg.head_dim();
    let pos = init::uniform_fan_in(run_seed, "backbone.pos", d, cfg.max_seq * d);
    store.insert(Parameter::new("backbone.pos", Tensor::new(vec![cfg.max_seq, d], pos)?, true))?;
    for layer in 0..cfg.layers {
        let ln = |suffix: &str, value: f64| {
            Parameter::new(
                format!("backbone.layer{layer}.{suffix}"),
                Tensor::vector(vec![value; d]),
                true,
            )
        };
        store.insert(ln("ln1.gamma", 1.0))?;
        store.insert(ln("ln1.beta", 0.0))?;
        for h in 0..cfg.heads {
            for proj in ["wq", "wk", "wv"] {
                let name = format!("backbone.layer{layer}.attn.head{h}.{proj}");
                let w = init::uniform_fan_in(cfg.seed, &name, d, d * dh);
                store.insert(Parameter::new(name, Tensor::new(vec![d, dh], w)?, false))?;
            }
        }
        let out_name = format!("backbone.layer{layer}.attn.out.w");
        let w = init::uniform_fan_in(cfg.seed, &out_name, d, d * d);
        store.insert(Parameter::new(out_name, Tensor::new(vec![d, d], w)?, false))?;
        store.insert(Parameter::new(
            format!("backbone.layer{layer}.attn.out.b"),
            Tensor::vector(vec![0.0; d]),
            false,
        ))?;
        store.insert(ln("ln2.gamma", 1.0))?;
        store.insert(ln("ln2.beta", 0.0))?;
        let ff1_name = format!("backbone.layer{layer}.ff1.w");
        let w = init::uniform_fan_in(cfg.seed, &ff1_name, d, d * cfg.ff);
        store.insert(Parameter::new(ff1_name, Tensor::new(vec![d, cfg.ff], w)?, false))?;
        store.insert(Parameter::new(
            format!("backbone.layer{layer}.ff1.b"),
            Tensor::vector(vec![0.0; cfg.ff]),
            false,
        ))?;
        let ff2_name = format!("backbone.layer{layer}.ff2.w");
        let w = init::uniform_fan_in(cfg.seed, &ff2_name, cfg.ff, cfg.ff * d);
        store.insert(Parameter::new(ff2_name, Tensor::new(vec![cfg.ff, d], w)?, false))?;
        store.insert(Parameter::new(
            format!("backbone.layer{layer}.ff2.b"),
            Tensor::vector(vec![0.0; d]),
            false,
        ))?;
    }
    store.insert(Parameter::new("backbone.final_ln.gamma", Tensor::vector(vec![1.0; d]), true))?;
    store.insert(Parameter::new("backbone.final_ln.beta", Tensor::vector(vec![0.0; d]), true))?;
    Ok(())
}

/// Causal additive mask for an n-row sequence: 0 at and below the
/// diagonal, a large negative penalty above it.
fn causal_mask(n: usize) -> Vec<f64> {
    let mut mask = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            mask[i * n + j] = CAUSAL_MASK;
        }
    }
    mask
}

/// Full backbone pass: positional embeddings, `layers` pre-norm blocks
/// (causal attention + GELU feed-forward, both with residuals), final
/// layer norm. Output shape equals input shape.
pub fn backbone_forward(
    tape: &mut Tape,
    binds: &Bindings,
    cfg: &BackboneConfig,
    input: ValueId,
) -> Result<ValueId> {
    let shape = tape.shape(input).to_vec();
    if shape.len() != 2 || shape[1] != cfg.hidden {
        return Err(Error::Dimension {
            op: "backbone_forward",
            detail: format!("input {:?} must be [seq x {}]", shape, cfg.hidden),
        });
    }
    let n = shape[0];
    if n > cfg.max_seq {
        return Err(Error::Capacity { got: n, max: cfg.max_seq });
    }

    let pos_table = binds.get("backbone.pos")?;
    let pos = tape.slice_rows(pos_table, 0, n)?;
    let mut h = tape.add(input, pos)?;

    let mask = tape.constant(vec![n, n], causal_mask(n))?;
    let scale = 1.0 / (cfg.head_dim() as f64).sqrt();

    for layer in 0..cfg.layers {
        let prefix = format!("backbone.layer{layer}");
        let g1 = binds.get(&format!("{prefix}.ln1.gamma"))?;
        let b1 = binds.get(&format!("{prefix}.ln1.beta"))?;
        let normed = tape.layer_norm(h, g1, b1, 1e-5)?;

        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let hp = format!("{prefix}.attn.head{head}");
            let q = tape.matmul(normed, binds.get(&format!("{hp}.wq"))?)?;
            let k = tape.matmul(normed, binds.get(&format!("{hp}.wk"))?)?;
            let v = tape.matmul(normed, binds.get(&format!("{hp}.wv"))?)?;
            let scores = tape.matmul_nt(q, k)?;
            let scaled = tape.mul_const(scores, scale)?;
            let masked = tape.add(scaled, mask)?;
            let attn = tape.softmax_rows(masked)?;
            heads.push(tape.matmul(attn, v)?);
        }
        let z = tape.concat_cols(&heads)?;
        let wo = binds.get(&format!("{prefix}.attn.out.w"))?;
        let bo = binds.get(&format!("{prefix}.attn.out.b"))?;
        let attn_out = tape.linear(z, wo, bo)?;
        h = tape.add(h, attn_out)?;

        let g2 = binds.get(&format!("{prefix}.ln2.gamma"))?;
        let b2 = binds.get(&format!("{prefix}.ln2.beta"))?;
        let normed2 = tape.layer_norm(h, g2, b2, 1e-5)?;
        let ff1w = binds.get(&format!("{prefix}.ff1.w"))?;
        let ff1b = binds.get(&format!("{prefix}.ff1.b"))?;
        let pre = tape.linear(normed2, ff1w, ff1b)?;
        let act = tape.gelu(pre)?;
        let ff2w = binds.get(&format!("{prefix}.ff2.w"))?;
        let ff2b = binds.get(&format!("{prefix}.ff2.b"))?;
        let ff_out = tape.linear(act, ff2w, ff2b)?;
        h = tape.add(h, ff_out)?;
    }

    let gf = binds.get("backbone.final_ln.gamma")?;
    let bf = binds.get("backbone.final_ln.beta")?;
    tape.layer_norm(h, gf, bf, 1e-5)
}

/// Registers the output head: a ((P*D) x T) projection plus bias.
pub fn register_output_head(
    store: &mut ParamStore,
    patch_count: usize,
    hidden: usize,
    horizon: usize,
    run_seed: u64,
) -> Result<()> {
    let flat = patch_count * hidden;
    let w = init::uniform_fan_in(run_seed, "head.w", flat, flat * horizon);
    store.insert(Parameter::new("head.w", Tensor::new(vec![flat, horizon], w)?, true))?;
    store.insert(Parameter::new("head.b", Tensor::vector(vec![0.0; horizon]), true))
}

/// Discards every prefix row, flattens the remaining P x D rows row-major
/// and projects to the horizon. Output is a length-T vector on the
/// normalized scale; the caller applies the RevIN inverse.
pub fn strip_prefix_and_project(
    tape: &mut Tape,
    binds: &Bindings,
    hidden: ValueId,
    bundle: &PromptBundle,
) -> Result<ValueId> {
    let shape = tape.shape(hidden).to_vec();
    if shape.len() != 2 || shape[0] != bundle.total() {
        return Err(Error::Contract(format!(
            "hidden state has {:?} rows but the bundle records {} (= {} + {} + {})",
            shape.first().copied().unwrap_or(0),
            bundle.total(),
            bundle.explicit_len,
            bundle.textual_len,
            bundle.patch_len
        )));
    }
    let d = shape[1];
    let start = bundle.explicit_len + bundle.textual_len;
    let kept = tape.slice_rows(hidden, start, bundle.total())?;
    let flat = tape.reshape(kept, vec![bundle.patch_len * d])?;
    let w = binds.get("head.w")?;
    let b = binds.get("head.b")?;
    tape.linear(flat, w, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig { hidden: 4, layers: 1, heads: 2, ff: 8, max_seq: 6, seed: 13 }
    }

    fn build(cfg: &BackboneConfig, run_seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        register_backbone_params(cfg, &mut store, run_seed).unwrap();
        store
    }

    #[test]
    fn output_shape_equals_input_shape_and_is_deterministic() {
        let cfg = tiny_cfg();
        let store = build(&cfg, 1);
        let run = || {
            let mut tape = Tape::new();
            let binds = Bindings::bind_all(&mut tape, &store).unwrap();
            let x = tape
                .constant(vec![3, 4], (0..12).map(|v| (v as f64) * 0.1 - 0.5).collect())
                .unwrap();
            let out = backbone_forward(&mut tape, &binds, &cfg, x).unwrap();
            assert_eq!(tape.shape(out), &[3, 4]);
            tape.data(out).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn sequence_beyond_capacity_errors() {
        let cfg = tiny_cfg();
        let store = build(&cfg, 1);
        let mut tape = Tape::new();
        let binds = Bindings::bind_all(&mut tape, &store).unwrap();
        let x = tape.constant(vec![7, 4], vec![0.0; 28]).unwrap();
        assert!(matches!(
            backbone_forward(&mut tape, &binds, &cfg, x),
            Err(Error::Capacity { got: 7, max: 6 })
        ));
    }

    #[test]
    fn causal_mask_blocks_future_positions() {
        // Perturbing input row j must leave output rows < j unchanged.
        let cfg = tiny_cfg();
        let store = build(&cfg, 2);
        let base: Vec<f64> = (0..16).map(|v| ((v * 7 % 13) as f64) * 0.2 - 1.0).collect();
        let forward = |data: Vec<f64>| {
            let mut tape = Tape::new();
            let binds = Bindings::bind_all(&mut tape, &store).unwrap();
            let x = tape.constant(vec![4, 4], data).unwrap();
            let out = backbone_forward(&mut tape, &binds, &cfg, x).unwrap();
            tape.data(out).to_vec()
        };
        let reference = forward(base.clone());
        for j in 0..4 {
            let mut perturbed = base.clone();
            for c in 0..4 {
                perturbed[j * 4 + c] += 0.37 + c as f64 * 0.11;
            }
            let out = forward(perturbed);
            for row in 0..4 {
                let changed = reference[row * 4..(row + 1) * 4]
                    .iter()
                    .zip(&out[row * 4..(row + 1) * 4])
                    .any(|(a, b)| (a - b).abs() > 1e-12);
                if row < j {
                    assert!(!changed, "row {row} changed after perturbing row {j}");
                } else if row == j {
                    assert!(changed, "row {row} should react to its own perturbation");
                }
            }
        }
    }

    #[test]
    fn head_with_zero_weights_returns_bias() {
        let mut store = ParamStore::new();
        register_output_head(&mut store, 3, 4, 2, 5).unwrap();
        store.get_mut("head.w").unwrap().tensor.data_mut().fill(0.0);
        store
            .get_mut("head.b")
            .unwrap()
            .tensor
            .data_mut()
            .copy_from_slice(&[0.25, -1.5]);
        let mut tape = Tape::new();
        let binds = Bindings::bind_all(&mut tape, &store).unwrap();
        let hidden = tape.constant(vec![5, 4], (0..20).map(|v| v as f64).collect()).unwrap();
        let bundle = PromptBundle { explicit_len: 1, textual_len: 1, patch_len: 3 };
        let out = strip_prefix_and_project(&mut tape, &binds, hidden, &bundle).unwrap();
        assert_eq!(tape.data(out), &[0.25, -1.5]);
    }

    #[test]
    fn prefix_rows_do_not_reach_the_head() {
        let mut store = ParamStore::new();
        register_output_head(&mut store, 2, 3, 2, 9).unwrap();
        let bundle = PromptBundle { explicit_len: 2, textual_len: 1, patch_len: 2 };
        let run = |prefix_fill: f64| {
            let mut tape = Tape::new();
            let binds = Bindings::bind_all(&mut tape, &store).unwrap();
            let mut data = vec![prefix_fill; 9]; // 3 prefix rows x 3 cols
            data.extend((0..6).map(|v| v as f64 * 0.3));
            let hidden = tape.constant(vec![5, 3], data).unwrap();
            let out = strip_prefix_and_project(&mut tape, &binds, hidden, &bundle).unwrap();
            tape.data(out).to_vec()
        };
        assert_eq!(run(0.0), run(123.456));
    }

    #[test]
    fn flatten_order_is_row_major() {
        // Delta probe: a 1 at patch row p, column d must activate exactly
        // head weight row p*D + d.
        let p = 3;
        let d = 4;
        let t = 2;
        let mut store = ParamStore::new();
        register_output_head(&mut store, p, d, t, 5).unwrap();
        let w = store.get("head.w").unwrap().tensor.clone();
        store.get_mut("head.b").unwrap().tensor.data_mut().fill(0.0);
        let bundle = PromptBundle { explicit_len: 0, textual_len: 0, patch_len: p };
        for row in 0..p {
            for col in 0..d {
                let mut tape = Tape::new();
                let binds = Bindings::bind_all(&mut tape, &store).unwrap();
                let mut data = vec![0.0; p * d];
                data[row * d + col] = 1.0;
                let hidden = tape.constant(vec![p, d], data).unwrap();
                let out = strip_prefix_and_project(&mut tape, &binds, hidden, &bundle).unwrap();
                let flat_idx = row * d + col;
                let expect = &w.data()[flat_idx * t..(flat_idx + 1) * t];
                assert_eq!(tape.data(out), expect, "row {row} col {col}");
            }
        }
    }

    #[test]
    fn row_count_mismatch_is_contract_violation() {
        let mut store = ParamStore::new();
        register_output_head(&mut store, 2, 3, 1, 0).unwrap();
        let mut tape = Tape::new();
        let binds = Bindings::bind_all(&mut tape, &store).unwrap();
        let hidden = tape.constant(vec![4, 3], vec![0.0; 12]).unwrap();
        let bundle = PromptBundle { explicit_len: 1, textual_len: 0, patch_len: 2 }; // total 3 != 4
        assert!(matches!(
            strip_prefix_and_project(&mut tape, &binds, hidden, &bundle),
            Err(Error::Contract(_))
        ));
    }
}
