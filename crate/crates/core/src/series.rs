//! Numeric window embedding: reversible instance normalization, patch
//! slicing and the linear patch embedding.
//!
//! Patch counts follow `P = floor((L - L_p) / stride) + 2`. The window is
//! padded by repeating its final value `stride` times before slicing;
//! under that padding the count identity
//! `floor((L + stride - L_p) / stride) + 1 = floor((L - L_p) / stride) + 2`
//! holds exactly for every valid configuration, so the "+2" is an identity
//! rather than an approximation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::tape::{Bindings, Tape, ValueId};
use crate::tensor::{ParamStore, Parameter, Tensor};

/// Default epsilon inside the RevIN denominator.
pub const REVIN_EPS: f64 = 1e-5;

/// Per-window normalization statistics, captured by `normalize` and
/// consumed by `denormalize`. One state must not be shared across
/// concurrent windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RevinState {
    pub mean: f64,
    /// Population variance (divide by L).
    pub var: f64,
    pub eps: f64,
}

impl RevinState {
    /// Mean and population variance of one window.
    pub fn from_window(window: &[f64], eps: f64) -> Result<Self> {
        if window.is_empty() {
            return Err(Error::InsufficientData("cannot normalize an empty window".into()));
        }
        let n = window.len() as f64;
        let mean = window.iter().sum::<f64>() / n;
        let var = window.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Ok(Self { mean, var, eps })
    }

    /// The strictly positive denominator sqrt(var + eps).
    pub fn denom(&self) -> f64 {
        (self.var + self.eps).sqrt()
    }

    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }

    /// (x - mean) / denom, without the affine part.
    pub fn standardize(&self, window: &[f64]) -> Vec<f64> {
        let d = self.denom();
        window.iter().map(|&x| (x - self.mean) / d).collect()
    }
}

/// gamma * (x - mean)/denom + beta on plain values.
pub fn revin_normalize(window: &[f64], state: &RevinState, gamma: f64, beta: f64) -> Vec<f64> {
    state.standardize(window).into_iter().map(|z| gamma * z + beta).collect()
}

/// Exact algebraic inverse ((y - beta)/gamma) * denom + mean; errors when
/// gamma is zero.
pub fn revin_denormalize(
    values: &[f64],
    state: &RevinState,
    gamma: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    if gamma == 0.0 {
        return Err(Error::NonInvertible);
    }
    let d = state.denom();
    Ok(values.iter().map(|&y| ((y - beta) / gamma) * d + state.mean).collect())
}

/// Tape version of the affine step: gamma and beta are bound 1-element
/// parameters, the standardized window enters as a constant.
pub fn normalize_on_tape(
    tape: &mut Tape,
    standardized: &[f64],
    binds: &Bindings,
) -> Result<ValueId> {
    let xhat = tape.constant(vec![standardized.len()], standardized.to_vec())?;
    let gamma = binds.get("revin.gamma")?;
    let beta = binds.get("revin.beta")?;
    let scaled = tape.mul_scalar(xhat, gamma)?;
    tape.add_scalar(scaled, beta)
}

/// Tape version of the inverse applied to model outputs.
pub fn denormalize_on_tape(
    tape: &mut Tape,
    predictions: ValueId,
    state: &RevinState,
    binds: &Bindings,
) -> Result<ValueId> {
    let gamma = binds.get("revin.gamma")?;
    let beta = binds.get("revin.beta")?;
    let centered = tape.sub_scalar(predictions, beta)?;
    let unscaled = tape.div_scalar(centered, gamma)?; // NonInvertible on gamma == 0
    let stretched = tape.mul_const(unscaled, state.denom())?;
    tape.add_const(stretched, state.mean)
}

/// Registers the scalar RevIN affine parameters (gamma = 1, beta = 0).
pub fn register_revin_params(store: &mut ParamStore) -> Result<()> {
    store.insert(Parameter::new("revin.gamma", Tensor::vector(vec![1.0]), true))?;
    store.insert(Parameter::new("revin.beta", Tensor::vector(vec![0.0]), true))
}

// ---------------------------------------------------------------------------
// Patching
// ---------------------------------------------------------------------------

/// Patch geometry for one lookback length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub lookback: usize,
}

impl PatchConfig {
    pub fn new(patch_len: usize, stride: usize, lookback: usize) -> Result<Self> {
        let mut violations = Vec::new();
        if patch_len == 0 {
            violations.push("patch length must be >= 1".to_string());
        }
        if stride == 0 {
            violations.push("stride must be >= 1".to_string());
        }
        if patch_len > lookback {
            violations.push(format!(
                "patch length {patch_len} exceeds lookback {lookback}"
            ));
        }
        if !violations.is_empty() {
            return Err(Error::Config { violations });
        }
        Ok(Self { patch_len, stride, lookback })
    }

    /// P = floor((L - L_p) / stride) + 2.
    pub fn patch_count(&self) -> usize {
        (self.lookback - self.patch_len) / self.stride + 2
    }

    /// Source index into the window for every patch element, in patch
    /// order. Padded positions (>= L) resolve to the final window index.
    pub fn source_indices(&self) -> Vec<usize> {
        let p = self.patch_count();
        let mut indices = Vec::with_capacity(p * self.patch_len);
        for i in 0..p {
            let start = i * self.stride;
            for off in 0..self.patch_len {
                indices.push((start + off).min(self.lookback - 1));
            }
        }
        indices
    }
}

/// Slices a window into its patches on plain values.
pub fn patchify(window: &[f64], cfg: &PatchConfig) -> Result<Vec<Vec<f64>>> {
    if window.len() != cfg.lookback {
        return Err(Error::Dimension {
            op: "patchify",
            detail: format!("window length {} vs configured lookback {}", window.len(), cfg.lookback),
        });
    }
    let indices = cfg.source_indices();
    Ok(indices
        .chunks(cfg.patch_len)
        .map(|chunk| chunk.iter().map(|&i| window[i]).collect())
        .collect())
}

/// Tape version: a gather, so gradients scatter-add back into the window
/// (the replicated final value accumulates every padded contribution).
pub fn patchify_on_tape(tape: &mut Tape, window: ValueId, cfg: &PatchConfig) -> Result<ValueId> {
    let shape = tape.shape(window);
    if shape != [cfg.lookback] {
        return Err(Error::Dimension {
            op: "patchify",
            detail: format!("window shape {:?} vs configured lookback {}", shape, cfg.lookback),
        });
    }
    let indices = cfg.source_indices();
    tape.gather(window, indices, vec![cfg.patch_count(), cfg.patch_len])
}

/// Registers the trainable patch embedding (L_p x D weights + D bias).
pub fn register_patch_embedding(
    store: &mut ParamStore,
    patch_len: usize,
    hidden: usize,
    seed: u64,
) -> Result<()> {
    let w = init::uniform_fan_in(seed, "patch.embed.w", patch_len, patch_len * hidden);
    store.insert(Parameter::new(
        "patch.embed.w",
        Tensor::new(vec![patch_len, hidden], w)?,
        true,
    ))?;
    store.insert(Parameter::new("patch.embed.b", Tensor::vector(vec![0.0; hidden]), true))
}

/// Row i of the result is the linear embedding of patch i.
pub fn embed_patches(tape: &mut Tape, patches: ValueId, binds: &Bindings) -> Result<ValueId> {
    let w = binds.get("patch.embed.w")?;
    let b = binds.get("patch.embed.b")?;
    tape.linear(patches, w, b)
}
