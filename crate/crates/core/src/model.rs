//! Full model assembly: configuration, variants, parameter registration,
//! the per-window forward graph, the trainable/frozen partition and
//! checkpointing.
//!
//! Frozen stand-ins (summary encoder, prompt embedding table, backbone
//! attention/feed-forward weights) are seeded by `ModelConfig::frozen_seed`
//! and shared across runs, mirroring pretrained weights that do not change
//! between seeds. Trainable parameters draw from the per-run seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backbone::{self, BackboneConfig};
use crate::data::WindowSample;
use crate::error::{Error, Result};
use crate::hashing;
use crate::prompts::{
    self, ExplicitPromptTemplate, PrefixOrder, TextualPromptParams,
};
use crate::series::{self, PatchConfig, RevinState, REVIN_EPS};
use crate::tape::{Bindings, Tape, ValueId};
use crate::tensor::{ParamStore, Tensor};
use crate::text::{compute_stats, SummaryEncoder, Vocabulary};

/// Ablation variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "FULL")]
    Full,
    #[serde(rename = "SEP")]
    Sep,
    #[serde(rename = "STP")]
    Stp,
    #[serde(rename = "DP-NTSA")]
    DpNtsa,
    #[serde(rename = "SPET")]
    Spet,
}

impl Variant {
    /// Fixed report ordering.
    pub const ALL: [Variant; 5] = [Variant::Full, Variant::Sep, Variant::Stp, Variant::DpNtsa, Variant::Spet];

    pub fn uses_explicit(self) -> bool {
        !matches!(self, Variant::Stp)
    }

    pub fn uses_textual(self) -> bool {
        !matches!(self, Variant::Sep)
    }

    /// DP-NTSA drops the self-attention inside the textual path.
    pub fn textual_attention(self) -> bool {
        !matches!(self, Variant::DpNtsa)
    }

    pub fn prefix_order(self) -> PrefixOrder {
        if matches!(self, Variant::Spet) {
            PrefixOrder::TextualFirst
        } else {
            PrefixOrder::ExplicitFirst
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::Full => "FULL",
            Variant::Sep => "SEP",
            Variant::Stp => "STP",
            Variant::DpNtsa => "DP-NTSA",
            Variant::Spet => "SPET",
        };
        write!(f, "{s}")
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

fn default_backbone_dim() -> usize { 32 }
fn default_backbone_layers() -> usize { 2 }
fn default_backbone_heads() -> usize { 4 }
fn default_backbone_ff() -> usize { 128 }
fn default_text_dim() -> usize { 32 }
fn default_attn_dim() -> usize { 32 }
fn default_attn_heads() -> usize { 4 }
fn default_max_prompt_tokens() -> usize { 64 }
fn default_vocab_size() -> usize { 512 }
fn default_patch_len() -> usize { 4 }
fn default_patch_stride() -> usize { 2 }
fn default_frozen_seed() -> u64 { 7 }
fn default_description() -> String {
    "This is a univariate textual-numerical time series.".into()
}

/// All model dimensions. Lookback and horizon live in the training
/// configuration; everything here is task-independent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Backbone hidden width D.
    #[serde(default = "default_backbone_dim")]
    pub backbone_dim: usize,
    #[serde(default = "default_backbone_layers")]
    pub backbone_layers: usize,
    #[serde(default = "default_backbone_heads")]
    pub backbone_heads: usize,
    #[serde(default = "default_backbone_ff")]
    pub backbone_ff: usize,
    /// Backbone capacity; computed as `max_prompt_tokens + L + P` when
    /// absent.
    #[serde(default)]
    pub max_seq_len: Option<usize>,
    /// Summary encoder hidden width M.
    #[serde(default = "default_text_dim")]
    pub text_dim: usize,
    /// Textual prompt attention width d_m.
    #[serde(default = "default_attn_dim")]
    pub attn_dim: usize,
    /// Textual prompt head count K.
    #[serde(default = "default_attn_heads")]
    pub attn_heads: usize,
    /// Cap on the explicit prompt token count w.
    #[serde(default = "default_max_prompt_tokens")]
    pub max_prompt_tokens: usize,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "default_patch_len")]
    pub patch_len: usize,
    #[serde(default = "default_patch_stride")]
    pub patch_stride: usize,
    /// Seed of every frozen stand-in (tokenizer table, summary encoder,
    /// backbone body).
    #[serde(default = "default_frozen_seed")]
    pub frozen_seed: u64,
    /// Leading sentence of the explicit prompt.
    #[serde(default = "default_description")]
    pub dataset_description: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl ModelConfig {
    /// Collects every violated constraint rather than stopping at the
    /// first.
    pub fn validate(&self) -> Result<()> {
        let mut violations = Vec::new();
        if self.backbone_dim < 2 {
            violations.push(format!("backbone_dim must be >= 2, got {}", self.backbone_dim));
        }
        if self.backbone_heads == 0 {
            violations.push("backbone_heads must be >= 1".into());
        } else if self.backbone_dim % self.backbone_heads != 0 {
            violations.push(format!(
                "backbone_dim {} must be divisible by backbone_heads {}",
                self.backbone_dim, self.backbone_heads
            ));
        }
        if self.backbone_layers == 0 {
            violations.push("backbone_layers must be >= 1".into());
        }
        if self.backbone_ff == 0 {
            violations.push("backbone_ff must be >= 1".into());
        }
        if self.text_dim < 2 {
            violations.push(format!("text_dim must be >= 2, got {}", self.text_dim));
        }
        if self.attn_heads == 0 {
            violations.push("attn_heads must be >= 1".into());
        } else if self.attn_dim % self.attn_heads != 0 {
            violations.push(format!(
                "attn_dim {} must be divisible by attn_heads {}",
                self.attn_dim, self.attn_heads
            ));
        }
        if self.attn_dim == 0 {
            violations.push("attn_dim must be >= 1".into());
        }
        if self.max_prompt_tokens == 0 {
            violations.push("max_prompt_tokens must be >= 1".into());
        }
        if self.vocab_size < 2 {
            violations.push(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.patch_len == 0 {
            violations.push("patch_len must be >= 1".into());
        }
        if self.patch_stride == 0 {
            violations.push("patch_stride must be >= 1".into());
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { violations })
        }
    }
}

// ---------------------------------------------------------------------------
// Frozen shared assets
// ---------------------------------------------------------------------------

/// The frozen pieces every run shares: tokenizer, summary encoder, prompt
/// embedding table and the prompt template. Immutable after construction
/// and safe to share across threads.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrozenAssets {
    pub vocab: Vocabulary,
    pub encoder: SummaryEncoder,
    pub prompt_table: Tensor,
    pub template: ExplicitPromptTemplate,
}

impl FrozenAssets {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocabulary::new(cfg.vocab_size, cfg.frozen_seed)?;
        let encoder = SummaryEncoder::new(&vocab, cfg.text_dim, cfg.frozen_seed)?;
        let prompt_table = prompts::build_prompt_table(cfg.vocab_size, cfg.backbone_dim, cfg.frozen_seed);
        let template = ExplicitPromptTemplate::with_description(cfg.dataset_description.clone());
        Ok(Self { vocab, encoder, prompt_table, template })
    }
}

// ---------------------------------------------------------------------------
// Prepared windows
// ---------------------------------------------------------------------------

/// Everything about one window that does not depend on trainable
/// parameters, precomputed once so epochs only pay for the trainable path.
#[derive(Debug, Clone)]
pub struct PreparedWindow {
    pub targets: Vec<f64>,
    /// (x - mean) / sqrt(var + eps), before the trainable affine.
    pub xhat: Vec<f64>,
    pub state: RevinState,
    /// Frozen explicit-prompt rows (w x D).
    pub explicit: Option<Tensor>,
    /// Frozen summary encodings (L x M).
    pub summary: Option<Tensor>,
    pub prompt_text: String,
    pub start_timestamp: String,
}

/// Precomputes the frozen parts of one window: statistics, the rendered
/// prompt and its embedding, summary encodings and RevIN state.
pub fn prepare_window(
    assets: &FrozenAssets,
    cfg: &ModelConfig,
    lookback: usize,
    horizon: usize,
    sample: &WindowSample,
) -> Result<PreparedWindow> {
    if sample.values.len() != lookback {
        return Err(Error::Alignment(format!(
            "window has {} values, model expects lookback {lookback}",
            sample.values.len()
        )));
    }
    let stats = compute_stats(&sample.values)?;
    let prompt_text = assets.template.render(&stats, lookback, horizon);
    let explicit = prompts::embed_explicit_prompt(
        &prompt_text,
        &assets.prompt_table,
        &assets.vocab,
        cfg.max_prompt_tokens,
    )?;
    let summary = crate::text::encode_window_texts(
        &sample.summaries,
        lookback,
        &assets.encoder,
        &assets.vocab,
    )?;
    let state = RevinState::from_window(&sample.values, REVIN_EPS)?;
    Ok(PreparedWindow {
        targets: sample.targets.clone(),
        xhat: state.standardize(&sample.values),
        state,
        explicit: Some(explicit),
        summary: Some(summary),
        prompt_text,
        start_timestamp: sample.start_timestamp.clone(),
    })
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// One buildable, trainable forecaster instance.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub lookback: usize,
    pub horizon: usize,
    pub variant: Variant,
    pub run_seed: u64,
    pub store: ParamStore,
    pub assets: Arc<FrozenAssets>,
    patch_cfg: PatchConfig,
    backbone_cfg: BackboneConfig,
    textual: Option<TextualPromptParams>,
}

impl Model {
    pub fn build(
        cfg: ModelConfig,
        lookback: usize,
        horizon: usize,
        variant: Variant,
        run_seed: u64,
    ) -> Result<Self> {
        let assets = Arc::new(FrozenAssets::new(&cfg)?);
        Self::build_with_assets(cfg, assets, lookback, horizon, variant, run_seed)
    }

    /// Builds a model that shares already-constructed frozen assets; the
    /// ablation harness uses this to avoid re-deriving them per run.
    pub fn build_with_assets(
        cfg: ModelConfig,
        assets: Arc<FrozenAssets>,
        lookback: usize,
        horizon: usize,
        variant: Variant,
        run_seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        if horizon == 0 {
            return Err(Error::Config { violations: vec!["horizon must be >= 1".into()] });
        }
        let patch_cfg = PatchConfig::new(cfg.patch_len, cfg.patch_stride, lookback)?;
        let patch_count = patch_cfg.patch_count();
        let required_seq = cfg.max_prompt_tokens + lookback + patch_count;
        let max_seq = match cfg.max_seq_len {
            Some(explicit) if explicit < required_seq => {
                return Err(Error::Config {
                    violations: vec![format!(
                        "max_seq_len {explicit} is below the required {required_seq} \
                         (= max_prompt_tokens + lookback + patch count)"
                    )],
                })
            }
            Some(explicit) => explicit,
            None => required_seq,
        };
        let backbone_cfg = BackboneConfig {
            hidden: cfg.backbone_dim,
            layers: cfg.backbone_layers,
            heads: cfg.backbone_heads,
            ff: cfg.backbone_ff,
            max_seq,
            seed: cfg.frozen_seed,
        };

        let mut store = ParamStore::new();
        let textual = if variant.uses_textual() {
            let params = TextualPromptParams::new(cfg.text_dim, cfg.attn_dim, cfg.attn_heads, cfg.backbone_dim)?;
            params.register(&mut store, run_seed, variant.textual_attention())?;
            Some(params)
        } else {
            None
        };
        series::register_revin_params(&mut store)?;
        series::register_patch_embedding(&mut store, cfg.patch_len, cfg.backbone_dim, run_seed)?;
        backbone::register_backbone_params(&backbone_cfg, &mut store, run_seed)?;
        backbone::register_output_head(&mut store, patch_count, cfg.backbone_dim, horizon, run_seed)?;

        Ok(Self {
            config: cfg,
            lookback,
            horizon,
            variant,
            run_seed,
            store,
            assets,
            patch_cfg,
            backbone_cfg,
            textual,
        })
    }

    pub fn patch_count(&self) -> usize {
        self.patch_cfg.patch_count()
    }

    /// Expected backbone row count for this variant; the explicit prefix
    /// length varies per window, so this is the length for `explicit_len`
    /// prompt tokens.
    pub fn sequence_len(&self, explicit_len: usize) -> usize {
        let e = if self.variant.uses_explicit() { explicit_len } else { 0 };
        let t = if self.variant.uses_textual() { self.lookback } else { 0 };
        e + t + self.patch_count()
    }

    /// Binds every parameter onto a fresh tape.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bindings> {
        Bindings::bind_all(tape, &self.store)
    }

    /// Builds the forward graph for one prepared window and returns the
    /// denormalized length-T prediction node.
    pub fn forward_prepared(
        &self,
        tape: &mut Tape,
        binds: &Bindings,
        window: &PreparedWindow,
    ) -> Result<ValueId> {
        // Numeric path: trainable RevIN affine, patch slicing, embedding.
        let normalized = series::normalize_on_tape(tape, &window.xhat, binds)?;
        let patches = series::patchify_on_tape(tape, normalized, &self.patch_cfg)?;
        let x = series::embed_patches(tape, patches, binds)?;

        let explicit = if self.variant.uses_explicit() {
            let rows = window.explicit.as_ref().ok_or_else(|| {
                Error::Contract("variant needs the explicit prompt but the window was prepared without it".into())
            })?;
            Some(tape.constant_tensor(rows)?)
        } else {
            None
        };

        let textual = if self.variant.uses_textual() {
            let summary = window.summary.as_ref().ok_or_else(|| {
                Error::Contract("variant needs summary encodings but the window was prepared without them".into())
            })?;
            let s = tape.constant_tensor(summary)?;
            let params = self.textual.as_ref().expect("textual params exist for this variant");
            let id = if self.variant.textual_attention() {
                prompts::textual_prompt_forward(tape, binds, params, s)?.output
            } else {
                prompts::textual_prompt_forward_no_attention(tape, binds, params, s)?
            };
            Some(id)
        } else {
            None
        };

        let (bundle, seq) =
            prompts::assemble_bundle(tape, explicit, textual, x, self.variant.prefix_order())?;
        let hidden = backbone::backbone_forward(tape, binds, &self.backbone_cfg, seq)?;
        let normalized_pred = backbone::strip_prefix_and_project(tape, binds, hidden, &bundle)?;
        series::denormalize_on_tape(tape, normalized_pred, &window.state, binds)
    }

    /// Convenience forward for one raw sample: prepares the frozen parts,
    /// runs the graph and extracts the prediction values.
    pub fn forward_sample(&self, sample: &WindowSample) -> Result<Vec<f64>> {
        let prepared = prepare_window(&self.assets, &self.config, self.lookback, self.horizon, sample)?;
        self.forward_window(&prepared)
    }

    /// Forward for an already prepared window.
    pub fn forward_window(&self, window: &PreparedWindow) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let binds = self.bind(&mut tape)?;
        let pred = self.forward_prepared(&mut tape, &binds, window)?;
        Ok(tape.data(pred).to_vec())
    }

    /// Disjoint, exhaustive (trainable, frozen) name lists. Frozen names
    /// cover the store's frozen parameters plus the shared assets (prompt
    /// table and summary encoder weights).
    pub fn partition_parameters(&self) -> (Vec<String>, Vec<String>) {
        let mut trainable = Vec::new();
        let mut frozen = Vec::new();
        for p in self.store.iter() {
            if p.trainable {
                trainable.push(p.name.clone());
            } else {
                frozen.push(p.name.clone());
            }
        }
        frozen.push("prompt.table".to_string());
        for (name, _) in self.assets.encoder.named_arrays() {
            frozen.push(name.to_string());
        }
        (trainable, frozen)
    }

    /// Bit-pattern checksums of every frozen parameter and asset.
    pub fn frozen_checksums(&self) -> BTreeMap<String, u64> {
        let mut sums = BTreeMap::new();
        for p in self.store.iter() {
            if !p.trainable {
                sums.insert(p.name.clone(), p.tensor.checksum());
            }
        }
        sums.insert("prompt.table".to_string(), self.assets.prompt_table.checksum());
        for (name, data) in self.assets.encoder.named_arrays() {
            let mut h = hashing::FNV_OFFSET;
            for v in data {
                h = hashing::fnv1a_u64(h, v.to_bits());
            }
            sums.insert(name.to_string(), h);
        }
        sums
    }

    // ----- persistence -----

    pub fn save(&self, path: &Path) -> Result<()> {
        let checkpoint = Checkpoint {
            format_version: 1,
            config: self.config.clone(),
            lookback: self.lookback,
            horizon: self.horizon,
            variant: self.variant,
            run_seed: self.run_seed,
            store: self.store.clone(),
            vocab: self.assets.vocab.clone(),
            encoder: self.assets.encoder.clone(),
            prompt_table: self.assets.prompt_table.clone(),
        };
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)
                    .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
            }
        }
        let json = serde_json::to_string(&checkpoint)
            .map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        fs::write(path, json).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let mut checkpoint: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        checkpoint.store.reindex();
        let assets = Arc::new(FrozenAssets {
            vocab: checkpoint.vocab,
            encoder: checkpoint.encoder,
            prompt_table: checkpoint.prompt_table,
            template: ExplicitPromptTemplate::with_description(
                checkpoint.config.dataset_description.clone(),
            ),
        });
        // Rebuild the skeleton, then overwrite every parameter with the
        // saved arrays so the loaded model reproduces forwards bit-exactly.
        let mut model = Self::build_with_assets(
            checkpoint.config,
            assets,
            checkpoint.lookback,
            checkpoint.horizon,
            checkpoint.variant,
            checkpoint.run_seed,
        )?;
        for saved in checkpoint.store.iter() {
            let p = model.store.get_mut(&saved.name).ok_or_else(|| {
                Error::Contract(format!("checkpoint parameter {:?} unknown to this build", saved.name))
            })?;
            if p.tensor.shape() != saved.tensor.shape() {
                return Err(Error::Contract(format!(
                    "checkpoint parameter {:?} has shape {:?}, expected {:?}",
                    saved.name,
                    saved.tensor.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(saved.tensor.data());
        }
        Ok(model)
    }
}

/// Self-describing checkpoint container (JSON). f64 values survive the
/// round trip bit-exactly because the serializer prints shortest
/// representations that reparse to the identical bits.
#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: ModelConfig,
    lookback: usize,
    horizon: usize,
    variant: Variant,
    run_seed: u64,
    store: ParamStore,
    vocab: Vocabulary,
    encoder: SummaryEncoder,
    prompt_table: Tensor,
}
