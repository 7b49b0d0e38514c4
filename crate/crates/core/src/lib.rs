//! Dual-prompt multimodal time series forecasting at desk scale.
//!
//! The model pairs two embedding prefixes with a patch-embedded numeric
//! window in front of a small frozen decoder-style transformer:
//!
//! - an explicit prompt: a rendered instruction/statistics string, embedded
//!   through a frozen hashed tokenizer and table (prefix `E`);
//! - a textual prompt: per-timestamp summary encodings refined by a
//!   trainable projection + multi-head self-attention + ReLU (prefix `I`);
//! - the numeric window, RevIN-normalized, patch-sliced and linearly
//!   embedded (rows `X`).
//!
//! Only positional embeddings, layer norms, the prompt-refinement block,
//! the RevIN affine, the patch embedding and the output head train; the
//! backbone body, tokenizer table and summary encoder stay frozen.
//!
//! Everything runs on an in-crate reverse-mode autodiff tape in f64 with
//! finite-difference verification built in ([`gradcheck`]).

pub mod backbone;
pub mod data;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub(crate) mod hashing;
pub mod init;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod prompts;
pub mod runner;
pub mod series;
pub mod tape;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
pub use tensor::{ParamStore, Parameter, Tensor};
