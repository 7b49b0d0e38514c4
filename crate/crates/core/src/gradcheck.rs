//! Central finite-difference gradient verification.
//!
//! The checker only ever calls forward passes, so it stays independent of
//! the backward rules it validates. Errors are reported as max-norm
//! relative error: `max_i |a_i - n_i| / max(||a||_inf, ||n||_inf, 1e-12)`.

use crate::error::Result;

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Gradient of `f` at `x` by central differences, one coordinate at a time.
pub fn central_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Max-norm relative error between an analytic and a numeric gradient.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |acc, (a, n)| acc.max((a - n).abs()))
        / scale
}

/// Outcome of one named gradient check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err <= self.tolerance
    }
}

/// A named check: runs one analytic-vs-finite-difference comparison.
pub struct Check {
    pub name: &'static str,
    pub tolerance: f64,
    run: Box<dyn Fn() -> Result<f64>>,
}

impl Check {
    pub fn new(name: &'static str, tolerance: f64, run: impl Fn() -> Result<f64> + 'static) -> Self {
        Self { name, tolerance, run: Box::new(run) }
    }

    pub fn execute(&self) -> Result<CheckResult> {
        let err = (self.run)()?;
        Ok(CheckResult { name: self.name, max_rel_err: err, tolerance: self.tolerance })
    }
}

// ---------------------------------------------------------------------------
// Standard suite
// ---------------------------------------------------------------------------

use crate::backbone;
use crate::data::WindowSample;
use crate::init;
use crate::model::{prepare_window, Model, ModelConfig, Variant};
use crate::prompts::{self, TextualPromptParams};
use crate::series::{self, PatchConfig};
use crate::tape::{Bindings, Tape, ValueId};
use crate::tensor::ParamStore;

const SUITE_SEED: u64 = 0xC0FFEE;

fn seeded(name: &str, len: usize, scale: f64) -> Vec<f64> {
    init::uniform_fan_in(SUITE_SEED, name, 1, len)
        .into_iter()
        .map(|v| v * scale)
        .collect()
}

/// Writes a flat parameter vector back into the store, in `names` order.
fn write_params(store: &mut ParamStore, names: &[String], theta: &[f64]) {
    let mut offset = 0;
    for name in names {
        let p = store.get_mut(name).expect("known name");
        let n = p.tensor.numel();
        p.tensor.data_mut().copy_from_slice(&theta[offset..offset + n]);
        offset += n;
    }
    assert_eq!(offset, theta.len());
}

fn read_params(store: &ParamStore, names: &[String]) -> Vec<f64> {
    let mut out = Vec::new();
    for name in names {
        out.extend_from_slice(store.get(name).expect("known name").tensor.data());
    }
    out
}

fn read_grads(store: &ParamStore, names: &[String]) -> Vec<f64> {
    let mut out = Vec::new();
    for name in names {
        let p = store.get(name).expect("known name");
        match p.tensor.grad() {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat(0.0).take(p.tensor.numel())),
        }
    }
    out
}

/// Compares tape gradients of `loss(store)` against central differences
/// over the named parameters.
fn check_store_gradients(
    store: &ParamStore,
    names: &[String],
    loss: impl Fn(&mut Tape, &Bindings) -> crate::error::Result<ValueId>,
) -> Result<f64> {
    // analytic
    let mut work = store.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let binds = Bindings::bind_all(&mut tape, &work)?;
    let l = loss(&mut tape, &binds)?;
    tape.backward(l)?;
    tape.grads_into(&mut work)?;
    let analytic = read_grads(&work, names);

    // numeric
    let theta0 = read_params(store, names);
    let f = |theta: &[f64]| -> f64 {
        let mut st = store.clone();
        write_params(&mut st, names, theta);
        let mut t = Tape::new();
        let b = Bindings::bind_all(&mut t, &st).expect("bind");
        let l = loss(&mut t, &b).expect("forward");
        t.data(l)[0]
    };
    let numeric = central_diff_grad(f, &theta0, FD_STEP);
    Ok(max_rel_err(&analytic, &numeric))
}

/// Weighted sum of a node against a fixed coefficient matrix, making the
/// loss sensitive to every output entry.
fn weighted_sum(tape: &mut Tape, x: ValueId, weights: &[f64]) -> crate::error::Result<ValueId> {
    let c = tape.constant(tape.shape(x).to_vec(), weights.to_vec())?;
    let prod = tape.mul_elem(x, c)?;
    tape.sum_all(prod)
}

fn check_matmul() -> Result<f64> {
    let a0 = seeded("matmul.a", 12, 1.0);
    let b0 = seeded("matmul.b", 8, 1.0);
    let mut tape = Tape::new();
    let a = tape.leaf(vec![3, 4], a0.clone(), true)?;
    let b = tape.leaf(vec![4, 2], b0.clone(), true)?;
    let c = tape.matmul(a, b)?;
    let l = tape.sum_all(c)?;
    tape.backward(l)?;
    let mut analytic = tape.grad(a).unwrap().to_vec();
    analytic.extend_from_slice(tape.grad(b).unwrap());

    let theta: Vec<f64> = a0.iter().chain(&b0).copied().collect();
    let f = |theta: &[f64]| -> f64 {
        let mut t = Tape::new();
        let a = t.leaf(vec![3, 4], theta[..12].to_vec(), false).expect("leaf");
        let b = t.leaf(vec![4, 2], theta[12..].to_vec(), false).expect("leaf");
        let c = t.matmul(a, b).expect("matmul");
        let l = t.sum_all(c).expect("sum");
        t.data(l)[0]
    };
    let numeric = central_diff_grad(f, &theta, FD_STEP);
    Ok(max_rel_err(&analytic, &numeric))
}

fn check_softmax() -> Result<f64> {
    let x0 = seeded("softmax.x", 15, 2.0);
    let w = seeded("softmax.w", 15, 1.0);
    let mut tape = Tape::new();
    let x = tape.leaf(vec![3, 5], x0.clone(), true)?;
    let y = tape.softmax_rows(x)?;
    let l = weighted_sum(&mut tape, y, &w)?;
    tape.backward(l)?;
    let analytic = tape.grad(x).unwrap().to_vec();
    let f = |theta: &[f64]| -> f64 {
        let mut t = Tape::new();
        let x = t.leaf(vec![3, 5], theta.to_vec(), false).expect("leaf");
        let y = t.softmax_rows(x).expect("softmax");
        let l = weighted_sum(&mut t, y, &w).expect("loss");
        t.data(l)[0]
    };
    let numeric = central_diff_grad(f, &x0, FD_STEP);
    Ok(max_rel_err(&analytic, &numeric))
}

fn check_layer_norm() -> Result<f64> {
    let x0 = seeded("ln.x", 12, 2.0);
    let g0 = seeded("ln.gamma", 6, 1.0);
    let b0 = seeded("ln.beta", 6, 1.0);
    let w = seeded("ln.w", 12, 1.0);
    let sizes = [12usize, 6, 6];
    let build = |theta: &[f64], grads: bool| -> (Tape, ValueId, [ValueId; 3]) {
        let mut t = Tape::new();
        let x = t.leaf(vec![2, 6], theta[..12].to_vec(), grads).expect("x");
        let g = t.leaf(vec![6], theta[12..18].to_vec(), grads).expect("g");
        let b = t.leaf(vec![6], theta[18..].to_vec(), grads).expect("b");
        let y = t.layer_norm(x, g, b, 1e-5).expect("ln");
        let l = weighted_sum(&mut t, y, &w).expect("loss");
        (t, l, [x, g, b])
    };
    let theta: Vec<f64> = x0.iter().chain(&g0).chain(&b0).copied().collect();
    let (mut tape, l, ids) = build(&theta, true);
    tape.backward(l)?;
    let mut analytic = Vec::new();
    for (id, size) in ids.iter().zip(sizes) {
        match tape.grad(*id) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat(0.0).take(size)),
        }
    }
    let f = |theta: &[f64]| -> f64 {
        let (t, l, _) = build(theta, false);
        t.data(l)[0]
    };
    let numeric = central_diff_grad(f, &theta, FD_STEP);
    Ok(max_rel_err(&analytic, &numeric))
}

fn check_relu() -> Result<f64> {
    // keep every coordinate away from the kink: |x| >= 0.05 here
    let x0: Vec<f64> = seeded("relu.x", 10, 1.0)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { 0.05 + v } else { v })
        .map(|v| if v.abs() < 1e-3 { 0.1 } else { v })
        .collect();
    let w = seeded("relu.w", 10, 1.0);
    let mut tape = Tape::new();
    let x = tape.leaf(vec![10], x0.clone(), true)?;
    let y = tape.relu(x)?;
    let l = weighted_sum(&mut tape, y, &w)?;
    tape.backward(l)?;
    let analytic = tape.grad(x).unwrap().to_vec();
    let f = |theta: &[f64]| -> f64 {
        let mut t = Tape::new();
        let x = t.leaf(vec![10], theta.to_vec(), false).expect("x");
        let y = t.relu(x).expect("relu");
        let l = weighted_sum(&mut t, y, &w).expect("loss");
        t.data(l)[0]
    };
    let numeric = central_diff_grad(f, &x0, FD_STEP);
    Ok(max_rel_err(&analytic, &numeric))
}

fn check_linear() -> Result<f64> {
    let x0 = seeded("linear.x", 15, 1.0);
    let w0 = seeded("linear.w", 6, 1.0);
    let b0 = seeded("linear.b", 2, 1.0);
    let c = seeded("linear.c", 10, 1.0);
    let build = |theta: &[f64], grads: bool| -> (Tape, ValueId, [ValueId; 3]) {
        let mut t = Tape::new();
        let x = t.leaf(vec![5, 3], theta[..15].to_vec(), grads).expect("x");
        let w = t.leaf(vec![3, 2], theta[15..21].to_vec(), grads).expect("w");
        let b = t.leaf(vec![2], theta[21..].to_vec(), grads).expect("b");
        let y = t.linear(x, w, b).expect("linear");
        let l = weighted_sum(&mut t, y, &c).expect("loss");
        (t, l, [x, w, b])
    };
    let theta: Vec<f64> = x0.iter().chain(&w0).chain(&b0).copied().collect();
    let (mut tape, l, ids) = build(&theta, true);
    tape.backward(l)?;
    let mut analytic = Vec::new();
    for id in ids {
        analytic.extend_from_slice(tape.grad(id).unwrap());
    }
    let f = |theta: &[f64]| -> f64 {
        let (t, l, _) = build(theta, false);
        t.data(l)[0]
    };
    let numeric = central_diff_grad(f, &theta, FD_STEP);
    Ok(max_rel_err(&analytic, &numeric))
}

fn check_mse() -> Result<f64> {
    let p0 = seeded("mse.pred", 7, 2.0);
    let t0 = seeded("mse.target", 7, 2.0);
    let mut tape = Tape::new();
    let p = tape.leaf(vec![7], p0.clone(), true)?;
    let target = tape.constant(vec![7], t0.clone())?;
    let l = tape.mse_loss(p, target)?;
    tape.backward(l)?;
    let analytic = tape.grad(p).unwrap().to_vec();
    let f = |theta: &[f64]| -> f64 {
        let mut t = Tape::new();
        let p = t.leaf(vec![7], theta.to_vec(), false).expect("p");
        let target = t.constant(vec![7], t0.clone()).expect("t");
        let l = t.mse_loss(p, target).expect("mse");
        t.data(l)[0]
    };
    let numeric = central_diff_grad(f, &p0, FD_STEP);
    Ok(max_rel_err(&analytic, &numeric))
}

fn check_mlp_composite() -> Result<f64> {
    // f(x) = mse(relu(x W + b), y), gradients w.r.t. x, W and b
    let x0 = seeded("mlp.x", 8, 1.0);
    let w0 = seeded("mlp.w", 12, 1.0);
    let b0: Vec<f64> = seeded("mlp.b", 3, 1.0).into_iter().map(|v| v + 0.2).collect();
    let y0 = seeded("mlp.y", 6, 1.0);
    let build = |theta: &[f64], grads: bool| -> (Tape, ValueId, [ValueId; 3]) {
        let mut t = Tape::new();
        let x = t.leaf(vec![2, 4], theta[..8].to_vec(), grads).expect("x");
        let w = t.leaf(vec![4, 3], theta[8..20].to_vec(), grads).expect("w");
        let b = t.leaf(vec![3], theta[20..].to_vec(), grads).expect("b");
        let h = t.linear(x, w, b).expect("linear");
        let a = t.relu(h).expect("relu");
        let y = t.constant(vec![2, 3], y0.clone()).expect("y");
        let l = t.mse_loss(a, y).expect("mse");
        (t, l, [x, w, b])
    };
    let theta: Vec<f64> = x0.iter().chain(&w0).chain(&b0).copied().collect();
    let (mut tape, l, ids) = build(&theta, true);
    tape.backward(l)?;
    let mut analytic = Vec::new();
    for id in ids {
        analytic.extend_from_slice(tape.grad(id).unwrap());
    }
    let f = |theta: &[f64]| -> f64 {
        let (t, l, _) = build(theta, false);
        t.data(l)[0]
    };
    let numeric = central_diff_grad(f, &theta, FD_STEP);
    Ok(max_rel_err(&analytic, &numeric))
}

fn check_textual_prompt() -> Result<f64> {
    let params = TextualPromptParams::new(6, 8, 2, 10)?;
    let mut store = ParamStore::new();
    params.register(&mut store, SUITE_SEED, true)?;
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    let s0 = seeded("textual.s", 4 * 6, 1.0);
    let w = seeded("textual.weights", 4 * 10, 1.0);
    check_store_gradients(&store, &names, move |tape, binds| {
        let s = tape.constant(vec![4, 6], s0.clone())?;
        let fwd = prompts::textual_prompt_forward(tape, binds, &params, s)?;
        weighted_sum(tape, fwd.output, &w)
    })
}

fn check_revin_patch_embed() -> Result<f64> {
    let cfg = PatchConfig::new(3, 2, 9)?;
    let mut store = ParamStore::new();
    series::register_revin_params(&mut store)?;
    series::register_patch_embedding(&mut store, 3, 5, SUITE_SEED)?;
    // move the affine away from the identity so gradients are generic
    store.get_mut("revin.gamma").unwrap().tensor.data_mut()[0] = 1.3;
    store.get_mut("revin.beta").unwrap().tensor.data_mut()[0] = -0.4;
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    let window = seeded("revin.window", 9, 3.0);
    let state = series::RevinState::from_window(&window, series::REVIN_EPS)?;
    let xhat = state.standardize(&window);
    let w = seeded("revin.weights", cfg.patch_count() * 5, 1.0);
    check_store_gradients(&store, &names, move |tape, binds| {
        let normalized = series::normalize_on_tape(tape, &xhat, binds)?;
        let patches = series::patchify_on_tape(tape, normalized, &cfg)?;
        let embedded = series::embed_patches(tape, patches, binds)?;
        weighted_sum(tape, embedded, &w)
    })
}

fn check_backbone() -> Result<f64> {
    let cfg = backbone::BackboneConfig { hidden: 8, layers: 1, heads: 2, ff: 16, max_seq: 6, seed: SUITE_SEED };
    let mut store = ParamStore::new();
    backbone::register_backbone_params(&cfg, &mut store, SUITE_SEED ^ 1)?;
    // check only the trainable partition: positions and layer norms
    let names: Vec<String> = store.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    let x0 = seeded("backbone.x", 5 * 8, 1.0);
    let w = seeded("backbone.weights", 5 * 8, 1.0);
    check_store_gradients(&store, &names, move |tape, binds| {
        let x = tape.constant(vec![5, 8], x0.clone())?;
        let h = backbone::backbone_forward(tape, binds, &cfg, x)?;
        weighted_sum(tape, h, &w)
    })
}

fn check_output_head() -> Result<f64> {
    let mut store = ParamStore::new();
    backbone::register_output_head(&mut store, 3, 4, 2, SUITE_SEED)?;
    let names: Vec<String> = store.iter().map(|p| p.name.clone()).collect();
    let hidden0 = seeded("head.hidden", 6 * 4, 1.0);
    let bundle = prompts::PromptBundle { explicit_len: 2, textual_len: 1, patch_len: 3 };
    let w = seeded("head.weights", 2, 1.0);
    check_store_gradients(&store, &names, move |tape, binds| {
        let hidden = tape.constant(vec![6, 4], hidden0.clone())?;
        let y = backbone::strip_prefix_and_project(tape, binds, hidden, &bundle)?;
        weighted_sum(tape, y, &w)
    })
}

fn check_full_model() -> Result<f64> {
    let cfg = ModelConfig {
        backbone_dim: 8,
        backbone_layers: 1,
        backbone_heads: 2,
        backbone_ff: 16,
        text_dim: 4,
        attn_dim: 4,
        attn_heads: 2,
        max_prompt_tokens: 16,
        vocab_size: 64,
        patch_len: 2,
        patch_stride: 2,
        ..ModelConfig::default()
    };
    let (lookback, horizon) = (6, 2);
    let model = Model::build(cfg.clone(), lookback, horizon, Variant::Full, SUITE_SEED)?;
    let sample = WindowSample {
        values: (0..lookback).map(|i| (i as f64 * 0.9).sin() * 2.0 + 0.3 * i as f64).collect(),
        summaries: (0..lookback)
            .map(|i| if i == 4 { "storm announced, expect surge".into() } else { format!("calm day {i}") })
            .collect(),
        targets: (0..horizon).map(|i| 1.0 + i as f64 * 0.5).collect(),
        start_timestamp: "2020-01-01".into(),
    };
    let window = prepare_window(&model.assets, &cfg, lookback, horizon, &sample)?;
    let names: Vec<String> = model.store.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    let targets = window.targets.clone();

    // analytic
    let mut work = model.clone();
    work.store.zero_grads();
    let mut tape = Tape::new();
    let binds = work.bind(&mut tape)?;
    let pred = work.forward_prepared(&mut tape, &binds, &window)?;
    let target = tape.constant(vec![targets.len()], targets.clone())?;
    let l = tape.mse_loss(pred, target)?;
    tape.backward(l)?;
    tape.grads_into(&mut work.store)?;
    let analytic = read_grads(&work.store, &names);

    let theta0 = read_params(&model.store, &names);
    let f = |theta: &[f64]| -> f64 {
        let mut m = model.clone();
        write_params(&mut m.store, &names, theta);
        let mut t = Tape::new();
        let b = m.bind(&mut t).expect("bind");
        let pred = m.forward_prepared(&mut t, &b, &window).expect("forward");
        let target = t.constant(vec![targets.len()], targets.clone()).expect("targets");
        let l = t.mse_loss(pred, target).expect("mse");
        t.data(l)[0]
    };
    let numeric = central_diff_grad(f, &theta0, FD_STEP);
    Ok(max_rel_err(&analytic, &numeric))
}

/// The named finite-difference suite covering every differentiable
/// operation: primitives at 1e-6..1e-4, composed blocks at 1e-4, the deep
/// end-to-end model at 1e-3.
pub fn standard_suite() -> Vec<Check> {
    vec![
        Check::new("matmul", 1e-6, check_matmul),
        Check::new("softmax_rows", 1e-4, check_softmax),
        Check::new("layer_norm", 1e-5, check_layer_norm),
        Check::new("relu", 1e-6, check_relu),
        Check::new("linear", 1e-6, check_linear),
        Check::new("mse_loss", 1e-6, check_mse),
        Check::new("mlp_composite", 1e-5, check_mlp_composite),
        Check::new("textual_prompt", 1e-4, check_textual_prompt),
        Check::new("revin_patch_embed", 1e-4, check_revin_patch_embed),
        Check::new("backbone_lns_positions", 1e-3, check_backbone),
        Check::new("output_head", 1e-4, check_output_head),
        Check::new("full_model_end_to_end", 1e-3, check_full_model),
    ]
}
