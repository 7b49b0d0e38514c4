//! Scalar-loop reference implementations of the attention block and the
//! backbone, written with explicit index arithmetic and no shared kernels,
//! compared against the tape-based forward passes.

use dualprompt_core::backbone::{self, BackboneConfig};
use dualprompt_core::model::{Model, ModelConfig, Variant};
use dualprompt_core::prompts::{textual_prompt_forward, TextualPromptParams};
use dualprompt_core::tape::{Bindings, Tape};
use dualprompt_core::tensor::ParamStore;
use dualprompt_core::{data::WindowSample, pipeline};

fn get(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(name).unwrap_or_else(|| panic!("{name}")).tensor.data().to_vec()
}

/// out[i][j] = sum_k a[i][k] * b[k][j], nested scalar loops.
fn loop_matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a[i][kk] * b[kk][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

fn to_rows(flat: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|r| flat[r * cols..(r + 1) * cols].to_vec()).collect()
}

#[test]
fn textual_attention_matches_scalar_loops() {
    // L = 3, M = 6, d_m = 8, K = 2, D = 10
    let (l, m, dm, k_heads, d) = (3usize, 6usize, 8usize, 2usize, 10usize);
    let dk = dm / k_heads;
    let params = TextualPromptParams::new(m, dm, k_heads, d).unwrap();
    let mut store = ParamStore::new();
    params.register(&mut store, 4242, true).unwrap();

    let s_flat: Vec<f64> = (0..l * m).map(|i| ((i * 31 % 17) as f64 - 8.0) / 5.0).collect();

    // tape forward
    let mut tape = Tape::new();
    let binds = Bindings::bind_all(&mut tape, &store).unwrap();
    let s_id = tape.constant(vec![l, m], s_flat.clone()).unwrap();
    let fwd = textual_prompt_forward(&mut tape, &binds, &params, s_id).unwrap();
    let got = tape.data(fwd.output).to_vec();

    // every attention row sums to 1
    for &attn in &fwd.attention {
        let a = tape.data(attn);
        for r in 0..l {
            let sum: f64 = a[r * l..(r + 1) * l].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
    }

    // scalar-loop reference
    let s = to_rows(&s_flat, l, m);
    let w_in = to_rows(&get(&store, "textual.in_proj.w"), m, dm);
    let b_in = get(&store, "textual.in_proj.b");
    let mut s_proj = loop_matmul(&s, &w_in);
    for row in s_proj.iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += b_in[j];
        }
    }

    let mut z = vec![vec![0.0; dm]; l];
    for head in 0..k_heads {
        let wq = to_rows(&get(&store, &format!("textual.head{head}.wq")), dm, dk);
        let wk = to_rows(&get(&store, &format!("textual.head{head}.wk")), dm, dk);
        let wv = to_rows(&get(&store, &format!("textual.head{head}.wv")), dm, dk);
        let q = loop_matmul(&s_proj, &wq);
        let k_mat = loop_matmul(&s_proj, &wk);
        let v = loop_matmul(&s_proj, &wv);
        // scores, softmax, weighted sum: all spelled out
        for i in 0..l {
            let mut scores = vec![0.0; l];
            for j in 0..l {
                let mut acc = 0.0;
                for c in 0..dk {
                    acc += q[i][c] * k_mat[j][c];
                }
                scores[j] = acc / (dk as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let denom: f64 = exp.iter().sum();
            for c in 0..dk {
                let mut acc = 0.0;
                for j in 0..l {
                    acc += exp[j] / denom * v[j][c];
                }
                z[i][head * dk + c] = acc;
            }
        }
    }

    let w_out = to_rows(&get(&store, "textual.out_proj.w"), dm, d);
    let b_out = get(&store, "textual.out_proj.b");
    let mut reference = loop_matmul(&z, &w_out);
    for row in reference.iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += b_out[j];
            if *v < 0.0 {
                *v = 0.0; // ReLU
            }
        }
    }

    for i in 0..l {
        for j in 0..d {
            let diff = (got[i * d + j] - reference[i][j]).abs();
            assert!(diff < 1e-10, "({i},{j}): {} vs {}", got[i * d + j], reference[i][j]);
        }
    }
}

fn scalar_gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn scalar_layer_norm(row: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    row.iter()
        .enumerate()
        .map(|(j, v)| gamma[j] * (v - mean) * inv + beta[j])
        .collect()
}

#[test]
fn one_layer_backbone_matches_scalar_loops() {
    let cfg = BackboneConfig { hidden: 4, layers: 1, heads: 2, ff: 8, max_seq: 5, seed: 77 };
    let mut store = ParamStore::new();
    backbone::register_backbone_params(&cfg, &mut store, 909).unwrap();

    let x_flat: Vec<f64> = (0..12).map(|i| ((i * 7 % 11) as f64 - 5.0) / 4.0).collect();
    let (n, d, dh) = (3usize, 4usize, 2usize);

    let mut tape = Tape::new();
    let binds = Bindings::bind_all(&mut tape, &store).unwrap();
    let x_id = tape.constant(vec![n, d], x_flat.clone()).unwrap();
    let out_id = backbone::backbone_forward(&mut tape, &binds, &cfg, x_id).unwrap();
    let got = tape.data(out_id).to_vec();

    // ----- scalar reference -----
    let pos = get(&store, "backbone.pos");
    let mut h: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..d).map(|j| x_flat[i * d + j] + pos[i * d + j]).collect())
        .collect();

    let g1 = get(&store, "backbone.layer0.ln1.gamma");
    let b1 = get(&store, "backbone.layer0.ln1.beta");
    let normed: Vec<Vec<f64>> = h.iter().map(|row| scalar_layer_norm(row, &g1, &b1, 1e-5)).collect();

    // causal attention per head, then concatenated and projected
    let mut z = vec![vec![0.0; d]; n];
    for head in 0..2 {
        let wq = to_rows(&get(&store, &format!("backbone.layer0.attn.head{head}.wq")), d, dh);
        let wk = to_rows(&get(&store, &format!("backbone.layer0.attn.head{head}.wk")), d, dh);
        let wv = to_rows(&get(&store, &format!("backbone.layer0.attn.head{head}.wv")), d, dh);
        let q = loop_matmul(&normed, &wq);
        let k = loop_matmul(&normed, &wk);
        let v = loop_matmul(&normed, &wv);
        for i in 0..n {
            // keys j <= i only (causal)
            let mut weights = vec![0.0; i + 1];
            for (j, w) in weights.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in 0..dh {
                    acc += q[i][c] * k[j][c];
                }
                *w = acc / (dh as f64).sqrt();
            }
            let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = weights.iter().map(|w| (w - max).exp()).collect();
            let denom: f64 = exp.iter().sum();
            for c in 0..dh {
                let mut acc = 0.0;
                for j in 0..=i {
                    acc += exp[j] / denom * v[j][c];
                }
                z[i][head * dh + c] = acc;
            }
        }
    }
    let wo = to_rows(&get(&store, "backbone.layer0.attn.out.w"), d, d);
    let bo = get(&store, "backbone.layer0.attn.out.b");
    let attn_out = loop_matmul(&z, &wo);
    for i in 0..n {
        for j in 0..d {
            h[i][j] += attn_out[i][j] + bo[j];
        }
    }

    let g2 = get(&store, "backbone.layer0.ln2.gamma");
    let b2 = get(&store, "backbone.layer0.ln2.beta");
    let normed2: Vec<Vec<f64>> = h.iter().map(|row| scalar_layer_norm(row, &g2, &b2, 1e-5)).collect();
    let ff1 = to_rows(&get(&store, "backbone.layer0.ff1.w"), d, 8);
    let ff1b = get(&store, "backbone.layer0.ff1.b");
    let ff2 = to_rows(&get(&store, "backbone.layer0.ff2.w"), 8, d);
    let ff2b = get(&store, "backbone.layer0.ff2.b");
    let mut hidden_ff = loop_matmul(&normed2, &ff1);
    for row in hidden_ff.iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = scalar_gelu(*v + ff1b[j]);
        }
    }
    let ff_out = loop_matmul(&hidden_ff, &ff2);
    for i in 0..n {
        for j in 0..d {
            h[i][j] += ff_out[i][j] + ff2b[j];
        }
    }

    let gf = get(&store, "backbone.final_ln.gamma");
    let bf = get(&store, "backbone.final_ln.beta");
    let reference: Vec<Vec<f64>> = h.iter().map(|row| scalar_layer_norm(row, &gf, &bf, 1e-5)).collect();

    for i in 0..n {
        for j in 0..d {
            let diff = (got[i * d + j] - reference[i][j]).abs();
            assert!(diff < 1e-10, "({i},{j}): {} vs {}", got[i * d + j], reference[i][j]);
        }
    }
}

#[test]
fn evaluate_matches_two_loop_reference() {
    let cfg = ModelConfig {
        backbone_dim: 8,
        backbone_layers: 1,
        backbone_heads: 2,
        backbone_ff: 16,
        text_dim: 4,
        attn_dim: 4,
        attn_heads: 2,
        max_prompt_tokens: 24,
        vocab_size: 64,
        patch_len: 3,
        patch_stride: 2,
        ..ModelConfig::default()
    };
    let (lookback, horizon) = (8, 3);
    let model = Model::build(cfg.clone(), lookback, horizon, Variant::Full, 21).unwrap();
    let samples: Vec<WindowSample> = (0..4)
        .map(|w| WindowSample {
            values: (0..lookback).map(|i| ((w + i) as f64 * 0.8).cos() * 3.0 + i as f64 * 0.2).collect(),
            summaries: (0..lookback).map(|i| format!("window {w} day {i}")).collect(),
            targets: (0..horizon).map(|i| (w as f64) - i as f64 * 0.4).collect(),
            start_timestamp: format!("2020-01-{:02}", w + 1),
        })
        .collect();
    let prepared: Vec<_> = samples
        .iter()
        .map(|s| dualprompt_core::model::prepare_window(&model.assets, &cfg, lookback, horizon, s).unwrap())
        .collect();

    let (mse, mae) = pipeline::evaluate(&model, &prepared).unwrap();

    // two explicit loops over windows and horizon steps
    let mut sq_sum = 0.0;
    let mut abs_sum = 0.0;
    let mut count = 0.0;
    for (sample, window) in samples.iter().zip(&prepared) {
        let pred = model.forward_window(window).unwrap();
        for step in 0..horizon {
            let err = pred[step] - sample.targets[step];
            sq_sum += err * err;
            abs_sum += err.abs();
            count += 1.0;
        }
    }
    assert!((mse - sq_sum / count).abs() < 1e-12);
    assert!((mae - abs_sum / count).abs() < 1e-12);
}
