//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records one forward computation as an append-only list of
//! nodes; node indices are handed out as [`ValueId`]s. Because operations
//! append in evaluation order, walking the list in reverse visits every
//! node after all of its consumers, which is exactly the order reverse
//! accumulation needs.
//!
//! Lifecycle: build leaves (constants and parameter bindings), apply
//! operations, call [`Tape::backward`] on a scalar loss once, then move
//! accumulated parameter gradients out with [`Tape::grads_into`]. A tape
//! is single-use: after `backward` it refuses further recording.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{ParamStore, Parameter, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: ValueId, b: ValueId },
    MulElem { a: ValueId, b: ValueId },
    AddBiasRows { x: ValueId, bias: ValueId },
    MulConst { x: ValueId, c: f64 },
    AddConst { x: ValueId },
    MulScalar { x: ValueId, s: ValueId },
    AddScalar { x: ValueId, s: ValueId },
    SubScalar { x: ValueId, s: ValueId },
    DivScalar { x: ValueId, s: ValueId },
    Matmul { a: ValueId, b: ValueId },
    MatmulNt { a: ValueId, b: ValueId },
    Relu { x: ValueId },
    Gelu { x: ValueId },
    SoftmaxRows { x: ValueId },
    LayerNorm { x: ValueId, gamma: ValueId, beta: ValueId, eps: f64 },
    MseLoss { pred: ValueId, target: ValueId },
    SumAll { x: ValueId },
    ConcatRows { parts: Vec<ValueId> },
    ConcatCols { parts: Vec<ValueId> },
    SliceRows { x: ValueId, start: usize },
    Gather { x: ValueId, indices: Vec<usize> },
    Reshape { x: ValueId },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Records a forward pass and replays it backward.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(String, ValueId)>,
    consumed: bool,
}

/// (rows, cols) view of a shape: the last axis is the column axis, all
/// leading axes collapse into rows. A 1-D vector is a single row.
fn as_rows(shape: &[usize]) -> (usize, usize) {
    match shape.last() {
        None => (1, 1),
        Some(&cols) => {
            let numel: usize = shape.iter().product();
            (numel / cols.max(1), cols)
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> ValueId {
        self.nodes.push(Node { shape, data, grad: None, needs_grad, op });
        ValueId(self.nodes.len() - 1)
    }

    fn check_open(&self, op: &'static str) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract(format!("tape already consumed by backward ({op})")));
        }
        Ok(())
    }

    /// Records a constant leaf; no gradient will ever flow into it.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<ValueId> {
        self.check_open("constant")?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "constant",
                detail: format!("shape {:?} vs data length {}", shape, data.len()),
            });
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Result<ValueId> {
        self.constant(t.shape().to_vec(), t.data().to_vec())
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool) -> Result<ValueId> {
        self.check_open("leaf")?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "leaf",
                detail: format!("shape {:?} vs data length {}", shape, data.len()),
            });
        }
        Ok(self.push(shape, data, needs_grad, Op::Leaf))
    }

    /// Binds a parameter: trainable parameters become differentiable leaves
    /// whose gradients [`Tape::grads_into`] later returns to the store;
    /// frozen parameters are bound as constants.
    pub fn param(&mut self, p: &Parameter) -> Result<ValueId> {
        let id = self.leaf(p.tensor.shape().to_vec(), p.tensor.data().to_vec(), p.trainable)?;
        if p.trainable {
            self.bindings.push((p.name.clone(), id));
        }
        Ok(id)
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: ValueId) -> &[f64] {
        &self.nodes[id.0].data
    }

    /// Gradient accumulated by `backward`, if any reached this node.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn to_tensor(&self, id: ValueId) -> Tensor {
        Tensor::new(self.nodes[id.0].shape.clone(), self.nodes[id.0].data.clone())
            .expect("node shape is consistent")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn require_same_shape(&self, op: &'static str, a: ValueId, b: ValueId) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::Dimension {
                op,
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        Ok(())
    }

    fn require_scalar(&self, op: &'static str, s: ValueId) -> Result<()> {
        if self.nodes[s.0].data.len() != 1 {
            return Err(Error::Dimension {
                op,
                detail: format!("expected 1-element scalar, got shape {:?}", self.nodes[s.0].shape),
            });
        }
        Ok(())
    }

    // ----- elementwise and broadcast operations -----

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_open("add")?;
        self.require_same_shape("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, needs, Op::Add { a, b }))
    }

    pub fn mul_elem(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_open("mul_elem")?;
        self.require_same_shape("mul_elem", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, needs, Op::MulElem { a, b }))
    }

    /// x + bias, with the bias vector added to every row of x.
    pub fn add_bias_rows(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        self.check_open("add_bias_rows")?;
        let (_, cols) = as_rows(&self.nodes[x.0].shape);
        if self.nodes[bias.0].shape != [cols] {
            return Err(Error::Dimension {
                op: "add_bias_rows",
                detail: format!(
                    "x {:?} needs bias [{}], got {:?}",
                    self.nodes[x.0].shape, cols, self.nodes[bias.0].shape
                ),
            });
        }
        let b = &self.nodes[bias.0].data;
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % cols])
            .collect();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, needs, Op::AddBiasRows { x, bias }))
    }

    pub fn mul_const(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        self.check_open("mul_const")?;
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * c).collect();
        let needs = self.needs(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, needs, Op::MulConst { x, c }))
    }

    pub fn add_const(&mut self, x: ValueId, c: f64) -> Result<ValueId> {
        self.check_open("add_const")?;
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v + c).collect();
        let needs = self.needs(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, needs, Op::AddConst { x }))
    }

    /// Elementwise x * s where s is a 1-element tensor.
    pub fn mul_scalar(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        self.check_open("mul_scalar")?;
        self.require_scalar("mul_scalar", s)?;
        let sv = self.nodes[s.0].data[0];
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * sv).collect();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, needs, Op::MulScalar { x, s }))
    }

    pub fn add_scalar(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        self.check_open("add_scalar")?;
        self.require_scalar("add_scalar", s)?;
        let sv = self.nodes[s.0].data[0];
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v + sv).collect();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, needs, Op::AddScalar { x, s }))
    }

    pub fn sub_scalar(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        self.check_open("sub_scalar")?;
        self.require_scalar("sub_scalar", s)?;
        let sv = self.nodes[s.0].data[0];
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v - sv).collect();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, needs, Op::SubScalar { x, s }))
    }

    pub fn div_scalar(&mut self, x: ValueId, s: ValueId) -> Result<ValueId> {
        self.check_open("div_scalar")?;
        self.require_scalar("div_scalar", s)?;
        let sv = self.nodes[s.0].data[0];
        if sv == 0.0 {
            return Err(Error::NonInvertible);
        }
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v / sv).collect();
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, needs, Op::DivScalar { x, s }))
    }

    // ----- linear algebra -----

    fn matmul_dims(&self, op: &'static str, a: ValueId, b: ValueId, transposed_b: bool) -> Result<(usize, usize, usize)> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Dimension {
                op,
                detail: format!("expected two matrices, got {sa:?} and {sb:?}"),
            });
        }
        let (bk, bn) = if transposed_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if sa[1] != bk {
            return Err(Error::Dimension { op, detail: format!("{sa:?} vs {sb:?}") });
        }
        Ok((sa[0], sa[1], bn))
    }

    /// Standard matrix product a[m×k] · b[k×n].
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_open("matmul")?;
        let (m, k, n) = self.matmul_dims("matmul", a, b, false)?;
        let mut data = vec![0.0; m * n];
        kernels::mm_nn(&mut data, &self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, needs, Op::Matmul { a, b }))
    }

    /// a[m×k] · b[n×k]^T, the attention-score product.
    pub fn matmul_nt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check_open("matmul_nt")?;
        let (m, k, n) = self.matmul_dims("matmul_nt", a, b, true)?;
        let mut data = vec![0.0; m * n];
        kernels::mm_nt(&mut data, &self.nodes[a.0].data, &self.nodes[b.0].data, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, needs, Op::MatmulNt { a, b }))
    }

    /// x · w + b, broadcasting the bias over rows. A 1-D x of length `in`
    /// is treated as a single row and returns a 1-D result.
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let one_d = self.nodes[x.0].shape.len() == 1;
        let x2 = if one_d {
            let n = self.nodes[x.0].shape[0];
            self.reshape(x, vec![1, n])?
        } else {
            x
        };
        let prod = self.matmul(x2, w)?;
        let out = self.add_bias_rows(prod, b)?;
        if one_d {
            let cols = self.nodes[out.0].shape[1];
            self.reshape(out, vec![cols])
        } else {
            Ok(out)
        }
    }

    // ----- nonlinearities and normalization -----

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_open("relu")?;
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| kernels::relu(v)).collect();
        let needs = self.needs(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, needs, Op::Relu { x }))
    }

    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_open("gelu")?;
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| kernels::gelu(v)).collect();
        let needs = self.needs(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, needs, Op::Gelu { x }))
    }

    /// Row-wise softmax over the last axis, stabilized by row-max
    /// subtraction.
    pub fn softmax_rows(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_open("softmax_rows")?;
        let (rows, cols) = as_rows(&self.nodes[x.0].shape);
        let mut data = vec![0.0; rows * cols];
        kernels::softmax_rows(&mut data, &self.nodes[x.0].data, rows, cols);
        let needs = self.needs(x);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, needs, Op::SoftmaxRows { x }))
    }

    /// Per-row standardization over the last axis followed by gamma*x+beta.
    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId, eps: f64) -> Result<ValueId> {
        self.check_open("layer_norm")?;
        let (rows, cols) = as_rows(&self.nodes[x.0].shape);
        if cols < 2 {
            return Err(Error::Dimension {
                op: "layer_norm",
                detail: format!("last axis must have length >= 2, got shape {:?}", self.nodes[x.0].shape),
            });
        }
        if self.nodes[gamma.0].shape != [cols] || self.nodes[beta.0].shape != [cols] {
            return Err(Error::Dimension {
                op: "layer_norm",
                detail: format!(
                    "x {:?} needs gamma/beta [{}], got {:?} and {:?}",
                    self.nodes[x.0].shape, cols, self.nodes[gamma.0].shape, self.nodes[beta.0].shape
                ),
            });
        }
        let mut data = vec![0.0; rows * cols];
        kernels::layer_norm_rows(
            &mut data,
            &self.nodes[x.0].data,
            &self.nodes[gamma.0].data,
            &self.nodes[beta.0].data,
            rows,
            cols,
            eps,
        );
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(self.nodes[x.0].shape.clone(), data, needs, Op::LayerNorm { x, gamma, beta, eps }))
    }

    // ----- reductions -----

    /// Mean of squared elementwise differences; returns a rank-0 scalar.
    pub fn mse_loss(&mut self, pred: ValueId, target: ValueId) -> Result<ValueId> {
        self.check_open("mse_loss")?;
        if self.nodes[pred.0].data.len() != self.nodes[target.0].data.len() {
            return Err(Error::Dimension {
                op: "mse_loss",
                detail: format!("{:?} vs {:?}", self.nodes[pred.0].shape, self.nodes[target.0].shape),
            });
        }
        let n = self.nodes[pred.0].data.len() as f64;
        let sum: f64 = self.nodes[pred.0]
            .data
            .iter()
            .zip(&self.nodes[target.0].data)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let needs = self.needs(pred) || self.needs(target);
        Ok(self.push(vec![], vec![sum / n], needs, Op::MseLoss { pred, target }))
    }

    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        self.check_open("sum_all")?;
        let sum: f64 = self.nodes[x.0].data.iter().sum();
        let needs = self.needs(x);
        Ok(self.push(vec![], vec![sum], needs, Op::SumAll { x }))
    }

    // ----- structural operations -----

    /// Stacks matrices with equal column counts, top to bottom.
    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        self.check_open("concat_rows")?;
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows needs at least one part".into()));
        }
        let cols = as_rows(&self.nodes[parts[0].0].shape).1;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = as_rows(&self.nodes[p.0].shape);
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    detail: format!(
                        "column mismatch: {:?} vs {:?}",
                        self.nodes[parts[0].0].shape, self.nodes[p.0].shape
                    ),
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![rows, cols], data, needs, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Joins matrices with equal row counts, left to right.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        self.check_open("concat_cols")?;
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols needs at least one part".into()));
        }
        let rows = as_rows(&self.nodes[parts[0].0].shape).0;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = as_rows(&self.nodes[p.0].shape);
            if r != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    detail: format!(
                        "row mismatch: {:?} vs {:?}",
                        self.nodes[parts[0].0].shape, self.nodes[p.0].shape
                    ),
                });
            }
            cols += c;
        }
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let (_, c) = as_rows(&self.nodes[p.0].shape);
            for r in 0..rows {
                let src = &self.nodes[p.0].data[r * c..(r + 1) * c];
                data[r * cols + offset..r * cols + offset + c].copy_from_slice(src);
            }
            offset += c;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![rows, cols], data, needs, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: ValueId, start: usize, end: usize) -> Result<ValueId> {
        self.check_open("slice_rows")?;
        let (rows, cols) = as_rows(&self.nodes[x.0].shape);
        if start >= end || end > rows {
            return Err(Error::Dimension {
                op: "slice_rows",
                detail: format!("range {start}..{end} out of {rows} rows"),
            });
        }
        let data = self.nodes[x.0].data[start * cols..end * cols].to_vec();
        let needs = self.needs(x);
        Ok(self.push(vec![end - start, cols], data, needs, Op::SliceRows { x, start }))
    }

    /// out[i] = x[indices[i]]; the backward pass scatter-adds, so repeated
    /// indices accumulate correctly.
    pub fn gather(&mut self, x: ValueId, indices: Vec<usize>, out_shape: Vec<usize>) -> Result<ValueId> {
        self.check_open("gather")?;
        let numel: usize = out_shape.iter().product();
        if numel != indices.len() {
            return Err(Error::Dimension {
                op: "gather",
                detail: format!("out shape {:?} vs {} indices", out_shape, indices.len()),
            });
        }
        let src = &self.nodes[x.0].data;
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Dimension {
                op: "gather",
                detail: format!("index {bad} out of range for {} elements", src.len()),
            });
        }
        let data: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        let needs = self.needs(x);
        Ok(self.push(out_shape, data, needs, Op::Gather { x, indices }))
    }

    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        self.check_open("reshape")?;
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.nodes[x.0].shape, shape),
            });
        }
        let data = self.nodes[x.0].data.clone();
        let needs = self.needs(x);
        Ok(self.push(shape, data, needs, Op::Reshape { x }))
    }

    // ----- backward -----

    fn accum(&mut self, id: ValueId, delta: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let len = self.nodes[id.0].data.len();
        let grad = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; len]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Reverse accumulation from a scalar loss. Gradients sum into every
    /// reachable differentiable node; afterwards the tape only serves
    /// gradient queries and [`Tape::grads_into`].
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.consumed {
            return Err(Error::Contract("tape already consumed by backward".into()));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.consumed = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // loss does not depend on any differentiable leaf
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let out_grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue, // not reachable from the loss
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    self.accum(a, &out_grad);
                    self.accum(b, &out_grad);
                }
                Op::MulElem { a, b } => {
                    let da: Vec<f64> =
                        out_grad.iter().zip(&self.nodes[b.0].data).map(|(g, v)| g * v).collect();
                    let db: Vec<f64> =
                        out_grad.iter().zip(&self.nodes[a.0].data).map(|(g, v)| g * v).collect();
                    self.accum(a, &da);
                    self.accum(b, &db);
                }
                Op::AddBiasRows { x, bias } => {
                    let cols = self.nodes[bias.0].data.len();
                    self.accum(x, &out_grad);
                    let mut db = vec![0.0; cols];
                    for (i, g) in out_grad.iter().enumerate() {
                        db[i % cols] += g;
                    }
                    self.accum(bias, &db);
                }
                Op::MulConst { x, c } => {
                    let dx: Vec<f64> = out_grad.iter().map(|g| g * c).collect();
                    self.accum(x, &dx);
                }
                Op::AddConst { x } => {
                    self.accum(x, &out_grad);
                }
                Op::MulScalar { x, s } => {
                    let sv = self.nodes[s.0].data[0];
                    let dx: Vec<f64> = out_grad.iter().map(|g| g * sv).collect();
                    let ds: f64 =
                        out_grad.iter().zip(&self.nodes[x.0].data).map(|(g, v)| g * v).sum();
                    self.accum(x, &dx);
                    self.accum(s, &[ds]);
                }
                Op::AddScalar { x, s } => {
                    let ds: f64 = out_grad.iter().sum();
                    self.accum(x, &out_grad);
                    self.accum(s, &[ds]);
                }
                Op::SubScalar { x, s } => {
                    let ds: f64 = -out_grad.iter().sum::<f64>();
                    self.accum(x, &out_grad);
                    self.accum(s, &[ds]);
                }
                Op::DivScalar { x, s } => {
                    let sv = self.nodes[s.0].data[0];
                    let dx: Vec<f64> = out_grad.iter().map(|g| g / sv).collect();
                    let ds: f64 = out_grad
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(g, v)| -g * v / (sv * sv))
                        .sum();
                    self.accum(x, &dx);
                    self.accum(s, &[ds]);
                }
                Op::Matmul { a, b } => {
                    let (m, k) = {
                        let s = &self.nodes[a.0].shape;
                        (s[0], s[1])
                    };
                    let n = self.nodes[b.0].shape[1];
                    if self.needs(a) {
                        let mut da = vec![0.0; m * k];
                        kernels::mm_nt(&mut da, &out_grad, &self.nodes[b.0].data, m, n, k);
                        self.accum(a, &da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; k * n];
                        kernels::mm_tn(&mut db, &self.nodes[a.0].data, &out_grad, m, k, n);
                        self.accum(b, &db);
                    }
                }
                Op::MatmulNt { a, b } => {
                    // out = a · b^T with a[m×k], b[n×k]
                    let (m, k) = {
                        let s = &self.nodes[a.0].shape;
                        (s[0], s[1])
                    };
                    let n = self.nodes[b.0].shape[0];
                    if self.needs(a) {
                        let mut da = vec![0.0; m * k];
                        kernels::mm_nn(&mut da, &out_grad, &self.nodes[b.0].data, m, n, k);
                        self.accum(a, &da);
                    }
                    if self.needs(b) {
                        let mut db = vec![0.0; n * k];
                        kernels::mm_tn(&mut db, &out_grad, &self.nodes[a.0].data, m, n, k);
                        self.accum(b, &db);
                    }
                }
                Op::Relu { x } => {
                    let dx: Vec<f64> = out_grad
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.accum(x, &dx);
                }
                Op::Gelu { x } => {
                    let dx: Vec<f64> = out_grad
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(g, &v)| g * kernels::gelu_grad(v))
                        .collect();
                    self.accum(x, &dx);
                }
                Op::SoftmaxRows { x } => {
                    let (rows, cols) = as_rows(&self.nodes[i].shape);
                    let y = &self.nodes[i].data;
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &out_grad[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for ((d, &yv), &gv) in
                            dx[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr)
                        {
                            *d = yv * (gv - dot);
                        }
                    }
                    self.accum(x, &dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (rows, cols) = as_rows(&self.nodes[x.0].shape);
                    let xd = &self.nodes[x.0].data;
                    let gd = &self.nodes[gamma.0].data;
                    let mut dx = vec![0.0; rows * cols];
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    for r in 0..rows {
                        let xr = &xd[r * cols..(r + 1) * cols];
                        let gr = &out_grad[r * cols..(r + 1) * cols];
                        let mean = xr.iter().sum::<f64>() / cols as f64;
                        let var =
                            xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = xr.iter().map(|&v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<f64> = gr.iter().zip(gd).map(|(g, gm)| g * gm).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / cols as f64;
                        for (j, d) in dx[r * cols..(r + 1) * cols].iter_mut().enumerate() {
                            *d = inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                        for j in 0..cols {
                            dgamma[j] += gr[j] * xhat[j];
                            dbeta[j] += gr[j];
                        }
                    }
                    self.accum(x, &dx);
                    self.accum(gamma, &dgamma);
                    self.accum(beta, &dbeta);
                }
                Op::MseLoss { pred, target } => {
                    let n = self.nodes[pred.0].data.len() as f64;
                    let g = out_grad[0];
                    let dp: Vec<f64> = self.nodes[pred.0]
                        .data
                        .iter()
                        .zip(&self.nodes[target.0].data)
                        .map(|(p, t)| g * 2.0 * (p - t) / n)
                        .collect();
                    if self.needs(target) {
                        let dt: Vec<f64> = dp.iter().map(|v| -v).collect();
                        self.accum(target, &dt);
                    }
                    self.accum(pred, &dp);
                }
                Op::SumAll { x } => {
                    let g = out_grad[0];
                    let dx = vec![g; self.nodes[x.0].data.len()];
                    self.accum(x, &dx);
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].data.len();
                        let slice = out_grad[offset..offset + len].to_vec();
                        self.accum(p, &slice);
                        offset += len;
                    }
                }
                Op::ConcatCols { parts } => {
                    let (rows, cols) = as_rows(&self.nodes[i].shape);
                    let mut offset = 0;
                    for p in parts {
                        let c = as_rows(&self.nodes[p.0].shape).1;
                        let mut dp = vec![0.0; rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&out_grad[r * cols + offset..r * cols + offset + c]);
                        }
                        self.accum(p, &dp);
                        offset += c;
                    }
                }
                Op::SliceRows { x, start } => {
                    let cols = as_rows(&self.nodes[x.0].shape).1;
                    let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                    dx[start * cols..start * cols + out_grad.len()].copy_from_slice(&out_grad);
                    self.accum(x, &dx);
                }
                Op::Gather { x, indices } => {
                    let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                    for (g, &idx) in out_grad.iter().zip(&indices) {
                        dx[idx] += g;
                    }
                    self.accum(x, &dx);
                }
                Op::Reshape { x } => {
                    self.accum(x, &out_grad);
                }
            }
            self.nodes[i].grad = Some(out_grad);
        }
        Ok(())
    }

    /// Moves accumulated gradients of every bound trainable parameter back
    /// into the store, summing into any gradient already present.
    pub fn grads_into(&self, store: &mut ParamStore) -> Result<()> {
        if !self.consumed {
            return Err(Error::Contract("grads_into called before backward".into()));
        }
        for (name, id) in &self.bindings {
            if let Some(grad) = self.nodes[id.0].grad.as_deref() {
                let p = store
                    .get_mut(name)
                    .ok_or_else(|| Error::Contract(format!("bound parameter {name:?} not in store")))?;
                p.tensor.accumulate_grad(grad);
            }
        }
        Ok(())
    }
}

/// Name-to-node map for the parameters bound to one tape.
#[derive(Debug, Default)]
pub struct Bindings {
    map: std::collections::BTreeMap<String, ValueId>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds every parameter of the store onto the tape.
    pub fn bind_all(tape: &mut Tape, store: &ParamStore) -> Result<Self> {
        let mut b = Self::new();
        for p in store.iter() {
            let id = tape.param(p)?;
            b.map.insert(p.name.clone(), id);
        }
        Ok(b)
    }

    pub fn insert(&mut self, name: impl Into<String>, id: ValueId) {
        self.map.insert(name.into(), id);
    }

    pub fn get(&self, name: &str) -> Result<ValueId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name:?} is not bound to this tape")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape_with(data: Vec<f64>, shape: Vec<usize>) -> (Tape, ValueId) {
        let mut t = Tape::new();
        let id = t.leaf(shape, data, true).unwrap();
        (t, id)
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let eye = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = t.matmul(a, eye).unwrap();
        assert_eq!(t.data(out), &[1.0, 2.0, 3.0, 4.0]);

        let b = t.constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let out = t.matmul(a, b).unwrap();
        assert_eq!(t.data(out), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_single_column() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 4], vec![0.0; 4]).unwrap();
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.data(y), &[0.25; 4]);

        let x = t.constant(vec![3, 1], vec![-2.0, 0.0, 5.0]).unwrap();
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.data(y), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn softmax_matches_direct_exp_sum() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = t.softmax_rows(x).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        for (got, want) in t.data(y).iter().zip(e.iter().map(|v| v / s)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_and_affine_collapse() {
        let mut t = Tape::new();
        let x = t.constant(vec![1, 4], vec![5.0; 4]).unwrap();
        let g = t.constant(vec![4], vec![1.0; 4]).unwrap();
        let b = t.constant(vec![4], vec![0.0; 4]).unwrap();
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        for v in t.data(y) {
            assert!(v.abs() < 1e-9);
        }

        let x = t.constant(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let g0 = t.constant(vec![4], vec![0.0; 4]).unwrap();
        let bb = t.constant(vec![4], vec![7.5; 4]).unwrap();
        let y = t.layer_norm(x, g0, bb, 1e-5).unwrap();
        assert_eq!(t.data(y), &[7.5; 4]);
    }

    #[test]
    fn relu_definition_and_saturation() {
        let mut t = Tape::new();
        let x = t.constant(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = t.relu(x).unwrap();
        assert_eq!(t.data(y), &[0.0, 0.0, 2.0]);

        let x = t.constant(vec![3], vec![-5.0, -0.1, -9.0]).unwrap();
        let y = t.relu(x).unwrap();
        assert_eq!(t.data(y), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn linear_identity_and_bias_passthrough() {
        let mut t = Tape::new();
        let x = t.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = t.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let y = t.linear(x, w, b).unwrap();
        assert_eq!(t.data(y), t.data(x));

        let x0 = t.constant(vec![3, 2], vec![0.0; 6]).unwrap();
        let b2 = t.constant(vec![2], vec![1.5, -2.0]).unwrap();
        let y = t.linear(x0, w, b2).unwrap();
        assert_eq!(t.data(y), &[1.5, -2.0, 1.5, -2.0, 1.5, -2.0]);
    }

    #[test]
    fn mse_trivial_values() {
        let mut t = Tape::new();
        let p = t.constant(vec![2], vec![1.0, 3.0]).unwrap();
        let q = t.constant(vec![2], vec![1.0, 3.0]).unwrap();
        let l = t.mse_loss(p, q).unwrap();
        assert_eq!(t.data(l), &[0.0]);

        let p = t.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let q = t.constant(vec![2], vec![1.0, 3.0]).unwrap();
        let l = t.mse_loss(p, q).unwrap();
        assert_eq!(t.data(l), &[5.0]);
    }

    #[test]
    fn mse_gradient_is_analytic() {
        let (mut t, p) = tape_with(vec![0.3, -1.2, 2.0], vec![3]);
        let target = t.constant(vec![3], vec![1.0, 0.5, -0.5]).unwrap();
        let l = t.mse_loss(p, target).unwrap();
        t.backward(l).unwrap();
        let g = t.grad(p).unwrap();
        let pd = [0.3, -1.2, 2.0];
        let td = [1.0, 0.5, -0.5];
        for i in 0..3 {
            let want = 2.0 * (pd[i] - td[i]) / 3.0;
            assert!((g[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let (mut t, x) = tape_with(vec![0.5, -2.0, 3.0, 4.0, 1.0, -1.0], vec![2, 3]);
        let l = t.sum_all(x).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn unbound_leaf_keeps_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2], vec![1.0, 2.0], true).unwrap();
        let unused = t.leaf(vec![2], vec![3.0, 4.0], true).unwrap();
        let l = t.sum_all(x).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(unused).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let (mut t, x) = tape_with(vec![1.0, 2.0], vec![2]);
        let err = t.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn tape_refuses_recording_after_backward() {
        let (mut t, x) = tape_with(vec![1.0], vec![1]);
        let l = t.sum_all(x).unwrap();
        t.backward(l).unwrap();
        assert!(t.sum_all(x).is_err());
    }

    #[test]
    fn gradient_accumulates_over_multiple_uses() {
        // y = sum(x) + sum(x) -> grad 2 everywhere
        let (mut t, x) = tape_with(vec![1.0, 2.0], vec![2]);
        let s1 = t.sum_all(x).unwrap();
        let s2 = t.sum_all(x).unwrap();
        let l = t.add(s1, s2).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut t = Tape::new();
        let a = t.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = t.constant(vec![1, 3], vec![7.0, 8.0, 9.0]).unwrap();
        let c = t.concat_rows(&[a, b]).unwrap();
        assert_eq!(t.shape(c), &[3, 3]);
        let back = t.slice_rows(c, 2, 3).unwrap();
        assert_eq!(t.data(back), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn concat_cols_layout_and_backward() {
        let mut t = Tape::new();
        let a = t.leaf(vec![2, 1], vec![1.0, 2.0], true).unwrap();
        let b = t.leaf(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0], true).unwrap();
        let c = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.data(c), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = t.constant(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let prod = t.mul_elem(c, w).unwrap();
        let l = t.sum_all(prod).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0, 0.0]);
        assert_eq!(t.grad(b).unwrap(), &[0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn gather_scatter_adds_repeated_indices() {
        let mut t = Tape::new();
        let x = t.leaf(vec![3], vec![10.0, 20.0, 30.0], true).unwrap();
        let g = t.gather(x, vec![2, 2, 0], vec![3]).unwrap();
        assert_eq!(t.data(g), &[30.0, 30.0, 10.0]);
        let l = t.sum_all(g).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 0.0, 2.0]);
    }

    #[test]
    fn frozen_param_binding_gets_no_grad() {
        let frozen = Parameter::new("table", Tensor::matrix(2, 2, vec![1.0; 4]).unwrap(), false);
        let mut store = ParamStore::new();
        store.insert(frozen).unwrap();
        let mut t = Tape::new();
        let id = t.param(store.get("table").unwrap()).unwrap();
        let l = t.sum_all(id).unwrap();
        t.backward(l).unwrap();
        assert!(t.grad(id).is_none());
        t.grads_into(&mut store).unwrap();
        assert!(store.get("table").unwrap().tensor.grad().is_none());
    }

    #[test]
    fn grads_into_accumulates_across_tapes() {
        let mut store = ParamStore::new();
        store
            .insert(Parameter::new("w", Tensor::vector(vec![1.0, 2.0]), true))
            .unwrap();
        for _ in 0..2 {
            let mut t = Tape::new();
            let id = t.param(store.get("w").unwrap()).unwrap();
            let l = t.sum_all(id).unwrap();
            t.backward(l).unwrap();
            t.grads_into(&mut store).unwrap();
        }
        assert_eq!(store.get("w").unwrap().tensor.grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn scalar_ops_backward() {
        // y = (x - s) / s, check ds against hand derivative
        let mut t = Tape::new();
        let x = t.constant(vec![2], vec![4.0, 6.0]).unwrap();
        let s = t.leaf(vec![1], vec![2.0], true).unwrap();
        let num = t.sub_scalar(x, s).unwrap();
        let y = t.div_scalar(num, s).unwrap();
        let l = t.sum_all(y).unwrap();
        t.backward(l).unwrap();
        // d/ds sum((x-s)/s) = sum(-1/s - (x-s)/s^2) = sum(-x/s^2)
        let want = -(4.0 + 6.0) / 4.0;
        let got = t.grad(s).unwrap()[0];
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}
