//! Wengert-list reverse-mode differentiation over dense row-major tensors.
//!
//! A [`Tape`] records one forward evaluation. Parameters from at most one
//! [`ParameterStore`] are tracked as trainable; everything else enters as a
//! constant. [`Tape::backward`] replays the list in reverse and returns
//! gradients aligned with the tracked store.

use std::collections::HashMap;

use crate::error::{AutodiffError, Result};
use crate::kernels::{activate, activate_backward, gemm, linear, sigmoid};
use crate::network::Activation;
use crate::params::{Gradients, ParameterStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Whether parameters read onto a tape receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    Trainable,
    Frozen,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    Linear { x: Var, w: Var, b: Var },
    Activation { x: Var, kind: Activation },
    LinComb(Vec<(Var, f64)>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    MeanRowSqNorm(Var),
    BinaryLogLoss { logits: Var, head: usize, positive: bool, clamp: f64 },
    SoftmaxXent { logits: Var, start: usize, width: usize, targets: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward pass (the gradient record).
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: Option<(u64, u64)>,
    param_cache: HashMap<(u64, usize, bool), Var>,
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Reads tensor `index` of `store` onto the tape. Repeated reads of the
    /// same tensor share one node so gradients accumulate across uses.
    pub fn param(&mut self, store: &ParameterStore, index: usize, mode: ParamMode) -> Result<Var> {
        let (id, generation) = store.identity();
        let trainable = mode == ParamMode::Trainable;
        if trainable {
            match self.bound {
                None => self.bound = Some((id, generation)),
                Some((bid, _)) if bid != id => {
                    return Err(AutodiffError::InvalidArgument(
                        "a tape tracks parameters from a single store".into(),
                    ))
                }
                Some((_, bgen)) if bgen != generation => return Err(AutodiffError::StaleRecord),
                Some(_) => {}
            }
        }
        if let Some(&v) = self.param_cache.get(&(id, index, trainable)) {
            return Ok(v);
        }
        let value = store.tensor_at(index).clone();
        let v = if trainable {
            self.push(value, Op::Param(index), true)
        } else {
            self.push(value, Op::Constant, false)
        };
        self.param_cache.insert((id, index, trainable), v);
        Ok(v)
    }

    /// `x (rows x in) * w (in x out) + b (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, inp) = as_matrix(self.value(x));
        let wt = self.value(w);
        if wt.shape().len() != 2 || wt.shape()[0] != inp {
            return Err(AutodiffError::dim(
                "linear",
                format!("input width {inp} does not match weight shape {:?}", wt.shape()),
            ));
        }
        let out = wt.shape()[1];
        if self.value(b).len() != out {
            return Err(AutodiffError::dim(
                "linear",
                format!("bias length {} does not match output width {out}", self.value(b).len()),
            ));
        }
        let y = linear(self.value(x).data(), rows, inp, wt.data(), self.value(b).data());
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::from_raw(vec![rows, out], y), Op::Linear { x, w, b }, needs))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let xv = self.value(x);
        let y = activate(kind, xv.data());
        let shape = xv.shape().to_vec();
        let needs = self.needs(x);
        self.push(Tensor::from_raw(shape, y), Op::Activation { x, kind }, needs)
    }

    /// `sum_i coef_i * var_i` over equally shaped operands.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| AutodiffError::InvalidArgument("lincomb of zero terms".into()))?;
        let shape = self.value(first.0).shape().to_vec();
        let mut acc = vec![0.0; self.value(first.0).len()];
        for &(v, c) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(AutodiffError::dim(
                    "lincomb",
                    format!("shape {:?} vs {:?}", t.shape(), shape),
                ));
            }
            for (a, x) in acc.iter_mut().zip(t.data()) {
                *a += c * x;
            }
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Tensor::from_raw(shape, acc), Op::LinComb(terms.to_vec()), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lincomb(&[(a, 1.0), (b, -1.0)])
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&v| self.value(v).rows())
            .ok_or_else(|| AutodiffError::InvalidArgument("concat of zero parts".into()))?;
        let widths: Vec<usize> = parts.iter().map(|&v| self.value(v).cols()).collect();
        if parts.iter().any(|&v| self.value(v).rows() != rows) {
            return Err(AutodiffError::dim("concat_cols", "row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in parts {
                data.extend_from_slice(self.value(v).row(r));
            }
        }
        let needs = parts.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::from_raw(vec![rows, total], data), Op::ConcatCols(parts.to_vec()), needs))
    }

    /// Stacks matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&v| self.value(v).cols())
            .ok_or_else(|| AutodiffError::InvalidArgument("concat of zero parts".into()))?;
        if parts.iter().any(|&v| self.value(v).cols() != cols) {
            return Err(AutodiffError::dim("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in parts {
            data.extend_from_slice(self.value(v).data());
            rows += self.value(v).rows();
        }
        let needs = parts.iter().any(|&v| self.needs(v));
        Ok(self.push(Tensor::from_raw(vec![rows, cols], data), Op::ConcatRows(parts.to_vec()), needs))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(x));
        if start >= end || end > rows {
            return Err(AutodiffError::dim(
                "slice_rows",
                format!("range {start}..{end} out of {rows} rows"),
            ));
        }
        let data = self.value(x).data()[start * cols..end * cols].to_vec();
        let needs = self.needs(x);
        Ok(self.push(Tensor::from_raw(vec![end - start, cols], data), Op::SliceRows { x, start }, needs))
    }

    /// Mean over rows of the squared Euclidean row norm.
    pub fn mean_row_sq_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let rows = t.rows() as f64;
        let s: f64 = t.data().iter().map(|v| v * v).sum::<f64>() / rows;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::MeanRowSqNorm(x), needs)
    }

    /// Mean binary log loss of logistic column `head`: `-ln q` when `positive`,
    /// otherwise `-ln(1 - q)`, with `q = sigmoid(logit)` clamped into
    /// `[clamp, 1 - clamp]`.
    pub fn binary_log_loss(&mut self, logits: Var, head: usize, positive: bool, clamp: f64) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(logits));
        if head >= cols {
            return Err(AutodiffError::dim(
                "binary_log_loss",
                format!("head {head} out of {cols}"),
            ));
        }
        let t = self.value(logits);
        let mut total = 0.0;
        for r in 0..rows {
            let q = sigmoid(t.row(r)[head]).clamp(clamp, 1.0 - clamp);
            total -= if positive { q.ln() } else { (1.0 - q).ln() };
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::BinaryLogLoss {
                logits,
                head,
                positive,
                clamp,
            },
            needs,
        ))
    }

    /// Mean softmax cross-entropy over the column group `start..start + width`.
    pub fn softmax_xent(&mut self, logits: Var, start: usize, width: usize, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = as_matrix(self.value(logits));
        if width == 0 || start + width > cols || targets.len() != rows {
            return Err(AutodiffError::dim(
                "softmax_xent",
                format!("group {start}+{width} of {cols} columns, {} targets for {rows} rows", targets.len()),
            ));
        }
        if targets.iter().any(|&k| k >= width) {
            return Err(AutodiffError::InvalidArgument("softmax target out of range".into()));
        }
        let t = self.value(logits);
        let mut total = 0.0;
        for (r, &k) in targets.iter().enumerate() {
            let g = &t.row(r)[start..start + width];
            let mx = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + g.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - g[k];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / rows as f64),
            Op::SoftmaxXent {
                logits,
                start,
                width,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse pass from `output` seeded with `seed`. Returns gradients for
    /// every tensor of `store`; tensors never read as trainable stay zero.
    pub fn backward(&self, output: Var, seed: &Tensor, store: &ParameterStore) -> Result<Gradients> {
        if let Some(bound) = self.bound {
            if bound != store.identity() {
                return Err(AutodiffError::StaleRecord);
            }
        }
        if seed.shape() != self.value(output).shape() {
            return Err(AutodiffError::dim(
                "backward",
                format!(
                    "seed shape {:?} does not match output shape {:?}",
                    seed.shape(),
                    self.value(output).shape()
                ),
            ));
        }
        let mut result = store.zero_gradients();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(seed.data().to_vec());

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param(index) => {
                    result.tensors[*index]
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let (rows, inp) = as_matrix(xv);
                    let out = self.value(*b).len();
                    if self.needs(*x) {
                        let wv = self.value(*w).data();
                        let dx = slot(&mut grads, *x, rows * inp);
                        gemm(rows, out, inp, &g, (out, 1), wv, (1, out), 1.0, dx);
                    }
                    if self.needs(*w) {
                        let dw = slot(&mut grads, *w, inp * out);
                        gemm(inp, rows, out, xv.data(), (1, inp), &g, (out, 1), 1.0, dw);
                    }
                    if self.needs(*b) {
                        let db = slot(&mut grads, *b, out);
                        for r in 0..rows {
                            for (d, v) in db.iter_mut().zip(&g[r * out..(r + 1) * out]) {
                                *d += v;
                            }
                        }
                    }
                }
                Op::Activation { x, kind } => {
                    let n = g.len();
                    let xv = self.value(*x).data();
                    let dx = slot(&mut grads, *x, n);
                    activate_backward(*kind, xv, node.value.data(), &g, dx);
                }
                Op::LinComb(terms) => {
                    for &(v, c) in terms {
                        if self.needs(v) {
                            let d = slot(&mut grads, v, g.len());
                            d.iter_mut().zip(&g).for_each(|(a, b)| *a += c * b);
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.cols();
                    let mut off = 0;
                    for &v in parts {
                        let w = self.value(v).cols();
                        if self.needs(v) {
                            let d = slot(&mut grads, v, rows * w);
                            for r in 0..rows {
                                let src = &g[r * total + off..r * total + off + w];
                                d[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                            }
                        }
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &v in parts {
                        let n = self.value(v).len();
                        if self.needs(v) {
                            let d = slot(&mut grads, v, n);
                            d.iter_mut().zip(&g[off..off + n]).for_each(|(a, b)| *a += b);
                        }
                        off += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let cols = node.value.cols();
                    let n = self.value(*x).len();
                    let d = slot(&mut grads, *x, n);
                    d[start * cols..start * cols + g.len()]
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, b)| *a += b);
                }
                Op::MeanRowSqNorm(x) => {
                    let xv = self.value(*x);
                    let scale = 2.0 * g[0] / xv.rows() as f64;
                    let d = slot(&mut grads, *x, xv.len());
                    d.iter_mut().zip(xv.data()).for_each(|(a, v)| *a += scale * v);
                }
                Op::BinaryLogLoss {
                    logits,
                    head,
                    positive,
                    clamp,
                } => {
                    let lv = self.value(*logits);
                    let (rows, cols) = as_matrix(lv);
                    let scale = g[0] / rows as f64;
                    let d = slot(&mut grads, *logits, rows * cols);
                    for r in 0..rows {
                        let p = sigmoid(lv.row(r)[*head]);
                        if p > *clamp && p < 1.0 - clamp {
                            let dl = if *positive { p - 1.0 } else { p };
                            d[r * cols + head] += scale * dl;
                        }
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    start,
                    width,
                    targets,
                } => {
                    let lv = self.value(*logits);
                    let (rows, cols) = as_matrix(lv);
                    let scale = g[0] / rows as f64;
                    let d = slot(&mut grads, *logits, rows * cols);
                    for (r, &k) in targets.iter().enumerate() {
                        let grp = &lv.row(r)[*start..start + width];
                        let mx = grp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = grp.iter().map(|v| (v - mx).exp()).sum();
                        for (j, v) in grp.iter().enumerate() {
                            let p = (v - mx).exp() / z;
                            let target = if j == k { 1.0 } else { 0.0 };
                            d[r * cols + start + j] += scale * (p - target);
                        }
                    }
                }
            }
        }
        Ok(result)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, n: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}
