//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op appended to it in creation order, which is
//! already a topological order. [`Graph::backward`] walks the tape once in
//! reverse and accumulates gradients into the leaves that asked for them.

use crate::kernels;
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-column batch statistics produced by [`Graph::batch_norm`].
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Population variance (divides by the batch size).
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    MulRow {
        x: Var,
        row: Var,
    },
    Scale(Var, f64),
    Relu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskFill {
        x: Var,
        keep: Vec<bool>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_id: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Mse(Var, Var),
    Gather {
        x: Var,
        index: Vec<Option<usize>>,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        blocks: Vec<usize>,
    },
    Reshape(Var),
    SumLastAxis(Var),
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Fill value used by [`Graph::mask_fill`] callers for attention masking.
/// `exp` of it underflows to exactly zero after max subtraction.
pub const MASKED: f64 = -1.0e30;

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: &'static str, value: Tensor, node_op: Op, requires_grad: bool) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(TensorError::NonFinite { op, index });
        }
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf, present only after a backward pass
    /// and only for leaves created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Copy of `v`'s value as a fresh constant; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    // ── Linear algebra ─────────────────────────────────────────────────

    /// `a[..., M, K] × b[K, N]` or batched `a[..., M, K] × b[..., K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_blk = &av[bi * m * k..(bi + 1) * m * k];
            let b_blk = if shared_rhs {
                bv
            } else {
                &bv[bi * k * n..(bi + 1) * k * n]
            };
            kernels::gemm(a_blk, b_blk, &mut out[bi * m * n..(bi + 1) * m * n], m, k, n);
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            "matmul",
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        )
    }

    // ── Elementwise ────────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(op, value, node, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_op(&mut self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let width = *self.shape(x).last().unwrap_or(&0);
        if self.shape(row) != [width] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        Ok(width)
    }

    /// Adds a `[N]` vector to every last-axis row of `x[..., N]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let width = self.row_op("add_row", x, row)?;
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + r[i % width])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(row);
        self.push("add_row", value, Op::AddRow { x, row }, rg)
    }

    /// Multiplies every last-axis row of `x[..., N]` elementwise by `[N]`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let width = self.row_op("mul_row", x, row)?;
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * r[i % width])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(row);
        self.push("mul_row", value, Op::MulRow { x, row }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push("scale", value, Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push("relu", value, Op::Relu(x), rg)
    }

    // ── Normalization and probability ──────────────────────────────────

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "softmax",
                reason: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            "softmax",
            Tensor::new(shape, out)?,
            Op::Softmax { x, outer, len, inner },
            rg,
        )
    }

    /// Replaces entries where `keep` is false with `fill`; those entries
    /// pass no gradient back to `x`.
    pub fn mask_fill(&mut self, x: Var, keep: Vec<bool>, fill: f64) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(TensorError::InvalidArgument {
                op: "mask_fill",
                reason: format!(
                    "mask has {} entries, tensor {:?} has {}",
                    keep.len(),
                    self.shape(x),
                    self.value(x).numel()
                ),
            });
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { fill })
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.rg(x);
        self.push("mask_fill", value, Op::MaskFill { x, keep }, rg)
    }

    /// Normalizes each last-axis row to zero mean and unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let width = self.row_op("layer_norm", x, gain)?;
        self.row_op("layer_norm", x, bias)?;
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / width;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * width..(r + 1) * width];
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / width as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..width {
                let h = (row[c] - mean) * is;
                xhat[r * width + c] = h;
                out[r * width + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Train-mode batch normalization of `x[B, D]` over the batch axis.
    /// Returns the normalized output and the batch statistics so the
    /// caller can update running estimates.
    pub fn batch_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "batch_norm",
                reason: format!("expected [B, D], got {shape:?}"),
            });
        }
        let (rows, width) = (shape[0], shape[1]);
        self.row_op("batch_norm", x, gain)?;
        self.row_op("batch_norm", x, bias)?;
        if rows < 2 {
            return Err(TensorError::DegenerateBatch(rows));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut mean = vec![0.0; width];
        let mut var = vec![0.0; width];
        for r in 0..rows {
            for c in 0..width {
                mean[c] += xv[r * width + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        for r in 0..rows {
            for c in 0..width {
                let d = xv[r * width + c] - mean[c];
                var[c] += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            for c in 0..width {
                let h = (xv[r * width + c] - mean[c]) * inv_std[c];
                xhat[r * width + c] = h;
                out[r * width + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let v = self.push(
            "batch_norm",
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )?;
        Ok((v, BatchStats { mean, var }))
    }

    // ── Losses ─────────────────────────────────────────────────────────

    /// Mean negative log-likelihood of `targets` under `logits[..., V]`,
    /// skipping positions whose target equals `ignore_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let classes = *shape.last().unwrap_or(&0);
        let lv = self.value(logits).data();
        if classes == 0 || lv.len() / classes != targets.len() {
            return Err(TensorError::InvalidArgument {
                op: "cross_entropy",
                reason: format!("{} targets for logits of shape {shape:?}", targets.len()),
            });
        }
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_id {
                continue;
            }
            if t >= classes {
                return Err(TensorError::InvalidArgument {
                    op: "cross_entropy",
                    reason: format!("target id {t} at position {r} is not below {classes}"),
                });
            }
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(TensorError::EmptyLoss);
        }
        let rg = self.rg(logits);
        self.push(
            "cross_entropy",
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_id,
                probs,
                count,
            },
            rg,
        )
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let total: f64 = av.iter().zip(bv).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(total / av.len() as f64);
        let rg = self.rg(a) || self.rg(b);
        self.push("mse", value, Op::Mse(a, b), rg)
    }

    // ── Indexing and layout ────────────────────────────────────────────

    /// `out[i] = x.flat[index[i]]`, or 0 where the index is `None`.
    pub fn gather(&mut self, x: Var, index: Vec<Option<usize>>, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x).data();
        if let Some(bad) = index.iter().flatten().find(|&&j| j >= xv.len()) {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                reason: format!("index {bad} out of range for {} elements", xv.len()),
            });
        }
        let data = index.iter().map(|j| j.map_or(0.0, |j| xv[j])).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        self.push("gather", value, Op::Gather { x, index }, rg)
    }

    /// Rows of a `[V, D]` table selected by `ids`, shaped `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                reason: format!("table must be 2-D, got {shape:?}"),
            });
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                reason: format!("id {bad} out of range for {rows} rows"),
            });
        }
        let index = ids
            .iter()
            .flat_map(|&id| (0..width).map(move |c| Some(id * width + c)))
            .collect();
        self.gather(table, index, vec![ids.len(), width])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        self.push("reshape", value, Op::Reshape(x), rg)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::InvalidArgument {
                op: "permute",
                reason: format!("{perm:?} is not a permutation of {} axes", shape.len()),
            });
        }
        let strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
        let index = multi_index(&out_shape)
            .map(|idx| Some(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum()))
            .collect();
        self.gather(x, index, out_shape)
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                reason: "need at least 2 axes".into(),
            });
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 2, nd - 1);
        self.permute(x, &perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                reason: format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for j in start..start + len {
                for i in 0..inner {
                    index.push(Some((o * full + j) * inner + i));
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, index, out_shape)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*inputs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            reason: "no inputs".into(),
        })?)
        .to_vec();
        if axis >= first.len() {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                reason: format!("axis {axis} out of range for {first:?}"),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let blocks: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &blk) in inputs.iter().zip(&blocks) {
                data.extend_from_slice(&self.value(v).data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            "concat",
            Tensor::new(shape, data)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                outer,
                blocks,
            },
            rg,
        )
    }

    // ── Reductions ─────────────────────────────────────────────────────

    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap_or(&1);
        let data: Vec<f64> = self.value(x).data().chunks(width).map(|c| c.iter().sum()).collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        self.push("sum_last_axis", Tensor::new(out_shape, data)?, Op::SumLastAxis(x), rg)
    }

    pub fn mean_last_axis(&mut self, x: Var) -> Result<Var> {
        let width = *self.shape(x).last().unwrap_or(&1);
        let s = self.sum_last_axis(x)?;
        self.scale(s, 1.0 / width as f64)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push("sum", Tensor::scalar(total), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse-mode pass from a scalar `root`. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(TensorError::NonScalarRoot(self.shape(root).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(gout);
                continue;
            }
            self.propagate(i, &gout, &mut grads);
        }
        for (i, node) in self.nodes.iter_mut().enumerate().take(root.0 + 1) {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                continue;
            }
            let acc = node
                .grad
                .get_or_insert_with(|| Tensor::zeros(node.value.shape()));
            if let Some(g) = &grads[i] {
                for (a, d) in acc.data_mut().iter_mut().zip(g) {
                    *a += d;
                }
            }
        }
        // leaves created after the root still get an (empty) gradient
        for node in self.nodes.iter_mut().skip(root.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |ga| {
                    for bi in 0..batch {
                        let b_blk = if shared_rhs { bv } else { &bv[bi * k * n..(bi + 1) * k * n] };
                        kernels::gemm_nt(
                            &gout[bi * m * n..(bi + 1) * m * n],
                            b_blk,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                acc(b, &mut |gb| {
                    for bi in 0..batch {
                        let gb_blk = if shared_rhs {
                            &mut gb[..]
                        } else {
                            &mut gb[bi * k * n..(bi + 1) * k * n]
                        };
                        kernels::gemm_tn(
                            &av[bi * m * k..(bi + 1) * m * k],
                            &gout[bi * m * n..(bi + 1) * m * n],
                            gb_blk,
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |g| add_into(g, gout));
                acc(b, &mut |g| add_into(g, gout));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |g| add_into(g, gout));
                acc(b, &mut |g| g.iter_mut().zip(gout).for_each(|(x, d)| *x -= d));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(a, &mut |g| {
                    for j in 0..g.len() {
                        g[j] += gout[j] * bv[j];
                    }
                });
                acc(b, &mut |g| {
                    for j in 0..g.len() {
                        g[j] += gout[j] * av[j];
                    }
                });
            }
            &Op::AddRow { x, row } => {
                let w = val(row).len();
                acc(x, &mut |g| add_into(g, gout));
                acc(row, &mut |g| {
                    for (j, d) in gout.iter().enumerate() {
                        g[j % w] += d;
                    }
                });
            }
            &Op::MulRow { x, row } => {
                let (xv, rv) = (val(x), val(row));
                let w = rv.len();
                acc(x, &mut |g| {
                    for (j, d) in gout.iter().enumerate() {
                        g[j] += d * rv[j % w];
                    }
                });
                acc(row, &mut |g| {
                    for (j, d) in gout.iter().enumerate() {
                        g[j % w] += d * xv[j];
                    }
                });
            }
            &Op::Scale(x, factor) => {
                acc(x, &mut |g| g.iter_mut().zip(gout).for_each(|(a, d)| *a += d * factor));
            }
            &Op::Relu(x) => {
                let xv = val(x);
                acc(x, &mut |g| {
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            g[j] += gout[j];
                        }
                    }
                });
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = nodes[i].value.data();
                acc(x, &mut |g| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + ii;
                            let dot: f64 = (0..len).map(|j| gout[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                g[at(j)] += y[at(j)] * (gout[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::MaskFill { x, keep } => {
                acc(*x, &mut |g| {
                    for j in 0..g.len() {
                        if keep[j] {
                            g[j] += gout[j];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain);
                let w = gv.len();
                acc(*x, &mut |g| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let span = r * w..(r + 1) * w;
                        let dy = &gout[span.clone()];
                        let xh = &xhat[span.clone()];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..w {
                            let d = dy[c] * gv[c];
                            mean_d += d;
                            mean_dx += d * xh[c];
                        }
                        mean_d /= w as f64;
                        mean_dx /= w as f64;
                        for c in 0..w {
                            g[r * w + c] += is * (dy[c] * gv[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for (j, d) in gout.iter().enumerate() {
                        g[j % w] += d * xhat[j];
                    }
                });
                acc(*bias, &mut |g| {
                    for (j, d) in gout.iter().enumerate() {
                        g[j % w] += d;
                    }
                });
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain);
                let w = gv.len();
                let rows = gout.len() / w;
                acc(*x, &mut |g| {
                    for c in 0..w {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for r in 0..rows {
                            let d = gout[r * w + c] * gv[c];
                            mean_d += d;
                            mean_dx += d * xhat[r * w + c];
                        }
                        mean_d /= rows as f64;
                        mean_dx /= rows as f64;
                        for r in 0..rows {
                            let j = r * w + c;
                            g[j] += inv_std[c] * (gout[j] * gv[c] - mean_d - xhat[j] * mean_dx);
                        }
                    }
                });
                acc(*gain, &mut |g| {
                    for (j, d) in gout.iter().enumerate() {
                        g[j % w] += d * xhat[j];
                    }
                });
                acc(*bias, &mut |g| {
                    for (j, d) in gout.iter().enumerate() {
                        g[j % w] += d;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_id,
                probs,
                count,
            } => {
                let classes = probs.len() / targets.len();
                let scale = gout[0] / *count as f64;
                acc(*logits, &mut |g| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore_id {
                            continue;
                        }
                        for c in 0..classes {
                            let j = r * classes + c;
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            g[j] += scale * (probs[j] - onehot);
                        }
                    }
                });
            }
            &Op::Mse(a, b) => {
                let (av, bv) = (val(a), val(b));
                let scale = 2.0 * gout[0] / av.len() as f64;
                acc(a, &mut |g| {
                    for j in 0..g.len() {
                        g[j] += scale * (av[j] - bv[j]);
                    }
                });
                acc(b, &mut |g| {
                    for j in 0..g.len() {
                        g[j] -= scale * (av[j] - bv[j]);
                    }
                });
            }
            Op::Gather { x, index } => {
                acc(*x, &mut |g| {
                    for (d, j) in gout.iter().zip(index) {
                        if let Some(j) = j {
                            g[*j] += d;
                        }
                    }
                });
            }
            Op::Concat { inputs, outer, blocks } => {
                let total: usize = blocks.iter().sum();
                let mut offset = 0;
                for (&v, &blk) in inputs.iter().zip(blocks) {
                    acc(v, &mut |g| {
                        for o in 0..*outer {
                            let src = &gout[o * total + offset..o * total + offset + blk];
                            add_into(&mut g[o * blk..(o + 1) * blk], src);
                        }
                    });
                    offset += blk;
                }
            }
            &Op::Reshape(x) => acc(x, &mut |g| add_into(g, gout)),
            &Op::SumLastAxis(x) => {
                let w = val(x).len() / gout.len();
                acc(x, &mut |g| {
                    for (j, a) in g.iter_mut().enumerate() {
                        *a += gout[j / w];
                    }
                });
            }
            &Op::SumAll(x) => acc(x, &mut |g| g.iter_mut().for_each(|a| *a += gout[0])),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Row-major enumeration of every multi-index of `shape`.
fn multi_index(shape: &[usize]) -> impl Iterator<Item = Vec<usize>> + '_ {
    let total: usize = shape.iter().product();
    let st = strides(shape);
    (0..total).map(move |flat| st.iter().zip(shape).map(|(s, d)| (flat / s) % d).collect())
}
