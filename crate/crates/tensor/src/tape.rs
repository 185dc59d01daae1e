//! Reverse-mode gradient tape.
//!
//! A [`Tape`] is an append-only list of nodes. Leaves are created with
//! [`Tape::param`] (gradient tracked) or [`Tape::constant`] (never receives a
//! gradient); every op appends one node whose parents already exist, so the
//! node order is a topological order. [`Tape::backward`] walks it once in
//! reverse and accumulates gradients additively at shared parents.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::conv::{self, ConvGeometry};
use crate::error::{Result, TensorError};
use crate::linalg::{self, gemm, Mat};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    RowSum(usize),
    MeanRows(usize),
    GatherRows(usize, Vec<usize>),
    ConcatCols(Vec<usize>),
    Relu(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeometry,
    },
    BatchNormInfer {
        input: usize,
        gamma: usize,
        beta: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormTrain {
        input: usize,
        gamma: usize,
        beta: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelScale(usize, usize),
    GlobalAvgPool(usize),
    L2Normalize {
        input: usize,
        norms: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Inverse(usize),
    AddRidge {
        input: usize,
        relative: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a tracked variable; `None` for constants and for nodes
    /// that do not require a gradient. Tracked leaves unreachable from the
    /// loss get an all-zero gradient.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(TensorError::shape(op, "rank-2 matrix", t.shape()));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn add_into(dst: &mut Option<Tensor>, shape: &[usize], src: impl IntoIterator<Item = f64>) {
    let g = dst.get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
    for (d, s) in g.data_mut().iter_mut().zip(src) {
        *d += s;
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest `|x|` over the inputs of every relu recorded so far, or
    /// `None` without relus. Finite-difference checks are only meaningful
    /// when this exceeds the perturbation's effect on the activations.
    pub fn relu_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(ia) => Some(self.nodes[ia].value.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .reduce(f64::min)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        Ok(&self.nodes[self.idx(v)?])
    }

    fn rg(&self, indices: &[usize]) -> bool {
        indices.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).expect("variable from another tape").value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    fn binary_same_shape(&mut self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        if self.nodes[ia].value.shape() != self.nodes[ib].value.shape() {
            return Err(TensorError::shape(
                op,
                format!("{:?}", self.nodes[ia].value.shape()),
                self.nodes[ib].value.shape(),
            ));
        }
        Ok((ia, ib))
    }

    fn zip_map(&self, ia: usize, ib: usize, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape("add", a, b)?;
        let v = self.zip_map(ia, ib, |p, q| p + q);
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(v, Op::Add(ia, ib), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape("sub", a, b)?;
        let v = self.zip_map(ia, ib, |p, q| p - q);
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(v, Op::Sub(ia, ib), rg))
    }

    /// Elementwise (Hadamard) product of equally shaped tensors.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = self.binary_same_shape("hadamard", a, b)?;
        let v = self.zip_map(ia, ib, |p, q| p * q);
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(v, Op::Mul(ia, ib), rg))
    }

    /// `x[N, d] + row[1, d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (ix, ir) = (self.idx(x)?, self.idx(row)?);
        let (n, d) = check_matrix("add_row", &self.nodes[ix].value)?;
        let rshape = self.nodes[ir].value.shape();
        if rshape != [1, d] {
            return Err(TensorError::shape("add_row", format!("[1, {d}]"), rshape));
        }
        let r = self.nodes[ir].value.data();
        let xs = self.nodes[ix].value.data();
        let data = (0..n * d).map(|k| xs[k] + r[k % d]).collect();
        let v = Tensor::new([n, d], data)?;
        let rg = self.rg(&[ix, ir]);
        Ok(self.push(v, Op::AddRow(ix, ir), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.map(|x| x * s);
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::Scale(ia, s), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let v = self.nodes[ia].value.matmul(&self.nodes[ib].value)?;
        let rg = self.rg(&[ia, ib]);
        Ok(self.push(v, Op::MatMul(ia, ib), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        check_matrix("transpose", &self.nodes[ia].value)?;
        let v = self.nodes[ia].value.transpose();
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::Transpose(ia), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::Reshape(ia), rg))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = Tensor::scalar(self.nodes[ia].value.sum());
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::Sum(ia), rg))
    }

    /// `[N, d] -> [N, 1]` row sums.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (n, _) = check_matrix("row_sum", &self.nodes[ia].value)?;
        let t = &self.nodes[ia].value;
        let data = (0..n).map(|i| t.row(i).iter().sum()).collect();
        let v = Tensor::new([n, 1], data)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::RowSum(ia), rg))
    }

    /// `[N, d] -> [1, d]` column means.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (n, d) = check_matrix("mean_rows", &self.nodes[ia].value)?;
        if n == 0 {
            return Err(TensorError::invalid("mean_rows", "no rows"));
        }
        let t = &self.nodes[ia].value;
        let mut data = vec![0.0; d];
        for i in 0..n {
            for (acc, x) in data.iter_mut().zip(t.row(i)) {
                *acc += x;
            }
        }
        data.iter_mut().for_each(|x| *x /= n as f64);
        let v = Tensor::new([1, d], data)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::MeanRows(ia), rg))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let (n, _) = check_matrix("gather_rows", &self.nodes[ia].value)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("row {bad} out of range for {n} rows"),
            ));
        }
        let v = self.nodes[ia].value.select_rows(rows);
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::GatherRows(ia, rows.to_vec()), rg))
    }

    /// Concatenate `[N, k_i]` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::invalid("concat_cols", "no inputs"));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let n = check_matrix("concat_cols", &self.nodes[idx[0]].value)?.0;
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let (r, c) = check_matrix("concat_cols", &self.nodes[i].value)?;
            if r != n {
                return Err(TensorError::shape(
                    "concat_cols",
                    format!("{n} rows"),
                    self.nodes[i].value.shape(),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let v = Tensor::new([n, total], data)?;
        let rg = self.rg(&idx);
        Ok(self.push(v, Op::ConcatCols(idx), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let v = self.nodes[ia].value.map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::Relu(ia), rg))
    }

    /// NCHW input, OIHW kernel.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ii, ik) = (self.idx(input)?, self.idx(kernel)?);
        let geom = ConvGeometry::new(
            self.nodes[ii].value.shape(),
            self.nodes[ik].value.shape(),
            stride,
            padding,
        )?;
        let out = conv::forward(&geom, self.nodes[ii].value.data(), self.nodes[ik].value.data());
        let v = Tensor::new(geom.output_shape().to_vec(), out)?;
        let rg = self.rg(&[ii, ik]);
        Ok(self.push(
            v,
            Op::Conv2d {
                input: ii,
                kernel: ik,
                geom,
            },
            rg,
        ))
    }

    fn channel_layout(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
        if shape.len() != 4 {
            return Err(TensorError::shape(op, "[N,C,H,W]", shape));
        }
        Ok((shape[0], shape[1], shape[2] * shape[3]))
    }

    fn check_channel_vec(&self, op: &'static str, i: usize, c: usize) -> Result<()> {
        let s = self.nodes[i].value.shape();
        if s != [c] {
            return Err(TensorError::shape(op, format!("[{c}]"), s));
        }
        Ok(())
    }

    /// Batch normalization with fixed running statistics.
    pub fn batch_norm_inference(
        &mut self,
        input: Var,
        mean: &Tensor,
        var: &Tensor,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<Var> {
        let (ii, ig, ib) = (self.idx(input)?, self.idx(gamma)?, self.idx(beta)?);
        let (n, c, hw) = Self::channel_layout("batch_norm", self.nodes[ii].value.shape())?;
        self.check_channel_vec("batch_norm", ig, c)?;
        self.check_channel_vec("batch_norm", ib, c)?;
        if mean.shape() != [c] || var.shape() != [c] {
            return Err(TensorError::shape("batch_norm", format!("stats [{c}]"), mean.shape()));
        }
        let inv_std: Vec<f64> = var.data().iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.nodes[ig].value.data(), self.nodes[ib].value.data());
        let x = self.nodes[ii].value.data();
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let scale = g[ci] * inv_std[ci];
                let shift = b[ci] - mean.data()[ci] * scale;
                let off = (ni * c + ci) * hw;
                for k in off..off + hw {
                    out[k] = x[k] * scale + shift;
                }
            }
        }
        let v = Tensor::new(self.nodes[ii].value.shape().to_vec(), out)?;
        let rg = self.rg(&[ii, ig, ib]);
        Ok(self.push(
            v,
            Op::BatchNormInfer {
                input: ii,
                gamma: ig,
                beta: ib,
                mean: mean.data().to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    /// Batch normalization with batch statistics. Also returns the batch
    /// mean and the unbiased batch variance for running-average updates.
    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Tensor, Tensor)> {
        let (ii, ig, ib) = (self.idx(input)?, self.idx(gamma)?, self.idx(beta)?);
        let (n, c, hw) = Self::channel_layout("batch_norm", self.nodes[ii].value.shape())?;
        self.check_channel_vec("batch_norm", ig, c)?;
        self.check_channel_vec("batch_norm", ib, c)?;
        let m = n * hw;
        if m < 2 {
            return Err(TensorError::invalid(
                "batch_norm",
                "batch statistics need at least two values per channel",
            ));
        }
        let x = self.nodes[ii].value.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                let off = (ni * c + ci) * hw;
                s += x[off..off + hw].iter().sum::<f64>();
            }
            mean[ci] = s / m as f64;
            let mut ss = 0.0;
            for ni in 0..n {
                let off = (ni * c + ci) * hw;
                ss += x[off..off + hw].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
            }
            var[ci] = ss / m as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.nodes[ig].value.data(), self.nodes[ib].value.data());
        let mut normalized = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for k in off..off + hw {
                    let xh = (x[k] - mean[ci]) * inv_std[ci];
                    normalized[k] = xh;
                    out[k] = g[ci] * xh + b[ci];
                }
            }
        }
        let unbiased: Vec<f64> = var.iter().map(|v| v * m as f64 / (m - 1) as f64).collect();
        let v = Tensor::new(self.nodes[ii].value.shape().to_vec(), out)?;
        let rg = self.rg(&[ii, ig, ib]);
        let var_node = self.push(
            v,
            Op::BatchNormTrain {
                input: ii,
                gamma: ig,
                beta: ib,
                normalized,
                inv_std,
            },
            rg,
        );
        Ok((
            var_node,
            Tensor::new([c], mean)?,
            Tensor::new([c], unbiased)?,
        ))
    }

    /// `x[N,C,H,W] * scale[C]` broadcast over batch and space.
    pub fn channel_scale(&mut self, input: Var, scale: Var) -> Result<Var> {
        let (ii, is) = (self.idx(input)?, self.idx(scale)?);
        let (n, c, hw) = Self::channel_layout("channel_scale", self.nodes[ii].value.shape())?;
        self.check_channel_vec("channel_scale", is, c)?;
        let (x, a) = (self.nodes[ii].value.data(), self.nodes[is].value.data());
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for k in off..off + hw {
                    out[k] = x[k] * a[ci];
                }
            }
        }
        let v = Tensor::new(self.nodes[ii].value.shape().to_vec(), out)?;
        let rg = self.rg(&[ii, is]);
        Ok(self.push(v, Op::ChannelScale(ii, is), rg))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let ii = self.idx(input)?;
        let (n, c, hw) = Self::channel_layout("global_avg_pool", self.nodes[ii].value.shape())?;
        let x = self.nodes[ii].value.data();
        let data = (0..n * c)
            .map(|k| x[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let v = Tensor::new([n, c], data)?;
        let rg = self.rg(&[ii]);
        Ok(self.push(v, Op::GlobalAvgPool(ii), rg))
    }

    /// Each row scaled to unit Euclidean norm. Zero rows are an error.
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let ii = self.idx(input)?;
        let (n, d) = check_matrix("l2_normalize", &self.nodes[ii].value)?;
        let x = &self.nodes[ii].value;
        let mut norms = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = x.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(TensorError::invalid(
                    "l2_normalize",
                    format!("row {i} has zero (or non-finite) norm"),
                ));
            }
            norms.push(norm);
            data.extend(row.iter().map(|v| v / norm));
        }
        let v = Tensor::new([n, d], data)?;
        let rg = self.rg(&[ii]);
        Ok(self.push(v, Op::L2Normalize { input: ii, norms }, rg))
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let (n, k) = check_matrix("softmax_cross_entropy", &self.nodes[il].value)?;
        if labels.len() != n || n == 0 {
            return Err(TensorError::invalid(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(TensorError::LabelOutOfRange {
                label: bad,
                classes: k,
            });
        }
        let x = &self.nodes[il].value;
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = x.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            loss += lse - row[y];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let v = Tensor::scalar(loss / n as f64);
        let rg = self.rg(&[il]);
        Ok(self.push(
            v,
            Op::SoftmaxCrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Inverse of a square matrix.
    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let (r, c) = check_matrix("inverse", &self.nodes[ia].value)?;
        if r != c {
            return Err(TensorError::shape("inverse", "square matrix", &[r, c]));
        }
        let inv = linalg::invert(r, self.nodes[ia].value.data())?;
        let v = Tensor::new([r, r], inv)?;
        let rg = self.rg(&[ia]);
        Ok(self.push(v, Op::Inverse(ia), rg))
    }

    /// `A + relative * (trace(A) / n) * I` for square `A`.
    pub fn add_ridge(&mut self, a: Var, relative: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let (r, c) = check_matrix("add_ridge", &self.nodes[ia].value)?;
        if r != c {
            return Err(TensorError::shape("add_ridge", "square matrix", &[r, c]));
        }
        let mut v = self.nodes[ia].value.clone();
        let trace: f64 = (0..r).map(|i| v.data()[i * r + i]).sum();
        let ridge = relative * trace / r as f64;
        for i in 0..r {
            v.data_mut()[i * r + i] += ridge;
        }
        let rg = self.rg(&[ia]);
        Ok(self.push(
            v,
            Op::AddRidge {
                input: ia,
                relative,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        let lv = &self.nodes[li].value;
        if lv.len() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[li].requires_grad {
            grads[li] = Some(Tensor::ones(lv.shape().to_vec()));
        }
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let keep = node.requires_grad && matches!(node.op, Op::Leaf);
            if !keep {
                grads[i] = None;
            } else if grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |p: usize| self.nodes[p].requires_grad;
        let shape = |p: usize| self.nodes[p].value.shape();
        let val = |p: usize| &self.nodes[p].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if wants(p) {
                        add_into(&mut grads[p], shape(p), gd.iter().copied());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    add_into(&mut grads[*a], shape(*a), gd.iter().copied());
                }
                if wants(*b) {
                    add_into(&mut grads[*b], shape(*b), gd.iter().map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let other = val(*b).data();
                    add_into(&mut grads[*a], shape(*a), gd.iter().zip(other).map(|(g, o)| g * o));
                }
                if wants(*b) {
                    let other = val(*a).data();
                    add_into(&mut grads[*b], shape(*b), gd.iter().zip(other).map(|(g, o)| g * o));
                }
            }
            Op::AddRow(x, r) => {
                if wants(*x) {
                    add_into(&mut grads[*x], shape(*x), gd.iter().copied());
                }
                if wants(*r) {
                    let d = shape(*r)[1];
                    let mut acc = vec![0.0; d];
                    for (k, v) in gd.iter().enumerate() {
                        acc[k % d] += v;
                    }
                    add_into(&mut grads[*r], shape(*r), acc);
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    add_into(&mut grads[*a], shape(*a), gd.iter().map(|v| v * s));
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                if wants(*a) {
                    // dA = G * B^T
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros([m, k]));
                    gemm(
                        m,
                        n,
                        k,
                        Mat::new(gd, n, 1),
                        Mat::new(val(*b).data(), 1, n),
                        ga.data_mut(),
                        true,
                    );
                }
                if wants(*b) {
                    // dB = A^T * G
                    let gb = grads[*b].get_or_insert_with(|| Tensor::zeros([k, n]));
                    gemm(
                        k,
                        m,
                        n,
                        Mat::new(val(*a).data(), 1, k),
                        Mat::new(gd, n, 1),
                        gb.data_mut(),
                        true,
                    );
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    add_into(&mut grads[*a], shape(*a), g.transpose().into_data());
                }
            }
            Op::Reshape(a) => {
                if wants(*a) {
                    add_into(&mut grads[*a], shape(*a), gd.iter().copied());
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let s = gd[0];
                    let n = val(*a).len();
                    add_into(&mut grads[*a], shape(*a), std::iter::repeat(s).take(n));
                }
            }
            Op::RowSum(a) => {
                if wants(*a) {
                    let d = shape(*a)[1];
                    let n = shape(*a)[0];
                    add_into(&mut grads[*a], shape(*a), (0..n * d).map(|k| gd[k / d]));
                }
            }
            Op::MeanRows(a) => {
                if wants(*a) {
                    let (n, d) = (shape(*a)[0], shape(*a)[1]);
                    let inv = 1.0 / n as f64;
                    add_into(&mut grads[*a], shape(*a), (0..n * d).map(|k| gd[k % d] * inv));
                }
            }
            Op::GatherRows(a, rows) => {
                if wants(*a) {
                    let d = shape(*a)[1];
                    let ga = grads[*a].get_or_insert_with(|| Tensor::zeros(shape(*a).to_vec()));
                    let gad = ga.data_mut();
                    for (j, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            gad[r * d + c] += gd[j * d + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.shape()[1];
                let n = g.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = shape(p)[1];
                    if wants(p) {
                        let src = (0..n * w).map(|k| gd[(k / w) * total + offset + k % w]);
                        add_into(&mut grads[p], shape(p), src);
                    }
                    offset += w;
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let x = val(*a).data();
                    add_into(
                        &mut grads[*a],
                        shape(*a),
                        gd.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }),
                    );
                }
            }
            Op::Conv2d {
                input,
                kernel,
                geom,
            } => {
                let (wi, wk) = (wants(*input), wants(*kernel));
                let mut di = wi.then(|| Tensor::zeros(shape(*input).to_vec()));
                let mut dk = wk.then(|| Tensor::zeros(shape(*kernel).to_vec()));
                conv::backward(
                    geom,
                    val(*input).data(),
                    val(*kernel).data(),
                    gd,
                    di.as_mut().map(|t| t.data_mut()),
                    dk.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = di {
                    add_into(&mut grads[*input], shape(*input), t.into_data());
                }
                if let Some(t) = dk {
                    add_into(&mut grads[*kernel], shape(*kernel), t.into_data());
                }
            }
            Op::BatchNormInfer {
                input,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let s = shape(*input);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gam = val(*gamma).data();
                if wants(*input) {
                    let src = (0..gd.len()).map(|k| gd[k] * gam[(k / hw) % c] * inv_std[(k / hw) % c]);
                    add_into(&mut grads[*input], s, src);
                }
                if wants(*gamma) || wants(*beta) {
                    let x = val(*input).data();
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            for k in off..off + hw {
                                dg[ci] += gd[k] * (x[k] - mean[ci]) * inv_std[ci];
                                db[ci] += gd[k];
                            }
                        }
                    }
                    if wants(*gamma) {
                        add_into(&mut grads[*gamma], &[c], dg);
                    }
                    if wants(*beta) {
                        add_into(&mut grads[*beta], &[c], db);
                    }
                }
            }
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let s = shape(*input);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let m = (n * hw) as f64;
                let gam = val(*gamma).data();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * hw;
                        for k in off..off + hw {
                            dg[ci] += gd[k] * normalized[k];
                            db[ci] += gd[k];
                        }
                    }
                }
                if wants(*input) {
                    let mut dx = vec![0.0; gd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            let a = gam[ci] * inv_std[ci] / m;
                            for k in off..off + hw {
                                dx[k] = a * (m * gd[k] - db[ci] - normalized[k] * dg[ci]);
                            }
                        }
                    }
                    add_into(&mut grads[*input], s, dx);
                }
                if wants(*gamma) {
                    add_into(&mut grads[*gamma], &[c], dg);
                }
                if wants(*beta) {
                    add_into(&mut grads[*beta], &[c], db);
                }
            }
            Op::ChannelScale(x, a) => {
                let s = shape(*x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                if wants(*x) {
                    let av = val(*a).data();
                    add_into(&mut grads[*x], s, (0..gd.len()).map(|k| gd[k] * av[(k / hw) % c]));
                }
                if wants(*a) {
                    let xv = val(*x).data();
                    let mut da = vec![0.0; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            da[ci] += (off..off + hw).map(|k| gd[k] * xv[k]).sum::<f64>();
                        }
                    }
                    add_into(&mut grads[*a], &[c], da);
                }
            }
            Op::GlobalAvgPool(x) => {
                if wants(*x) {
                    let s = shape(*x);
                    let hw = s[2] * s[3];
                    let inv = 1.0 / hw as f64;
                    let len = val(*x).len();
                    add_into(&mut grads[*x], s, (0..len).map(|k| gd[k / hw] * inv));
                }
            }
            Op::L2Normalize { input, norms } => {
                if wants(*input) {
                    let y = self.nodes[i].value.data();
                    let d = shape(*input)[1];
                    let mut dx = vec![0.0; y.len()];
                    for (r, norm) in norms.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let dot: f64 = span.clone().map(|k| y[k] * gd[k]).sum();
                        for k in span {
                            dx[k] = (gd[k] - y[k] * dot) / norm;
                        }
                    }
                    add_into(&mut grads[*input], shape(*input), dx);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(*logits) {
                    let k = shape(*logits)[1];
                    let n = labels.len();
                    let scale = gd[0] / n as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        dl[r * k + y] -= scale;
                    }
                    add_into(&mut grads[*logits], shape(*logits), dl);
                }
            }
            Op::Inverse(a) => {
                if wants(*a) {
                    // dA = -Y^T G Y^T
                    let y = &self.nodes[i].value;
                    let yt = y.transpose();
                    let tmp = yt.matmul(g).expect("square");
                    let da = tmp.matmul(&yt).expect("square");
                    add_into(&mut grads[*a], shape(*a), da.data().iter().map(|v| -v));
                }
            }
            Op::AddRidge { input, relative } => {
                if wants(*input) {
                    let r = shape(*input)[0];
                    let tr: f64 = (0..r).map(|k| gd[k * r + k]).sum();
                    let extra = relative * tr / r as f64;
                    let src = (0..r * r).map(|k| gd[k] + if k / r == k % r { extra } else { 0.0 });
                    add_into(&mut grads[*input], shape(*input), src);
                }
            }
        }
    }
}
