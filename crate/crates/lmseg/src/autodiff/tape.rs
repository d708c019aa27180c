//! Reverse-mode differentiation on a per-step tape.
//!
//! The op vocabulary is exactly what the network needs: dense matmul and
//! elementwise arithmetic, column concat, row gather/scatter with sum, mean
//! and max reductions, per-group softmax, feature normalization layers, and
//! the smoothed weighted cross-entropy head. Every op registers a hand
//! derived backward rule; reductions run in a fixed order so repeated runs
//! are bit-identical regardless of thread count.

use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;
use rayon::prelude::*;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Running mean/variance for batch normalization, persisted between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![T::zero(); features],
            var: vec![T::one(); features],
        }
    }
}

enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    ScalarMul(usize, T),
    /// Elementwise product with a single-element variable (the inverse
    /// temperature); gradient flows to both operands.
    MulScalarVar(usize, usize),
    MatMul(usize, usize),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Rc<Vec<u32>>),
    ScatterSum(usize, Rc<Vec<u32>>),
    ScatterMean(usize, Rc<Vec<u32>>, Vec<u32>),
    /// Saved argmax row per (group, channel); -1 marks an empty group.
    ScatterMax(usize, Vec<i64>),
    Relu(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    GroupSoftmax(usize, Rc<Vec<u32>>),
    InterleaveCols(usize, usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout(usize, Vec<T>),
    /// Divide each column by (population std of that column + eps).
    RowStdNormalize {
        x: usize,
        mean: Vec<T>,
        sigma: Vec<T>,
        inv: Vec<T>,
    },
    /// out[i] = sum_j coeff * src[row_j]; coefficients are constants.
    LinearCombineRows(usize, Rc<Vec<Vec<(u32, T)>>>),
    SmoothedCe {
        logits: usize,
        labels: Rc<Vec<u32>>,
        weights: Rc<Vec<T>>,
        smoothing: T,
        probs: Vec<T>,
    },
    SumAll(usize),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Computation tape for one forward/backward step.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parallelize a matmul only when it is worth the scheduling overhead.
const PAR_FLOP_THRESHOLD: usize = 1 << 16;

fn mm_nn<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let body = |i: usize, row: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    }
    out
}

/// a [m,k] times b^T where b is [n,k].
fn mm_nt<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let body = |i: usize, row: &mut [T]| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    }
    out
}

/// a^T times b where a is [e,m] and b is [e,n].
fn mm_tn<T: Scalar>(a: &[T], e: usize, m: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let body = |i: usize, row: &mut [T]| {
        for ee in 0..e {
            let aei = a[ee * m + i];
            let brow = &b[ee * n..(ee + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aei * bv;
            }
        }
    };
    if e * m * n >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    }
    out
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Constant input; no gradient is tracked through it.
    pub fn leaf(&self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Differentiable input (parameter or checked input).
    pub fn param(&self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, usize)> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", sa, sb),
            });
        }
        Ok((sa.to_vec(), nodes[a.0].value.numel()))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, _) = self.binary_same_shape("add", a, b)?;
        let data = self.with_value(a, |ta| {
            self.with_value(b, |tb| {
                ta.data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| x + y)
                    .collect::<Vec<_>>()
            })
        });
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, needs, Op::Add(a.0, b.0)))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, _) = self.binary_same_shape("sub", a, b)?;
        let data = self.with_value(a, |ta| {
            self.with_value(b, |tb| {
                ta.data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| x - y)
                    .collect::<Vec<_>>()
            })
        });
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, needs, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (shape, _) = self.binary_same_shape("mul", a, b)?;
        let data = self.with_value(a, |ta| {
            self.with_value(b, |tb| {
                ta.data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| x * y)
                    .collect::<Vec<_>>()
            })
        });
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, data)?, needs, Op::Mul(a.0, b.0)))
    }

    /// x [n,c] plus a length-c bias row.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let (shape, cols, bn) = self.with_value(x, |tx| {
            self.with_value(bias, |tb| (tx.shape().to_vec(), tx.cols(), tb.numel()))
        });
        if bn != cols {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias len {} vs {} cols", bn, cols),
            });
        }
        let data = self.with_value(x, |tx| {
            self.with_value(bias, |tb| {
                let mut out = tx.data().to_vec();
                for row in out.chunks_mut(cols) {
                    for (o, &bv) in row.iter_mut().zip(tb.data()) {
                        *o += bv;
                    }
                }
                out
            })
        });
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(shape, data)?, needs, Op::AddBias(x.0, bias.0)))
    }

    pub fn scalar_mul(&self, x: Var, s: T) -> Var {
        let value = self.with_value(x, |t| t.map(|v| v * s));
        let needs = self.needs(x);
        self.push(value, needs, Op::ScalarMul(x.0, s))
    }

    /// Multiply every element of x by a one-element variable.
    pub fn mul_scalar_var(&self, x: Var, s: Var) -> Result<Var> {
        let sn = self.with_value(s, |t| t.numel());
        if sn != 1 {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar_var",
                detail: format!("scalar operand has {} elements", sn),
            });
        }
        let sv = self.with_value(s, |t| t.data()[0]);
        let value = self.with_value(x, |t| t.map(|v| v * sv));
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(value, needs, Op::MulScalarVar(x.0, s.0)))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (m, k, k2, n) = self.with_value(a, |ta| {
            self.with_value(b, |tb| (ta.rows(), ta.cols(), tb.rows(), tb.cols()))
        });
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("[{},{}] x [{},{}]", m, k, k2, n),
            });
        }
        let data =
            self.with_value(a, |ta| self.with_value(b, |tb| mm_nn(ta.data(), m, k, tb.data(), n)));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], data)?, needs, Op::MatMul(a.0, b.0)))
    }

    /// Concatenate along the feature (last) axis; all inputs share row count.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        }
        let rows = self.with_value(parts[0], |t| t.rows());
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = self.with_value(p, |t| (t.rows(), t.cols()));
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {} vs {}", rows, r),
                });
            }
            total_cols += c;
        }
        let mut data = vec![T::zero(); rows * total_cols];
        let mut offset = 0;
        for &p in parts {
            self.with_value(p, |t| {
                let c = t.cols();
                for i in 0..rows {
                    data[i * total_cols + offset..i * total_cols + offset + c]
                        .copy_from_slice(t.row(i));
                }
                offset += c;
            });
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(vec![rows, total_cols], data)?,
            needs,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
        ))
    }

    pub fn gather_rows(&self, x: Var, indices: Rc<Vec<u32>>) -> Result<Var> {
        let (rows, cols) = self.with_value(x, |t| (t.rows(), t.cols()));
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= rows) {
            return Err(Error::IndexOutOfRange {
                index: bad as usize,
                len: rows,
            });
        }
        let mut data = vec![T::zero(); indices.len() * cols];
        self.with_value(x, |t| {
            for (q, &i) in indices.iter().enumerate() {
                data[q * cols..(q + 1) * cols].copy_from_slice(t.row(i as usize));
            }
        });
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![indices.len(), cols], data)?,
            needs,
            Op::GatherRows(x.0, indices),
        ))
    }

    fn check_groups(&self, x: Var, groups: &[u32], n_out: usize) -> Result<(usize, usize)> {
        let (rows, cols) = self.with_value(x, |t| (t.rows(), t.cols()));
        if groups.len() != rows {
            return Err(Error::LengthMismatch {
                left: groups.len(),
                right: rows,
            });
        }
        if let Some(&bad) = groups.iter().find(|&&g| g as usize >= n_out) {
            return Err(Error::IndexOutOfRange {
                index: bad as usize,
                len: n_out,
            });
        }
        Ok((rows, cols))
    }

    pub fn scatter_sum(&self, x: Var, groups: Rc<Vec<u32>>, n_out: usize) -> Result<Var> {
        let (_, cols) = self.check_groups(x, &groups, n_out)?;
        let mut data = vec![T::zero(); n_out * cols];
        self.with_value(x, |t| {
            for (e, &g) in groups.iter().enumerate() {
                let dst = &mut data[g as usize * cols..(g as usize + 1) * cols];
                for (o, &v) in dst.iter_mut().zip(t.row(e)) {
                    *o += v;
                }
            }
        });
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![n_out, cols], data)?,
            needs,
            Op::ScatterSum(x.0, groups),
        ))
    }

    pub fn scatter_mean(&self, x: Var, groups: Rc<Vec<u32>>, n_out: usize) -> Result<Var> {
        let (_, cols) = self.check_groups(x, &groups, n_out)?;
        let mut counts = vec![0u32; n_out];
        for &g in groups.iter() {
            counts[g as usize] += 1;
        }
        let mut data = vec![T::zero(); n_out * cols];
        self.with_value(x, |t| {
            for (e, &g) in groups.iter().enumerate() {
                let dst = &mut data[g as usize * cols..(g as usize + 1) * cols];
                for (o, &v) in dst.iter_mut().zip(t.row(e)) {
                    *o += v;
                }
            }
        });
        for (m, row) in data.chunks_mut(cols).enumerate() {
            if counts[m] > 0 {
                let inv = T::one() / T::from_f64(counts[m] as f64);
                for o in row.iter_mut() {
                    *o *= inv;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![n_out, cols], data)?,
            needs,
            Op::ScatterMean(x.0, groups, counts),
        ))
    }

    /// Per-group, per-channel max; empty groups produce zeros. The backward
    /// rule routes the gradient to the argmax row only (first row on ties).
    pub fn scatter_max(&self, x: Var, groups: Rc<Vec<u32>>, n_out: usize) -> Result<Var> {
        let (_, cols) = self.check_groups(x, &groups, n_out)?;
        let mut data = vec![T::neg_infinity(); n_out * cols];
        let mut argmax = vec![-1i64; n_out * cols];
        self.with_value(x, |t| {
            for (e, &g) in groups.iter().enumerate() {
                let base = g as usize * cols;
                for (c, &v) in t.row(e).iter().enumerate() {
                    if v > data[base + c] {
                        data[base + c] = v;
                        argmax[base + c] = e as i64;
                    }
                }
            }
        });
        for (d, a) in data.iter_mut().zip(&argmax) {
            if *a < 0 {
                *d = T::zero();
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![n_out, cols], data)?,
            needs,
            Op::ScatterMax(x.0, argmax),
        ))
    }

    pub fn relu(&self, x: Var) -> Var {
        let value = self.with_value(x, |t| t.map(|v| if v > T::zero() { v } else { T::zero() }));
        let needs = self.needs(x);
        self.push(value, needs, Op::Relu(x.0))
    }

    pub fn sin(&self, x: Var) -> Var {
        let value = self.with_value(x, |t| t.map(|v| v.sin()));
        let needs = self.needs(x);
        self.push(value, needs, Op::Sin(x.0))
    }

    pub fn cos(&self, x: Var) -> Var {
        let value = self.with_value(x, |t| t.map(|v| v.cos()));
        let needs = self.needs(x);
        self.push(value, needs, Op::Cos(x.0))
    }

    pub fn exp(&self, x: Var) -> Var {
        let value = self.with_value(x, |t| t.map(|v| v.exp()));
        let needs = self.needs(x);
        self.push(value, needs, Op::Exp(x.0))
    }

    /// Channelwise softmax across the rows of each group, stabilized by
    /// max subtraction. Rows of empty groups do not exist by construction.
    pub fn group_softmax(&self, x: Var, groups: Rc<Vec<u32>>, n_out: usize) -> Result<Var> {
        let (rows, cols) = self.check_groups(x, &groups, n_out)?;
        let mut maxv = vec![T::neg_infinity(); n_out * cols];
        self.with_value(x, |t| {
            for (e, &g) in groups.iter().enumerate() {
                let base = g as usize * cols;
                for (c, &v) in t.row(e).iter().enumerate() {
                    if v > maxv[base + c] {
                        maxv[base + c] = v;
                    }
                }
            }
        });
        let mut data = vec![T::zero(); rows * cols];
        let mut sums = vec![T::zero(); n_out * cols];
        self.with_value(x, |t| {
            for (e, &g) in groups.iter().enumerate() {
                let base = g as usize * cols;
                for (c, &v) in t.row(e).iter().enumerate() {
                    let ev = (v - maxv[base + c]).exp();
                    data[e * cols + c] = ev;
                    sums[base + c] += ev;
                }
            }
        });
        for (e, &g) in groups.iter().enumerate() {
            let base = g as usize * cols;
            for c in 0..cols {
                data[e * cols + c] /= sums[base + c];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            needs,
            Op::GroupSoftmax(x.0, groups),
        ))
    }

    /// out[:, 2j] = a[:, j], out[:, 2j+1] = b[:, j].
    pub fn interleave_cols(&self, a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.with_value(a, |t| (t.rows(), t.cols()));
        let (rb, cb) = self.with_value(b, |t| (t.rows(), t.cols()));
        if rows != rb || cols != cb {
            return Err(Error::ShapeMismatch {
                op: "interleave_cols",
                detail: format!("[{},{}] vs [{},{}]", rows, cols, rb, cb),
            });
        }
        let mut data = vec![T::zero(); rows * cols * 2];
        self.with_value(a, |ta| {
            self.with_value(b, |tb| {
                for i in 0..rows {
                    let out = &mut data[i * cols * 2..(i + 1) * cols * 2];
                    for (j, (&av, &bv)) in ta.row(i).iter().zip(tb.row(i)).enumerate() {
                        out[2 * j] = av;
                        out[2 * j + 1] = bv;
                    }
                }
            })
        });
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![rows, cols * 2], data)?,
            needs,
            Op::InterleaveCols(a.0, b.0),
        ))
    }

    /// Per-feature batch normalization. Training mode normalizes by batch
    /// statistics (population variance) and updates the running buffers;
    /// eval mode normalizes by the running buffers.
    pub fn batch_norm(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats<T>,
        training: bool,
        momentum: T,
        eps: T,
    ) -> Result<Var> {
        let (rows, cols) = self.with_value(x, |t| (t.rows(), t.cols()));
        let gn = self.with_value(gamma, |t| t.numel());
        let bn = self.with_value(beta, |t| t.numel());
        if gn != cols || bn != cols || stats.mean.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                detail: format!("{} cols, gamma {}, beta {}, stats {}", cols, gn, bn, stats.mean.len()),
            });
        }
        let (mean, var) = if training {
            let inv_n = T::one() / T::from_f64(rows as f64);
            let mut mean = vec![T::zero(); cols];
            let mut var = vec![T::zero(); cols];
            self.with_value(x, |t| {
                for i in 0..rows {
                    for (m, &v) in mean.iter_mut().zip(t.row(i)) {
                        *m += v;
                    }
                }
                for m in mean.iter_mut() {
                    *m *= inv_n;
                }
                for i in 0..rows {
                    for (c, &v) in t.row(i).iter().enumerate() {
                        let d = v - mean[c];
                        var[c] += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v *= inv_n;
                }
            });
            for c in 0..cols {
                stats.mean[c] = (T::one() - momentum) * stats.mean[c] + momentum * mean[c];
                stats.var[c] = (T::one() - momentum) * stats.var[c] + momentum * var[c];
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); rows * cols];
        self.with_value(x, |t| {
            for i in 0..rows {
                for (c, &v) in t.row(i).iter().enumerate() {
                    xhat[i * cols + c] = (v - mean[c]) * inv_std[c];
                }
            }
        });
        let data = self.with_value(gamma, |tg| {
            self.with_value(beta, |tb| {
                let mut out = vec![T::zero(); rows * cols];
                for i in 0..rows {
                    for c in 0..cols {
                        out[i * cols + c] = tg.data()[c] * xhat[i * cols + c] + tb.data()[c];
                    }
                }
                out
            })
        });
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            needs,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                training,
            },
        ))
    }

    /// Per-row feature normalization with learned scale/shift.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (rows, cols) = self.with_value(x, |t| (t.rows(), t.cols()));
        let gn = self.with_value(gamma, |t| t.numel());
        let bn = self.with_value(beta, |t| t.numel());
        if gn != cols || bn != cols {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!("{} cols, gamma {}, beta {}", cols, gn, bn),
            });
        }
        let inv_c = T::one() / T::from_f64(cols as f64);
        let mut xhat = vec![T::zero(); rows * cols];
        let mut inv_std = vec![T::zero(); rows];
        self.with_value(x, |t| {
            for i in 0..rows {
                let row = t.row(i);
                let mut mean = T::zero();
                for &v in row {
                    mean += v;
                }
                mean *= inv_c;
                let mut var = T::zero();
                for &v in row {
                    let d = v - mean;
                    var += d * d;
                }
                var *= inv_c;
                let inv = T::one() / (var + eps).sqrt();
                inv_std[i] = inv;
                for (c, &v) in row.iter().enumerate() {
                    xhat[i * cols + c] = (v - mean) * inv;
                }
            }
        });
        let data = self.with_value(gamma, |tg| {
            self.with_value(beta, |tb| {
                let mut out = vec![T::zero(); rows * cols];
                for i in 0..rows {
                    for c in 0..cols {
                        out[i * cols + c] = tg.data()[c] * xhat[i * cols + c] + tb.data()[c];
                    }
                }
                out
            })
        });
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(vec![rows, cols], data)?,
            needs,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
        ))
    }

    /// Inverted dropout with a private seeded stream. Rate 0 is the
    /// identity; rate >= 1 zeroes values and gradients.
    pub fn dropout(&self, x: Var, rate: f64, seed: u64) -> Var {
        let numel = self.with_value(x, |t| t.numel());
        let mask: Vec<T> = if rate <= 0.0 {
            vec![T::one(); numel]
        } else if rate >= 1.0 {
            vec![T::zero(); numel]
        } else {
            let mut rng = rng_from_seed(seed);
            let scale = T::from_f64(1.0 / (1.0 - rate));
            (0..numel)
                .map(|_| {
                    if rng.gen::<f64>() < rate {
                        T::zero()
                    } else {
                        scale
                    }
                })
                .collect()
        };
        let value = self.with_value(x, |t| {
            let data = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        });
        let needs = self.needs(x);
        self.push(value, needs, Op::Dropout(x.0, mask))
    }

    /// Divide each column by (population std of the column + eps). The
    /// backward rule differentiates through the std as well.
    pub fn row_std_normalize(&self, x: Var, eps: T) -> Var {
        let (rows, cols) = self.with_value(x, |t| (t.rows(), t.cols()));
        let inv_n = T::one() / T::from_f64(rows.max(1) as f64);
        let mut mean = vec![T::zero(); cols];
        let mut sigma = vec![T::zero(); cols];
        self.with_value(x, |t| {
            for i in 0..rows {
                for (m, &v) in mean.iter_mut().zip(t.row(i)) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m *= inv_n;
            }
            for i in 0..rows {
                for (c, &v) in t.row(i).iter().enumerate() {
                    let d = v - mean[c];
                    sigma[c] += d * d;
                }
            }
            for s in sigma.iter_mut() {
                *s = (*s * inv_n).sqrt();
            }
        });
        let inv: Vec<T> = sigma.iter().map(|&s| T::one() / (s + eps)).collect();
        let value = self.with_value(x, |t| {
            let mut out = vec![T::zero(); rows * cols];
            for i in 0..rows {
                for (c, &v) in t.row(i).iter().enumerate() {
                    out[i * cols + c] = v * inv[c];
                }
            }
            Tensor::new(vec![rows, cols], out).expect("same shape")
        });
        let needs = self.needs(x);
        self.push(
            value,
            needs,
            Op::RowStdNormalize {
                x: x.0,
                mean,
                sigma,
                inv,
            },
        )
    }

    /// Fixed-coefficient row mixing: out[i] = sum over (src_row, coeff).
    /// Used by inverse-distance-weighted interpolation; the coefficients are
    /// geometric constants.
    pub fn linear_combine_rows(
        &self,
        src: Var,
        combos: Rc<Vec<Vec<(u32, T)>>>,
    ) -> Result<Var> {
        let (rows, cols) = self.with_value(src, |t| (t.rows(), t.cols()));
        for combo in combos.iter() {
            if let Some(&(bad, _)) = combo.iter().find(|&&(i, _)| i as usize >= rows) {
                return Err(Error::IndexOutOfRange {
                    index: bad as usize,
                    len: rows,
                });
            }
        }
        let out_rows = combos.len();
        let mut data = vec![T::zero(); out_rows * cols];
        self.with_value(src, |t| {
            for (i, combo) in combos.iter().enumerate() {
                let dst = &mut data[i * cols..(i + 1) * cols];
                for &(j, w) in combo {
                    for (o, &v) in dst.iter_mut().zip(t.row(j as usize)) {
                        *o += w * v;
                    }
                }
            }
        });
        let needs = self.needs(src);
        Ok(self.push(
            Tensor::new(vec![out_rows, cols], data)?,
            needs,
            Op::LinearCombineRows(src.0, combos),
        ))
    }

    /// Class-weighted label-smoothed cross entropy, averaged over rows.
    pub fn smoothed_ce(
        &self,
        logits: Var,
        labels: Rc<Vec<u32>>,
        class_weights: Rc<Vec<T>>,
        smoothing: T,
    ) -> Result<Var> {
        let (rows, cols) = self.with_value(logits, |t| (t.rows(), t.cols()));
        if labels.len() != rows {
            return Err(Error::LengthMismatch {
                left: labels.len(),
                right: rows,
            });
        }
        if class_weights.len() != cols {
            return Err(Error::LengthMismatch {
                left: class_weights.len(),
                right: cols,
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= cols) {
            return Err(Error::InvalidLabel {
                label: bad as usize,
                classes: cols,
            });
        }
        let uniform = smoothing / T::from_f64(cols as f64);
        let mut probs = vec![T::zero(); rows * cols];
        let mut loss = T::zero();
        self.with_value(logits, |t| {
            for i in 0..rows {
                let row = t.row(i);
                let mut maxv = T::neg_infinity();
                for &v in row {
                    if v > maxv {
                        maxv = v;
                    }
                }
                let mut sum = T::zero();
                for (c, &v) in row.iter().enumerate() {
                    let e = (v - maxv).exp();
                    probs[i * cols + c] = e;
                    sum += e;
                }
                let log_sum = sum.ln() + maxv;
                let mut ce = T::zero();
                let label = labels[i] as usize;
                for (c, &v) in row.iter().enumerate() {
                    probs[i * cols + c] /= sum;
                    let mut target = uniform;
                    if c == label {
                        target += T::one() - smoothing;
                    }
                    ce -= target * (v - log_sum);
                }
                loss += class_weights[label] * ce;
            }
        });
        loss /= T::from_f64(rows.max(1) as f64);
        if !loss.is_finite() {
            return Err(Error::NonFinite("smoothed_ce"));
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            needs,
            Op::SmoothedCe {
                logits: logits.0,
                labels,
                weights: class_weights,
                smoothing,
                probs,
            },
        ))
    }

    pub fn sum_all(&self, x: Var) -> Var {
        let total = self.with_value(x, |t| {
            let mut acc = T::zero();
            for &v in t.data() {
                acc += v;
            }
            acc
        });
        let needs = self.needs(x);
        self.push(Tensor::scalar(total), needs, Op::SumAll(x.0))
    }

    /// Reverse sweep from a scalar loss. Gradients are retrievable via
    /// [`Tape::grad`] afterwards.
    pub fn backward(&self, loss: Var) -> Result<()> {
        let n = self.len();
        {
            let nodes = self.nodes.borrow();
            if nodes[loss.0].value.numel() != 1 {
                return Err(Error::ShapeMismatch {
                    op: "backward",
                    detail: "loss must be a scalar".into(),
                });
            }
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let nodes = self.nodes.borrow();
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backprop_node(&nodes, id, &g, &mut grads);
            // leaves keep their gradient for retrieval
            if matches!(nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let grads = self.grads.borrow();
        grads.get(v.0).and_then(|g| {
            g.as_ref().map(|data| {
                let shape = self.shape_of(v);
                Tensor::new(shape, data.clone()).expect("grad shape matches value")
            })
        })
    }

    fn accumulate(
        nodes: &[Node<T>],
        grads: &mut [Option<Vec<T>>],
        target: usize,
        contribution: impl FnOnce(&mut [T]),
    ) {
        if !nodes[target].needs_grad {
            return;
        }
        let slot = &mut grads[target];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); nodes[target].value.numel()]);
        }
        contribution(slot.as_mut().unwrap());
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(
        &self,
        nodes: &[Node<T>],
        id: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accumulate(nodes, grads, *a, |dst| {
                    for (o, &gv) in dst.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
                Self::accumulate(nodes, grads, *b, |dst| {
                    for (o, &gv) in dst.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
            }
            Op::Sub(a, b) => {
                Self::accumulate(nodes, grads, *a, |dst| {
                    for (o, &gv) in dst.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
                Self::accumulate(nodes, grads, *b, |dst| {
                    for (o, &gv) in dst.iter_mut().zip(g) {
                        *o -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                Self::accumulate(nodes, grads, *a, |dst| {
                    for ((o, &gv), &v) in dst.iter_mut().zip(g).zip(bv) {
                        *o += gv * v;
                    }
                });
                Self::accumulate(nodes, grads, *b, |dst| {
                    for ((o, &gv), &v) in dst.iter_mut().zip(g).zip(av) {
                        *o += gv * v;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                let cols = nodes[*bias].value.numel();
                Self::accumulate(nodes, grads, *x, |dst| {
                    for (o, &gv) in dst.iter_mut().zip(g) {
                        *o += gv;
                    }
                });
                Self::accumulate(nodes, grads, *bias, |dst| {
                    for row in g.chunks(cols) {
                        for (o, &gv) in dst.iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::ScalarMul(x, s) => {
                let s = *s;
                Self::accumulate(nodes, grads, *x, |dst| {
                    for (o, &gv) in dst.iter_mut().zip(g) {
                        *o += gv * s;
                    }
                });
            }
            Op::MulScalarVar(x, s) => {
                let sv = nodes[*s].value.data()[0];
                let xv = nodes[*x].value.data();
                Self::accumulate(nodes, grads, *x, |dst| {
                    for (o, &gv) in dst.iter_mut().zip(g) {
                        *o += gv * sv;
                    }
                });
                Self::accumulate(nodes, grads, *s, |dst| {
                    let mut acc = T::zero();
                    for (&gv, &v) in g.iter().zip(xv) {
                        acc += gv * v;
                    }
                    dst[0] += acc;
                });
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].value.rows(), nodes[*a].value.cols());
                let n = nodes[*b].value.cols();
                let av = nodes[*a].value.data();
                let bv = nodes[*b].value.data();
                if nodes[*a].needs_grad {
                    let da = mm_nt(g, m, n, bv, k);
                    Self::accumulate(nodes, grads, *a, |dst| {
                        for (o, &v) in dst.iter_mut().zip(&da) {
                            *o += v;
                        }
                    });
                }
                if nodes[*b].needs_grad {
                    let db = mm_tn(av, m, k, g, n);
                    Self::accumulate(nodes, grads, *b, |dst| {
                        for (o, &v) in dst.iter_mut().zip(&db) {
                            *o += v;
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let rows = nodes[id].value.rows();
                let total = nodes[id].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = nodes[p].value.cols();
                    Self::accumulate(nodes, grads, p, |dst| {
                        for i in 0..rows {
                            let src = &g[i * total + offset..i * total + offset + c];
                            for (o, &gv) in dst[i * c..(i + 1) * c].iter_mut().zip(src) {
                                *o += gv;
                            }
                        }
                    });
                    offset += c;
                }
            }
            Op::GatherRows(x, indices) => {
                let cols = nodes[id].value.cols();
                Self::accumulate(nodes, grads, *x, |dst| {
                    for (q, &i) in indices.iter().enumerate() {
                        let src = &g[q * cols..(q + 1) * cols];
                        let d = &mut dst[i as usize * cols..(i as usize + 1) * cols];
                        for (o, &gv) in d.iter_mut().zip(src) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::ScatterSum(x, groups) => {
                let cols = nodes[id].value.cols();
                Self::accumulate(nodes, grads, *x, |dst| {
                    for (e, &grp) in groups.iter().enumerate() {
                        let src = &g[grp as usize * cols..(grp as usize + 1) * cols];
                        for (o, &gv) in dst[e * cols..(e + 1) * cols].iter_mut().zip(src) {
                            *o += gv;
                        }
                    }
                });
            }
            Op::ScatterMean(x, groups, counts) => {
                let cols = nodes[id].value.cols();
                Self::accumulate(nodes, grads, *x, |dst| {
                    for (e, &grp) in groups.iter().enumerate() {
                        let inv = T::one() / T::from_f64(counts[grp as usize] as f64);
                        let src = &g[grp as usize * cols..(grp as usize + 1) * cols];
                        for (o, &gv) in dst[e * cols..(e + 1) * cols].iter_mut().zip(src) {
                            *o += gv * inv;
                        }
                    }
                });
            }
            Op::ScatterMax(x, argmax) => {
                let cols = nodes[id].value.cols();
                Self::accumulate(nodes, grads, *x, |dst| {
                    for (slot, &am) in argmax.iter().enumerate() {
                        if am >= 0 {
                            let c = slot % cols;
                            dst[am as usize * cols + c] += g[slot];
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = nodes[*x].value.data();
                Self::accumulate(nodes, grads, *x, |dst| {
                    for ((o, &gv), &v) in dst.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sin(x) => {
                let xv = nodes[*x].value.data();
                Self::accumulate(nodes, grads, *x, |dst| {
                    for ((o, &gv), &v) in dst.iter_mut().zip(g).zip(xv) {
                        *o += gv * v.cos();
                    }
                });
            }
            Op::Cos(x) => {
                let xv = nodes[*x].value.data();
                Self::accumulate(nodes, grads, *x, |dst| {
                    for ((o, &gv), &v) in dst.iter_mut().zip(g).zip(xv) {
                        *o -= gv * v.sin();
                    }
                });
            }
            Op::Exp(x) => {
                let yv = nodes[id].value.data();
                Self::accumulate(nodes, grads, *x, |dst| {
                    for ((o, &gv), &v) in dst.iter_mut().zip(g).zip(yv) {
                        *o += gv * v;
                    }
                });
            }
            Op::GroupSoftmax(x, groups) => {
                let cols = nodes[id].value.cols();
                let s = nodes[id].value.data();
                let n_out = groups.iter().map(|&g| g as usize + 1).max().unwrap_or(0);
                let mut dots = vec![T::zero(); n_out * cols];
                for (e, &grp) in groups.iter().enumerate() {
                    let base = grp as usize * cols;
                    for c in 0..cols {
                        dots[base + c] += s[e * cols + c] * g[e * cols + c];
                    }
                }
                Self::accumulate(nodes, grads, *x, |dst| {
                    for (e, &grp) in groups.iter().enumerate() {
                        let base = grp as usize * cols;
                        for c in 0..cols {
                            dst[e * cols + c] +=
                                s[e * cols + c] * (g[e * cols + c] - dots[base + c]);
                        }
                    }
                });
            }
            Op::InterleaveCols(a, b) => {
                let rows = nodes[id].value.rows();
                let half = nodes[id].value.cols() / 2;
                Self::accumulate(nodes, grads, *a, |dst| {
                    for i in 0..rows {
                        for j in 0..half {
                            dst[i * half + j] += g[i * half * 2 + 2 * j];
                        }
                    }
                });
                Self::accumulate(nodes, grads, *b, |dst| {
                    for i in 0..rows {
                        for j in 0..half {
                            dst[i * half + j] += g[i * half * 2 + 2 * j + 1];
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let rows = nodes[id].value.rows();
                let cols = nodes[id].value.cols();
                let gv = nodes[*gamma].value.data();
                Self::accumulate(nodes, grads, *beta, |dst| {
                    for row in g.chunks(cols) {
                        for (o, &val) in dst.iter_mut().zip(row) {
                            *o += val;
                        }
                    }
                });
                Self::accumulate(nodes, grads, *gamma, |dst| {
                    for (i, row) in g.chunks(cols).enumerate() {
                        for (c, &val) in row.iter().enumerate() {
                            dst[c] += val * xhat[i * cols + c];
                        }
                    }
                });
                if nodes[*x].needs_grad {
                    if *training {
                        let inv_n = T::one() / T::from_f64(rows as f64);
                        let mut mean_g = vec![T::zero(); cols];
                        let mut mean_gx = vec![T::zero(); cols];
                        for (i, row) in g.chunks(cols).enumerate() {
                            for (c, &val) in row.iter().enumerate() {
                                mean_g[c] += val;
                                mean_gx[c] += val * xhat[i * cols + c];
                            }
                        }
                        for c in 0..cols {
                            mean_g[c] *= inv_n;
                            mean_gx[c] *= inv_n;
                        }
                        Self::accumulate(nodes, grads, *x, |dst| {
                            for i in 0..rows {
                                for c in 0..cols {
                                    let term = g[i * cols + c]
                                        - mean_g[c]
                                        - xhat[i * cols + c] * mean_gx[c];
                                    dst[i * cols + c] += gv[c] * inv_std[c] * term;
                                }
                            }
                        });
                    } else {
                        Self::accumulate(nodes, grads, *x, |dst| {
                            for i in 0..rows {
                                for c in 0..cols {
                                    dst[i * cols + c] += g[i * cols + c] * gv[c] * inv_std[c];
                                }
                            }
                        });
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let rows = nodes[id].value.rows();
                let cols = nodes[id].value.cols();
                let gv = nodes[*gamma].value.data();
                Self::accumulate(nodes, grads, *beta, |dst| {
                    for row in g.chunks(cols) {
                        for (o, &val) in dst.iter_mut().zip(row) {
                            *o += val;
                        }
                    }
                });
                Self::accumulate(nodes, grads, *gamma, |dst| {
                    for (i, row) in g.chunks(cols).enumerate() {
                        for (c, &val) in row.iter().enumerate() {
                            dst[c] += val * xhat[i * cols + c];
                        }
                    }
                });
                if nodes[*x].needs_grad {
                    let inv_c = T::one() / T::from_f64(cols as f64);
                    Self::accumulate(nodes, grads, *x, |dst| {
                        for i in 0..rows {
                            let mut mean_d = T::zero();
                            let mut mean_dx = T::zero();
                            for c in 0..cols {
                                let d = g[i * cols + c] * gv[c];
                                mean_d += d;
                                mean_dx += d * xhat[i * cols + c];
                            }
                            mean_d *= inv_c;
                            mean_dx *= inv_c;
                            for c in 0..cols {
                                let d = g[i * cols + c] * gv[c];
                                dst[i * cols + c] +=
                                    inv_std[i] * (d - mean_d - xhat[i * cols + c] * mean_dx);
                            }
                        }
                    });
                }
            }
            Op::Dropout(x, mask) => {
                Self::accumulate(nodes, grads, *x, |dst| {
                    for ((o, &gv), &m) in dst.iter_mut().zip(g).zip(mask) {
                        *o += gv * m;
                    }
                });
            }
            Op::RowStdNormalize {
                x,
                mean,
                sigma,
                inv,
            } => {
                let rows = nodes[id].value.rows();
                let cols = nodes[id].value.cols();
                let xv = nodes[*x].value.data();
                let inv_n = T::one() / T::from_f64(rows.max(1) as f64);
                // dL/d(sigma_c) routed through every row of the column
                let mut gx_dot = vec![T::zero(); cols];
                for (e, row) in g.chunks(cols).enumerate() {
                    for (c, &gv) in row.iter().enumerate() {
                        gx_dot[c] += gv * xv[e * cols + c];
                    }
                }
                Self::accumulate(nodes, grads, *x, |dst| {
                    for i in 0..rows {
                        for c in 0..cols {
                            let mut d = g[i * cols + c] * inv[c];
                            if sigma[c] > T::zero() {
                                let dsigma = (xv[i * cols + c] - mean[c]) * inv_n / sigma[c];
                                d -= dsigma * inv[c] * inv[c] * gx_dot[c];
                            }
                            dst[i * cols + c] += d;
                        }
                    }
                });
            }
            Op::LinearCombineRows(src, combos) => {
                let cols = nodes[id].value.cols();
                Self::accumulate(nodes, grads, *src, |dst| {
                    for (i, combo) in combos.iter().enumerate() {
                        let grow = &g[i * cols..(i + 1) * cols];
                        for &(j, w) in combo {
                            let d = &mut dst[j as usize * cols..(j as usize + 1) * cols];
                            for (o, &gv) in d.iter_mut().zip(grow) {
                                *o += w * gv;
                            }
                        }
                    }
                });
            }
            Op::SmoothedCe {
                logits,
                labels,
                weights,
                smoothing,
                probs,
            } => {
                let rows = labels.len();
                let cols = nodes[*logits].value.cols();
                let uniform = *smoothing / T::from_f64(cols as f64);
                let inv_n = T::one() / T::from_f64(rows.max(1) as f64);
                let gout = g[0];
                Self::accumulate(nodes, grads, *logits, |dst| {
                    for i in 0..rows {
                        let label = labels[i] as usize;
                        let w = weights[label];
                        for c in 0..cols {
                            let mut target = uniform;
                            if c == label {
                                target += T::one() - *smoothing;
                            }
                            dst[i * cols + c] +=
                                gout * w * (probs[i * cols + c] - target) * inv_n;
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let gout = g[0];
                Self::accumulate(nodes, grads, *x, |dst| {
                    for o in dst.iter_mut() {
                        *o += gout;
                    }
                });
            }
        }
    }
}
