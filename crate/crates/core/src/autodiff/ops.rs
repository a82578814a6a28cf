// SPDX-License-Identifier: MIT OR Apache-2.0

//! Primitive forward and backward rules.

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, matmul_into, Tensor};

pub(crate) const LAYERNORM_EPS: f64 = 1e-5;

/// Score written into masked attention entries. Finite, and far enough below
/// any real score that its softmax weight underflows to exactly zero.
pub const MASKED_SCORE: f64 = -1e30;

/// One labelled row for [`Op::SoftmaxCrossEntropy`]: the loss adds
/// `weight * -log softmax(logits[row])[class]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub row: usize,
    pub class: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    MatMul,
    Transpose,
    /// Elementwise with broadcasting over size-1 dims (at most rank 2).
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Sigmoid,
    Tanh,
    /// Softmax over the last dimension.
    Softmax,
    /// Standardization over the last dimension, no affine part.
    LayerNorm { eps: f64 },
    /// Gather rows of a table.
    Embedding { ids: Vec<usize> },
    Slice { axis: usize, start: usize, end: usize },
    Concat { axis: usize },
    Sum,
    Mean,
    /// Mean of squared differences.
    MseLoss,
    SoftmaxCrossEntropy { targets: Vec<Target> },
    /// Block-diagonal causal mask on square scores: entry `(i, j)` survives
    /// iff `i` and `j` fall in the same block of `segment` rows and `j <= i`.
    CausalMask { segment: usize },
    /// Copy of the base matrix with the listed rows replaced by `src`.
    ScatterRows { rows: Vec<usize> },
}

/// Pad a rank ≤ 2 shape to `(rows, cols)`.
fn as2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(format!("{what}: unsupported shape {s:?}"))),
    }
}

struct Broadcast {
    out_shape: Vec<usize>,
    rows: usize,
    cols: usize,
    a: (usize, usize),
    b: (usize, usize),
}

impl Broadcast {
    fn new(a: &Tensor, b: &Tensor) -> Result<Self> {
        let a2 = as2(a.shape(), "broadcast")?;
        let b2 = as2(b.shape(), "broadcast")?;
        let dim = |x: usize, y: usize| -> Result<usize> {
            if x == y || y == 1 {
                Ok(x)
            } else if x == 1 {
                Ok(y)
            } else {
                Err(Error::shape(format!(
                    "cannot broadcast {:?} with {:?}",
                    a.shape(),
                    b.shape()
                )))
            }
        };
        let rows = dim(a2.0, b2.0)?;
        let cols = dim(a2.1, b2.1)?;
        let out_shape = if a.rank() == 2 || b.rank() == 2 {
            vec![rows, cols]
        } else {
            vec![cols]
        };
        Ok(Self {
            out_shape,
            rows,
            cols,
            a: a2,
            b: b2,
        })
    }

    #[inline]
    fn index(dims: (usize, usize), i: usize, j: usize) -> usize {
        let r = if dims.0 == 1 { 0 } else { i };
        let c = if dims.1 == 1 { 0 } else { j };
        r * dims.1 + c
    }

    fn apply(&self, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        if a.shape() == b.shape() {
            out.extend(a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)));
        } else {
            for i in 0..self.rows {
                for j in 0..self.cols {
                    out.push(f(
                        a.data()[Self::index(self.a, i, j)],
                        b.data()[Self::index(self.b, i, j)],
                    ));
                }
            }
        }
        Tensor::new(self.out_shape.clone(), out).expect("broadcast shape")
    }

    /// Sum `g ⊙ weight(i, j)` back onto an operand of `dims`.
    fn reduce(
        &self,
        g: &Tensor,
        dims: (usize, usize),
        shape: &[usize],
        weight: impl Fn(usize, usize) -> f64,
    ) -> Tensor {
        let mut acc = Tensor::zeros(shape);
        let data = acc.data_mut();
        for i in 0..self.rows {
            for j in 0..self.cols {
                data[Self::index(dims, i, j)] += g.data()[i * self.cols + j] * weight(i, j);
            }
        }
        acc
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = x.dims2();
    let mut out = x.clone();
    for i in 0..r {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn check_arity(op: &Op, inputs: usize) -> Result<()> {
    let want = match op {
        Op::Leaf => 0,
        Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::MseLoss | Op::ScatterRows { .. } => 2,
        Op::Concat { .. } => {
            return if inputs == 0 {
                Err(Error::shape("concat of zero tensors"))
            } else {
                Ok(())
            }
        }
        _ => 1,
    };
    if inputs != want {
        return Err(Error::shape(format!(
            "{op:?} takes {want} inputs, got {inputs}"
        )));
    }
    Ok(())
}

fn matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::shape(format!("{what}: expected a matrix, got {s:?}"))),
    }
}

impl Op {
    pub(crate) fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        check_arity(self, x.len())?;
        let out = match self {
            Op::Leaf => return Err(Error::shape("leaf nodes are created with Tape::leaf")),
            Op::MatMul => x[0].matmul(x[1])?,
            Op::Transpose => x[0].transpose()?,
            Op::Add => Broadcast::new(x[0], x[1])?.apply(x[0], x[1], |a, b| a + b),
            Op::Sub => Broadcast::new(x[0], x[1])?.apply(x[0], x[1], |a, b| a - b),
            Op::Mul => Broadcast::new(x[0], x[1])?.apply(x[0], x[1], |a, b| a * b),
            Op::Scale(s) => x[0].scale(*s),
            Op::Relu => x[0].map(|v| v.max(0.0)),
            Op::Sigmoid => x[0].map(sigmoid),
            Op::Tanh => x[0].map(f64::tanh),
            Op::Softmax => softmax_rows(x[0]),
            Op::LayerNorm { eps } => {
                let (r, c) = x[0].dims2();
                let mut out = x[0].clone();
                for i in 0..r {
                    let row = &mut out.data_mut()[i * c..(i + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
                }
                out
            }
            Op::Embedding { ids } => {
                let (rows, cols) = matrix(x[0], "embedding table")?;
                let mut out = Vec::with_capacity(ids.len() * cols);
                for &id in ids {
                    if id >= rows {
                        return Err(Error::shape(format!(
                            "embedding id {id} out of range for {rows} rows"
                        )));
                    }
                    out.extend_from_slice(x[0].row(id));
                }
                Tensor::new(vec![ids.len(), cols], out)?
            }
            Op::Slice { axis, start, end } => slice(x[0], *axis, *start, *end)?,
            Op::Concat { axis } => concat(x, *axis)?,
            Op::Sum => Tensor::scalar(x[0].sum()),
            Op::Mean => {
                if x[0].is_empty() {
                    return Err(Error::shape("mean of empty tensor"));
                }
                Tensor::scalar(x[0].sum() / x[0].len() as f64)
            }
            Op::MseLoss => {
                let diff = x[0].sub(x[1])?;
                if diff.is_empty() {
                    return Err(Error::shape("mse of empty tensors"));
                }
                Tensor::scalar(dot(diff.data(), diff.data()) / diff.len() as f64)
            }
            Op::SoftmaxCrossEntropy { targets } => {
                let (r, c) = matrix(x[0], "cross-entropy logits")?;
                let mut loss = 0.0;
                for t in targets {
                    if t.row >= r || t.class >= c {
                        return Err(Error::shape(format!(
                            "target ({}, {}) outside logits [{r}, {c}]",
                            t.row, t.class
                        )));
                    }
                    let row = x[0].row(t.row);
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    loss += t.weight * (lse - row[t.class]);
                }
                Tensor::scalar(loss)
            }
            Op::CausalMask { segment } => {
                let (r, c) = matrix(x[0], "causal mask")?;
                if r != c || *segment == 0 || r % segment != 0 {
                    return Err(Error::shape(format!(
                        "causal mask needs square scores divisible by segment {segment}, got [{r}, {c}]"
                    )));
                }
                let mut out = x[0].clone();
                for i in 0..r {
                    for j in 0..c {
                        if !causal_keep(i, j, *segment) {
                            out.data_mut()[i * c + j] = MASKED_SCORE;
                        }
                    }
                }
                out
            }
            Op::ScatterRows { rows } => {
                let (br, bc) = matrix(x[0], "scatter base")?;
                let (sr, sc) = matrix(x[1], "scatter source")?;
                if sc != bc || sr != rows.len() {
                    return Err(Error::shape(format!(
                        "scatter of [{sr}, {sc}] into [{br}, {bc}] at {} rows",
                        rows.len()
                    )));
                }
                let mut seen = vec![false; br];
                let mut out = x[0].clone();
                for (k, &row) in rows.iter().enumerate() {
                    if row >= br || std::mem::replace(&mut seen[row], true) {
                        return Err(Error::shape(format!("scatter row {row} invalid or repeated")));
                    }
                    out.row_mut(row).copy_from_slice(x[1].row(k));
                }
                out
            }
        };
        Ok(out)
    }

    /// Contributions to each input's gradient given the output gradient `g`.
    /// Entries are `None` where `wanted` is false.
    pub(crate) fn backward(
        &self,
        x: &[&Tensor],
        y: &Tensor,
        g: &Tensor,
        wanted: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let want = |i: usize| wanted.get(i).copied().unwrap_or(false);
        let one = |t: Tensor| vec![Some(t)];
        let out = match self {
            Op::Leaf => Vec::new(),
            Op::MatMul => {
                let (m, k) = matrix(x[0], "matmul")?;
                let (_, n) = matrix(x[1], "matmul")?;
                let ga = want(0).then(|| {
                    // dA = G · Bᵀ
                    let mut out = vec![0.0; m * k];
                    for i in 0..m {
                        let gi = &g.data()[i * n..(i + 1) * n];
                        for p in 0..k {
                            out[i * k + p] = dot(gi, &x[1].data()[p * n..(p + 1) * n]);
                        }
                    }
                    Tensor::new(vec![m, k], out).expect("matmul grad")
                });
                let gb = want(1).then(|| {
                    // dB = Aᵀ · G
                    let at = x[0].transpose().expect("matrix");
                    let mut out = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), &mut out, k, m, n);
                    Tensor::new(vec![k, n], out).expect("matmul grad")
                });
                vec![ga, gb]
            }
            Op::Transpose => one(g.transpose()?),
            Op::Add | Op::Sub | Op::Mul => {
                let bc = Broadcast::new(x[0], x[1])?;
                let (a, b) = (x[0], x[1]);
                let ga = want(0).then(|| match self {
                    Op::Mul => bc.reduce(g, bc.a, a.shape(), |i, j| {
                        b.data()[Broadcast::index(bc.b, i, j)]
                    }),
                    _ => bc.reduce(g, bc.a, a.shape(), |_, _| 1.0),
                });
                let gb = want(1).then(|| match self {
                    Op::Mul => bc.reduce(g, bc.b, b.shape(), |i, j| {
                        a.data()[Broadcast::index(bc.a, i, j)]
                    }),
                    Op::Sub => bc.reduce(g, bc.b, b.shape(), |_, _| -1.0),
                    _ => bc.reduce(g, bc.b, b.shape(), |_, _| 1.0),
                });
                vec![ga, gb]
            }
            Op::Scale(s) => one(g.scale(*s)),
            Op::Relu => one(g.zip_map(x[0], |gv, xv| if xv > 0.0 { gv } else { 0.0 })?),
            Op::Sigmoid => one(g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv))?),
            Op::Tanh => one(g.zip_map(y, |gv, yv| gv * (1.0 - yv * yv))?),
            Op::Softmax => {
                let (r, c) = y.dims2();
                let mut out = g.clone();
                for i in 0..r {
                    let yi = &y.data()[i * c..(i + 1) * c];
                    let gi = &g.data()[i * c..(i + 1) * c];
                    let s = dot(yi, gi);
                    let row = &mut out.data_mut()[i * c..(i + 1) * c];
                    for ((o, &yv), &gv) in row.iter_mut().zip(yi).zip(gi) {
                        *o = yv * (gv - s);
                    }
                }
                one(out)
            }
            Op::LayerNorm { eps } => {
                let (r, c) = y.dims2();
                let mut out = g.clone();
                for i in 0..r {
                    let xi = &x[0].data()[i * c..(i + 1) * c];
                    let mean = xi.iter().sum::<f64>() / c as f64;
                    let var = xi.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let yi = &y.data()[i * c..(i + 1) * c];
                    let gi = &g.data()[i * c..(i + 1) * c];
                    let g_mean = gi.iter().sum::<f64>() / c as f64;
                    let gy_mean = dot(gi, yi) / c as f64;
                    let row = &mut out.data_mut()[i * c..(i + 1) * c];
                    for ((o, &gv), &yv) in row.iter_mut().zip(gi).zip(yi) {
                        *o = inv * (gv - g_mean - yv * gy_mean);
                    }
                }
                one(out)
            }
            Op::Embedding { ids } => {
                let mut out = Tensor::zeros(x[0].shape());
                let cols = x[0].cols();
                for (k, &id) in ids.iter().enumerate() {
                    axpy(1.0, &g.data()[k * cols..(k + 1) * cols], out.row_mut(id));
                }
                one(out)
            }
            Op::Slice { axis, start, end } => {
                let mut out = Tensor::zeros(x[0].shape());
                let (r, c) = x[0].dims2();
                if *axis == 0 && x[0].rank() == 2 {
                    out.data_mut()[start * c..end * c].copy_from_slice(g.data());
                } else {
                    let w = end - start;
                    for i in 0..r {
                        out.data_mut()[i * c + start..i * c + end]
                            .copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                    }
                }
                one(out)
            }
            Op::Concat { axis } => {
                let mut offset = 0;
                let mut parts = Vec::with_capacity(x.len());
                for (k, part) in x.iter().enumerate() {
                    let width = if *axis == 0 && part.rank() == 2 {
                        part.rows()
                    } else {
                        part.cols()
                    };
                    let piece = if want(k) {
                        Some(slice_as(g, *axis, offset, offset + width, part.shape())?)
                    } else {
                        None
                    };
                    parts.push(piece);
                    offset += width;
                }
                parts
            }
            Op::Sum => one(Tensor::full(x[0].shape(), g.data()[0])),
            Op::Mean => one(Tensor::full(x[0].shape(), g.data()[0] / x[0].len() as f64)),
            Op::MseLoss => {
                let scale = 2.0 * g.data()[0] / x[0].len() as f64;
                let diff = x[0].sub(x[1])?;
                let ga = want(0).then(|| diff.scale(scale));
                let gb = want(1).then(|| diff.scale(-scale));
                vec![ga, gb]
            }
            Op::SoftmaxCrossEntropy { targets } => {
                let c = x[0].cols();
                let mut out = Tensor::zeros(x[0].shape());
                let mut probs_cache: Option<(usize, Vec<f64>)> = None;
                for t in targets {
                    let probs = match &probs_cache {
                        Some((row, p)) if *row == t.row => p.clone(),
                        _ => {
                            let row = x[0].row(t.row);
                            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                            let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                            let z: f64 = e.iter().sum();
                            let p: Vec<f64> = e.iter().map(|v| v / z).collect();
                            probs_cache = Some((t.row, p.clone()));
                            p
                        }
                    };
                    let scale = g.data()[0] * t.weight;
                    let dst = &mut out.data_mut()[t.row * c..(t.row + 1) * c];
                    axpy(scale, &probs, dst);
                    dst[t.class] -= scale;
                }
                one(out)
            }
            Op::CausalMask { segment } => {
                let c = x[0].cols();
                let mut out = g.clone();
                for i in 0..x[0].rows() {
                    for j in 0..c {
                        if !causal_keep(i, j, *segment) {
                            out.data_mut()[i * c + j] = 0.0;
                        }
                    }
                }
                one(out)
            }
            Op::ScatterRows { rows } => {
                let gbase = want(0).then(|| {
                    let mut out = g.clone();
                    for &r in rows {
                        out.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                    }
                    out
                });
                let gsrc = want(1).then(|| {
                    let cols = g.cols();
                    let mut data = Vec::with_capacity(rows.len() * cols);
                    for &r in rows {
                        data.extend_from_slice(g.row(r));
                    }
                    Tensor::new(vec![rows.len(), cols], data).expect("scatter grad")
                });
                vec![gbase, gsrc]
            }
        };
        Ok(out)
    }
}

#[inline]
fn causal_keep(i: usize, j: usize, segment: usize) -> bool {
    i / segment == j / segment && j <= i
}

fn slice(t: &Tensor, axis: usize, start: usize, end: usize) -> Result<Tensor> {
    let (r, c) = t.dims2();
    let extent = if axis == 0 && t.rank() == 2 {
        r
    } else if (axis == 1 && t.rank() == 2) || (axis == 0 && t.rank() == 1) {
        c
    } else {
        return Err(Error::shape(format!(
            "slice axis {axis} invalid for shape {:?}",
            t.shape()
        )));
    };
    if start >= end || end > extent {
        return Err(Error::shape(format!(
            "slice {start}..{end} out of range for extent {extent}"
        )));
    }
    if t.rank() == 1 {
        return Tensor::new(vec![end - start], t.data()[start..end].to_vec());
    }
    if axis == 0 {
        return Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec());
    }
    let w = end - start;
    let mut out = Vec::with_capacity(r * w);
    for i in 0..r {
        out.extend_from_slice(&t.data()[i * c + start..i * c + end]);
    }
    Tensor::new(vec![r, w], out)
}

fn slice_as(g: &Tensor, axis: usize, start: usize, end: usize, shape: &[usize]) -> Result<Tensor> {
    slice(g, axis, start, end)?.reshape(shape)
}

fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0];
    let rank = first.rank();
    if parts.iter().any(|p| p.rank() != rank) || rank == 0 || rank > 2 {
        return Err(Error::shape("concat needs parts of equal rank 1 or 2"));
    }
    if rank == 1 {
        if axis != 0 {
            return Err(Error::shape("concat of vectors only along axis 0"));
        }
        let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
        return Ok(Tensor::vector(data));
    }
    match axis {
        0 => {
            let c = first.cols();
            if parts.iter().any(|p| p.cols() != c) {
                return Err(Error::shape("concat axis 0: column counts differ"));
            }
            let rows = parts.iter().map(|p| p.rows()).sum();
            let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
            Tensor::new(vec![rows, c], data)
        }
        1 => {
            let r = first.rows();
            if parts.iter().any(|p| p.rows() != r) {
                return Err(Error::shape("concat axis 1: row counts differ"));
            }
            let cols: usize = parts.iter().map(|p| p.cols()).sum();
            let mut data = Vec::with_capacity(r * cols);
            for i in 0..r {
                for p in parts {
                    data.extend_from_slice(p.row(i));
                }
            }
            Tensor::new(vec![r, cols], data)
        }
        _ => Err(Error::shape(format!("concat axis {axis} invalid"))),
    }
}
