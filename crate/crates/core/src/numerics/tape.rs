//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass as a node whose
//! inputs always precede it, so a single reverse sweep from a scalar seed
//! yields gradients for every reachable leaf created with [`Tape::leaf`].
//! Nodes created with [`Tape::constant`] or [`Tape::detach`] stop gradients.

use super::kernels::{matmul_nn, matmul_nt, matmul_tn, softmax_into};
use super::special;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_raw(id: usize) -> Self {
        Var(id)
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Square(Var),
    SqrtClamp(Var, T),
    Relu(Var),
    Gelu(Var),
    Erf(Var),
    Keep(Var, Vec<bool>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    ColMean(Var),
    ColVar(Var, Vec<T>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`; zeros when `v` was not reached from the seed.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    non_finite: Option<String>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, a, b));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, name: &str) -> Var {
        if T::CHECK_FINITE && self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(format!("{name} (node {})", self.nodes.len()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// First non-finite value recorded, if any (only tracked in 64-bit mode).
    pub fn check_finite(&self) -> Result<()> {
        match &self.non_finite {
            Some(at) => Err(Error::NonFinite(at.clone())),
            None => Ok(()),
        }
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true, "leaf")
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let c = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], c)?, Op::MatMul(a, b), rg, "matmul"))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (n, k2) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let c = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], c)?, Op::MatMulNT(a, b), rg, "matmul_nt"))
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, op, rg, name))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// `a[r×c] + bias[c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if self.value(bias).numel() != c {
            return Err(Error::dim("add_row", self.shape(a), self.shape(bias)));
        }
        let mut out = self.value(a).clone();
        let b = self.value(bias).data().to_vec();
        for i in 0..r {
            for (o, &bv) in out.row_mut(i).iter_mut().zip(&b) {
                *o = *o + bv;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(a, bias), rg, "add_row"))
    }

    /// Multiply row `i` of `a[r×c]` by `s[i]` where `s` has `r` entries.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, _) = self.value(a).dims2();
        if self.value(s).numel() != r {
            return Err(Error::dim("scale_rows", self.shape(a), self.shape(s)));
        }
        let mut out = self.value(a).clone();
        let sv = self.value(s).data().to_vec();
        for (i, &f) in sv.iter().enumerate() {
            for o in out.row_mut(i) {
                *o = *o * f;
            }
        }
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::ScaleRows(a, s), rg, "scale_rows"))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let t = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let t = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(t, Op::AddScalar(a), rg, "add_scalar")
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v * v);
        let rg = self.rg(a);
        self.push(t, Op::Square(a), rg, "square")
    }

    /// `sqrt(max(a, floor))`; gradient is zero where the floor is active.
    pub fn sqrt_clamp(&mut self, a: Var, floor: f64) -> Var {
        let floor = T::from_f64(floor);
        let t = self.value(a).map(|v| v.max(floor).sqrt());
        let rg = self.rg(a);
        self.push(t, Op::SqrtClamp(a, floor), rg, "sqrt_clamp")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(special::relu);
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg, "relu")
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(special::gelu);
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg, "gelu")
    }

    pub fn erf(&mut self, a: Var) -> Var {
        let t = self.value(a).map(special::erf);
        let rg = self.rg(a);
        self.push(t, Op::Erf(a), rg, "erf")
    }

    /// Zero every entry whose `keep` flag is false.
    pub fn keep(&mut self, a: Var, keep: Vec<bool>) -> Result<Var> {
        if keep.len() != self.value(a).numel() {
            return Err(Error::dim("keep", self.shape(a), &[keep.len()]));
        }
        let mut t = self.value(a).clone();
        for (v, &k) in t.data_mut().iter_mut().zip(&keep) {
            if !k {
                *v = T::zero();
            }
        }
        let rg = self.rg(a);
        Ok(self.push(t, Op::Keep(a, keep), rg, "keep"))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.value(a).dims2();
        let mut out = Tensor::zeros(self.shape(a));
        for i in 0..r {
            let src = &self.value(a).data()[i * c..(i + 1) * c];
            softmax_into(src, &mut out.data_mut()[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a), rg, "softmax")
    }

    /// Row-wise softmax over the entries where `mask` is true; the rest are exactly 0.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: Vec<bool>) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if mask.len() != r * c {
            return Err(Error::dim("masked_softmax", self.shape(a), &[mask.len()]));
        }
        let mut out = Tensor::zeros(self.shape(a));
        for i in 0..r {
            let row = &self.value(a).data()[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            let dst = &mut out.data_mut()[i * c..(i + 1) * c];
            for j in 0..c {
                if m[j] {
                    dst[j] = (row[j] - max).exp();
                    sum = sum + dst[j];
                }
            }
            if sum > T::zero() {
                for v in dst.iter_mut() {
                    *v = *v / sum;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg, "masked_softmax"))
    }

    /// Softmax of a square score matrix where row `i` sees columns `0..=i`.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if r != c {
            return Err(Error::dim("causal_softmax", self.shape(a), &[r, r]));
        }
        let mask = (0..r * c).map(|idx| idx % c <= idx / c).collect();
        self.masked_softmax_rows(a, mask)
    }

    /// Row-wise layer normalization with ε = 1e-5, followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (r, c) = self.value(x).dims2();
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        let n = T::from_f64(c as f64);
        let eps = T::from_f64(EPS);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = Tensor::zeros(self.shape(x));
        {
            let xv = self.value(x).data();
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            let od = out.data_mut();
            for i in 0..r {
                let row = &xv[i * c..(i + 1) * c];
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let rs = T::one() / (var + eps).sqrt();
                rstd[i] = rs;
                for j in 0..c {
                    let h = (row[j] - mean) * rs;
                    xhat[i * c + j] = h;
                    od[i * c + j] = h * g[j] + b[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
            "layer_norm",
        ))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (r, c) = self.value(logits).dims2();
        if targets.len() != r {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some((position, &id)) = targets.iter().enumerate().find(|(_, &t)| t >= c) {
            return Err(Error::TargetOutOfRange {
                id,
                classes: c,
                position,
            });
        }
        let mut probs = vec![T::zero(); r * c];
        let mut loss = T::zero();
        {
            let lv = self.value(logits).data();
            for i in 0..r {
                let row = &lv[i * c..(i + 1) * c];
                softmax_into(row, &mut probs[i * c..(i + 1) * c]);
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                loss = loss + (lse - row[targets[i]]);
            }
        }
        loss = loss / T::from_f64(r as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::from_f64(self.value(a).numel() as f64);
        let s = self.value(a).sum() / n;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg, "mean")
    }

    /// Mean of each column of `a[r×c]`, shape `[1×c]`.
    pub fn col_mean(&mut self, a: Var) -> Var {
        let mean = col_mean(self.value(a));
        let c = mean.len();
        let rg = self.rg(a);
        self.push(
            Tensor::new(&[1, c], mean).expect("c >= 1"),
            Op::ColMean(a),
            rg,
            "col_mean",
        )
    }

    /// Population variance of each column of `a[r×c]`, shape `[1×c]`.
    pub fn col_var(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = t.dims2();
        let mean = col_mean(t);
        let mut var = vec![T::zero(); c];
        for i in 0..r {
            for (j, v) in var.iter_mut().enumerate() {
                let d = t.data()[i * c + j] - mean[j];
                *v = *v + d * d;
            }
        }
        let n = T::from_f64(r as f64);
        for v in var.iter_mut() {
            *v = *v / n;
        }
        let rg = self.rg(a);
        self.push(
            Tensor::new(&[1, c], var).expect("c >= 1"),
            Op::ColVar(a, mean),
            rg,
            "col_var",
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::dim("gather_rows", self.shape(a), &[idx.len()]));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.value(a).row(i));
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[idx.len(), c], data)?,
            Op::GatherRows(a, idx.to_vec()),
            rg,
            "gather_rows",
        ))
    }

    /// Output has `rows` rows; row `idx[i]` accumulates row `i` of `a`.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if idx.len() != r || idx.iter().any(|&i| i >= rows) {
            return Err(Error::dim("scatter_add_rows", self.shape(a), &[rows]));
        }
        let mut out = Tensor::zeros(&[rows, c]);
        for (i, &dst) in idx.iter().enumerate() {
            let src = self.value(a).row(i).to_vec();
            for (o, s) in out.row_mut(dst).iter_mut().zip(src) {
                *o = *o + s;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            out,
            Op::ScatterAddRows(a, idx.to_vec()),
            rg,
            "scatter_add_rows",
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", self.shape(a), &[start, len]));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&self.value(a).row(i)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[r, len], data)?,
            Op::SliceCols(a, start),
            rg,
            "slice_cols",
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).dims2().1).collect();
        for &p in parts {
            if self.value(p).dims2().0 != r {
                return Err(Error::dim("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&[r, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
            "concat_cols",
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2();
        if len == 0 || start + len > r {
            return Err(Error::dim("slice_rows", self.shape(a), &[start, len]));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[len, c], data)?,
            Op::SliceRows(a, start),
            rg,
            "slice_rows",
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).dims2().1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.value(p).dims2();
            if pc != c {
                return Err(Error::dim("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&[rows, c], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
            "concat_rows",
        ))
    }

    /// Reverse sweep from a scalar `seed`.
    pub fn backward(&self, seed: Var) -> Result<Gradients<T>> {
        if seed.0 >= self.nodes.len() || self.nodes[seed.0].value.numel() != 1 {
            return Err(Error::SeedNotOnTape);
        }
        self.check_finite()?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(Tensor::full(self.nodes[seed.0].value.shape(), T::one()));
        for id in (0..=seed.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + *b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(
        &self,
        node: &Node<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let map2 = |a: &Tensor<T>, f: &dyn Fn(T, T) -> T| {
            let data = g.data().iter().zip(a.data()).map(|(&gv, &av)| f(gv, av)).collect();
            Tensor::new(a.shape(), data)
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let (_, n) = val(*b).dims2();
                if self.rg(*a) {
                    let da = matmul_nt(g.data(), val(*b).data(), m, n, k);
                    self.accum(grads, *a, Tensor::new(val(*a).shape(), da)?);
                }
                if self.rg(*b) {
                    let db = matmul_tn(val(*a).data(), g.data(), m, k, n);
                    self.accum(grads, *b, Tensor::new(val(*b).shape(), db)?);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = val(*a).dims2();
                let (n, _) = val(*b).dims2();
                if self.rg(*a) {
                    let da = matmul_nn(g.data(), val(*b).data(), m, n, k);
                    self.accum(grads, *a, Tensor::new(val(*a).shape(), da)?);
                }
                if self.rg(*b) {
                    let db = matmul_tn(g.data(), val(*a).data(), m, n, k);
                    self.accum(grads, *b, Tensor::new(val(*b).shape(), db)?);
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accum(grads, *a, map2(val(*b), &|gv, bv| gv * bv)?);
                }
                if self.rg(*b) {
                    self.accum(grads, *b, map2(val(*a), &|gv, av| gv * av)?);
                }
            }
            Op::Div(a, b) => {
                if self.rg(*a) {
                    self.accum(grads, *a, map2(val(*b), &|gv, bv| gv / bv)?);
                }
                if self.rg(*b) {
                    let data = g
                        .data()
                        .iter()
                        .zip(val(*a).data().iter().zip(val(*b).data()))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect();
                    self.accum(grads, *b, Tensor::new(val(*b).shape(), data)?);
                }
            }
            Op::AddRow(a, bias) => {
                self.accum(grads, *a, g.clone());
                if self.rg(*bias) {
                    let (r, c) = g.dims2();
                    let mut db = vec![T::zero(); c];
                    for i in 0..r {
                        for (d, &gv) in db.iter_mut().zip(g.row(i)) {
                            *d = *d + gv;
                        }
                    }
                    self.accum(grads, *bias, Tensor::new(val(*bias).shape(), db)?);
                }
            }
            Op::ScaleRows(a, s) => {
                let (r, _) = g.dims2();
                let sv = val(*s).data();
                if self.rg(*a) {
                    let mut da = g.clone();
                    for (i, &f) in sv.iter().enumerate() {
                        for v in da.row_mut(i) {
                            *v = *v * f;
                        }
                    }
                    self.accum(grads, *a, da);
                }
                if self.rg(*s) {
                    let ds = (0..r)
                        .map(|i| super::kernels::dot(g.row(i), val(*a).row(i)))
                        .collect();
                    self.accum(grads, *s, Tensor::new(val(*s).shape(), ds)?);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => self.accum(grads, *a, g.clone()),
            Op::Square(a) => {
                let two = T::from_f64(2.0);
                self.accum(grads, *a, map2(val(*a), &|gv, av| gv * two * av)?);
            }
            Op::SqrtClamp(a, floor) => {
                let floor = *floor;
                let half = T::from_f64(0.5);
                let d = map2(val(*a), &|gv, av| {
                    if av > floor {
                        gv * half / av.sqrt()
                    } else {
                        T::zero()
                    }
                })?;
                self.accum(grads, *a, d);
            }
            Op::Relu(a) => {
                self.accum(grads, *a, map2(val(*a), &|gv, av| gv * special::relu_grad(av))?);
            }
            Op::Gelu(a) => {
                self.accum(grads, *a, map2(val(*a), &|gv, av| gv * special::gelu_grad(av))?);
            }
            Op::Erf(a) => {
                self.accum(grads, *a, map2(val(*a), &|gv, av| gv * special::erf_grad(av))?);
            }
            Op::Keep(a, keep) => {
                let mut d = g.clone();
                for (v, &k) in d.data_mut().iter_mut().zip(keep) {
                    if !k {
                        *v = T::zero();
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::Softmax(a) => {
                let p = &node.value;
                let (r, c) = p.dims2();
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    let pr = p.row(i);
                    let gr = g.row(i);
                    let s = super::kernels::dot(pr, gr);
                    for j in 0..c {
                        d[i * c + j] = pr[j] * (gr[j] - s);
                    }
                }
                self.accum(grads, *a, Tensor::new(val(*a).shape(), d)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (r, c) = g.dims2();
                let gv = val(*gain).data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for i in 0..r {
                        for j in 0..c {
                            let gij = g.data()[i * c + j];
                            dg[j] = dg[j] + gij * xhat[i * c + j];
                            db[j] = db[j] + gij;
                        }
                    }
                    self.accum(grads, *gain, Tensor::new(val(*gain).shape(), dg)?);
                    self.accum(grads, *bias, Tensor::new(val(*bias).shape(), db)?);
                }
                if self.rg(*x) {
                    let n = T::from_f64(c as f64);
                    let mut dx = vec![T::zero(); r * c];
                    for i in 0..r {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for j in 0..c {
                            let dh = g.data()[i * c + j] * gv[j];
                            sum_dh = sum_dh + dh;
                            sum_dh_h = sum_dh_h + dh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dh = g.data()[i * c + j] * gv[j];
                            dx[i * c + j] =
                                rstd[i] / n * (n * dh - sum_dh - xhat[i * c + j] * sum_dh_h);
                        }
                    }
                    self.accum(grads, *x, Tensor::new(val(*x).shape(), dx)?);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (r, c) = val(*logits).dims2();
                let scale = g.data()[0] / T::from_f64(r as f64);
                let mut d = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    d[i * c + t] = d[i * c + t] - T::one();
                }
                for v in d.iter_mut() {
                    *v = *v * scale;
                }
                self.accum(grads, *logits, Tensor::new(val(*logits).shape(), d)?);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                self.accum(grads, *a, Tensor::full(val(*a).shape(), s));
            }
            Op::Mean(a) => {
                let s = g.data()[0] / T::from_f64(val(*a).numel() as f64);
                self.accum(grads, *a, Tensor::full(val(*a).shape(), s));
            }
            Op::ColMean(a) => {
                let (r, c) = val(*a).dims2();
                let n = T::from_f64(r as f64);
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g.data()[j] / n;
                    }
                }
                self.accum(grads, *a, Tensor::new(val(*a).shape(), d)?);
            }
            Op::ColVar(a, mean) => {
                let (r, c) = val(*a).dims2();
                let f = T::from_f64(2.0 / r as f64);
                let x = val(*a).data();
                let mut d = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[i * c + j] = g.data()[j] * f * (x[i * c + j] - mean[j]);
                    }
                }
                self.accum(grads, *a, Tensor::new(val(*a).shape(), d)?);
            }
            Op::GatherRows(a, idx) => {
                let mut d = Tensor::zeros(val(*a).shape());
                for (i, &src) in idx.iter().enumerate() {
                    let gr = g.row(i);
                    for (o, &gv) in d.row_mut(src).iter_mut().zip(gr) {
                        *o = *o + gv;
                    }
                }
                self.accum(grads, *a, d);
            }
            Op::ScatterAddRows(a, idx) => {
                let (_, c) = g.dims2();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &dst in idx {
                    data.extend_from_slice(g.row(dst));
                }
                self.accum(grads, *a, Tensor::new(val(*a).shape(), data)?);
            }
            Op::SliceCols(a, start) => {
                let (r, len) = g.dims2();
                let mut d = Tensor::zeros(val(*a).shape());
                for i in 0..r {
                    d.row_mut(i)[*start..*start + len].copy_from_slice(g.row(i));
                }
                self.accum(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let (r, _) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = val(p).dims2();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(r * w);
                        for i in 0..r {
                            data.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        self.accum(grads, p, Tensor::new(val(p).shape(), data)?);
                    }
                    offset += w;
                }
            }
            Op::SliceRows(a, start) => {
                let (len, c) = g.dims2();
                let mut d = Tensor::zeros(val(*a).shape());
                d.data_mut()[start * c..(start + len) * c].copy_from_slice(g.data());
                self.accum(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let (_, c) = g.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (r, _) = val(p).dims2();
                    if self.rg(p) {
                        let data = g.data()[offset * c..(offset + r) * c].to_vec();
                        self.accum(grads, p, Tensor::new(val(p).shape(), data)?);
                    }
                    offset += r;
                }
            }
        }
        Ok(())
    }
}

fn col_mean<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let (r, c) = t.dims2();
    let mut mean = vec![T::zero(); c];
    for i in 0..r {
        for (m, &v) in mean.iter_mut().zip(t.row(i)) {
            *m = *m + v;
        }
    }
    let n = T::from_f64(r as f64);
    mean.iter_mut().for_each(|m| *m = *m / n);
    mean
}
