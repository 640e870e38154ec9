//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record in reverse and
//! accumulates gradients into every node that depends on a trainable leaf.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::{FRAC_1_SQRT_2, PI};

use super::params::{ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
    Identity,
}

/// Reduction used when several edges deliver values to one destination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
    Sum,
}

/// Static description of a dense, zero-padded, stride-1 lattice convolution
/// over a batch of grids with `resolution^dim` cells each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub resolution: usize,
    pub dim: usize,
    pub kernel_size: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvGeometry {
    pub fn cells(&self) -> usize {
        self.resolution.pow(self.dim as u32)
    }

    pub fn taps(&self) -> usize {
        self.kernel_size.pow(self.dim as u32)
    }

    /// For each `(cell, tap)` the source cell, or `u32::MAX` when the tap
    /// falls into the zero padding.
    pub fn neighbor_table(&self) -> Vec<u32> {
        let cells = self.cells();
        let taps = self.taps();
        let half = (self.kernel_size / 2) as isize;
        let r = self.resolution as isize;
        let mut table = vec![u32::MAX; cells * taps];
        let mut pos = [0isize; 3];
        let mut off = [0isize; 3];
        for p in 0..cells {
            let mut rem = p;
            for a in (0..self.dim).rev() {
                pos[a] = (rem % self.resolution) as isize;
                rem /= self.resolution;
            }
            for t in 0..taps {
                let mut rem = t;
                for a in (0..self.dim).rev() {
                    off[a] = (rem % self.kernel_size) as isize - half;
                    rem /= self.kernel_size;
                }
                let mut q = 0isize;
                let mut inside = true;
                for a in 0..self.dim {
                    let c = pos[a] + off[a];
                    if c < 0 || c >= r {
                        inside = false;
                        break;
                    }
                    q = q * r + c;
                }
                if inside {
                    table[p * taps + t] = q as u32;
                }
            }
        }
        table
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    AddBias(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Concat(Var, Var),
    /// Stores the elementwise derivative.
    Act(Var, Vec<f64>),
    SinCos(Var),
    Sin(Var),
    Cos(Var),
    Mean(Var),
    Max(Var, usize),
    Gather(Var, Vec<usize>),
    SliceRows(Var, usize),
    Reshape(Var),
    Scatter {
        src: Var,
        dst: Vec<usize>,
        mode: Aggregation,
        counts: Vec<usize>,
        argmax: Vec<usize>,
    },
    LayerNorm(Var, Vec<f64>),
    LogSoftmax(Var),
    RowMatVec(Var, Var),
    Conv {
        x: Var,
        kernel: Var,
        geom: ConvGeometry,
        table: Vec<u32>,
    },
}

/// Record of a differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    bound: Vec<Option<Var>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// A value that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter to this tape. Repeated calls return the same
    /// handle, so a parameter used in several places accumulates one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let slot = id.index();
        if slot >= self.bound.len() {
            self.bound.resize(slot + 1, None);
        }
        if let Some(v) = self.bound[slot] {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.bound[slot] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("sub", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|v| v * c).collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("same length");
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Elementwise product with a constant mask, e.g. dropout.
    pub fn mul_const(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        let x = self.value(a);
        if x.len() != mask.len() {
            return Err(shape_err("mul_const", x.shape(), &[mask.len()]));
        }
        let data = x.data().iter().zip(&mask).map(|(p, m)| p * m).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::MulConst(a, mask), ng))
    }

    /// Adds a length-`n` vector to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let (_, n) = x.as_matrix()?;
        if b.len() != n {
            return Err(shape_err("add_bias", x.shape(), b.shape()));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(t, Op::AddBias(a, bias), ng))
    }

    /// Multiplies every row of an `m × n` matrix elementwise by a length-`n`
    /// vector.
    pub fn mul_row(&mut self, a: Var, s: Var) -> Result<Var> {
        let (x, sv) = (self.value(a), self.value(s));
        let (_, n) = x.as_matrix()?;
        if sv.len() != n {
            return Err(shape_err("mul_row", x.shape(), sv.shape()));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, m) in row.iter_mut().zip(sv.data()) {
                *v *= m;
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(t, Op::MulRow(a, s), ng))
    }

    /// `(m × k) · (k × n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(shape_err("matmul", x.shape(), y.shape()));
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let mut out = vec![0.0; m * n];
        mm(x.data(), y.data(), &mut out, m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    /// Concatenates two matrices with equal row counts along columns.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 || x.rows() != y.rows() {
            return Err(shape_err("concat", x.shape(), y.shape()));
        }
        let (m, p, q) = (x.rows(), x.cols(), y.cols());
        let mut data = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            data.extend_from_slice(x.row(i));
            data.extend_from_slice(y.row(i));
        }
        let t = Tensor::matrix(m, p + q, data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Concat(a, b), ng))
    }

    pub fn activation(&mut self, a: Var, act: Activation) -> Var {
        if act == Activation::Identity {
            return a;
        }
        let x = self.value(a);
        let ng = self.ng(a);
        let mut data = Vec::with_capacity(x.len());
        let mut deriv = Vec::with_capacity(if ng { x.len() } else { 0 });
        for &v in x.data() {
            let (y, dy) = act_with_derivative(act, v);
            data.push(y);
            if ng {
                deriv.push(dy);
            }
        }
        let t = Tensor::new(x.shape().to_vec(), data).expect("same length");
        self.push(t, Op::Act(a, deriv), ng)
    }

    /// `[cos(a), sin(a)]` side by side: an `m × n` input gives `m × 2n`.
    pub fn sincos(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(shape_err("sincos", x.shape(), &[]));
        }
        let n = x.cols();
        let mut data = vec![0.0; 2 * x.len()];
        for (row, out) in x.data().chunks_exact(n).zip(data.chunks_exact_mut(2 * n)) {
            let (c, s) = out.split_at_mut(n);
            for j in 0..n {
                (s[j], c[j]) = libm::sincos(row[j]);
            }
        }
        let t = Tensor::matrix(x.rows(), 2 * n, data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::SinCos(a), ng))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| libm::sin(v)).collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("same length");
        let ng = self.ng(a);
        self.push(t, Op::Sin(a), ng)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| libm::cos(v)).collect();
        let t = Tensor::new(x.shape().to_vec(), data).expect("same length");
        let ng = self.ng(a);
        self.push(t, Op::Cos(a), ng)
    }

    /// Mean over all elements, as a one-element tensor.
    pub fn reduce_mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(shape_err("reduce_mean", x.shape(), &[]));
        }
        let m = x.data().iter().sum::<f64>() / x.len() as f64;
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), ng))
    }

    /// Maximum over all elements; the gradient flows to the first maximum.
    pub fn reduce_max(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(shape_err("reduce_max", x.shape(), &[]));
        }
        let mut best = 0;
        for (i, &v) in x.data().iter().enumerate() {
            if v > x.data()[best] {
                best = i;
            }
        }
        let m = x.data()[best];
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(m), Op::Max(a, best), ng))
    }

    /// Selects rows of a matrix; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 {
            return Err(shape_err("gather_rows", x.shape(), &[indices.len()]));
        }
        let (rows, c) = (x.rows(), x.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(alloc::format!(
                "gather index {bad} out of bounds for {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            data.extend_from_slice(x.row(i));
        }
        let t = Tensor::matrix(indices.len(), c, data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Gather(a, indices), ng))
    }

    /// Same data under a new shape of equal size.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        if x.shape().len() != 2 || start > end || end > x.rows() {
            return Err(shape_err("slice_rows", x.shape(), &[start, end]));
        }
        let c = x.cols();
        let t = Tensor::matrix(end - start, c, x.data()[start * c..end * c].to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::SliceRows(a, start), ng))
    }

    /// Reduces rows of `src` into `n_dst` destination rows: row `e` goes to
    /// `dst[e]`. Destinations without incoming rows are zero.
    ///
    /// Sums are taken over the values of each destination sorted in
    /// ascending order, so the result does not depend on the order of the
    /// rows. `Max` sends the gradient to the first maximal row.
    pub fn scatter(
        &mut self,
        src: Var,
        dst: Vec<usize>,
        n_dst: usize,
        mode: Aggregation,
    ) -> Result<Var> {
        let x = self.value(src);
        if x.shape().len() != 2 || x.rows() != dst.len() {
            return Err(shape_err("scatter", x.shape(), &[dst.len()]));
        }
        if let Some(&bad) = dst.iter().find(|&&d| d >= n_dst) {
            return Err(Error::Data(alloc::format!(
                "scatter destination {bad} out of bounds for {n_dst} rows"
            )));
        }
        let c = x.cols();
        // group rows by destination, keeping row order inside a group
        let mut counts = vec![0usize; n_dst];
        for &d in &dst {
            counts[d] += 1;
        }
        let mut offsets = vec![0usize; n_dst + 1];
        for d in 0..n_dst {
            offsets[d + 1] = offsets[d] + counts[d];
        }
        let mut cursor = offsets.clone();
        let mut grouped = vec![0usize; dst.len()];
        for (e, &d) in dst.iter().enumerate() {
            grouped[cursor[d]] = e;
            cursor[d] += 1;
        }
        let mut out = vec![0.0; n_dst * c];
        let mut argmax = Vec::new();
        match mode {
            Aggregation::Sum | Aggregation::Mean => {
                let mut buf = Vec::new();
                for d in 0..n_dst {
                    let rows = &grouped[offsets[d]..offsets[d + 1]];
                    if rows.is_empty() {
                        continue;
                    }
                    for ch in 0..c {
                        buf.clear();
                        buf.extend(rows.iter().map(|&e| x.data()[e * c + ch]));
                        buf.sort_unstable_by(f64::total_cmp);
                        let s: f64 = buf.iter().sum();
                        out[d * c + ch] = if mode == Aggregation::Mean {
                            // a constant group must average to itself exactly
                            if buf[0] == buf[buf.len() - 1] {
                                buf[0]
                            } else {
                                s / rows.len() as f64
                            }
                        } else {
                            s
                        };
                    }
                }
            }
            Aggregation::Max => {
                argmax = vec![usize::MAX; n_dst * c];
                for d in 0..n_dst {
                    for &e in &grouped[offsets[d]..offsets[d + 1]] {
                        for ch in 0..c {
                            let v = x.data()[e * c + ch];
                            let slot = d * c + ch;
                            if argmax[slot] == usize::MAX || v > out[slot] {
                                out[slot] = v;
                                argmax[slot] = e;
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::matrix(n_dst, c, out)?;
        let ng = self.ng(src);
        Ok(self.push(
            t,
            Op::Scatter {
                src,
                dst,
                mode,
                counts,
                argmax,
            },
            ng,
        ))
    }

    /// Normalizes each row to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = x.as_matrix()?;
        let mut data = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for row in x.data().chunks_exact(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / libm::sqrt(var + eps);
            inv_std.push(is);
            data.extend(row.iter().map(|v| (v - mean) * is));
        }
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::LayerNorm(a, inv_std), ng))
    }

    /// Log-softmax over the last axis of a matrix.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (_, n) = x.as_matrix()?;
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks_exact(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + libm::log(row.iter().map(|v| libm::exp(v - m)).sum::<f64>());
            data.extend(row.iter().map(|v| v - lse));
        }
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::LogSoftmax(a), ng))
    }

    /// Row-wise matrix-vector product: row `e` of `x` (`c_in` wide) times the
    /// `c_in × c_out` matrix stored row-major in row `e` of `w`.
    pub fn row_matvec(&mut self, x: Var, w: Var, c_out: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (e, c_in) = xv.as_matrix()?;
        if wv.shape().len() != 2 || wv.rows() != e || wv.cols() != c_in * c_out {
            return Err(shape_err("row_matvec", xv.shape(), wv.shape()));
        }
        let mut out = vec![0.0; e * c_out];
        for r in 0..e {
            let xr = xv.row(r);
            let wr = wv.row(r);
            let o = &mut out[r * c_out..(r + 1) * c_out];
            for (i, &xi) in xr.iter().enumerate() {
                for (ov, wv) in o.iter_mut().zip(&wr[i * c_out..(i + 1) * c_out]) {
                    *ov += xi * wv;
                }
            }
        }
        let t = Tensor::matrix(e, c_out, out)?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(t, Op::RowMatVec(x, w), ng))
    }

    /// Zero-padded, stride-1 cross-correlation of a batch of grids.
    ///
    /// `x` is `(batch · cells) × c_in`; `kernel` is `taps × (c_in · c_out)`
    /// with taps in row-major offset order.
    pub fn conv(&mut self, x: Var, kernel: Var, geom: ConvGeometry) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        let cells = geom.cells();
        let taps = geom.taps();
        if xv.shape() != [geom.batch * cells, geom.c_in] {
            return Err(shape_err("conv input", xv.shape(), &[geom.batch * cells, geom.c_in]));
        }
        if kv.shape() != [taps, geom.c_in * geom.c_out] {
            return Err(shape_err("conv kernel", kv.shape(), &[taps, geom.c_in * geom.c_out]));
        }
        if geom.kernel_size.is_multiple_of(2) {
            return Err(Error::Config("convolution kernel size must be odd".into()));
        }
        let table = geom.neighbor_table();
        let (ci, co) = (geom.c_in, geom.c_out);
        let mut out = vec![0.0; geom.batch * cells * co];
        let (xd, kd) = (xv.data(), kv.data());
        for b in 0..geom.batch {
            let base = b * cells;
            for p in 0..cells {
                let o = &mut out[(base + p) * co..(base + p + 1) * co];
                for t in 0..taps {
                    let q = table[p * taps + t];
                    if q == u32::MAX {
                        continue;
                    }
                    let xr = &xd[(base + q as usize) * ci..(base + q as usize + 1) * ci];
                    let w = &kd[t * ci * co..(t + 1) * ci * co];
                    for (i, &xi) in xr.iter().enumerate() {
                        for (ov, wv) in o.iter_mut().zip(&w[i * co..(i + 1) * co]) {
                            *ov += xi * wv;
                        }
                    }
                }
            }
        }
        let t = Tensor::matrix(geom.batch * cells, co, out)?;
        let ng = self.ng(x) || self.ng(kernel);
        Ok(self.push(
            t,
            Op::Conv {
                x,
                kernel,
                geom,
                table,
            },
            ng,
        ))
    }

    /// Gradient accumulated for `v` by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradients of every parameter of `store`, zero for parameters that were
    /// never bound or never reached.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        store
            .iter()
            .map(|(id, p)| {
                self.bound
                    .get(id.index())
                    .copied()
                    .flatten()
                    .and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| vec![0.0; p.value.len()])
            })
            .collect()
    }

    /// Back-propagates from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(shape_err("backward", self.values[loss.0].shape(), &[1]));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.needs_grad[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Tensor])) {
        if !self.needs_grad[v.0] {
            return;
        }
        let n = self.values[v.0].len();
        let mut g = self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n]);
        f(&mut g, &self.values);
        self.grads[v.0] = Some(g);
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // temporarily take the op so `self` can be borrowed mutably
        let op = core::mem::replace(&mut self.ops[i], Op::Leaf);
        let out = Var(i);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, |ga, _| axpy(ga, g, 1.0));
                self.acc(*b, |gb, _| axpy(gb, g, 1.0));
            }
            Op::Sub(a, b) => {
                self.acc(*a, |ga, _| axpy(ga, g, 1.0));
                self.acc(*b, |gb, _| axpy(gb, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |ga, vals| {
                    for ((d, gi), y) in ga.iter_mut().zip(g).zip(vals[b.0].data()) {
                        *d += gi * y;
                    }
                });
                self.acc(b, |gb, vals| {
                    for ((d, gi), x) in gb.iter_mut().zip(g).zip(vals[a.0].data()) {
                        *d += gi * x;
                    }
                });
            }
            Op::Scale(a, c) => self.acc(*a, |ga, _| axpy(ga, g, *c)),
            Op::MulConst(a, mask) => self.acc(*a, |ga, _| {
                for ((d, gi), m) in ga.iter_mut().zip(g).zip(mask) {
                    *d += gi * m;
                }
            }),
            Op::AddBias(a, bias) => {
                self.acc(*a, |ga, _| axpy(ga, g, 1.0));
                self.acc(*bias, |gb, _| {
                    let n = gb.len();
                    for row in g.chunks_exact(n) {
                        axpy(gb, row, 1.0);
                    }
                });
            }
            Op::MulRow(a, s) => {
                let (a, s) = (*a, *s);
                self.acc(a, |ga, vals| {
                    let sv = vals[s.0].data();
                    let n = sv.len();
                    for (gr, dr) in g.chunks_exact(n).zip(ga.chunks_exact_mut(n)) {
                        for ((d, gi), m) in dr.iter_mut().zip(gr).zip(sv) {
                            *d += gi * m;
                        }
                    }
                });
                self.acc(s, |gs, vals| {
                    let n = gs.len();
                    for (gr, xr) in g.chunks_exact(n).zip(vals[a.0].data().chunks_exact(n)) {
                        for ((d, gi), x) in gs.iter_mut().zip(gr).zip(xr) {
                            *d += gi * x;
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (self.values[a.0].shape()[0], self.values[a.0].shape()[1]);
                let n = self.values[b.0].shape()[1];
                self.acc(a, |ga, vals| mm_bt(g, vals[b.0].data(), ga, m, k, n));
                self.acc(b, |gb, vals| mm_at(vals[a.0].data(), g, gb, m, k, n));
            }
            Op::Concat(a, b) => {
                let (a, b) = (*a, *b);
                let p = self.values[a.0].cols();
                let q = self.values[b.0].cols();
                self.acc(a, |ga, _| {
                    for (dr, gr) in ga.chunks_exact_mut(p).zip(g.chunks_exact(p + q)) {
                        axpy(dr, &gr[..p], 1.0);
                    }
                });
                self.acc(b, |gb, _| {
                    for (dr, gr) in gb.chunks_exact_mut(q).zip(g.chunks_exact(p + q)) {
                        axpy(dr, &gr[p..], 1.0);
                    }
                });
            }
            Op::Act(a, deriv) => {
                self.acc(*a, |ga, _| {
                    for ((d, gi), dy) in ga.iter_mut().zip(g).zip(deriv) {
                        *d += gi * dy;
                    }
                });
            }
            Op::SinCos(a) => {
                let a = *a;
                let n = self.values[a.0].cols();
                self.acc(a, |ga, vals| {
                    let y = vals[out.0].data();
                    for ((d, gr), yr) in ga.chunks_exact_mut(n).zip(g.chunks_exact(2 * n)).zip(y.chunks_exact(2 * n)) {
                        for j in 0..n {
                            d[j] += gr[n + j] * yr[j] - gr[j] * yr[n + j];
                        }
                    }
                });
            }
            Op::Sin(a) => {
                let a = *a;
                self.acc(a, |ga, vals| {
                    for ((d, gi), &x) in ga.iter_mut().zip(g).zip(vals[a.0].data()) {
                        *d += gi * libm::cos(x);
                    }
                });
            }
            Op::Cos(a) => {
                let a = *a;
                self.acc(a, |ga, vals| {
                    for ((d, gi), &x) in ga.iter_mut().zip(g).zip(vals[a.0].data()) {
                        *d -= gi * libm::sin(x);
                    }
                });
            }
            Op::Mean(a) => {
                let a = *a;
                let n = self.values[a.0].len() as f64;
                self.acc(a, |ga, _| ga.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Max(a, idx) => self.acc(*a, |ga, _| ga[*idx] += g[0]),
            Op::Gather(a, idx) => {
                let c = self.values[out.0].cols();
                self.acc(*a, |ga, _| {
                    for (r, &i) in idx.iter().enumerate() {
                        axpy(&mut ga[i * c..(i + 1) * c], &g[r * c..(r + 1) * c], 1.0);
                    }
                });
            }
            Op::Reshape(a) => self.acc(*a, |ga, _| axpy(ga, g, 1.0)),
            Op::SliceRows(a, start) => {
                let off = start * self.values[out.0].cols();
                self.acc(*a, |ga, _| axpy(&mut ga[off..off + g.len()], g, 1.0));
            }
            Op::Scatter {
                src,
                dst,
                mode,
                counts,
                argmax,
            } => {
                let c = self.values[out.0].cols();
                self.acc(*src, |gs, _| match mode {
                    Aggregation::Sum | Aggregation::Mean => {
                        for (e, &d) in dst.iter().enumerate() {
                            let w = if *mode == Aggregation::Mean {
                                1.0 / counts[d] as f64
                            } else {
                                1.0
                            };
                            axpy(&mut gs[e * c..(e + 1) * c], &g[d * c..(d + 1) * c], w);
                        }
                    }
                    Aggregation::Max => {
                        for (slot, &e) in argmax.iter().enumerate() {
                            if e != usize::MAX {
                                gs[e * c + slot % c] += g[slot];
                            }
                        }
                    }
                });
            }
            Op::LayerNorm(a, inv_std) => {
                let n = self.values[out.0].cols();
                self.acc(*a, |ga, vals| {
                    let y = vals[out.0].data();
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let yr = &y[r * n..(r + 1) * n];
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((d, gi), yi) in ga[r * n..(r + 1) * n].iter_mut().zip(gr).zip(yr) {
                            *d += is * (gi - mg - yi * mgy);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = self.values[out.0].cols();
                self.acc(*a, |ga, vals| {
                    let y = vals[out.0].data();
                    for ((dr, gr), yr) in ga.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let s: f64 = gr.iter().sum();
                        for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += gi - libm::exp(*yi) * s;
                        }
                    }
                });
            }
            Op::RowMatVec(x, w) => {
                let (x, w) = (*x, *w);
                let c_out = self.values[out.0].cols();
                let c_in = self.values[x.0].cols();
                self.acc(x, |gx, vals| {
                    let wd = vals[w.0].data();
                    for (r, gr) in g.chunks_exact(c_out).enumerate() {
                        let wr = &wd[r * c_in * c_out..(r + 1) * c_in * c_out];
                        for i in 0..c_in {
                            gx[r * c_in + i] += dot(gr, &wr[i * c_out..(i + 1) * c_out]);
                        }
                    }
                });
                self.acc(w, |gw, vals| {
                    let xd = vals[x.0].data();
                    for (r, gr) in g.chunks_exact(c_out).enumerate() {
                        for i in 0..c_in {
                            let xi = xd[r * c_in + i];
                            let base = r * c_in * c_out + i * c_out;
                            axpy(&mut gw[base..base + c_out], gr, xi);
                        }
                    }
                });
            }
            Op::Conv {
                x,
                kernel,
                geom,
                table,
            } => {
                let (x, kernel) = (*x, *kernel);
                let cells = geom.cells();
                let taps = geom.taps();
                let (ci, co) = (geom.c_in, geom.c_out);
                self.acc(x, |gx, vals| {
                    let kd = vals[kernel.0].data();
                    for b in 0..geom.batch {
                        let base = b * cells;
                        for p in 0..cells {
                            let gr = &g[(base + p) * co..(base + p + 1) * co];
                            for t in 0..taps {
                                let q = table[p * taps + t];
                                if q == u32::MAX {
                                    continue;
                                }
                                let w = &kd[t * ci * co..(t + 1) * ci * co];
                                let row = (base + q as usize) * ci;
                                for i in 0..ci {
                                    gx[row + i] += dot(gr, &w[i * co..(i + 1) * co]);
                                }
                            }
                        }
                    }
                });
                self.acc(kernel, |gk, vals| {
                    let xd = vals[x.0].data();
                    for b in 0..geom.batch {
                        let base = b * cells;
                        for p in 0..cells {
                            let gr = &g[(base + p) * co..(base + p + 1) * co];
                            for t in 0..taps {
                                let q = table[p * taps + t];
                                if q == u32::MAX {
                                    continue;
                                }
                                let xr = &xd[(base + q as usize) * ci..(base + q as usize + 1) * ci];
                                let gw = &mut gk[t * ci * co..(t + 1) * ci * co];
                                for (i, &xi) in xr.iter().enumerate() {
                                    axpy(&mut gw[i * co..(i + 1) * co], gr, xi);
                                }
                            }
                        }
                    }
                });
            }
        }
        self.ops[i] = op;
    }
}

#[inline]
fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += a · b` with `a: m × k`, `b: k × n`.
fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(o, &b[p * n..(p + 1) * n], aip);
            }
        }
    }
}

/// `ga += g · bᵀ` with `g: m × n`, `b: k × n`.
fn mm_bt(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    // row-by-row axpy over bᵀ vectorizes, unlike dot products
    let mut bt = vec![0.0; n * k];
    for p in 0..k {
        for j in 0..n {
            bt[j * k + p] = b[p * n + j];
        }
    }
    for i in 0..m {
        let out = &mut ga[i * k..(i + 1) * k];
        for j in 0..n {
            let gij = g[i * n + j];
            if gij != 0.0 {
                axpy(out, &bt[j * k..(j + 1) * k], gij);
            }
        }
    }
}

/// `gb += aᵀ · g` with `a: m × k`, `g: m × n`.
fn mm_at(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != 0.0 {
                axpy(&mut gb[p * n..(p + 1) * n], gr, aip);
            }
        }
    }
}

fn act_with_derivative(act: Activation, x: f64) -> (f64, f64) {
    match act {
        Activation::Gelu => {
            let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
            let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * PI);
            (x * cdf, cdf + x * pdf)
        }
        Activation::Relu => {
            if x > 0.0 {
                (x, 1.0)
            } else {
                (0.0, 0.0)
            }
        }
        Activation::Identity => (x, 1.0),
    }
}
