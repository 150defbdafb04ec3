//! Dense row-major `f64` tensors and the pure numerical kernels built on them.
//!
//! Every kernel here is a pure function: it never mutates its inputs and it
//! checks its output for NaN/Inf before returning. Reductions always run in a
//! fixed left-to-right order so results are reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        contract!(
            shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        let count: usize = shape.iter().product();
        contract!(
            count == data.len(),
            "shape {shape:?} needs {count} elements, got {}",
            data.len()
        );
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let count = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; count],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let count: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..count).map(&mut f).collect(),
        }
    }

    /// Builds an `m × n` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        contract!(!rows.is_empty(), "from_rows needs at least one row");
        let cols = rows[0].len();
        contract!(rows.iter().all(|r| r.len() == cols), "ragged rows in from_rows");
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extents of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::Contract(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    /// Extents of a rank-3 `H × W × C` tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [h, w, c] => Ok((*h, *w, *c)),
            other => Err(Error::Contract(format!(
                "expected an H×W×C tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let count: usize = shape.iter().product();
        contract!(
            count == self.data.len() && shape.iter().all(|&d| d > 0),
            "cannot reshape {:?} into {shape:?}",
            self.shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub(crate) fn checked(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }

    /// Copies rows `start..start + len` of a matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Self> {
        let (m, n) = self.dims2()?;
        contract!(
            len > 0 && start + len <= m,
            "row slice {start}..{} out of range for {m} rows",
            start + len
        );
        Tensor::new(vec![len, n], self.data[start * n..(start + len) * n].to_vec())
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        contract!(!parts.is_empty(), "concat_rows needs at least one part");
        let n = parts[0].dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (m, pn) = p.dims2()?;
            if pn != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: parts[0].shape.clone(),
                    right: p.shape.clone(),
                });
            }
            rows += m;
            data.extend_from_slice(&p.data);
        }
        Tensor::new(vec![rows, n], data)
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

/// `a[m×k] · b[k×n]`, accumulating each output over `k` in ascending order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(mismatch("matmul", a, b));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)?.checked("matmul")
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if k != kb {
        return Err(mismatch("matmul_nt", a, b));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    Tensor::new(vec![m, n], out)?.checked("matmul_nt")
}

/// `a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(mismatch("matmul_tn", a, b));
    }
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)?.checked("matmul_tn")
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(mismatch("add", a, b));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape.clone(), data)?.checked("add")
}

/// Adds a length-`n` row vector to every row of an `m × n` matrix.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (_, n) = a.dims2()?;
    if row.numel() != n {
        return Err(mismatch("add_row", a, row));
    }
    let mut out = a.clone();
    for chunk in out.data.chunks_mut(n) {
        for (o, r) in chunk.iter_mut().zip(&row.data) {
            *o += r;
        }
    }
    out.checked("add_row")
}

pub fn scale(a: &Tensor, s: f64) -> Result<Tensor> {
    a.map(|x| x * s).checked("scale")
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    if !x.is_finite() {
        return Err(Error::NonFinite { op: "softmax_rows" });
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(n) {
        softmax_in_place(row);
    }
    out.checked("softmax_rows")
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)` with max shift.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer normalization with gain and offset vectors.
pub fn layer_norm_rows(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (_, n) = x.dims2()?;
    if gain.numel() != n || bias.numel() != n {
        return Err(mismatch("layer_norm", x, gain));
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(n) {
        let (mean, inv) = row_moments(row);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain.data[j] + bias.data[j];
        }
    }
    out.checked("layer_norm")
}

/// Mean and inverse standard deviation of a row.
pub(crate) fn row_moments(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

fn conv_dims(x: &Tensor, w: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize, usize)> {
    let (h, wd, cin) = x.dims3()?;
    let (k, k2, wcin, cout) = match w.shape.as_slice() {
        [a, b, c, d] => (*a, *b, *c, *d),
        _ => return Err(mismatch(op, x, w)),
    };
    contract!(
        k == k2 && k % 2 == 1,
        "{op}: kernel must be square with odd side, got {k}×{k2}"
    );
    if wcin != cin {
        return Err(mismatch(op, x, w));
    }
    Ok((h, wd, cin, k, cout))
}

/// Stride-1 cross-correlation with zero "same" padding.
///
/// `x` is `H×W×Cin`, `w` is `k×k×Cin×Cout`; the output keeps the input's
/// spatial extents.
pub fn conv2d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (h, wd, cin, k, cout) = conv_dims(x, w, "conv2d")?;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; h * wd * cout];
    for y in 0..h {
        for xx in 0..wd {
            let orow = &mut out[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - pad;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let ibase = (sy as usize * wd + sx as usize) * cin;
                    for ci in 0..cin {
                        let xv = x.data[ibase + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let wbase = ((ky * k + kx) * cin + ci) * cout;
                        let wrow = &w.data[wbase..wbase + cout];
                        for (o, &wv) in orow.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, wd, cout], out)?.checked("conv2d")
}

/// Gradient of `conv2d` with respect to its input.
pub(crate) fn conv2d_grad_input(grad: &Tensor, w: &Tensor, in_shape: &[usize]) -> Tensor {
    let (h, wd, cin) = (in_shape[0], in_shape[1], in_shape[2]);
    let (k, cout) = (w.shape[0], w.shape[3]);
    let pad = (k / 2) as isize;
    let mut dx = vec![0.0; h * wd * cin];
    for y in 0..h {
        for xx in 0..wd {
            let grow = &grad.data[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - pad;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let ibase = (sy as usize * wd + sx as usize) * cin;
                    for ci in 0..cin {
                        let wbase = ((ky * k + kx) * cin + ci) * cout;
                        dx[ibase + ci] += dot(grow, &w.data[wbase..wbase + cout]);
                    }
                }
            }
        }
    }
    Tensor {
        shape: in_shape.to_vec(),
        data: dx,
    }
}

/// Gradient of `conv2d` with respect to its kernel.
pub(crate) fn conv2d_grad_weight(grad: &Tensor, x: &Tensor, w_shape: &[usize]) -> Tensor {
    let (h, wd, cin) = (x.shape[0], x.shape[1], x.shape[2]);
    let (k, cout) = (w_shape[0], w_shape[3]);
    let pad = (k / 2) as isize;
    let mut dw = vec![0.0; k * k * cin * cout];
    for y in 0..h {
        for xx in 0..wd {
            let grow = &grad.data[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
            for ky in 0..k {
                let sy = y as isize + ky as isize - pad;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let sx = xx as isize + kx as isize - pad;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let ibase = (sy as usize * wd + sx as usize) * cin;
                    for ci in 0..cin {
                        let xv = x.data[ibase + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let wbase = ((ky * k + kx) * cin + ci) * cout;
                        for (d, &g) in dw[wbase..wbase + cout].iter_mut().zip(grow) {
                            *d += xv * g;
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: w_shape.to_vec(),
        data: dw,
    }
}

/// Stride-1 transposed convolution with the same padding convention as
/// [`conv2d`]: every input pixel scatters `x[y,x,:] · w[ky,kx,:,:]` onto
/// output position `(y + ky − p, x + kx − p)`.
pub fn tconv2d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (h, wd, cin, k, cout) = conv_dims(x, w, "tconv2d")?;
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; h * wd * cout];
    for y in 0..h {
        for xx in 0..wd {
            let ibase = (y * wd + xx) * cin;
            for ky in 0..k {
                let ty = y as isize + ky as isize - pad;
                if ty < 0 || ty >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let tx = xx as isize + kx as isize - pad;
                    if tx < 0 || tx >= wd as isize {
                        continue;
                    }
                    let obase = (ty as usize * wd + tx as usize) * cout;
                    for ci in 0..cin {
                        let xv = x.data[ibase + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let wbase = ((ky * k + kx) * cin + ci) * cout;
                        let wrow = &w.data[wbase..wbase + cout];
                        for (o, &wv) in out[obase..obase + cout].iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, wd, cout], out)?.checked("tconv2d")
}

pub(crate) fn tconv2d_grad_input(grad: &Tensor, w: &Tensor, in_shape: &[usize]) -> Tensor {
    let (h, wd, cin) = (in_shape[0], in_shape[1], in_shape[2]);
    let (k, cout) = (w.shape[0], w.shape[3]);
    let pad = (k / 2) as isize;
    let mut dx = vec![0.0; h * wd * cin];
    for y in 0..h {
        for xx in 0..wd {
            let ibase = (y * wd + xx) * cin;
            for ky in 0..k {
                let ty = y as isize + ky as isize - pad;
                if ty < 0 || ty >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let tx = xx as isize + kx as isize - pad;
                    if tx < 0 || tx >= wd as isize {
                        continue;
                    }
                    let obase = (ty as usize * wd + tx as usize) * cout;
                    let grow = &grad.data[obase..obase + cout];
                    for ci in 0..cin {
                        let wbase = ((ky * k + kx) * cin + ci) * cout;
                        dx[ibase + ci] += dot(grow, &w.data[wbase..wbase + cout]);
                    }
                }
            }
        }
    }
    Tensor {
        shape: in_shape.to_vec(),
        data: dx,
    }
}

pub(crate) fn tconv2d_grad_weight(grad: &Tensor, x: &Tensor, w_shape: &[usize]) -> Tensor {
    let (h, wd, cin) = (x.shape[0], x.shape[1], x.shape[2]);
    let (k, cout) = (w_shape[0], w_shape[3]);
    let pad = (k / 2) as isize;
    let mut dw = vec![0.0; k * k * cin * cout];
    for y in 0..h {
        for xx in 0..wd {
            let ibase = (y * wd + xx) * cin;
            for ky in 0..k {
                let ty = y as isize + ky as isize - pad;
                if ty < 0 || ty >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let tx = xx as isize + kx as isize - pad;
                    if tx < 0 || tx >= wd as isize {
                        continue;
                    }
                    let obase = (ty as usize * wd + tx as usize) * cout;
                    let grow = &grad.data[obase..obase + cout];
                    for ci in 0..cin {
                        let xv = x.data[ibase + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let wbase = ((ky * k + kx) * cin + ci) * cout;
                        for (d, &g) in dw[wbase..wbase + cout].iter_mut().zip(grow) {
                            *d += xv * g;
                        }
                    }
                }
            }
        }
    }
    Tensor {
        shape: w_shape.to_vec(),
        data: dw,
    }
}

/// Flips a `k×k×Cin×Cout` kernel along both spatial axes.
pub fn flip_kernel(w: &Tensor) -> Result<Tensor> {
    let (k, k2, cin, cout) = match w.shape.as_slice() {
        [a, b, c, d] => (*a, *b, *c, *d),
        other => {
            return Err(Error::Contract(format!(
                "flip_kernel expects a rank-4 kernel, got {other:?}"
            )))
        }
    };
    let block = cin * cout;
    let mut out = vec![0.0; w.numel()];
    for ky in 0..k {
        for kx in 0..k2 {
            let src = (ky * k2 + kx) * block;
            let dst = ((k - 1 - ky) * k2 + (k2 - 1 - kx)) * block;
            out[dst..dst + block].copy_from_slice(&w.data[src..src + block]);
        }
    }
    Tensor::new(w.shape.clone(), out)
}
