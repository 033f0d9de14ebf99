//! Dense row-major tensors and the small set of kernels built on them.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::exec::for_each_row;

/// Floating-point element type usable by tensors and the autodiff graph.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap_or_else(Self::nan)
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Element for f32 {}
impl Element for f64 {}

/// A contiguous row-major array with a shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.contains(&0) {
            return Err(Error::Parameter(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        if n != data.len() {
            return Err(Error::dim("Tensor::new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim().max(1)
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    /// `self += other`, shapes must match.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim("add_assign", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&x| x.as_f64() * x.as_f64()).sum()
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.as_f64()))
                .collect(),
        }
    }

    /// Gather rows of a 2-D tensor.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let cols = self.last_dim();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(&self.data[r * cols..(r + 1) * cols]);
        }
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    /// Gather columns of a 2-D tensor.
    pub fn select_cols(&self, cols: &[usize]) -> Self {
        let width = self.last_dim();
        let rows = self.rows();
        let mut data = Vec::with_capacity(rows * cols.len());
        for r in 0..rows {
            let row = &self.data[r * width..(r + 1) * width];
            data.extend(cols.iter().map(|&c| row[c]));
        }
        Tensor {
            shape: vec![rows, cols.len()],
            data,
        }
    }

    /// Gather entries of a 1-D tensor.
    pub fn select(&self, idx: &[usize]) -> Self {
        Tensor {
            shape: vec![idx.len()],
            data: idx.iter().map(|&i| self.data[i]).collect(),
        }
    }
}

#[inline]
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    // eight independent partial sums so the loop vectorizes
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub(crate) fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `rows[k] += Σ_i x_k[i] · wt[i]` for four rows at once; `wt` is `[in, out]`.
#[inline]
fn accumulate4<T: Element>(rows: &mut [T], xs: [&[T]; 4], wt: &[T], width: usize) {
    let (d0, rest) = rows.split_at_mut(width);
    let (d1, rest) = rest.split_at_mut(width);
    let (d2, d3) = rest.split_at_mut(width);
    for (i, wr) in wt.chunks_exact(width).enumerate() {
        let (a0, a1, a2, a3) = (xs[0][i], xs[1][i], xs[2][i], xs[3][i]);
        for o in 0..width {
            let w = wr[o];
            d0[o] = d0[o] + a0 * w;
            d1[o] = d1[o] + a1 * w;
            d2[o] = d2[o] + a2 * w;
            d3[o] = d3[o] + a3 * w;
        }
    }
}

/// `out[n, o] = Σ_i x[n, i] · w[o, i] (+ b[o])`; `w` is `[out, in]`.
pub(crate) fn linear_forward<T: Element>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    n: usize,
    din: usize,
    dout: usize,
) -> Vec<T> {
    let wt = transpose2d(w, dout, din);
    let mut out = vec![T::zero(); n * dout];
    for_each_row(&mut out, 4 * dout, n * din * dout, |blk, rows| {
        let r0 = blk * 4;
        let nr = rows.len() / dout;
        let xr = |r: usize| &x[(r0 + r) * din..(r0 + r + 1) * din];
        if nr == 4 {
            accumulate4(rows, [xr(0), xr(1), xr(2), xr(3)], &wt, dout);
        } else {
            for r in 0..nr {
                let row = &mut rows[r * dout..(r + 1) * dout];
                for (i, &xi) in xr(r).iter().enumerate() {
                    axpy(xi, &wt[i * dout..(i + 1) * dout], row);
                }
            }
        }
        if let Some(b) = b {
            for row in rows.chunks_mut(dout) {
                for (v, &bo) in row.iter_mut().zip(b) {
                    *v = *v + bo;
                }
            }
        }
    });
    out
}

/// `dx[n, i] = Σ_o dy[n, o] · w[o, i]`.
pub(crate) fn linear_backward_input<T: Element>(
    dy: &[T],
    w: &[T],
    n: usize,
    din: usize,
    dout: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); n * din];
    for_each_row(&mut dx, din, n * din * dout, |r, row| {
        let dyr = &dy[r * dout..(r + 1) * dout];
        for (o, &g) in dyr.iter().enumerate() {
            if g != T::zero() {
                axpy(g, &w[o * din..(o + 1) * din], row);
            }
        }
    });
    dx
}

/// `dw[o, i] = Σ_n dy[n, o] · x[n, i]`.
pub(crate) fn linear_backward_weight<T: Element>(
    dy: &[T],
    x: &[T],
    n: usize,
    din: usize,
    dout: usize,
) -> Vec<T> {
    let mut dw = vec![T::zero(); dout * din];
    for_each_row(&mut dw, 4 * din, n * din * dout, |blk, rows| {
        let o0 = blk * 4;
        let no = rows.len() / din;
        for r in 0..n {
            let xr = &x[r * din..(r + 1) * din];
            let g = &dy[r * dout + o0..r * dout + o0 + no];
            if no == 4 {
                let (g0, g1, g2, g3) = (g[0], g[1], g[2], g[3]);
                let (d0, rest) = rows.split_at_mut(din);
                let (d1, rest) = rest.split_at_mut(din);
                let (d2, d3) = rest.split_at_mut(din);
                for i in 0..din {
                    let xi = xr[i];
                    d0[i] = d0[i] + g0 * xi;
                    d1[i] = d1[i] + g1 * xi;
                    d2[i] = d2[i] + g2 * xi;
                    d3[i] = d3[i] + g3 * xi;
                }
            } else {
                for (k, &gk) in g.iter().enumerate() {
                    axpy(gk, xr, &mut rows[k * din..(k + 1) * din]);
                }
            }
        }
    });
    dw
}

/// Plain `[m, k] · [k, n]` product.
pub(crate) fn matmul_forward<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for_each_row(&mut out, n, m * k * n, |i, row| {
        for p in 0..k {
            let av = a[i * k + p];
            if av != T::zero() {
                axpy(av, &b[p * n..(p + 1) * n], row);
            }
        }
    });
    out
}

pub(crate) fn transpose2d<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

/// Tanh-approximated GELU, written as `x · σ(2u)` with
/// `u = √(2/π)(x + 0.044715x³)`, which equals `½x(1 + tanh u)`.
#[inline]
pub(crate) fn gelu<T: Element>(x: T) -> T {
    let two_u = T::from_f64_lossy(2.0 * GELU_C) * (x + T::from_f64_lossy(GELU_K) * x * x * x);
    x / (T::one() + (-two_u).exp())
}

#[inline]
pub(crate) fn gelu_grad<T: Element>(x: T) -> T {
    let k = T::from_f64_lossy(GELU_K);
    let c = T::from_f64_lossy(GELU_C);
    let two = T::from_f64_lossy(2.0);
    let s = T::one() / (T::one() + (-(two * c * (x + k * x * x * x))).exp());
    let du = c * (T::one() + T::from_f64_lossy(3.0) * k * x * x);
    s + two * x * s * (T::one() - s) * du
}

/// Row-wise temperature softmax with max subtraction.
pub(crate) fn softmax_rows<T: Element>(z: &[T], cols: usize, temperature: T) -> Vec<T> {
    let mut out = vec![T::zero(); z.len()];
    for (src, dst) in z.chunks(cols).zip(out.chunks_mut(cols)) {
        softmax_into(src, temperature, dst);
    }
    out
}

pub(crate) fn softmax_into<T: Element>(z: &[T], temperature: T, dst: &mut [T]) {
    let max = z.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for (d, &v) in dst.iter_mut().zip(z) {
        *d = ((v - max) / temperature).exp();
        total = total + *d;
    }
    for d in dst.iter_mut() {
        *d = *d / total;
    }
}

/// Row-wise log-softmax (temperature 1 scaled by `1/temperature`).
pub(crate) fn log_softmax_into<T: Element>(z: &[T], temperature: T, dst: &mut [T]) {
    let max = z.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut total = T::zero();
    for &v in z {
        total = total + ((v - max) / temperature).exp();
    }
    let lse = total.ln();
    for (d, &v) in dst.iter_mut().zip(z) {
        *d = (v - max) / temperature - lse;
    }
}

/// Mean token cross-entropy (nats) of `[rows, vocab]` logits, in f64.
pub fn mean_cross_entropy(logits: &Tensor<f32>, targets: &[usize]) -> Result<f64> {
    let v = logits.last_dim();
    if logits.rows() != targets.len() {
        return Err(Error::dim("cross entropy", &[logits.rows()], &[targets.len()]));
    }
    let mut total = 0.0f64;
    for (row, &t) in logits.data().chunks(v).zip(targets) {
        if t >= v {
            return Err(Error::Index(format!("target {t} >= vocab {v}")));
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
        let lse = row.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[t] as f64;
    }
    Ok(total / targets.len().max(1) as f64)
}
