use std::rc::Rc;

use super::attention::{attention_backward, AttentionDims};
use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Element, Tensor};

pub(crate) type ValueFn<'a, T> = dyn Fn(usize) -> Rc<Tensor<T>> + 'a;

pub(crate) enum Op<T: Element> {
    Leaf,
    Add(usize, usize),
    AddBias(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, din: usize, dout: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(usize),
    Embedding { table: usize, ids: Vec<usize> },
    Reshape(usize),
    Transpose { x: usize, rows: usize, cols: usize },
    Concat { inputs: Vec<usize>, outer: usize, widths: Vec<usize> },
    Sum(usize),
    Mean(usize),
    Log(usize),
    Exp(usize),
    Softmax { x: usize, temperature: T },
    CrossEntropy { logits: usize, targets: Vec<Option<usize>>, count: usize },
    Kl { student: usize, grad_rows: Tensor<T> },
    Attention { q: usize, k: usize, v: usize, dims: AttentionDims, probs: Vec<T> },
}

fn scaled<T: Element>(t: &Tensor<T>, s: T) -> Tensor<T> {
    t.map(|v| v * s)
}

impl<T: Element> Op<T> {
    pub(crate) fn backward(
        &self,
        out: &Tensor<T>,
        g: &Tensor<T>,
        value: &ValueFn<'_, T>,
    ) -> Vec<(usize, Tensor<T>)> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddBias(a, b) => {
                let width = g.last_dim();
                let mut gb = vec![T::zero(); width];
                for row in g.data().chunks(width) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                vec![(*a, g.clone()), (*b, Tensor::new(&[width], gb).unwrap())]
            }
            Op::Mul(a, b) => {
                let va = value(*a);
                let vb = value(*b);
                let ga = Tensor::from_fn(g.shape(), |i| g.data()[i] * vb.data()[i]);
                let gb = Tensor::from_fn(g.shape(), |i| g.data()[i] * va.data()[i]);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, s) => vec![(*a, scaled(g, *s))],
            Op::MatMul { a, b, m, k, n } => {
                let va = value(*a);
                let vb = value(*b);
                // dA = dC·Bᵀ, dB = Aᵀ·dC
                let bt = tensor::transpose2d(vb.data(), *k, *n);
                let da = tensor::matmul_forward(g.data(), &bt, *m, *n, *k);
                let at = tensor::transpose2d(va.data(), *m, *k);
                let db = tensor::matmul_forward(&at, g.data(), *k, *m, *n);
                vec![
                    (*a, Tensor::new(va.shape(), da).unwrap()),
                    (*b, Tensor::new(vb.shape(), db).unwrap()),
                ]
            }
            Op::Linear { x, w, b, rows, din, dout } => {
                let vx = value(*x);
                let vw = value(*w);
                let dx = tensor::linear_backward_input(g.data(), vw.data(), *rows, *din, *dout);
                let dw = tensor::linear_backward_weight(g.data(), vx.data(), *rows, *din, *dout);
                let mut res = vec![
                    (*x, Tensor::new(vx.shape(), dx).unwrap()),
                    (*w, Tensor::new(vw.shape(), dw).unwrap()),
                ];
                if let Some(b) = b {
                    let mut gb = vec![T::zero(); *dout];
                    for row in g.data().chunks(*dout) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    res.push((*b, Tensor::new(&[*dout], gb).unwrap()));
                }
                res
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let vg = value(*gain);
                let width = vg.len();
                let wf = T::from_usize(width).unwrap();
                let mut dx = vec![T::zero(); g.len()];
                let mut dgain = vec![T::zero(); width];
                let mut dbias = vec![T::zero(); width];
                for (r, ((gy, xh), dxr)) in g
                    .data()
                    .chunks(width)
                    .zip(xhat.chunks(width))
                    .zip(dx.chunks_mut(width))
                    .enumerate()
                {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for c in 0..width {
                        let d = gy[c] * vg.data()[c];
                        mean_d = mean_d + d;
                        mean_dx = mean_dx + d * xh[c];
                        dgain[c] = dgain[c] + gy[c] * xh[c];
                        dbias[c] = dbias[c] + gy[c];
                    }
                    mean_d = mean_d / wf;
                    mean_dx = mean_dx / wf;
                    for c in 0..width {
                        let d = gy[c] * vg.data()[c];
                        dxr[c] = rstd[r] * (d - mean_d - xh[c] * mean_dx);
                    }
                }
                vec![
                    (*x, Tensor::new(g.shape(), dx).unwrap()),
                    (*gain, Tensor::new(&[width], dgain).unwrap()),
                    (*bias, Tensor::new(&[width], dbias).unwrap()),
                ]
            }
            Op::Gelu(x) => {
                let vx = value(*x);
                let d = Tensor::from_fn(g.shape(), |i| g.data()[i] * tensor::gelu_grad(vx.data()[i]));
                vec![(*x, d)]
            }
            Op::Embedding { table, ids } => {
                let vt = value(*table);
                let width = vt.last_dim();
                let mut dt = Tensor::zeros(vt.shape());
                for (row, &id) in g.data().chunks(width).zip(ids) {
                    tensor::axpy(T::one(), row, &mut dt.data_mut()[id * width..(id + 1) * width]);
                }
                vec![(*table, dt)]
            }
            Op::Reshape(x) => {
                let vx = value(*x);
                vec![(*x, g.reshaped(vx.shape()).unwrap())]
            }
            Op::Transpose { x, rows, cols } => {
                let d = tensor::transpose2d(g.data(), *cols, *rows);
                vec![(*x, Tensor::new(&[*rows, *cols], d).unwrap())]
            }
            Op::Concat { inputs, outer, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for (&id, &w) in inputs.iter().zip(widths) {
                    let mut d = Vec::with_capacity(outer * w);
                    for o in 0..*outer {
                        d.extend_from_slice(&g.data()[o * total + offset..o * total + offset + w]);
                    }
                    let shape = value(id).shape().to_vec();
                    res.push((id, Tensor::new(&shape, d).unwrap()));
                    offset += w;
                }
                res
            }
            Op::Sum(x) => {
                let vx = value(*x);
                vec![(*x, Tensor::full(vx.shape(), g.item()))]
            }
            Op::Mean(x) => {
                let vx = value(*x);
                let n = T::from_usize(vx.len()).unwrap();
                vec![(*x, Tensor::full(vx.shape(), g.item() / n))]
            }
            Op::Log(x) => {
                let vx = value(*x);
                vec![(*x, Tensor::from_fn(g.shape(), |i| g.data()[i] / vx.data()[i]))]
            }
            Op::Exp(x) => vec![(*x, Tensor::from_fn(g.shape(), |i| g.data()[i] * out.data()[i]))],
            Op::Softmax { x, temperature } => {
                let width = out.last_dim();
                let mut d = vec![T::zero(); out.len()];
                for ((p, gy), dr) in out
                    .data()
                    .chunks(width)
                    .zip(g.data().chunks(width))
                    .zip(d.chunks_mut(width))
                {
                    let inner: T = p.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for c in 0..width {
                        dr[c] = p[c] * (gy[c] - inner) / *temperature;
                    }
                }
                vec![(*x, Tensor::new(out.shape(), d).unwrap())]
            }
            Op::CrossEntropy { logits, targets, count } => {
                let vl = value(*logits);
                let width = vl.last_dim();
                let scale = if *count == 0 {
                    T::zero()
                } else {
                    g.item() / T::from_usize(*count).unwrap()
                };
                let mut d = vec![T::zero(); vl.len()];
                for ((z, dr), tgt) in vl.data().chunks(width).zip(d.chunks_mut(width)).zip(targets) {
                    let Some(t) = tgt else { continue };
                    tensor::softmax_into(z, T::one(), dr);
                    dr[*t] = dr[*t] - T::one();
                    dr.iter_mut().for_each(|v| *v = *v * scale);
                }
                vec![(*logits, Tensor::new(vl.shape(), d).unwrap())]
            }
            Op::Kl { student, grad_rows } => vec![(*student, scaled(grad_rows, g.item()))],
            Op::Attention { q, k, v, dims, probs } => {
                let (dq, dk, dv) = attention_backward(
                    dims,
                    &value(*q),
                    &value(*k),
                    &value(*v),
                    probs,
                    g,
                );
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
        }
    }
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<'g, T: Element> Var<'g, T> {
    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: Var<'g, T>, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg)
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let v = Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]);
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let neg = other.scale(-T::one());
        self.add(neg)
    }

    /// Add a vector along the trailing axis.
    pub fn add_bias(self, bias: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), bias.value());
        if b.rank() != 1 || b.len() != a.last_dim() {
            return Err(Error::dim("add_bias", a.shape(), b.shape()));
        }
        let w = b.len();
        let v = Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i % w]);
        Ok(self.binary(bias, v, Op::AddBias(self.id, bias.id)))
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let v = Tensor::from_fn(a.shape(), |i| a.data()[i] * b.data()[i]);
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        let v = scaled(&self.value(), s);
        self.unary(v, Op::Scale(self.id, s))
    }

    /// `[m, k] · [k, n] → [m, n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::dim("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let v = Tensor::new(&[m, n], tensor::matmul_forward(a.data(), b.data(), m, k, n))?;
        Ok(self.binary(other, v, Op::MatMul { a: self.id, b: other.id, m, k, n }))
    }

    /// `x · Wᵀ + b` over the trailing axis, with `W` stored `[out, in]`.
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let (x, w) = (self.value(), weight.value());
        if w.rank() != 2 || w.shape()[1] != x.last_dim() {
            return Err(Error::dim("linear", x.shape(), w.shape()));
        }
        let (din, dout) = (w.shape()[1], w.shape()[0]);
        let bv = match bias {
            Some(b) => {
                let bv = b.value();
                if bv.shape() != [dout] {
                    return Err(Error::dim("linear bias", w.shape(), bv.shape()));
                }
                Some(bv)
            }
            None => None,
        };
        let rows = x.rows();
        let data = tensor::linear_forward(x.data(), w.data(), bv.as_deref().map(Tensor::data), rows, din, dout);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        Ok(self.graph.push(
            Tensor::new(&shape, data)?,
            Op::Linear { x: self.id, w: weight.id, b: bias.map(|b| b.id), rows, din, dout },
            rg,
        ))
    }

    /// Layer normalization over the trailing axis with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'g, T>, bias: Var<'g, T>, eps: T) -> Result<Var<'g, T>> {
        let (x, gv, bv) = (self.value(), gain.value(), bias.value());
        let width = x.last_dim();
        if gv.shape() != [width] || bv.shape() != [width] {
            return Err(Error::dim("layer_norm", x.shape(), gv.shape()));
        }
        let wf = T::from_usize(width).unwrap();
        let rows = x.rows();
        let mut xhat = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let xr = &x.data()[r * width..(r + 1) * width];
            let mean = xr.iter().copied().sum::<T>() / wf;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / wf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..width {
                let h = (xr[c] - mean) * rs;
                xhat[r * width + c] = h;
                out[r * width + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.graph.push(
            Tensor::new(x.shape(), out)?,
            Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, xhat, rstd },
            rg,
        ))
    }

    pub fn gelu(self) -> Var<'g, T> {
        let v = self.value().map(tensor::gelu);
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value().reshaped(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(self) -> Result<Var<'g, T>> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(Error::dim("transpose", x.shape(), &[2]));
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        let v = Tensor::new(&[cols, rows], tensor::transpose2d(x.data(), rows, cols))?;
        Ok(self.unary(v, Op::Transpose { x: self.id, rows, cols }))
    }

    pub fn sum(self) -> Var<'g, T> {
        let total: T = self.value().data().iter().copied().sum();
        self.unary(Tensor::scalar(total), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'g, T> {
        let x = self.value();
        let total: T = x.data().iter().copied().sum();
        let n = T::from_usize(x.len()).unwrap();
        self.unary(Tensor::scalar(total / n), Op::Mean(self.id))
    }

    pub fn log(self) -> Var<'g, T> {
        let v = self.value().map(T::ln);
        self.unary(v, Op::Log(self.id))
    }

    pub fn exp(self) -> Var<'g, T> {
        let v = self.value().map(T::exp);
        self.unary(v, Op::Exp(self.id))
    }

    /// `exp(z_i / T) / Σ_j exp(z_j / T)` along the trailing axis.
    pub fn softmax(self, temperature: T) -> Result<Var<'g, T>> {
        if !(temperature > T::zero()) {
            return Err(Error::Parameter(format!("temperature must be > 0, got {temperature}")));
        }
        let x = self.value();
        let v = Tensor::new(x.shape(), tensor::softmax_rows(x.data(), x.last_dim(), temperature))?;
        Ok(self.unary(v, Op::Softmax { x: self.id, temperature }))
    }
}

impl<T: Element> Graph<T> {
    /// Row lookup into `table` (`[vocab, width]`); backward scatter-adds.
    pub fn embedding<'g>(&'g self, table: Var<'g, T>, ids: &[usize]) -> Result<Var<'g, T>> {
        let t = table.value();
        if t.rank() != 2 {
            return Err(Error::dim("embedding", t.shape(), &[2]));
        }
        let (vocab, width) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index(format!("token id {bad} >= vocab {vocab}")));
        }
        let v = t.select_rows(ids);
        let v = Tensor::new(&[ids.len(), width], v.into_data())?;
        Ok(self.push(v, Op::Embedding { table: table.id, ids: ids.to_vec() }, table.requires_grad()))
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Parameter("concat of zero tensors".into()))?
            .value();
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Parameter(format!("axis {axis} out of range for rank {rank}")));
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        let mut axis_len = 0;
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        for v in &values {
            let s = v.shape();
            if s.len() != rank || s[..axis] != first.shape()[..axis] || s[axis + 1..] != first.shape()[axis + 1..] {
                return Err(Error::dim("concat", first.shape(), s));
            }
            widths.push(s[axis..].iter().product::<usize>());
            axis_len += s[axis];
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (v, &w) in values.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = axis_len;
        let rg = parts.iter().any(Var::requires_grad);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat { inputs: parts.iter().map(|p| p.id).collect(), outer, widths },
            rg,
        ))
    }
}
