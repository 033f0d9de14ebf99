//! Fused causal grouped-query attention.

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Layout of a fused attention call.
///
/// Queries are `[batch·seq, heads·head_size]`, keys and values are
/// `[batch·seq, groups·head_size]`; each head's channels are contiguous.
/// Query head `j` reads key/value group `j / (heads / groups)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub groups: usize,
    pub head_size: usize,
}

impl AttentionDims {
    pub fn heads_per_group(&self) -> usize {
        self.heads / self.groups
    }

    fn check<T: Element>(&self, q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
        if self.groups == 0 || !self.heads.is_multiple_of(self.groups) {
            return Err(Error::Parameter(format!(
                "heads {} not divisible by groups {}",
                self.heads, self.groups
            )));
        }
        let rows = self.batch * self.seq;
        let qs = [rows, self.heads * self.head_size];
        let ks = [rows, self.groups * self.head_size];
        if q.len() != qs[0] * qs[1] || q.last_dim() != qs[1] {
            return Err(Error::dim("attention q", q.shape(), &qs));
        }
        for t in [k, v] {
            if t.len() != ks[0] * ks[1] || t.last_dim() != ks[1] {
                return Err(Error::dim("attention kv", t.shape(), &ks));
            }
        }
        Ok(())
    }
}

fn forward<T: Element>(d: &AttentionDims, q: &[T], k: &[T], v: &[T]) -> (Vec<T>, Vec<T>) {
    let (bt, s, hs) = (d.batch, d.seq, d.head_size);
    let qw = d.heads * hs;
    let kw = d.groups * hs;
    let hpg = d.heads_per_group();
    let scale = T::one() / T::from_usize(hs).unwrap().sqrt();
    let mut out = vec![T::zero(); bt * s * qw];
    let mut probs = vec![T::zero(); bt * d.heads * s * s];
    let mut scores = vec![T::zero(); s];
    for b in 0..bt {
        for h in 0..d.heads {
            let grp = h / hpg;
            for t in 0..s {
                let qrow = &q[(b * s + t) * qw + h * hs..][..hs];
                let mut max = T::neg_infinity();
                for u in 0..=t {
                    let krow = &k[(b * s + u) * kw + grp * hs..][..hs];
                    let sc = crate::tensor::dot(qrow, krow) * scale;
                    scores[u] = sc;
                    max = max.max(sc);
                }
                let mut total = T::zero();
                for sc in scores.iter_mut().take(t + 1) {
                    *sc = (*sc - max).exp();
                    total = total + *sc;
                }
                let prow = &mut probs[((b * d.heads + h) * s + t) * s..][..s];
                let orow = &mut out[(b * s + t) * qw + h * hs..][..hs];
                for u in 0..=t {
                    let p = scores[u] / total;
                    prow[u] = p;
                    let vrow = &v[(b * s + u) * kw + grp * hs..][..hs];
                    crate::tensor::axpy(p, vrow, orow);
                }
            }
        }
    }
    (out, probs)
}

pub(crate) fn attention_backward<T: Element>(
    d: &AttentionDims,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (bt, s, hs) = (d.batch, d.seq, d.head_size);
    let qw = d.heads * hs;
    let kw = d.groups * hs;
    let hpg = d.heads_per_group();
    let scale = T::one() / T::from_usize(hs).unwrap().sqrt();
    let (q, k, v, g) = (q.data(), k.data(), v.data(), g.data());
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); s];
    for b in 0..bt {
        for h in 0..d.heads {
            let grp = h / hpg;
            for t in 0..s {
                let go = &g[(b * s + t) * qw + h * hs..][..hs];
                let prow = &probs[((b * d.heads + h) * s + t) * s..][..s];
                let mut inner = T::zero();
                for u in 0..=t {
                    let vo = (b * s + u) * kw + grp * hs;
                    dp[u] = crate::tensor::dot(go, &v[vo..vo + hs]);
                    inner = inner + dp[u] * prow[u];
                    crate::tensor::axpy(prow[u], go, &mut dv[vo..vo + hs]);
                }
                let qo = (b * s + t) * qw + h * hs;
                for u in 0..=t {
                    let ds = prow[u] * (dp[u] - inner) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let ko = (b * s + u) * kw + grp * hs;
                    crate::tensor::axpy(ds, &k[ko..ko + hs], &mut dq[qo..qo + hs]);
                    crate::tensor::axpy(ds, &q[qo..qo + hs], &mut dk[ko..ko + hs]);
                }
            }
        }
    }
    let rows = bt * s;
    (
        Tensor::new(&[rows, qw], dq).unwrap(),
        Tensor::new(&[rows, kw], dk).unwrap(),
        Tensor::new(&[rows, kw], dv).unwrap(),
    )
}

impl<T: Element> Graph<T> {
    /// Causal scaled dot-product attention; position `t` attends to `0..=t`.
    pub fn causal_attention<'g>(
        &'g self,
        q: Var<'g, T>,
        k: Var<'g, T>,
        v: Var<'g, T>,
        dims: AttentionDims,
    ) -> Result<Var<'g, T>> {
        let (qv, kv, vv) = (q.value(), k.value(), v.value());
        dims.check(&qv, &kv, &vv)?;
        let (out, probs) = forward(&dims, qv.data(), kv.data(), vv.data());
        let shape = [dims.batch * dims.seq, dims.heads * dims.head_size];
        let rg = q.requires_grad() || k.requires_grad() || v.requires_grad();
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Attention { q: q.id, k: k.id, v: v.id, dims, probs },
            rg,
        ))
    }
}
