use serde_json::json;

use crate::checkpoint::{self, Archive};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// AdamW with decoupled weight decay on matrices (rank ≥ 2) only.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(shapes: &[&[usize]], betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            t: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.rank() >= 2 { self.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j] as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = (mj / c1) / ((vj / c2).sqrt() + self.eps) + decay * *w as f64;
                *w = (*w as f64 - lr * update) as f32;
            }
        }
    }

    pub fn to_archive_bytes(&self, extra: serde_json::Value) -> Vec<u8> {
        let header = json!({
            "kind": "optimizer",
            "t": self.t,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "extra": extra,
        });
        let mut named = Vec::with_capacity(2 * self.m.len());
        for (i, t) in self.m.iter().enumerate() {
            named.push((format!("m.{i}"), t));
        }
        for (i, t) in self.v.iter().enumerate() {
            named.push((format!("v.{i}"), t));
        }
        checkpoint::encode(&header, &named)
    }

    /// Restore from an archive written by [`AdamW::to_archive_bytes`];
    /// returns the optimizer and the `extra` header value.
    pub fn from_archive(a: Archive) -> Result<(Self, serde_json::Value)> {
        if a.kind() != Some("optimizer") {
            return Err(Error::Format("not an optimizer archive".into()));
        }
        let h = &a.header;
        let num = |k: &str| h[k].as_f64().ok_or_else(|| Error::Format(format!("optimizer header missing {k}")));
        let n = a.tensors.len() / 2;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            m.push(a.get(&format!("m.{i}")).cloned().ok_or_else(|| Error::Format(format!("missing m.{i}")))?);
            v.push(a.get(&format!("v.{i}")).cloned().ok_or_else(|| Error::Format(format!("missing v.{i}")))?);
        }
        let opt = AdamW {
            beta1: h["betas"][0].as_f64().ok_or_else(|| Error::Format("optimizer betas".into()))?,
            beta2: h["betas"][1].as_f64().ok_or_else(|| Error::Format("optimizer betas".into()))?,
            eps: num("eps")?,
            weight_decay: num("weight_decay")?,
            t: h["t"].as_u64().ok_or_else(|| Error::Format("optimizer step".into()))?,
            m,
            v,
        };
        Ok((opt, h["extra"].clone()))
    }

    pub fn check_shapes(&self, shapes: &[&[usize]]) -> Result<()> {
        let ok = self.m.len() == shapes.len() && self.m.iter().zip(shapes).all(|(t, s)| t.shape() == *s);
        if ok {
            Ok(())
        } else {
            Err(Error::Format("optimizer state does not match the model".into()))
        }
    }
}

/// Scale `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / (norm + 1e-6)) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
