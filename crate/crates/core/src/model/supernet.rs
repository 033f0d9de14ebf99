//! The weight-sharing supernet: activation, masked evaluation, extraction.
//!
//! Masked evaluation runs the full-width network and zeroes every inactive
//! channel, head, head dimension, and neuron; layer norms take their
//! statistics over active channels only. Extraction instead copies the
//! selected slices into a smaller [`DenseModel`]. The two routes share only
//! index resolution and must agree numerically.

use super::config::{ResolvedSubnet, SubnetworkConfig, SupernetConfig};
use super::dense::{DenseModel, LayerNorm, LN_EPS};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone)]
pub struct Supernet {
    config: SupernetConfig,
    weights: DenseModel,
    active: Option<SubnetworkConfig>,
}

impl Supernet {
    /// Randomly initialized supernet.
    pub fn new(config: SupernetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Supernet {
            config,
            weights: DenseModel::init(config.dense(), seed)?,
            active: None,
        })
    }

    /// Wrap a dense model whose layers are all identical.
    pub fn from_dense(weights: DenseModel) -> Result<Self> {
        let config = weights
            .config
            .as_supernet()
            .ok_or_else(|| Error::validation("uniformity", "supernet weights need identical layers"))?;
        config.validate()?;
        Ok(Supernet {
            config,
            weights,
            active: None,
        })
    }

    pub fn config(&self) -> &SupernetConfig {
        &self.config
    }

    pub fn weights(&self) -> &DenseModel {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut DenseModel {
        &mut self.weights
    }

    pub fn into_weights(self) -> DenseModel {
        self.weights
    }

    /// Restrict subsequent [`Supernet::forward`] calls to `cfg`.
    pub fn set_sub_network(&mut self, cfg: SubnetworkConfig) -> Result<()> {
        cfg.validate(&self.config)?;
        self.active = Some(cfg);
        Ok(())
    }

    pub fn reset_sub_network(&mut self) {
        self.active = None;
    }

    /// The active sub-network (the full network when none was set).
    pub fn active(&self) -> SubnetworkConfig {
        self.active.clone().unwrap_or_else(|| SubnetworkConfig::full(&self.config))
    }

    /// Change the number of key/value groups per active layer, turning the
    /// layer into multi-head (`q == heads`), multi-query (`q == 1`), or
    /// grouped-query attention. Explicit head/group index sets are dropped
    /// and the coarse head selection for the new grouping is used.
    pub fn mask_attention_variant(&mut self, q_groups: &[usize]) -> Result<()> {
        let mut cfg = self.active();
        if q_groups.len() != cfg.layers.len() {
            return Err(Error::validation(
                "bounds",
                format!("{} group counts for {} active layers", q_groups.len(), cfg.layers.len()),
            ));
        }
        for (i, (lc, &q)) in cfg.layers.iter_mut().zip(q_groups).enumerate() {
            if q == 0 || lc.heads % q != 0 {
                return Err(Error::validation(
                    "divisibility",
                    format!("layer {i}: heads {} not divisible by query groups {q}", lc.heads),
                ));
            }
            lc.query_groups = q;
            lc.head_indices = None;
            lc.query_group_indices = None;
        }
        self.set_sub_network(cfg)
    }

    /// Masked logits of the active sub-network, `[batch·seq, vocab]`.
    pub fn forward(&self, ids: &[usize], batch: usize, seq: usize) -> Result<Tensor> {
        match &self.active {
            Some(cfg) => self.forward_masked(cfg, ids, batch, seq),
            None => self.forward_masked(&SubnetworkConfig::full(&self.config), ids, batch, seq),
        }
    }

    /// Masked logits of `cfg` without touching the activation state.
    pub fn forward_masked(&self, cfg: &SubnetworkConfig, ids: &[usize], batch: usize, seq: usize) -> Result<Tensor> {
        let r = cfg.resolve(&self.config)?;
        masked_forward(&self.config, &self.weights, &r, ids, batch, seq)
    }

    /// Copy the selected slices out into an independent dense model.
    pub fn extract_dense(&self, cfg: &SubnetworkConfig) -> Result<DenseModel> {
        let r = cfg.resolve(&self.config)?;
        let w = &self.weights;
        let sup = &self.config;
        let e = &r.embd;
        let ln = |l: &LayerNorm| LayerNorm {
            gain: l.gain.select(e),
            bias: l.bias.select(e),
        };
        let mut blocks = Vec::with_capacity(r.layers.len());
        for rl in &r.layers {
            let b = &w.blocks[rl.layer];
            let q_rows: Vec<usize> = rl
                .heads
                .iter()
                .flat_map(|&h| rl.head_dims.iter().map(move |&d| h * sup.head_size + d))
                .collect();
            let kv_rows: Vec<usize> = rl
                .groups
                .iter()
                .flat_map(|&g| rl.head_dims.iter().map(move |&d| g * sup.head_size + d))
                .collect();
            blocks.push(super::dense::Block {
                ln1: ln(&b.ln1),
                wq: b.wq.select_rows(&q_rows).select_cols(e),
                bq: b.bq.select(&q_rows),
                wk: b.wk.select_rows(&kv_rows).select_cols(e),
                bk: b.bk.select(&kv_rows),
                wv: b.wv.select_rows(&kv_rows).select_cols(e),
                bv: b.bv.select(&kv_rows),
                wo: b.wo.select_rows(e).select_cols(&q_rows),
                bo: b.bo.select(e),
                ln2: ln(&b.ln2),
                w_fc: b.w_fc.select_rows(&rl.neurons).select_cols(e),
                b_fc: b.b_fc.select(&rl.neurons),
                w_proj: b.w_proj.select_rows(e).select_cols(&rl.neurons),
                b_proj: b.b_proj.select(e),
            });
        }
        let model = DenseModel {
            config: cfg.dense_config(sup),
            wte: w.wte.select_cols(e),
            wpe: w.wpe.select_cols(e),
            blocks,
            ln_f: ln(&w.ln_f),
            lm_head: w.lm_head.select_cols(e),
        };
        debug_assert_eq!(model.param_count(), model.config.param_count());
        Ok(model)
    }
}

fn mask_of(width: usize, active: &[usize]) -> Vec<f32> {
    let mut m = vec![0.0; width];
    for &i in active {
        m[i] = 1.0;
    }
    m
}

fn masked_layer_norm(x: &[f32], ln: &LayerNorm, mask: &[f32], active: usize) -> Vec<f32> {
    let width = mask.len();
    let n = active as f32;
    let mut out = vec![0.0; x.len()];
    for (xr, or) in x.chunks(width).zip(out.chunks_mut(width)) {
        let mean = xr.iter().zip(mask).map(|(&v, &m)| v * m).sum::<f32>() / n;
        let var = xr
            .iter()
            .zip(mask)
            .map(|(&v, &m)| m * (v - mean) * (v - mean))
            .sum::<f32>()
            / n;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..width {
            or[c] = ((xr[c] - mean) * rstd * ln.gain.data()[c] + ln.bias.data()[c]) * mask[c];
        }
    }
    out
}

fn masked_forward(
    sup: &SupernetConfig,
    w: &DenseModel,
    r: &ResolvedSubnet,
    ids: &[usize],
    batch: usize,
    seq: usize,
) -> Result<Tensor> {
    if seq == 0 || seq > sup.max_seq {
        return Err(Error::validation("bounds", format!("sequence length {seq} not in 1..={}", sup.max_seq)));
    }
    if ids.len() != batch * seq {
        return Err(Error::dim("forward ids", &[ids.len()], &[batch, seq]));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= sup.vocab_size) {
        return Err(Error::Index(format!("token id {bad} >= vocab {}", sup.vocab_size)));
    }
    let e = sup.n_embd;
    let rows = batch * seq;
    let me = mask_of(e, &r.embd);
    let n_active = r.embd.len();

    let mut x = vec![0.0f32; rows * e];
    for (i, &id) in ids.iter().enumerate() {
        let t = i % seq;
        for c in 0..e {
            x[i * e + c] = (w.wte.data()[id * e + c] + w.wpe.data()[t * e + c]) * me[c];
        }
    }

    let hs_full = sup.head_size;
    let qw = sup.n_head * hs_full;
    let kw = sup.n_query_groups * hs_full;
    let per_group = sup.heads_per_group();
    let di = sup.intermediate_size;

    for rl in &r.layers {
        let b = &w.blocks[rl.layer];
        let a = masked_layer_norm(&x, &b.ln1, &me, n_active);
        let q = tensor::linear_forward(&a, b.wq.data(), Some(b.bq.data()), rows, e, qw);
        let k = tensor::linear_forward(&a, b.wk.data(), Some(b.bk.data()), rows, e, kw);
        let v = tensor::linear_forward(&a, b.wv.data(), Some(b.bv.data()), rows, e, kw);
        let md = mask_of(hs_full, &rl.head_dims);
        let scale = 1.0 / (rl.head_dims.len() as f32).sqrt();

        let mut y = vec![0.0f32; rows * qw];
        let mut probs = vec![0.0f32; seq];
        for bi in 0..batch {
            for &h in &rl.heads {
                let grp = h / per_group;
                for t in 0..seq {
                    let qo = (bi * seq + t) * qw + h * hs_full;
                    let mut max = f32::NEG_INFINITY;
                    for u in 0..=t {
                        let ko = (bi * seq + u) * kw + grp * hs_full;
                        let mut s = 0.0;
                        for d in 0..hs_full {
                            s += md[d] * q[qo + d] * k[ko + d];
                        }
                        probs[u] = s * scale;
                        max = max.max(probs[u]);
                    }
                    let mut total = 0.0;
                    for p in probs.iter_mut().take(t + 1) {
                        *p = (*p - max).exp();
                        total += *p;
                    }
                    for u in 0..=t {
                        let vo = (bi * seq + u) * kw + grp * hs_full;
                        let p = probs[u] / total;
                        for d in 0..hs_full {
                            y[qo + d] += p * v[vo + d] * md[d];
                        }
                    }
                }
            }
        }
        let o = tensor::linear_forward(&y, b.wo.data(), Some(b.bo.data()), rows, qw, e);
        for (i, xv) in x.iter_mut().enumerate() {
            *xv += o[i] * me[i % e];
        }

        let m = masked_layer_norm(&x, &b.ln2, &me, n_active);
        let mn = mask_of(di, &rl.neurons);
        let mut hdn = tensor::linear_forward(&m, b.w_fc.data(), Some(b.b_fc.data()), rows, e, di);
        for (i, hv) in hdn.iter_mut().enumerate() {
            *hv = tensor::gelu(*hv) * mn[i % di];
        }
        let f = tensor::linear_forward(&hdn, b.w_proj.data(), Some(b.b_proj.data()), rows, di, e);
        for (i, xv) in x.iter_mut().enumerate() {
            *xv += f[i] * me[i % e];
        }
    }

    let xf = masked_layer_norm(&x, &w.ln_f, &me, n_active);
    let logits = tensor::linear_forward(&xf, w.lm_head.data(), None, rows, e, sup.vocab_size);
    Tensor::new(&[rows, sup.vocab_size], logits)
}
