//! A standalone decoder-only transformer and its differentiable forward.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{DenseConfig, LayerDims};
use crate::autodiff::{AttentionDims, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LN_EPS: f32 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    fn new(width: usize) -> Self {
        LayerNorm {
            gain: Tensor::ones(&[width]),
            bias: Tensor::zeros(&[width]),
        }
    }
}

/// One transformer block. Linear weights are stored `[out, in]`; query,
/// key and value rows are grouped per head (`head * head_size + d`).
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2: LayerNorm,
    pub w_fc: Tensor,
    pub b_fc: Tensor,
    pub w_proj: Tensor,
    pub b_proj: Tensor,
}

impl Block {
    fn zeros(e: usize, d: &LayerDims) -> Self {
        let qw = d.n_head * d.head_size;
        let kw = d.n_query_groups * d.head_size;
        let di = d.intermediate_size;
        Block {
            ln1: LayerNorm::new(e),
            wq: Tensor::zeros(&[qw, e]),
            bq: Tensor::zeros(&[qw]),
            wk: Tensor::zeros(&[kw, e]),
            bk: Tensor::zeros(&[kw]),
            wv: Tensor::zeros(&[kw, e]),
            bv: Tensor::zeros(&[kw]),
            wo: Tensor::zeros(&[e, qw]),
            bo: Tensor::zeros(&[e]),
            ln2: LayerNorm::new(e),
            w_fc: Tensor::zeros(&[di, e]),
            b_fc: Tensor::zeros(&[di]),
            w_proj: Tensor::zeros(&[e, di]),
            b_proj: Tensor::zeros(&[e]),
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1.gain", &self.ln1.gain),
            ("ln1.bias", &self.ln1.bias),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.gain", &self.ln2.gain),
            ("ln2.bias", &self.ln2.bias),
            ("mlp.w_fc", &self.w_fc),
            ("mlp.b_fc", &self.b_fc),
            ("mlp.w_proj", &self.w_proj),
            ("mlp.b_proj", &self.b_proj),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1.gain,
            &mut self.ln1.bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2.gain,
            &mut self.ln2.bias,
            &mut self.w_fc,
            &mut self.b_fc,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }
}

/// Weights of a dense model. Independent of any supernet.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseModel {
    pub config: DenseConfig,
    pub wte: Tensor,
    pub wpe: Tensor,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub lm_head: Tensor,
}

/// Intermediate activations recorded during a traced forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    /// Residual stream entering each block, `[rows, n_embd]`.
    pub block_inputs: Vec<Tensor>,
    /// Residual stream leaving each block.
    pub block_outputs: Vec<Tensor>,
    /// Output of every layer norm (ln1/ln2 per block, then the final one).
    pub norm_outputs: Vec<Tensor>,
    /// Pre-activation MLP hidden state per block, `[rows, intermediate]`.
    pub mlp_preact: Vec<Tensor>,
    /// Per-head attention output before the projection, `[rows, heads·head_size]`.
    pub attn_heads: Vec<Tensor>,
}

impl DenseModel {
    /// All weights zero except layer-norm gains.
    pub fn zeros(config: DenseConfig) -> Result<Self> {
        config.validate()?;
        let e = config.n_embd;
        Ok(DenseModel {
            wte: Tensor::zeros(&[config.vocab_size, e]),
            wpe: Tensor::zeros(&[config.max_seq, e]),
            blocks: config.layers.iter().map(|d| Block::zeros(e, d)).collect(),
            ln_f: LayerNorm::new(e),
            lm_head: Tensor::zeros(&[config.vocab_size, e]),
            config,
        })
    }

    /// Normal(0, 0.02) weights; residual projections use 0.02/√(2·layers);
    /// biases zero, norm gains one.
    pub fn init(config: DenseConfig, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        m.reinit(seed);
        Ok(m)
    }

    pub fn reinit(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = Normal::new(0.0, INIT_STD).unwrap();
        let resid = Normal::new(0.0, INIT_STD / (2.0 * self.config.layers.len() as f64).sqrt()).unwrap();
        let mut fill = |t: &mut Tensor, d: &Normal<f64>| {
            for v in t.data_mut() {
                *v = d.sample(&mut rng) as f32;
            }
        };
        fill(&mut self.wte, &std);
        fill(&mut self.wpe, &std);
        for b in &mut self.blocks {
            fill(&mut b.wq, &std);
            fill(&mut b.wk, &std);
            fill(&mut b.wv, &std);
            fill(&mut b.wo, &resid);
            fill(&mut b.w_fc, &std);
            fill(&mut b.w_proj, &resid);
            for t in [&mut b.bq, &mut b.bk, &mut b.bv, &mut b.bo, &mut b.b_fc, &mut b.b_proj] {
                t.fill(0.0);
            }
            for ln in [&mut b.ln1, &mut b.ln2] {
                ln.gain.fill(1.0);
                ln.bias.fill(0.0);
            }
        }
        self.ln_f.gain.fill(1.0);
        self.ln_f.bias.fill(0.0);
        fill(&mut self.lm_head, &std);
    }

    /// Parameters in a fixed order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("wte".to_string(), &self.wte), ("wpe".to_string(), &self.wpe)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.tensors().into_iter().map(|(n, t)| (format!("h.{i}.{n}"), t)));
        }
        out.push(("ln_f.gain".into(), &self.ln_f.gain));
        out.push(("ln_f.bias".into(), &self.ln_f.bias));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    /// Same order as [`DenseModel::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.wte, &mut self.wpe];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.ln_f.gain);
        out.push(&mut self.ln_f.bias);
        out.push(&mut self.lm_head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rebuild from named tensors, checking every shape against `config`.
    pub fn from_named(config: DenseConfig, mut tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut m = Self::zeros(config)?;
        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        if tensors.len() != names.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                names.len(),
                tensors.len()
            )));
        }
        for (slot, name) in m.params_mut().into_iter().zip(&names) {
            let pos = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            let (_, t) = tensors.swap_remove(pos);
            if t.shape() != slot.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(m)
    }

    /// Put every parameter on `g` (tracked when `trainable`).
    pub fn bind<'g>(&self, g: &'g Graph<f32>, trainable: bool) -> BoundModel<'g, '_> {
        let vars = self
            .named_params()
            .into_iter()
            .map(|(_, t)| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        BoundModel { model: self, graph: g, vars }
    }

    /// Inference logits `[batch·seq, vocab]` for row-major token ids.
    pub fn logits(&self, ids: &[usize], batch: usize, seq: usize) -> Result<Tensor> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let out = bound.forward(ids, batch, seq, None)?;
        Ok((*out.value()).clone())
    }

    pub fn trace(&self, ids: &[usize], batch: usize, seq: usize) -> Result<(Tensor, ForwardTrace)> {
        let g = Graph::new();
        let bound = self.bind(&g, false);
        let mut trace = ForwardTrace::default();
        let out = bound.forward(ids, batch, seq, Some(&mut trace))?;
        Ok(((*out.value()).clone(), trace))
    }
}

/// A model whose parameters live on a graph.
pub struct BoundModel<'g, 'm> {
    model: &'m DenseModel,
    graph: &'g Graph<f32>,
    vars: Vec<Var<'g, f32>>,
}

const PER_BLOCK: usize = 16;

impl<'g> BoundModel<'g, '_> {
    /// Graph leaves in [`DenseModel::named_params`] order.
    pub fn vars(&self) -> &[Var<'g, f32>] {
        &self.vars
    }

    /// Logits `[batch·seq, vocab]`.
    pub fn forward(
        &self,
        ids: &[usize],
        batch: usize,
        seq: usize,
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Var<'g, f32>> {
        let cfg = &self.model.config;
        if seq > cfg.max_seq {
            return Err(Error::validation("bounds", format!("sequence length {seq} exceeds max_seq {}", cfg.max_seq)));
        }
        if ids.len() != batch * seq || seq == 0 {
            return Err(Error::dim("forward ids", &[ids.len()], &[batch, seq]));
        }
        let g = self.graph;
        let v = &self.vars;
        let positions: Vec<usize> = (0..batch * seq).map(|i| i % seq).collect();
        let mut x = g.embedding(v[0], ids)?.add(g.embedding(v[1], &positions)?)?;
        let mut record = |f: &mut dyn FnMut(&mut ForwardTrace)| {
            if let Some(t) = trace.as_deref_mut() {
                f(t);
            }
        };
        for (i, dims) in cfg.layers.iter().enumerate() {
            let p = &v[2 + i * PER_BLOCK..2 + (i + 1) * PER_BLOCK];
            let x_in = x;
            let a = x.layer_norm(p[0], p[1], LN_EPS)?;
            let q = a.linear(p[2], Some(p[3]))?;
            let k = a.linear(p[4], Some(p[5]))?;
            let vv = a.linear(p[6], Some(p[7]))?;
            let heads = g.causal_attention(
                q,
                k,
                vv,
                AttentionDims {
                    batch,
                    seq,
                    heads: dims.n_head,
                    groups: dims.n_query_groups,
                    head_size: dims.head_size,
                },
            )?;
            x = x.add(heads.linear(p[8], Some(p[9]))?)?;
            let m = x.layer_norm(p[10], p[11], LN_EPS)?;
            let pre = m.linear(p[12], Some(p[13]))?;
            x = x.add(pre.gelu().linear(p[14], Some(p[15]))?)?;
            record(&mut |t| {
                t.block_inputs.push((*x_in.value()).clone());
                t.block_outputs.push((*x.value()).clone());
                t.norm_outputs.push((*a.value()).clone());
                t.norm_outputs.push((*m.value()).clone());
                t.mlp_preact.push((*pre.value()).clone());
                t.attn_heads.push((*heads.value()).clone());
            });
        }
        let base = 2 + cfg.layers.len() * PER_BLOCK;
        let xf = x.layer_norm(v[base], v[base + 1], LN_EPS)?;
        record(&mut |t| t.norm_outputs.push((*xf.value()).clone()));
        xf.linear(v[base + 2], None)
    }
}
