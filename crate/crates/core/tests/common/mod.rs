//! Shared fixtures and straight-line reference implementations.
#![allow(dead_code)]

pub mod gradcheck;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snf_core::data::Batch;
use snf_core::model::{DenseModel, SupernetConfig};
use snf_core::Tensor;

/// The toy supernet used across equivalence tests: grouped-query, two
/// heads per group.
pub fn toy() -> SupernetConfig {
    SupernetConfig {
        n_layer: 4,
        n_embd: 32,
        n_head: 4,
        head_size: 8,
        intermediate_size: 64,
        n_query_groups: 2,
        vocab_size: 256,
        max_seq: 16,
    }
}

/// Small enough to enumerate every coarse config.
pub fn tiny() -> SupernetConfig {
    SupernetConfig {
        n_layer: 2,
        n_embd: 3,
        n_head: 2,
        head_size: 2,
        intermediate_size: 4,
        n_query_groups: 2,
        vocab_size: 16,
        max_seq: 8,
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, vocab: usize, batch: usize, seq: usize) -> Batch {
    let inputs: Vec<usize> = (0..batch * seq).map(|_| rng.random_range(0..vocab)).collect();
    let targets: Vec<usize> = (0..batch * seq).map(|_| rng.random_range(0..vocab)).collect();
    Batch {
        batch,
        seq_len: seq,
        inputs,
        targets,
        offsets: vec![0; batch],
    }
}

pub fn random_batches(seed: u64, n: usize, vocab: usize, batch: usize, seq: usize) -> Vec<Batch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_batch(&mut rng, vocab, batch, seq)).collect()
}

/// Overwrite every weight with `N(0, std)`-ish uniform noise so that biases
/// and norm parameters are exercised too.
pub fn scramble(model: &mut DenseModel, seed: u64, scale: f32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in model.params_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-scale..scale);
        }
    }
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max)
}

/// Activations of the reference forward, one row per token.
#[derive(Debug, Default)]
pub struct RefTrace {
    pub logits: Vec<Vec<f64>>,
    pub block_inputs: Vec<Vec<Vec<f64>>>,
    pub block_outputs: Vec<Vec<Vec<f64>>>,
    /// ln1 and ln2 of every block, then the final norm.
    pub norms: Vec<Vec<Vec<f64>>>,
    pub mlp_preact: Vec<Vec<Vec<f64>>>,
    pub attn_heads: Vec<Vec<Vec<f64>>>,
}

fn w(t: &Tensor, r: usize, c: usize) -> f64 {
    t.data()[r * t.shape()[1] + c] as f64
}

fn v(t: &Tensor, i: usize) -> f64 {
    t.data()[i] as f64
}

fn layer_norm(x: &[f64], gain: &Tensor, bias: &Tensor) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    (0..x.len()).map(|i| (x[i] - mean) * inv * v(gain, i) + v(bias, i)).collect()
}

fn linear(x: &[f64], weight: &Tensor, bias: Option<&Tensor>) -> Vec<f64> {
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    assert_eq!(x.len(), inp);
    (0..out)
        .map(|o| {
            let mut s = bias.map_or(0.0, |b| v(b, o));
            for i in 0..inp {
                s += w(weight, o, i) * x[i];
            }
            s
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// Scalar-loop forward of a dense model over one batch, in f64.
pub fn reference_forward(m: &DenseModel, ids: &[usize], batch: usize, seq: usize) -> RefTrace {
    let cfg = &m.config;
    let e = cfg.n_embd;
    let mut tr = RefTrace::default();
    let n_layers = cfg.layers.len();
    tr.block_inputs = vec![Vec::new(); n_layers];
    tr.block_outputs = vec![Vec::new(); n_layers];
    tr.mlp_preact = vec![Vec::new(); n_layers];
    tr.attn_heads = vec![Vec::new(); n_layers];
    tr.norms = vec![Vec::new(); 2 * n_layers + 1];
    for b in 0..batch {
        let mut x: Vec<Vec<f64>> = (0..seq)
            .map(|t| (0..e).map(|c| w(&m.wte, ids[b * seq + t], c) + w(&m.wpe, t, c)).collect())
            .collect();
        for (l, (dims, blk)) in cfg.layers.iter().zip(&m.blocks).enumerate() {
            tr.block_inputs[l].extend(x.iter().cloned());
            let hs = dims.head_size;
            let per = dims.n_head / dims.n_query_groups;
            let a: Vec<Vec<f64>> = x.iter().map(|r| layer_norm(r, &blk.ln1.gain, &blk.ln1.bias)).collect();
            tr.norms[2 * l].extend(a.iter().cloned());
            let q: Vec<Vec<f64>> = a.iter().map(|r| linear(r, &blk.wq, Some(&blk.bq))).collect();
            let k: Vec<Vec<f64>> = a.iter().map(|r| linear(r, &blk.wk, Some(&blk.bk))).collect();
            let vv: Vec<Vec<f64>> = a.iter().map(|r| linear(r, &blk.wv, Some(&blk.bv))).collect();
            let mut heads = vec![vec![0.0; dims.n_head * hs]; seq];
            for h in 0..dims.n_head {
                let g = h / per;
                for t in 0..seq {
                    let scores: Vec<f64> = (0..=t)
                        .map(|s| {
                            (0..hs).map(|d| q[t][h * hs + d] * k[s][g * hs + d]).sum::<f64>() / (hs as f64).sqrt()
                        })
                        .collect();
                    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let ex: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = ex.iter().sum();
                    for d in 0..hs {
                        heads[t][h * hs + d] = (0..=t).map(|s| ex[s] / z * vv[s][g * hs + d]).sum();
                    }
                }
            }
            tr.attn_heads[l].extend(heads.iter().cloned());
            for t in 0..seq {
                let o = linear(&heads[t], &blk.wo, Some(&blk.bo));
                for c in 0..e {
                    x[t][c] += o[c];
                }
            }
            for t in 0..seq {
                let mm = layer_norm(&x[t], &blk.ln2.gain, &blk.ln2.bias);
                let pre = linear(&mm, &blk.w_fc, Some(&blk.b_fc));
                let act: Vec<f64> = pre.iter().map(|&p| gelu(p)).collect();
                let o = linear(&act, &blk.w_proj, Some(&blk.b_proj));
                for c in 0..e {
                    x[t][c] += o[c];
                }
                tr.norms[2 * l + 1].push(mm);
                tr.mlp_preact[l].push(pre);
            }
            tr.block_outputs[l].extend(x.iter().cloned());
        }
        for r in &x {
            let f = layer_norm(r, &m.ln_f.gain, &m.ln_f.bias);
            tr.logits.push(linear(&f, &m.lm_head, None));
            tr.norms[2 * n_layers].push(f);
        }
    }
    tr
}
