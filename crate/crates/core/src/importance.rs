//! Importance scores for embedding channels, FFN neurons, heads, and blocks.
//!
//! Activation tables come from traced forward passes of the full supernet;
//! weight-magnitude tables only read the weights. Either kind can rank a
//! sub-network through [`score_subnetwork`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint;
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::model::{Supernet, SubnetworkConfig, SupernetConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Activation,
    WeightMagnitude,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTables {
    pub source: Source,
    /// `[layer][neuron]`
    pub ffn: Vec<Vec<f32>>,
    pub emb: Vec<f32>,
    /// `[layer][head]`
    pub heads: Vec<Vec<f32>>,
    pub blocks: Vec<f32>,
}

impl ImportanceTables {
    fn zeros(sup: &SupernetConfig, source: Source) -> Self {
        ImportanceTables {
            source,
            ffn: vec![vec![0.0; sup.intermediate_size]; sup.n_layer],
            emb: vec![0.0; sup.n_embd],
            heads: vec![vec![0.0; sup.n_head]; sup.n_layer],
            blocks: vec![0.0; sup.n_layer],
        }
    }

    pub fn check_shape(&self, sup: &SupernetConfig) -> Result<()> {
        let ok = self.ffn.len() == sup.n_layer
            && self.heads.len() == sup.n_layer
            && self.blocks.len() == sup.n_layer
            && self.emb.len() == sup.n_embd
            && self.ffn.iter().all(|r| r.len() == sup.intermediate_size)
            && self.heads.iter().all(|r| r.len() == sup.n_head);
        if ok {
            Ok(())
        } else {
            Err(Error::validation("shape", "importance tables do not match the supernet"))
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = json!({ "kind": "importance", "source": self.source });
        let mut owned = Vec::new();
        for (l, row) in self.ffn.iter().enumerate() {
            owned.push((format!("imp/ffn/{l}"), vec_tensor(row)));
        }
        owned.push(("imp/emb".to_string(), vec_tensor(&self.emb)));
        for (l, row) in self.heads.iter().enumerate() {
            owned.push((format!("imp/head/{l}"), vec_tensor(row)));
        }
        owned.push(("imp/block".to_string(), vec_tensor(&self.blocks)));
        let refs: Vec<(String, &Tensor)> = owned.iter().map(|(n, t)| (n.clone(), t)).collect();
        checkpoint::write_archive(path, &header, &refs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let a = checkpoint::read_archive(path)?;
        if a.kind() != Some("importance") {
            return Err(Error::Format("not an importance archive".into()));
        }
        let source: Source = serde_json::from_value(a.header["source"].clone())
            .map_err(|e| Error::Format(format!("importance source: {e}")))?;
        let get = |name: &str| {
            a.get(name)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::Format(format!("missing {name}")))
        };
        let mut ffn = Vec::new();
        while let Some(t) = a.get(&format!("imp/ffn/{}", ffn.len())) {
            ffn.push(t.data().to_vec());
        }
        let heads = (0..ffn.len())
            .map(|l| get(&format!("imp/head/{l}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImportanceTables {
            source,
            ffn,
            emb: get("imp/emb")?,
            heads,
            blocks: get("imp/block")?,
        })
    }
}

fn vec_tensor(v: &[f32]) -> Tensor {
    Tensor::new(&[v.len()], v.to_vec()).expect("non-empty table")
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Column means of `|x|` over the rows of a `[rows, width]` tensor.
fn mean_abs_cols(x: &Tensor) -> Vec<f64> {
    let w = x.last_dim();
    let mut acc = vec![0.0f64; w];
    for row in x.data().chunks(w) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v.abs() as f64;
        }
    }
    let n = x.rows() as f64;
    acc.iter().map(|a| a / n).collect()
}

/// Activation importance from forward passes of the full supernet over
/// `batches`.
pub fn compute_tables(model: &Supernet, batches: &[Batch]) -> Result<ImportanceTables> {
    let sup = model.config();
    if batches.is_empty() {
        return Err(Error::Parameter("importance needs at least one batch".into()));
    }
    let l_n = sup.n_layer;
    let hs = sup.head_size;
    let mut ffn = vec![vec![0.0f64; sup.intermediate_size]; l_n];
    let mut emb = vec![0.0f64; sup.n_embd];
    let mut heads = vec![vec![0.0f64; sup.n_head]; l_n];
    let mut blocks = vec![0.0f64; l_n];
    for b in batches {
        let (_, tr) = model.weights().trace(&b.inputs, b.batch, b.seq_len)?;
        for l in 0..l_n {
            for (a, v) in ffn[l].iter_mut().zip(mean_abs_cols(&tr.mlp_preact[l])) {
                *a += v;
            }
            let att = &tr.attn_heads[l];
            let rows = att.rows();
            for (h, a) in heads[l].iter_mut().enumerate() {
                let mut s = 0.0;
                for row in att.data().chunks(att.last_dim()) {
                    let seg = &row[h * hs..(h + 1) * hs];
                    s += seg.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                }
                *a += s / rows as f64;
            }
            let (xi, xo) = (&tr.block_inputs[l], &tr.block_outputs[l]);
            let w = xi.last_dim();
            let cos: f64 = xi
                .data()
                .chunks(w)
                .zip(xo.data().chunks(w))
                .map(|(a, b)| cosine(a, b))
                .sum::<f64>()
                / xi.rows() as f64;
            blocks[l] += 1.0 - cos;
        }
        let n_norms = tr.norm_outputs.len() as f64;
        for norm in &tr.norm_outputs {
            for (a, v) in emb.iter_mut().zip(mean_abs_cols(norm)) {
                *a += v / n_norms;
            }
        }
    }
    let nb = batches.len() as f64;
    let fin = |v: Vec<f64>| v.into_iter().map(|x| (x / nb) as f32).collect::<Vec<f32>>();
    Ok(ImportanceTables {
        source: Source::Activation,
        ffn: ffn.into_iter().map(fin).collect(),
        emb: fin(emb),
        heads: heads.into_iter().map(fin).collect(),
        blocks: fin(blocks),
    })
}

struct MeanAbs {
    sum: f64,
    n: usize,
}

impl MeanAbs {
    fn new() -> Self {
        MeanAbs { sum: 0.0, n: 0 }
    }

    fn add(&mut self, xs: impl IntoIterator<Item = f32>) {
        for x in xs {
            self.sum += x.abs() as f64;
            self.n += 1;
        }
    }

    fn mean(&self) -> f32 {
        if self.n == 0 {
            0.0
        } else {
            (self.sum / self.n as f64) as f32
        }
    }
}

fn row(t: &Tensor, r: usize) -> impl Iterator<Item = f32> + '_ {
    let w = t.last_dim();
    t.data()[r * w..(r + 1) * w].iter().copied()
}

fn col(t: &Tensor, c: usize) -> impl Iterator<Item = f32> + '_ {
    let w = t.last_dim();
    t.data().iter().skip(c).step_by(w).copied()
}

/// Mean absolute weight owned by each unit.
///
/// FFN neuron: its `w_fc` row and `w_proj` column. Head: its query rows,
/// its group's key and value rows, and its output-projection columns.
/// Embedding channel: its token-embedding column and every norm gain at
/// that channel. Block: every tensor in the block.
pub fn weight_magnitude_tables(model: &Supernet) -> ImportanceTables {
    let sup = model.config();
    let w = model.weights();
    let hs = sup.head_size;
    let per = sup.heads_per_group();
    let mut t = ImportanceTables::zeros(sup, Source::WeightMagnitude);
    for (l, b) in w.blocks.iter().enumerate() {
        for i in 0..sup.intermediate_size {
            let mut m = MeanAbs::new();
            m.add(row(&b.w_fc, i));
            m.add(col(&b.w_proj, i));
            t.ffn[l][i] = m.mean();
        }
        for h in 0..sup.n_head {
            let g = h / per;
            let mut m = MeanAbs::new();
            for d in 0..hs {
                m.add(row(&b.wq, h * hs + d));
                m.add(row(&b.wk, g * hs + d));
                m.add(row(&b.wv, g * hs + d));
                m.add(col(&b.wo, h * hs + d));
            }
            t.heads[l][h] = m.mean();
        }
        let mut m = MeanAbs::new();
        for (_, tensor) in b.tensors() {
            m.add(tensor.data().iter().copied());
        }
        t.blocks[l] = m.mean();
    }
    for c in 0..sup.n_embd {
        let mut m = MeanAbs::new();
        m.add(col(&w.wte, c));
        for b in &w.blocks {
            m.add([b.ln1.gain.data()[c], b.ln2.gain.data()[c]]);
        }
        m.add([w.ln_f.gain.data()[c]]);
        t.emb[c] = m.mean();
    }
    t
}

fn softmax(xs: &[f32]) -> Vec<f64> {
    let max = xs.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let e: Vec<f64> = xs.iter().map(|&x| (x as f64 - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Sum of softmax-normalized scores of the units `cfg` keeps, where each
/// group (per-layer neurons, per-layer heads, embedding channels, blocks) is
/// normalized separately. Higher is better.
pub fn score_subnetwork(tables: &ImportanceTables, sup: &SupernetConfig, cfg: &SubnetworkConfig) -> Result<f64> {
    tables.check_shape(sup)?;
    let r = cfg.resolve(sup)?;
    let emb = softmax(&tables.emb);
    let blocks = softmax(&tables.blocks);
    let mut score: f64 = r.embd.iter().map(|&c| emb[c]).sum();
    for rl in &r.layers {
        score += blocks[rl.layer];
        let ffn = softmax(&tables.ffn[rl.layer]);
        score += rl.neurons.iter().map(|&i| ffn[i]).sum::<f64>();
        let heads = softmax(&tables.heads[rl.layer]);
        score += rl.heads.iter().map(|&h| heads[h]).sum::<f64>();
    }
    Ok(score)
}
