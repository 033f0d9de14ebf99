//! Architecture descriptions: the supernet, dense models, and sub-networks.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};

/// Maximal dimensions of the teacher transformer.
///
/// `n_query_groups == n_head` is multi-head attention, `1` is multi-query,
/// anything in between is grouped-query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SupernetConfig {
    pub n_layer: usize,
    pub n_embd: usize,
    pub n_head: usize,
    pub head_size: usize,
    pub intermediate_size: usize,
    pub n_query_groups: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
}

impl SupernetConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layer", self.n_layer),
            ("n_embd", self.n_embd),
            ("n_head", self.n_head),
            ("head_size", self.head_size),
            ("intermediate_size", self.intermediate_size),
            ("n_query_groups", self.n_query_groups),
            ("vocab_size", self.vocab_size),
            ("max_seq", self.max_seq),
        ];
        let mut v: Vec<Violation> = dims
            .iter()
            .filter(|(_, d)| *d == 0)
            .map(|(n, _)| Violation::new("bounds", format!("{n} must be >= 1")))
            .collect();
        if self.n_query_groups > 0 && !self.n_head.is_multiple_of(self.n_query_groups) {
            v.push(Violation::new(
                "divisibility",
                format!("n_head {} not divisible by n_query_groups {}", self.n_head, self.n_query_groups),
            ));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    pub fn heads_per_group(&self) -> usize {
        self.n_head / self.n_query_groups
    }

    /// The dense architecture with every dimension at its maximum.
    pub fn dense(&self) -> DenseConfig {
        DenseConfig {
            vocab_size: self.vocab_size,
            max_seq: self.max_seq,
            n_embd: self.n_embd,
            layers: vec![self.full_layer(); self.n_layer],
        }
    }

    fn full_layer(&self) -> LayerDims {
        LayerDims {
            n_head: self.n_head,
            n_query_groups: self.n_query_groups,
            head_size: self.head_size,
            intermediate_size: self.intermediate_size,
        }
    }
}

/// Per-layer widths of a dense model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerDims {
    pub n_head: usize,
    pub n_query_groups: usize,
    pub head_size: usize,
    pub intermediate_size: usize,
}

/// Architecture of a standalone (possibly layer-wise heterogeneous) model.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DenseConfig {
    pub vocab_size: usize,
    pub max_seq: usize,
    pub n_embd: usize,
    pub layers: Vec<LayerDims>,
}

impl DenseConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.vocab_size == 0 || self.max_seq == 0 || self.n_embd == 0 || self.layers.is_empty() {
            v.push(Violation::new("bounds", "vocab, max_seq, n_embd and layer count must be >= 1"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.n_head == 0 || l.n_query_groups == 0 || l.head_size == 0 || l.intermediate_size == 0 {
                v.push(Violation::new("bounds", format!("layer {i} has a zero dimension")));
            } else if l.n_head % l.n_query_groups != 0 {
                v.push(Violation::new("divisibility", format!("layer {i}: heads % groups != 0")));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    /// Exact trainable parameter count (untied output head).
    pub fn param_count(&self) -> usize {
        let e = self.n_embd;
        let embeddings = self.vocab_size * e + self.max_seq * e;
        let blocks: usize = self
            .layers
            .iter()
            .map(|l| {
                let qw = l.n_head * l.head_size;
                let kw = l.n_query_groups * l.head_size;
                2 * e                        // ln1
                    + (qw + 2 * kw) * (e + 1) // q, k, v with bias
                    + e * qw + e              // output projection
                    + 2 * e                   // ln2
                    + l.intermediate_size * (e + 1)
                    + e * l.intermediate_size + e
            })
            .sum();
        embeddings + blocks + 2 * e + self.vocab_size * e
    }

    /// If every layer is identical, the supernet this config describes.
    pub fn as_supernet(&self) -> Option<SupernetConfig> {
        let first = *self.layers.first()?;
        if self.layers.iter().any(|l| *l != first) {
            return None;
        }
        Some(SupernetConfig {
            n_layer: self.layers.len(),
            n_embd: self.n_embd,
            n_head: first.n_head,
            head_size: first.head_size,
            intermediate_size: first.intermediate_size,
            n_query_groups: first.n_query_groups,
            vocab_size: self.vocab_size,
            max_seq: self.max_seq,
        })
    }
}

/// One layer's choices inside a [`SubnetworkConfig`].
///
/// Index sets are optional; a missing set means "the first n entries"
/// (coarse selection). Heads are listed group-major: head `j` belongs to
/// `query_group_indices[j / (heads / query_groups)]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerChoice {
    pub heads: usize,
    pub head_size: usize,
    pub intermediate_size: usize,
    pub query_groups: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_size_indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intermediate_indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_group_indices: Option<Vec<usize>>,
}

impl LayerChoice {
    pub fn coarse(heads: usize, head_size: usize, intermediate_size: usize, query_groups: usize) -> Self {
        LayerChoice {
            heads,
            head_size,
            intermediate_size,
            query_groups,
            head_indices: None,
            head_size_indices: None,
            intermediate_indices: None,
            query_group_indices: None,
        }
    }

    pub fn has_indices(&self) -> bool {
        self.head_indices.is_some()
            || self.head_size_indices.is_some()
            || self.intermediate_indices.is_some()
            || self.query_group_indices.is_some()
    }

    pub fn has_all_indices(&self) -> bool {
        self.head_indices.is_some()
            && self.head_size_indices.is_some()
            && self.intermediate_indices.is_some()
            && self.query_group_indices.is_some()
    }

    pub fn dims(&self) -> LayerDims {
        LayerDims {
            n_head: self.heads,
            n_query_groups: self.query_groups,
            head_size: self.head_size,
            intermediate_size: self.intermediate_size,
        }
    }

    pub fn strip_indices(&mut self) {
        self.head_indices = None;
        self.head_size_indices = None;
        self.intermediate_indices = None;
        self.query_group_indices = None;
    }
}

/// A point in a search space: which structured components are active.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubnetworkConfig {
    pub embed_dim: usize,
    pub layers: Vec<LayerChoice>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embd_indices: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer_indices: Option<Vec<usize>>,
}

/// A sub-network with every index set spelled out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedSubnet {
    pub embd: Vec<usize>,
    pub layers: Vec<ResolvedLayer>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedLayer {
    /// Supernet layer this sub-network layer comes from.
    pub layer: usize,
    /// Supernet query-head indices, group-major.
    pub heads: Vec<usize>,
    pub groups: Vec<usize>,
    pub head_dims: Vec<usize>,
    pub neurons: Vec<usize>,
}

/// The head set a coarse layer selects: the first `heads / groups` heads of
/// each of the first `groups` key/value groups.
pub(crate) fn coarse_heads(sup: &SupernetConfig, heads: usize, groups: usize) -> Vec<usize> {
    let per = heads / groups;
    let sup_per = sup.heads_per_group();
    (0..heads).map(|j| (j / per) * sup_per + j % per).collect()
}

fn check_index_set(
    out: &mut Vec<Violation>,
    what: &str,
    set: &Option<Vec<usize>>,
    expected_len: usize,
    bound: usize,
) {
    let Some(set) = set else { return };
    if set.len() != expected_len {
        out.push(Violation::new(
            "index_set",
            format!("{what}: {} indices for dimension {expected_len}", set.len()),
        ));
    }
    if let Some(bad) = set.iter().find(|&&i| i >= bound) {
        out.push(Violation::new("index_set", format!("{what}: index {bad} >= {bound}")));
    }
    let uniq: HashSet<_> = set.iter().collect();
    if uniq.len() != set.len() {
        out.push(Violation::new("index_set", format!("{what}: duplicate indices")));
    }
}

impl SubnetworkConfig {
    /// Every component active, no index sets.
    pub fn full(sup: &SupernetConfig) -> Self {
        SubnetworkConfig {
            embed_dim: sup.n_embd,
            layers: vec![
                LayerChoice::coarse(sup.n_head, sup.head_size, sup.intermediate_size, sup.n_query_groups);
                sup.n_layer
            ],
            embd_indices: None,
            layer_indices: None,
        }
    }

    /// A coarse config replicating one layer choice across `n_layers`.
    pub fn uniform(n_layers: usize, embed_dim: usize, layer: LayerChoice) -> Self {
        SubnetworkConfig {
            embed_dim,
            layers: vec![layer; n_layers],
            embd_indices: None,
            layer_indices: None,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn has_indices(&self) -> bool {
        self.embd_indices.is_some() || self.layer_indices.is_some() || self.layers.iter().any(LayerChoice::has_indices)
    }

    pub fn has_all_indices(&self) -> bool {
        self.embd_indices.is_some() && self.layer_indices.is_some() && self.layers.iter().all(LayerChoice::has_all_indices)
    }

    pub fn is_uniform(&self) -> bool {
        let Some(first) = self.layers.first() else { return true };
        self.layers.iter().all(|l| {
            l.heads == first.heads
                && l.head_size == first.head_size
                && l.intermediate_size == first.intermediate_size
                && l.query_groups == first.query_groups
        })
    }

    /// Canonical string form, used as an identity key.
    pub fn key(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Bounds, divisibility, and index-set violations against `sup`.
    pub fn violations(&self, sup: &SupernetConfig) -> Vec<Violation> {
        let mut v = Vec::new();
        let l = self.layers.len();
        if l == 0 || l > sup.n_layer {
            v.push(Violation::new("bounds", format!("layers {l} not in 1..={}", sup.n_layer)));
        }
        if self.embed_dim == 0 || self.embed_dim > sup.n_embd {
            v.push(Violation::new("bounds", format!("embed_dim {} not in 1..={}", self.embed_dim, sup.n_embd)));
        }
        check_index_set(&mut v, "embd_indices", &self.embd_indices, self.embed_dim, sup.n_embd);
        check_index_set(&mut v, "layer_indices", &self.layer_indices, l, sup.n_layer);
        if let Some(li) = &self.layer_indices {
            if li.windows(2).any(|w| w[0] >= w[1]) {
                v.push(Violation::new("index_set", "layer_indices must be strictly increasing"));
            }
        }
        for (i, lc) in self.layers.iter().enumerate() {
            let bounds = [
                ("heads", lc.heads, sup.n_head),
                ("head_size", lc.head_size, sup.head_size),
                ("intermediate_size", lc.intermediate_size, sup.intermediate_size),
                ("query_groups", lc.query_groups, sup.n_query_groups),
            ];
            let mut ok = true;
            for (name, val, max) in bounds {
                if val == 0 || val > max {
                    v.push(Violation::new("bounds", format!("layer {i}: {name} {val} not in 1..={max}")));
                    ok = false;
                }
            }
            if !ok {
                continue;
            }
            if lc.heads % lc.query_groups != 0 {
                v.push(Violation::new(
                    "divisibility",
                    format!("layer {i}: heads {} not divisible by query_groups {}", lc.heads, lc.query_groups),
                ));
                continue;
            }
            if lc.heads / lc.query_groups > sup.heads_per_group() {
                v.push(Violation::new(
                    "divisibility",
                    format!(
                        "layer {i}: {} heads per group exceeds the supernet's {}",
                        lc.heads / lc.query_groups,
                        sup.heads_per_group()
                    ),
                ));
                continue;
            }
            check_index_set(&mut v, &format!("layer {i} head_indices"), &lc.head_indices, lc.heads, sup.n_head);
            check_index_set(&mut v, &format!("layer {i} head_size_indices"), &lc.head_size_indices, lc.head_size, sup.head_size);
            check_index_set(
                &mut v,
                &format!("layer {i} intermediate_indices"),
                &lc.intermediate_indices,
                lc.intermediate_size,
                sup.intermediate_size,
            );
            check_index_set(
                &mut v,
                &format!("layer {i} query_group_indices"),
                &lc.query_group_indices,
                lc.query_groups,
                sup.n_query_groups,
            );
            // each listed head must sit in the group it is paired with
            let per = lc.heads / lc.query_groups;
            let groups = lc.query_group_indices.clone().unwrap_or_else(|| (0..lc.query_groups).collect());
            if let Some(hi) = &lc.head_indices {
                if hi.len() == lc.heads && groups.len() == lc.query_groups {
                    for (j, &h) in hi.iter().enumerate() {
                        if h / sup.heads_per_group() != groups[j / per] {
                            v.push(Violation::new(
                                "index_set",
                                format!("layer {i}: head {h} is not in key/value group {}", groups[j / per]),
                            ));
                            break;
                        }
                    }
                }
            } else if lc.query_group_indices.is_some() {
                v.push(Violation::new(
                    "index_set",
                    format!("layer {i}: query_group_indices given without head_indices"),
                ));
            }
        }
        v
    }

    pub fn validate(&self, sup: &SupernetConfig) -> Result<()> {
        let v = self.violations(sup);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    /// Spell out every index set (prefixes where none were given).
    pub fn resolve(&self, sup: &SupernetConfig) -> Result<ResolvedSubnet> {
        self.validate(sup)?;
        let embd = self.embd_indices.clone().unwrap_or_else(|| (0..self.embed_dim).collect());
        let layer_ids = self.layer_indices.clone().unwrap_or_else(|| (0..self.layers.len()).collect());
        let layers = self
            .layers
            .iter()
            .zip(layer_ids)
            .map(|(lc, layer)| ResolvedLayer {
                layer,
                heads: match (&lc.head_indices, &lc.query_group_indices) {
                    (Some(h), _) => h.clone(),
                    (None, _) => coarse_heads(sup, lc.heads, lc.query_groups),
                },
                groups: lc.query_group_indices.clone().unwrap_or_else(|| (0..lc.query_groups).collect()),
                head_dims: lc.head_size_indices.clone().unwrap_or_else(|| (0..lc.head_size).collect()),
                neurons: lc
                    .intermediate_indices
                    .clone()
                    .unwrap_or_else(|| (0..lc.intermediate_size).collect()),
            })
            .collect();
        Ok(ResolvedSubnet { embd, layers })
    }

    /// The equivalent config with explicit (prefix) index sets everywhere.
    pub fn to_fine_grained(&self, sup: &SupernetConfig) -> Result<Self> {
        let r = self.resolve(sup)?;
        let mut out = self.clone();
        out.embd_indices = Some(r.embd);
        out.layer_indices = Some(r.layers.iter().map(|l| l.layer).collect());
        for (lc, rl) in out.layers.iter_mut().zip(r.layers) {
            lc.head_indices = Some(rl.heads);
            lc.query_group_indices = Some(rl.groups);
            lc.head_size_indices = Some(rl.head_dims);
            lc.intermediate_indices = Some(rl.neurons);
        }
        Ok(out)
    }

    /// Architecture of the dense model this config extracts to.
    pub fn dense_config(&self, sup: &SupernetConfig) -> DenseConfig {
        DenseConfig {
            vocab_size: sup.vocab_size,
            max_seq: sup.max_seq,
            n_embd: self.embed_dim,
            layers: self.layers.iter().map(LayerChoice::dims).collect(),
        }
    }
}

/// Exact parameter count of the model [`SubnetworkConfig`] extracts to.
pub fn count_params(sup: &SupernetConfig, cfg: &SubnetworkConfig) -> Result<usize> {
    cfg.validate(sup)?;
    Ok(cfg.dense_config(sup).param_count())
}
