//! The four search spaces: coarse or fine-grained, uniform or layer-wise.

use std::collections::HashSet;

use num_bigint::BigUint;
use num_traits::One;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Violation};
use crate::model::{LayerChoice, SubnetworkConfig, SupernetConfig};

/// Largest cardinality, in bits, that [`SearchSpace::cardinality`] will
/// materialize exactly.
pub const MAX_EXACT_BITS: f64 = (1u64 << 24) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Every component is a prefix of the supernet's.
    Coarse,
    /// Components are arbitrary index subsets.
    FineGrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layering {
    Uniform,
    LayerWise,
}

/// Allowed values per dimension, in the order they were listed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceSets {
    pub layers: Vec<usize>,
    pub embed_dim: Vec<usize>,
    pub heads: Vec<usize>,
    pub head_size: Vec<usize>,
    pub intermediate_size: Vec<usize>,
    pub query_groups: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub granularity: Granularity,
    pub layering: Layering,
    pub choices: ChoiceSets,
}

fn all_up_to(n: usize) -> Vec<usize> {
    (1..=n).collect()
}

/// `k` distinct values drawn uniformly from `pool`, in draw order.
fn draw_distinct<R: Rng + ?Sized>(pool: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    pool.choose_multiple(rng, k).copied().collect()
}

/// Extend `current` with fresh distinct values from `0..bound` or truncate it
/// to `target` entries.
pub(crate) fn regrow<R: Rng + ?Sized>(current: &[usize], target: usize, bound: usize, rng: &mut R) -> Vec<usize> {
    if target <= current.len() {
        return current[..target].to_vec();
    }
    let used: HashSet<usize> = current.iter().copied().collect();
    let pool: Vec<usize> = (0..bound).filter(|i| !used.contains(i)).collect();
    let mut out = current.to_vec();
    out.extend(draw_distinct(&pool, target - current.len(), rng));
    out
}

impl SearchSpace {
    /// A space whose choice sets span every value from 1 to the maximum.
    pub fn full_range(sup: &SupernetConfig, granularity: Granularity, layering: Layering) -> Self {
        SearchSpace {
            granularity,
            layering,
            choices: ChoiceSets {
                layers: all_up_to(sup.n_layer),
                embed_dim: all_up_to(sup.n_embd),
                heads: all_up_to(sup.n_head),
                head_size: all_up_to(sup.head_size),
                intermediate_size: all_up_to(sup.intermediate_size),
                query_groups: all_up_to(sup.n_query_groups),
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("search space: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("search space serializes")
    }

    /// Checks the space itself against the supernet's bounds.
    pub fn check(&self, sup: &SupernetConfig) -> Result<()> {
        let c = &self.choices;
        let sets = [
            ("layers", &c.layers, sup.n_layer),
            ("embed_dim", &c.embed_dim, sup.n_embd),
            ("heads", &c.heads, sup.n_head),
            ("head_size", &c.head_size, sup.head_size),
            ("intermediate_size", &c.intermediate_size, sup.intermediate_size),
            ("query_groups", &c.query_groups, sup.n_query_groups),
        ];
        let mut v = Vec::new();
        for (name, set, max) in sets {
            if set.is_empty() {
                v.push(Violation::new("membership", format!("{name}: empty choice set")));
            }
            if let Some(bad) = set.iter().find(|&&x| x == 0 || x > max) {
                v.push(Violation::new("bounds", format!("{name}: choice {bad} not in 1..={max}")));
            }
            if set.iter().collect::<HashSet<_>>().len() != set.len() {
                v.push(Violation::new("membership", format!("{name}: duplicate choices")));
            }
        }
        if v.is_empty() && self.head_pairs(sup).is_empty() {
            v.push(Violation::new("divisibility", "no (heads, query_groups) pair is valid"));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    fn pair_ok(sup: &SupernetConfig, h: usize, q: usize) -> bool {
        q >= 1 && q <= sup.n_query_groups && h.is_multiple_of(q) && h / q <= sup.heads_per_group()
    }

    /// Valid `(heads, query_groups)` combinations, heads-major.
    pub fn head_pairs(&self, sup: &SupernetConfig) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for &h in &self.choices.heads {
            for &q in &self.choices.query_groups {
                if Self::pair_ok(sup, h, q) {
                    out.push((h, q));
                }
            }
        }
        out
    }

    /// Query-group choices compatible with `heads`.
    pub fn groups_for(&self, sup: &SupernetConfig, heads: usize) -> Vec<usize> {
        self.choices
            .query_groups
            .iter()
            .copied()
            .filter(|&q| Self::pair_ok(sup, heads, q))
            .collect()
    }

    /// Head choices that admit at least one query-group choice.
    pub fn feasible_heads(&self, sup: &SupernetConfig) -> Vec<usize> {
        self.choices
            .heads
            .iter()
            .copied()
            .filter(|&h| !self.groups_for(sup, h).is_empty())
            .collect()
    }

    pub(crate) fn sample_head_pair<R: Rng + ?Sized>(&self, sup: &SupernetConfig, rng: &mut R) -> (usize, usize) {
        let h = *self.feasible_heads(sup).choose(rng).expect("space was checked");
        let q = *self.groups_for(sup, h).choose(rng).expect("feasible head");
        (h, q)
    }

    /// Fresh head and group index sets for `heads` over `groups`.
    pub(crate) fn sample_head_indices<R: Rng + ?Sized>(
        sup: &SupernetConfig,
        heads: usize,
        groups: usize,
        rng: &mut R,
    ) -> (Vec<usize>, Vec<usize>) {
        Self::reshape_heads(sup, &[], &[], heads, groups, rng)
    }

    /// Re-fit group-major head indices to a new `(heads, groups)` shape,
    /// keeping existing groups and heads as prefixes where possible.
    pub(crate) fn reshape_heads<R: Rng + ?Sized>(
        sup: &SupernetConfig,
        head_idx: &[usize],
        group_idx: &[usize],
        heads: usize,
        groups: usize,
        rng: &mut R,
    ) -> (Vec<usize>, Vec<usize>) {
        let sup_per = sup.heads_per_group();
        let old_per = if group_idx.is_empty() { 0 } else { head_idx.len() / group_idx.len() };
        let per = heads / groups;
        let new_groups = regrow(group_idx, groups, sup.n_query_groups, rng);
        let mut new_heads = Vec::with_capacity(heads);
        for (gi, &g) in new_groups.iter().enumerate() {
            let kept: Vec<usize> = if gi < group_idx.len() {
                head_idx[gi * old_per..(gi + 1) * old_per].iter().map(|h| h - g * sup_per).collect()
            } else {
                Vec::new()
            };
            new_heads.extend(regrow(&kept, per, sup_per, rng).into_iter().map(|h| g * sup_per + h));
        }
        (new_heads, new_groups)
    }

    /// One freshly sampled layer choice, with index sets when fine-grained.
    pub(crate) fn sample_layer<R: Rng + ?Sized>(&self, sup: &SupernetConfig, rng: &mut R) -> LayerChoice {
        let (h, q) = self.sample_head_pair(sup, rng);
        let hs = *self.choices.head_size.choose(rng).expect("space was checked");
        let d = *self.choices.intermediate_size.choose(rng).expect("space was checked");
        let mut lc = LayerChoice::coarse(h, hs, d, q);
        if self.granularity == Granularity::FineGrained {
            self.fill_layer_indices(sup, &mut lc, rng);
        }
        lc
    }

    pub(crate) fn fill_layer_indices<R: Rng + ?Sized>(&self, sup: &SupernetConfig, lc: &mut LayerChoice, rng: &mut R) {
        let (hi, gi) = Self::sample_head_indices(sup, lc.heads, lc.query_groups, rng);
        lc.head_indices = Some(hi);
        lc.query_group_indices = Some(gi);
        lc.head_size_indices = Some(regrow(&[], lc.head_size, sup.head_size, rng));
        lc.intermediate_indices = Some(regrow(&[], lc.intermediate_size, sup.intermediate_size, rng));
    }

    /// Sorted distinct supernet layers for a fine-grained config.
    pub(crate) fn sample_layer_indices<R: Rng + ?Sized>(sup: &SupernetConfig, n: usize, rng: &mut R) -> Vec<usize> {
        let mut li = regrow(&[], n, sup.n_layer, rng);
        li.sort_unstable();
        li
    }

    /// Draw a configuration valid for this space.
    pub fn sample<R: Rng + ?Sized>(&self, sup: &SupernetConfig, rng: &mut R) -> SubnetworkConfig {
        let l = *self.choices.layers.choose(rng).expect("space was checked");
        let e = *self.choices.embed_dim.choose(rng).expect("space was checked");
        let layers = match self.layering {
            Layering::Uniform => {
                let first = self.sample_layer(sup, rng);
                let mut layers = vec![first.clone()];
                for _ in 1..l {
                    let mut lc = first.clone();
                    if self.granularity == Granularity::FineGrained {
                        self.fill_layer_indices(sup, &mut lc, rng);
                    }
                    layers.push(lc);
                }
                layers
            }
            Layering::LayerWise => (0..l).map(|_| self.sample_layer(sup, rng)).collect(),
        };
        let mut cfg = SubnetworkConfig {
            embed_dim: e,
            layers,
            embd_indices: None,
            layer_indices: None,
        };
        if self.granularity == Granularity::FineGrained {
            cfg.embd_indices = Some(regrow(&[], e, sup.n_embd, rng));
            cfg.layer_indices = Some(Self::sample_layer_indices(sup, l, rng));
        }
        cfg
    }

    /// Everything wrong with `cfg` as a member of this space.
    pub fn violations(&self, sup: &SupernetConfig, cfg: &SubnetworkConfig) -> Vec<Violation> {
        let mut v = cfg.violations(sup);
        let c = &self.choices;
        let member = |v: &mut Vec<Violation>, name: &str, x: usize, set: &[usize]| {
            if !set.contains(&x) {
                v.push(Violation::new("membership", format!("{name} {x} not in {set:?}")));
            }
        };
        member(&mut v, "layers", cfg.n_layers(), &c.layers);
        member(&mut v, "embed_dim", cfg.embed_dim, &c.embed_dim);
        for (i, lc) in cfg.layers.iter().enumerate() {
            member(&mut v, &format!("layer {i} heads"), lc.heads, &c.heads);
            member(&mut v, &format!("layer {i} head_size"), lc.head_size, &c.head_size);
            member(&mut v, &format!("layer {i} intermediate_size"), lc.intermediate_size, &c.intermediate_size);
            member(&mut v, &format!("layer {i} query_groups"), lc.query_groups, &c.query_groups);
        }
        if self.layering == Layering::Uniform && !cfg.is_uniform() {
            v.push(Violation::new("uniformity", "layers differ in a uniform space"));
        }
        match self.granularity {
            Granularity::Coarse if cfg.has_indices() => {
                v.push(Violation::new("granularity", "coarse configs carry no index sets"));
            }
            Granularity::FineGrained if !cfg.has_all_indices() => {
                v.push(Violation::new("granularity", "fine-grained configs list every index set"));
            }
            _ => {}
        }
        v
    }

    pub fn validate(&self, sup: &SupernetConfig, cfg: &SubnetworkConfig) -> Result<()> {
        let v = self.violations(sup, cfg);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    /// Base-2 logarithm of [`SearchSpace::cardinality`].
    pub fn cardinality_log2(&self, sup: &SupernetConfig) -> f64 {
        let c = &self.choices;
        let pairs = self.head_pairs(sup).len() as f64;
        let (nl, ne, nh) = (c.layers.len() as f64, c.embed_dim.len() as f64, c.heads.len() as f64);
        let (ns, nd) = (c.head_size.len() as f64, c.intermediate_size.len() as f64);
        let depth = *c.layers.iter().max().unwrap_or(&0) as f64;
        match (self.granularity, self.layering) {
            (Granularity::Coarse, Layering::Uniform) => (nl * ne * pairs * ns * nd).log2(),
            (Granularity::Coarse, Layering::LayerWise) => ne.log2() + depth * (pairs * ns * nd).log2(),
            (Granularity::FineGrained, Layering::Uniform) => ne * nh * ns * nd * nl,
            (Granularity::FineGrained, Layering::LayerWise) => ne + depth * (nh + ns + nd) + nl,
        }
    }

    /// Number of configurations by the closed-form counts:
    ///
    /// * coarse uniform: `|l|·|e|·|(h,q)|·|h_s|·|d|`
    /// * coarse layer-wise: `|e|·(|(h,q)|·|h_s|·|d|)^L`
    /// * fine-grained uniform: `2^(|e|·|h|·|h_s|·|d|·|l|)`
    /// * fine-grained layer-wise: `2^|e|·(2^|h|·2^|h_s|·2^|d|)^L·2^|l|`
    ///
    /// where `|x|` is the size of a choice set, `(h,q)` ranges over valid
    /// head/group pairs, and `L` is the largest layer choice. Fails when the
    /// count needs more than [`MAX_EXACT_BITS`] bits.
    pub fn cardinality(&self, sup: &SupernetConfig) -> Result<BigUint> {
        let bits = self.cardinality_log2(sup);
        if bits > MAX_EXACT_BITS {
            return Err(Error::Parameter(format!("cardinality has ~2^{bits:.0} elements, too large to materialize")));
        }
        let c = &self.choices;
        let pairs = self.head_pairs(sup).len() as u64;
        let (nl, ne, nh) = (c.layers.len() as u64, c.embed_dim.len() as u64, c.heads.len() as u64);
        let (ns, nd) = (c.head_size.len() as u64, c.intermediate_size.len() as u64);
        let depth = *c.layers.iter().max().unwrap_or(&0) as u32;
        let pow2 = |k: u64| BigUint::one() << k;
        Ok(match (self.granularity, self.layering) {
            (Granularity::Coarse, Layering::Uniform) => BigUint::from(nl * ne * pairs * ns * nd),
            (Granularity::Coarse, Layering::LayerWise) => BigUint::from(ne) * BigUint::from(pairs * ns * nd).pow(depth),
            (Granularity::FineGrained, Layering::Uniform) => pow2(ne * nh * ns * nd * nl),
            (Granularity::FineGrained, Layering::LayerWise) => {
                pow2(ne) * pow2(nh + ns + nd).pow(depth) * pow2(nl)
            }
        })
    }

    /// Every configuration of a coarse space. Layer-wise spaces are
    /// enumerated at their largest layer choice.
    pub fn enumerate(&self, sup: &SupernetConfig) -> Result<Vec<SubnetworkConfig>> {
        if self.granularity != Granularity::Coarse {
            return Err(Error::Parameter("only coarse spaces are enumerable".into()));
        }
        let c = &self.choices;
        let mut per_layer = Vec::new();
        for (h, q) in self.head_pairs(sup) {
            for &hs in &c.head_size {
                for &d in &c.intermediate_size {
                    per_layer.push(LayerChoice::coarse(h, hs, d, q));
                }
            }
        }
        let mut out = Vec::new();
        match self.layering {
            Layering::Uniform => {
                for &l in &c.layers {
                    for &e in &c.embed_dim {
                        for lc in &per_layer {
                            out.push(SubnetworkConfig::uniform(l, e, lc.clone()));
                        }
                    }
                }
            }
            Layering::LayerWise => {
                let depth = *c.layers.iter().max().expect("space was checked");
                let total = per_layer.len().checked_pow(depth as u32).filter(|&n| n <= 1 << 24);
                let total = total.ok_or_else(|| Error::Parameter("layer-wise space too large to enumerate".into()))?;
                for &e in &c.embed_dim {
                    for mut code in 0..total {
                        let layers = (0..depth)
                            .map(|_| {
                                let lc = per_layer[code % per_layer.len()].clone();
                                code /= per_layer.len();
                                lc
                            })
                            .collect();
                        out.push(SubnetworkConfig {
                            embed_dim: e,
                            layers,
                            embd_indices: None,
                            layer_indices: None,
                        });
                    }
                }
            }
        }
        Ok(out)
    }

}
