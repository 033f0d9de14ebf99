//! Variation operators: mutation, crossover, and bin-constrained resampling.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_params, LayerChoice, SubnetworkConfig, SupernetConfig};
use crate::space::{regrow, Granularity, Layering, SearchSpace};

use super::ParamBin;

/// The dimensions mutation picks from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dimension {
    Layers,
    Embed,
    Heads,
    Groups,
    Intermediate,
    HeadSize,
}

pub const DIMENSIONS: [Dimension; 6] = [
    Dimension::Layers,
    Dimension::Embed,
    Dimension::Heads,
    Dimension::Groups,
    Dimension::Intermediate,
    Dimension::HeadSize,
];

/// Resample one uniformly chosen dimension of `cfg`.
pub fn mutate<R: Rng + ?Sized>(
    cfg: &SubnetworkConfig,
    space: &SearchSpace,
    sup: &SupernetConfig,
    rng: &mut R,
) -> SubnetworkConfig {
    let dim = *DIMENSIONS.choose(rng).expect("non-empty");
    mutate_dimension(cfg, dim, space, sup, rng)
}

/// Resample `dim` of `cfg`.
///
/// Layer-count changes truncate the last layers or append freshly sampled
/// ones. Per-layer dimensions change every layer in a uniform space and one
/// uniformly chosen layer otherwise. Fine-grained index sets keep their
/// existing entries as a prefix when growing and drop trailing entries when
/// shrinking.
pub fn mutate_dimension<R: Rng + ?Sized>(
    cfg: &SubnetworkConfig,
    dim: Dimension,
    space: &SearchSpace,
    sup: &SupernetConfig,
    rng: &mut R,
) -> SubnetworkConfig {
    let fine = space.granularity == Granularity::FineGrained;
    let c = &space.choices;
    let mut out = cfg.clone();
    let l = cfg.n_layers();
    let targets: Vec<usize> = match space.layering {
        Layering::Uniform => (0..l).collect(),
        Layering::LayerWise => vec![rng.random_range(0..l)],
    };
    match dim {
        Dimension::Layers => {
            let new_l = *c.layers.choose(rng).expect("space was checked");
            if new_l <= l {
                out.layers.truncate(new_l);
                if let Some(li) = &mut out.layer_indices {
                    li.truncate(new_l);
                }
            } else {
                for _ in l..new_l {
                    let lc = match space.layering {
                        Layering::Uniform => {
                            let mut lc = cfg.layers[0].clone();
                            if fine {
                                space.fill_layer_indices(sup, &mut lc, rng);
                            }
                            lc
                        }
                        Layering::LayerWise => space.sample_layer(sup, rng),
                    };
                    out.layers.push(lc);
                }
                if let Some(li) = &cfg.layer_indices {
                    let grown = regrow(li, new_l, sup.n_layer, rng);
                    let mut paired: Vec<(usize, LayerChoice)> = grown.into_iter().zip(out.layers).collect();
                    paired.sort_by_key(|(i, _)| *i);
                    let (idx, layers) = paired.into_iter().unzip();
                    out.layer_indices = Some(idx);
                    out.layers = layers;
                }
            }
        }
        Dimension::Embed => {
            out.embed_dim = *c.embed_dim.choose(rng).expect("space was checked");
            if let Some(ei) = &cfg.embd_indices {
                out.embd_indices = Some(regrow(ei, out.embed_dim, sup.n_embd, rng));
            }
        }
        Dimension::Heads | Dimension::Groups => {
            let cur = &cfg.layers[targets[0]];
            let (h, q) = if dim == Dimension::Heads {
                let opts: Vec<usize> = space
                    .feasible_heads(sup)
                    .into_iter()
                    .filter(|&h| space.groups_for(sup, h).contains(&cur.query_groups))
                    .collect();
                (*opts.choose(rng).unwrap_or(&cur.heads), cur.query_groups)
            } else {
                let opts = space.groups_for(sup, cur.heads);
                (cur.heads, *opts.choose(rng).unwrap_or(&cur.query_groups))
            };
            for &i in &targets {
                let lc = &mut out.layers[i];
                if fine {
                    let hi = lc.head_indices.clone().unwrap_or_default();
                    let gi = lc.query_group_indices.clone().unwrap_or_default();
                    let (hi, gi) = SearchSpace::reshape_heads(sup, &hi, &gi, h, q, rng);
                    lc.head_indices = Some(hi);
                    lc.query_group_indices = Some(gi);
                }
                lc.heads = h;
                lc.query_groups = q;
            }
        }
        Dimension::Intermediate => {
            let d = *c.intermediate_size.choose(rng).expect("space was checked");
            for &i in &targets {
                let lc = &mut out.layers[i];
                lc.intermediate_size = d;
                if let Some(ii) = &lc.intermediate_indices {
                    lc.intermediate_indices = Some(regrow(ii, d, sup.intermediate_size, rng));
                }
            }
        }
        Dimension::HeadSize => {
            let hs = *c.head_size.choose(rng).expect("space was checked");
            for &i in &targets {
                let lc = &mut out.layers[i];
                lc.head_size = hs;
                if let Some(si) = &lc.head_size_indices {
                    lc.head_size_indices = Some(regrow(si, hs, sup.head_size, rng));
                }
            }
        }
    }
    out
}

/// Which parent each dimension is inherited from (`true` = second parent).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CrossoverMask {
    /// Layer index set (fine-grained only; layer counts already agree).
    pub layers: bool,
    pub embed: bool,
    pub heads: bool,
    pub groups: bool,
    pub head_size: bool,
    pub intermediate: bool,
}

impl CrossoverMask {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        CrossoverMask {
            layers: rng.random_bool(0.5),
            embed: rng.random_bool(0.5),
            heads: rng.random_bool(0.5),
            groups: rng.random_bool(0.5),
            head_size: rng.random_bool(0.5),
            intermediate: rng.random_bool(0.5),
        }
    }
}

/// Child inheriting each dimension from a fair coin flip.
pub fn crossover<R: Rng + ?Sized>(
    p1: &SubnetworkConfig,
    p2: &SubnetworkConfig,
    sup: &SupernetConfig,
    rng: &mut R,
) -> Result<SubnetworkConfig> {
    crossover_with(p1, p2, sup, CrossoverMask::random(rng))
}

/// Child built from an explicit inheritance mask.
///
/// Whole per-layer lists are inherited as a unit, with any index sets. When
/// the inherited head count and group count of a layer do not fit together
/// (or their index sets come from different parents), the groups follow the
/// head parent.
pub fn crossover_with(
    p1: &SubnetworkConfig,
    p2: &SubnetworkConfig,
    sup: &SupernetConfig,
    mask: CrossoverMask,
) -> Result<SubnetworkConfig> {
    if p1.n_layers() != p2.n_layers() {
        return Err(Error::Parameter(format!(
            "crossover needs equal layer counts, got {} and {}",
            p1.n_layers(),
            p2.n_layers()
        )));
    }
    let pick = |second: bool| if second { p2 } else { p1 };
    let (pe, ph, pg, ps, pd) = (
        pick(mask.embed),
        pick(mask.heads),
        pick(mask.groups),
        pick(mask.head_size),
        pick(mask.intermediate),
    );
    let layers = (0..p1.n_layers())
        .map(|i| {
            let (h, g, s, d) = (&ph.layers[i], &pg.layers[i], &ps.layers[i], &pd.layers[i]);
            let fits = h.heads % g.query_groups == 0
                && h.heads / g.query_groups <= sup.heads_per_group()
                && (h.head_indices.is_none() || std::ptr::eq(ph, pg));
            let g = if fits { g } else { h };
            LayerChoice {
                heads: h.heads,
                head_indices: h.head_indices.clone(),
                query_groups: g.query_groups,
                query_group_indices: g.query_group_indices.clone(),
                head_size: s.head_size,
                head_size_indices: s.head_size_indices.clone(),
                intermediate_size: d.intermediate_size,
                intermediate_indices: d.intermediate_indices.clone(),
            }
        })
        .collect();
    Ok(SubnetworkConfig {
        embed_dim: pe.embed_dim,
        embd_indices: pe.embd_indices.clone(),
        layers,
        layer_indices: pick(mask.layers).layer_indices.clone(),
    })
}

/// Return `cfg` when it fits `bin`, otherwise the first of up to
/// `max_attempts` fresh samples that does.
pub fn constrain<R: Rng + ?Sized>(
    cfg: SubnetworkConfig,
    bin: &ParamBin,
    space: &SearchSpace,
    sup: &SupernetConfig,
    rng: &mut R,
    max_attempts: usize,
) -> Result<SubnetworkConfig> {
    if bin.admits(count_params(sup, &cfg)?) {
        return Ok(cfg);
    }
    sample_in_bin(bin, space, sup, rng, max_attempts)
}

/// Rejection-sample a configuration whose parameter count lies in `bin`.
pub fn sample_in_bin<R: Rng + ?Sized>(
    bin: &ParamBin,
    space: &SearchSpace,
    sup: &SupernetConfig,
    rng: &mut R,
    max_attempts: usize,
) -> Result<SubnetworkConfig> {
    for _ in 0..max_attempts {
        let s = space.sample(sup, rng);
        if bin.admits(count_params(sup, &s)?) {
            return Ok(s);
        }
    }
    Err(Error::Rejection { attempts: max_attempts })
}
