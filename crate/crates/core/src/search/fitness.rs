use crate::data::Batch;
use crate::error::{Error, Result};
use crate::importance::{score_subnetwork, ImportanceTables};
use crate::model::{Supernet, SubnetworkConfig};
use crate::tensor::mean_cross_entropy;

/// What a search minimizes.
#[derive(Debug, Clone, Copy)]
pub enum Metric<'a> {
    /// Perplexity of the masked supernet on fixed batches.
    Perplexity(&'a [Batch]),
    /// Negated importance score.
    Importance(&'a ImportanceTables),
}

/// Perplexity of `cfg` inside `model` over `batches`.
pub fn masked_perplexity(model: &Supernet, cfg: &SubnetworkConfig, batches: &[Batch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Parameter("perplexity needs at least one batch".into()));
    }
    let mut ce = 0.0;
    for b in batches {
        let logits = model.forward_masked(cfg, &b.inputs, b.batch, b.seq_len)?;
        ce += mean_cross_entropy(&logits, &b.targets)?;
    }
    Ok((ce / batches.len() as f64).exp())
}

/// Fitness of `cfg` under `metric`; lower is better.
pub fn evaluate_fitness(model: &Supernet, cfg: &SubnetworkConfig, metric: Metric<'_>) -> Result<f64> {
    let f = match metric {
        Metric::Perplexity(batches) => masked_perplexity(model, cfg, batches)?,
        Metric::Importance(tables) => -score_subnetwork(tables, model.config(), cfg)?,
    };
    if f.is_finite() {
        Ok(f)
    } else {
        Err(Error::Fitness(format!("{f} for {}", cfg.key())))
    }
}
