//! Pretraining and distillation of dense models.
//!
//! Both loops share one implementation: cross-entropy training is
//! distillation with `alpha = 1, beta = 0` and no teacher. Batches are drawn
//! with seeds derived from `(seed, step, micro_batch)`, so a run resumed from
//! its last checkpoint replays the same data as an uninterrupted one.

mod optim;
mod spec;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::Graph;
use crate::checkpoint;
use crate::data::{Batch, Split, TokenizedCorpus};
use crate::error::{Error, Result};
use crate::exec::derive_seed;
use crate::model::{DenseModel, Supernet};
use crate::tensor::{mean_cross_entropy, Tensor};

pub use optim::{clip_grad_norm, AdamW};
pub use spec::{combined_loss, CombinedLoss, DistillSpec, LogitMode, TrainSpec};

/// A frozen model providing distillation targets.
#[derive(Debug, Clone, Copy)]
pub enum Teacher<'a> {
    Dense(&'a DenseModel),
    /// The full supernet, regardless of any active sub-network.
    Supernet(&'a Supernet),
}

impl Teacher<'_> {
    pub fn vocab_size(&self) -> usize {
        match self {
            Teacher::Dense(m) => m.config.vocab_size,
            Teacher::Supernet(s) => s.config().vocab_size,
        }
    }

    pub fn logits(&self, ids: &[usize], batch: usize, seq: usize) -> Result<Tensor> {
        match self {
            Teacher::Dense(m) => m.logits(ids, batch, seq),
            Teacher::Supernet(s) => {
                let full = crate::model::SubnetworkConfig::full(s.config());
                s.forward_masked(&full, ids, batch, seq)
            }
        }
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub tokens_seen: usize,
    /// Empty before the first update.
    pub train_loss: Option<f64>,
    pub ce_component: Option<f64>,
    pub kl_component: Option<f64>,
    pub val_ppl: f64,
    pub lr: f64,
}

pub const METRIC_HEADER: &str = "step,tokens_seen,train_loss,ce_component,kl_component,val_ppl,lr";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from(METRIC_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.step,
            r.tokens_seen,
            opt(r.train_loss),
            opt(r.ce_component),
            opt(r.kl_component),
            r.val_ppl,
            r.lr
        )
        .expect("string write");
    }
    s
}

/// Where a run keeps its checkpoints and whether to pick up from them.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
    /// Stop after this many steps (the schedule still spans the full budget).
    pub stop_after: Option<usize>,
}

pub const MODEL_FILE: &str = "model.snfw";
pub const OPTIMIZER_FILE: &str = "optimizer.snfw";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: DenseModel,
    pub log: Vec<MetricRow>,
    /// Steps completed, including any before a resume.
    pub steps: usize,
}

/// Fixed validation batches for `spec`: evenly spaced windows of the
/// held-out tail.
pub fn validation_batches(corpus: &TokenizedCorpus, spec: &TrainSpec) -> Result<Vec<Batch>> {
    corpus.fixed_batches(Split::Validation, spec.eval_batches, spec.micro_batch, spec.seq_len)
}

/// `exp` of the mean token cross-entropy over `batches`.
pub fn evaluate_perplexity(model: &DenseModel, batches: &[Batch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Parameter("perplexity needs at least one batch".into()));
    }
    let mut ce = 0.0;
    for b in batches {
        ce += mean_cross_entropy(&model.logits(&b.inputs, b.batch, b.seq_len)?, &b.targets)?;
    }
    Ok((ce / batches.len() as f64).exp())
}

pub fn pretrain(model: DenseModel, corpus: &TokenizedCorpus, spec: &TrainSpec, opts: &RunOptions) -> Result<TrainOutcome> {
    run(model, None, corpus, spec, &DistillSpec::pretraining(), opts)
}

pub fn distill(
    student: DenseModel,
    teacher: Teacher<'_>,
    corpus: &TokenizedCorpus,
    spec: &TrainSpec,
    dspec: &DistillSpec,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    run(student, Some(teacher), corpus, spec, dspec, opts)
}

fn save(dir: &Path, model: &DenseModel, opt: &AdamW, step: usize, log: &[MetricRow]) -> Result<()> {
    checkpoint::save_model(&dir.join(MODEL_FILE), model)?;
    let extra = json!({ "step": step, "log": log });
    checkpoint::write_atomic(&dir.join(OPTIMIZER_FILE), &opt.to_archive_bytes(extra))?;
    checkpoint::write_atomic(&dir.join(METRICS_FILE), metrics_csv(log).as_bytes())
}

fn load(dir: &Path, shapes: &[&[usize]]) -> Result<(DenseModel, AdamW, usize, Vec<MetricRow>)> {
    let model = checkpoint::load_model(&dir.join(MODEL_FILE))?;
    let (opt, extra) = AdamW::from_archive(checkpoint::read_archive(&dir.join(OPTIMIZER_FILE))?)?;
    opt.check_shapes(shapes)?;
    let step = extra["step"].as_u64().ok_or_else(|| Error::Format("optimizer state lacks step".into()))? as usize;
    let log: Vec<MetricRow> =
        serde_json::from_value(extra["log"].clone()).map_err(|e| Error::Format(format!("metric log: {e}")))?;
    Ok((model, opt, step, log))
}

fn run(
    mut model: DenseModel,
    teacher: Option<Teacher<'_>>,
    corpus: &TokenizedCorpus,
    spec: &TrainSpec,
    dspec: &DistillSpec,
    opts: &RunOptions,
) -> Result<TrainOutcome> {
    spec.validate()?;
    let vocab = model.config.vocab_size;
    dspec.validate(vocab)?;
    if corpus.vocab_size() > vocab {
        return Err(Error::validation(
            "vocab",
            format!("corpus vocab {} exceeds model vocab {vocab}", corpus.vocab_size()),
        ));
    }
    if let Some(t) = &teacher {
        if t.vocab_size() != vocab {
            return Err(Error::validation("vocab", format!("teacher vocab {} != student {vocab}", t.vocab_size())));
        }
    }
    let val = validation_batches(corpus, spec)?;
    let shapes: Vec<Vec<usize>> = model.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();

    let resumed = match (&opts.out_dir, opts.resume) {
        (Some(dir), true) if dir.join(OPTIMIZER_FILE).exists() => Some(load(dir, &shape_refs)?),
        _ => None,
    };
    let (mut opt, mut step, mut log) = match resumed {
        Some((m, o, s, l)) => {
            if m.config != model.config {
                return Err(Error::Format("checkpoint architecture differs from the model".into()));
            }
            model = m;
            (o, s, l)
        }
        None => {
            let opt = AdamW::new(&shape_refs, spec.betas, spec.eps, spec.weight_decay);
            let log = vec![MetricRow {
                step: 0,
                tokens_seen: 0,
                train_loss: None,
                ce_component: None,
                kl_component: None,
                val_ppl: evaluate_perplexity(&model, &val)?,
                lr: spec.lr_at(0),
            }];
            if let Some(dir) = &opts.out_dir {
                fs::create_dir_all(dir)?;
                save(dir, &model, &opt, 0, &log)?;
            }
            (opt, 0, log)
        }
    };

    let total = spec.total_steps();
    let end = opts.stop_after.map_or(total, |s| s.min(total));
    let accum = spec.global_batch / spec.micro_batch;
    while step < end {
        let lr = spec.lr_at(step);
        let mut grads: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let (mut loss_sum, mut ce_sum, mut kl_sum) = (0.0, 0.0, 0.0);
        for micro in 0..accum {
            let seed = derive_seed(spec.seed, &[step as u64, micro as u64]);
            let b = corpus.sample_batch(Split::Train, spec.micro_batch, spec.seq_len, seed)?;
            let g = Graph::new();
            let bound = model.bind(&g, true);
            let logits = bound.forward(&b.inputs, b.batch, b.seq_len, None)?;
            let t_logits = match &teacher {
                Some(t) => Some(g.constant(t.logits(&b.inputs, b.batch, b.seq_len)?)),
                None => None,
            };
            let loss = combined_loss(&g, logits, t_logits, &b.targets, dspec)?;
            let value = loss.total.item() as f64;
            if !value.is_finite() {
                return Err(Error::Divergence { step, loss: value });
            }
            loss_sum += value;
            ce_sum += loss.ce;
            kl_sum += loss.kl;
            let mut gr = g.backward(loss.total.scale(1.0 / accum as f32))?;
            for (acc, v) in grads.iter_mut().zip(bound.vars()) {
                if let Some(t) = gr.take(*v) {
                    acc.add_assign(&t)?;
                }
            }
        }
        let norm = clip_grad_norm(&mut grads, spec.grad_clip);
        if !norm.is_finite() {
            return Err(Error::Divergence { step, loss: norm });
        }
        opt.step(&mut model.params_mut(), &grads, lr);
        step += 1;
        let n = accum as f64;
        if step % spec.eval_interval == 0 || step == total {
            log.push(MetricRow {
                step,
                tokens_seen: step * spec.tokens_per_step(),
                train_loss: Some(loss_sum / n),
                ce_component: Some(ce_sum / n),
                kl_component: Some(kl_sum / n),
                val_ppl: evaluate_perplexity(&model, &val)?,
                lr,
            });
        }
        if let Some(dir) = &opts.out_dir {
            let due = spec.save_interval > 0 && step % spec.save_interval == 0;
            if due || step == end {
                save(dir, &model, &opt, step, &log)?;
            }
        }
    }
    Ok(TrainOutcome { model, log, steps: step })
}
