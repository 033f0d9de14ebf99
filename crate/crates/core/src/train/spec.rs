use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, TopKSource, Var};
use crate::error::{Error, Result, Violation};

/// Which teacher logits the distillation term sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitMode {
    Full,
    TopK(usize),
}

/// Weights and shape of the combined hard-label and distillation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillSpec {
    pub alpha: f64,
    pub beta: f64,
    pub temperature: f64,
    pub logit_mode: LogitMode,
    pub topk_source: TopKSource,
}

impl Default for DistillSpec {
    fn default() -> Self {
        DistillSpec {
            alpha: 0.2,
            beta: 0.8,
            temperature: 0.9,
            logit_mode: LogitMode::TopK(1024),
            topk_source: TopKSource::Teacher,
        }
    }
}

impl DistillSpec {
    /// Plain cross-entropy.
    pub fn pretraining() -> Self {
        DistillSpec {
            alpha: 1.0,
            beta: 0.0,
            logit_mode: LogitMode::Full,
            ..Self::default()
        }
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        let mut v = Vec::new();
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            v.push(Violation::new("bounds", "alpha and beta must lie in [0, 1]"));
        }
        if self.alpha + self.beta <= 0.0 {
            v.push(Violation::new("bounds", "alpha + beta must be positive"));
        }
        if !(self.temperature > 0.0) {
            v.push(Violation::new("bounds", "temperature must be positive"));
        }
        if let LogitMode::TopK(k) = self.logit_mode {
            if k == 0 || k > vocab {
                v.push(Violation::new("bounds", format!("top-k {k} not in 1..={vocab}")));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }
}

/// Loss value plus its unweighted components.
pub struct CombinedLoss<'g> {
    pub total: Var<'g, f32>,
    pub ce: f64,
    pub kl: f64,
}

/// `alpha · CE(targets, student) + beta · KL(teacher ‖ student)`.
///
/// A component with zero weight is left out of the graph; the other
/// component's value is still reported when it can be computed.
pub fn combined_loss<'g>(
    g: &'g Graph<f32>,
    student: Var<'g, f32>,
    teacher: Option<Var<'g, f32>>,
    targets: &[usize],
    spec: &DistillSpec,
) -> Result<CombinedLoss<'g>> {
    let ce = g.cross_entropy(student, targets, None)?;
    let kl = match teacher {
        Some(t) => {
            let temp = spec.temperature as f32;
            Some(match spec.logit_mode {
                LogitMode::Full => g.forward_kl(t, student, temp)?,
                LogitMode::TopK(k) => g.topk_kl(t, student, temp, k, spec.topk_source)?,
            })
        }
        None if spec.beta > 0.0 => {
            return Err(Error::Parameter("distillation weight set without a teacher".into()));
        }
        None => None,
    };
    let mut total = None;
    if spec.alpha > 0.0 {
        total = Some(ce.scale(spec.alpha as f32));
    }
    if let Some(kl) = kl.filter(|_| spec.beta > 0.0) {
        let term = kl.scale(spec.beta as f32);
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::Parameter("alpha + beta must be positive".into()))?;
    Ok(CombinedLoss {
        total,
        ce: ce.item() as f64,
        kl: kl.map_or(0.0, |k| k.item() as f64),
    })
}

/// Optimization and schedule settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSpec {
    /// Token budget; the run takes `tokens / (global_batch · seq_len)` steps.
    pub tokens: usize,
    pub global_batch: usize,
    pub micro_batch: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Steps between validation passes (and metric rows).
    pub eval_interval: usize,
    pub eval_batches: usize,
    /// Steps between checkpoints; 0 saves only at the end.
    pub save_interval: usize,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            tokens: 1 << 20,
            global_batch: 8,
            micro_batch: 8,
            seq_len: 64,
            lr: 3e-4,
            min_lr: 3e-5,
            warmup_steps: 100,
            weight_decay: 0.01,
            betas: (0.9, 0.95),
            eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            eval_interval: 100,
            eval_batches: 8,
            save_interval: 0,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        for (name, x) in [
            ("tokens", self.tokens),
            ("global_batch", self.global_batch),
            ("micro_batch", self.micro_batch),
            ("seq_len", self.seq_len),
            ("eval_interval", self.eval_interval),
            ("eval_batches", self.eval_batches),
        ] {
            if x == 0 {
                v.push(Violation::new("bounds", format!("{name} must be >= 1")));
            }
        }
        if self.micro_batch > self.global_batch || !self.global_batch.is_multiple_of(self.micro_batch.max(1)) {
            v.push(Violation::new("divisibility", "micro_batch must divide global_batch"));
        }
        if !(self.lr >= self.min_lr && self.min_lr >= 0.0) {
            v.push(Violation::new("bounds", "need lr >= min_lr >= 0"));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(v))
        }
    }

    pub fn tokens_per_step(&self) -> usize {
        self.global_batch * self.seq_len
    }

    pub fn total_steps(&self) -> usize {
        self.tokens / self.tokens_per_step()
    }

    /// Linear warmup to `lr`, then cosine decay to `min_lr` at the last step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps().saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
