//! Fused loss nodes: token cross-entropy and (top-k) forward KL.

use std::cmp::Ordering;

use super::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Element, Tensor};

/// Which logits choose the retained index set for top-k distillation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopKSource {
    /// The `k` largest teacher logits (default).
    #[default]
    Teacher,
    /// The `k` largest student logits.
    Student,
}

fn check_pair<T: Element>(t: &Tensor<T>, s: &Tensor<T>, temperature: T) -> Result<()> {
    if t.shape() != s.shape() {
        return Err(Error::dim("kl", t.shape(), s.shape()));
    }
    if !(temperature > T::zero()) {
        return Err(Error::Parameter(format!("temperature must be > 0, got {temperature}")));
    }
    if t.data().iter().chain(s.data()).any(|v| !v.is_finite()) {
        return Err(Error::Loss("non-finite logits".into()));
    }
    Ok(())
}

/// KL(softmax(t/T) ‖ softmax(s/T)) for one row, plus its student gradient.
fn kl_row<T: Element>(t: &[T], s: &[T], temperature: T, grad: &mut [T]) -> T {
    let n = t.len();
    let mut lt = vec![T::zero(); n];
    let mut ls = vec![T::zero(); n];
    tensor::log_softmax_into(t, temperature, &mut lt);
    tensor::log_softmax_into(s, temperature, &mut ls);
    let mut kl = T::zero();
    for i in 0..n {
        let pt = lt[i].exp();
        if pt > T::zero() {
            kl = kl + pt * (lt[i] - ls[i]);
        }
        grad[i] = (ls[i].exp() - pt) / temperature;
    }
    kl
}

/// Indices of the `k` largest entries, ties broken toward the lower index.
pub(crate) fn top_k_indices<T: Element>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        row[*b]
            .partial_cmp(&row[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

impl<T: Element> Graph<T> {
    /// Mean negative log-likelihood of `targets` under softmax(`logits`).
    ///
    /// `logits` is viewed as `[rows, classes]` with one target per row;
    /// rows whose target equals `ignore_index` are excluded from the mean.
    pub fn cross_entropy<'g>(
        &'g self,
        logits: Var<'g, T>,
        targets: &[usize],
        ignore_index: Option<usize>,
    ) -> Result<Var<'g, T>> {
        let z = logits.value();
        let classes = z.last_dim();
        if z.rows() != targets.len() {
            return Err(Error::dim("cross_entropy", z.shape(), &[targets.len()]));
        }
        let mut resolved = Vec::with_capacity(targets.len());
        for &t in targets {
            if Some(t) == ignore_index {
                resolved.push(None);
            } else if t >= classes {
                return Err(Error::Index(format!("target {t} >= classes {classes}")));
            } else {
                resolved.push(Some(t));
            }
        }
        let mut total = T::zero();
        let mut count = 0usize;
        let mut buf = vec![T::zero(); classes];
        for (row, tgt) in z.data().chunks(classes).zip(&resolved) {
            let Some(t) = tgt else { continue };
            tensor::log_softmax_into(row, T::one(), &mut buf);
            total = total - buf[*t];
            count += 1;
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).unwrap()
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.id, targets: resolved, count },
            logits.requires_grad(),
        ))
    }

    /// Σ_i p_t,i · log(p_t,i / p_s,i) with temperature-softened distributions,
    /// averaged over rows. Only the student receives gradient.
    pub fn forward_kl<'g>(
        &'g self,
        teacher: Var<'g, T>,
        student: Var<'g, T>,
        temperature: T,
    ) -> Result<Var<'g, T>> {
        let (t, s) = (teacher.value(), student.value());
        check_pair(&t, &s, temperature)?;
        let classes = s.last_dim();
        let rows = s.rows();
        let mut grad = vec![T::zero(); s.len()];
        let mut total = T::zero();
        for ((tr, sr), gr) in t
            .data()
            .chunks(classes)
            .zip(s.data().chunks(classes))
            .zip(grad.chunks_mut(classes))
        {
            total = total + kl_row(tr, sr, temperature, gr);
        }
        let n = T::from_usize(rows).unwrap();
        grad.iter_mut().for_each(|g| *g = *g / n);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Kl { student: student.id, grad_rows: Tensor::new(s.shape(), grad)? },
            student.requires_grad(),
        ))
    }

    /// Forward KL restricted, per row, to the `k` indices chosen by
    /// `source`; both distributions are renormalized over that set.
    pub fn topk_kl<'g>(
        &'g self,
        teacher: Var<'g, T>,
        student: Var<'g, T>,
        temperature: T,
        k: usize,
        source: TopKSource,
    ) -> Result<Var<'g, T>> {
        let (t, s) = (teacher.value(), student.value());
        check_pair(&t, &s, temperature)?;
        let classes = s.last_dim();
        if k == 0 || k > classes {
            return Err(Error::Parameter(format!("top-k k={k} outside 1..={classes}")));
        }
        let rows = s.rows();
        let mut grad = vec![T::zero(); s.len()];
        let mut total = T::zero();
        let mut tk = vec![T::zero(); k];
        let mut sk = vec![T::zero(); k];
        let mut gk = vec![T::zero(); k];
        for r in 0..rows {
            let tr = &t.data()[r * classes..(r + 1) * classes];
            let sr = &s.data()[r * classes..(r + 1) * classes];
            let idx = match source {
                TopKSource::Teacher => top_k_indices(tr, k),
                TopKSource::Student => top_k_indices(sr, k),
            };
            for (j, &i) in idx.iter().enumerate() {
                tk[j] = tr[i];
                sk[j] = sr[i];
            }
            total = total + kl_row(&tk, &sk, temperature, &mut gk);
            let gr = &mut grad[r * classes..(r + 1) * classes];
            for (j, &i) in idx.iter().enumerate() {
                gr[i] = gk[j];
            }
        }
        let n = T::from_usize(rows).unwrap();
        grad.iter_mut().for_each(|g| *g = *g / n);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Kl { student: student.id, grad_rows: Tensor::new(s.shape(), grad)? },
            student.requires_grad(),
        ))
    }
}
