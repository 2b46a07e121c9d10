use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::EvalError;
use crate::tensor::Tensor;

/// Precision, recall and F1 for one class or one average.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// From raw counts. A class never predicted positive gets `P = 0`, a
    /// class with no positives gets `R = 0`, and `F1 = 0` whenever `P + R = 0`.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    /// Decision threshold on `σ(logit)`.
    pub threshold: f64,
    pub per_class: Vec<Prf>,
    /// Pooled counts over all classes.
    pub micro: Prf,
    /// Unweighted mean of the per-class values.
    pub macro_avg: Prf,
}

/// Multi-label precision/recall/F1 with decision `σ(logit) ≥ threshold`.
pub fn prf1(
    logits: &Tensor,
    targets: &Tensor,
    threshold: f64,
) -> Result<ClassificationMetrics, EvalError> {
    if logits.shape() != targets.shape() {
        return Err(EvalError::Shape(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    let (n, c) = logits.dims2()?;
    let mut counts = vec![(0usize, 0usize, 0usize); c];
    for i in 0..n {
        for (j, (&z, &t)) in logits.row(i).iter().zip(targets.row(i)).enumerate() {
            let predicted = crate::layers::sigmoid(z) >= threshold;
            let actual = t >= 0.5;
            let e = &mut counts[j];
            match (predicted, actual) {
                (true, true) => e.0 += 1,
                (true, false) => e.1 += 1,
                (false, true) => e.2 += 1,
                (false, false) => {}
            }
        }
    }
    let per_class: Vec<Prf> = counts
        .iter()
        .map(|&(tp, fp, fn_)| Prf::from_counts(tp, fp, fn_))
        .collect();
    let (tp, fp, fn_) = counts
        .iter()
        .fold((0, 0, 0), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let k = c.max(1) as f64;
    let macro_avg = Prf {
        precision: per_class.iter().map(|p| p.precision).sum::<f64>() / k,
        recall: per_class.iter().map(|p| p.recall).sum::<f64>() / k,
        f1: per_class.iter().map(|p| p.f1).sum::<f64>() / k,
    };
    Ok(ClassificationMetrics {
        threshold,
        per_class,
        micro: Prf::from_counts(tp, fp, fn_),
        macro_avg,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainConfusion {
    /// Accuracy of the `σ(logit) ≥ 0.5 ⇒ text` decision. 0.5 on balanced data
    /// means the domains are indistinguishable.
    pub accuracy: f64,
    pub n: usize,
    /// Set when only one domain was present, making the score meaningless.
    pub single_domain: bool,
}

pub fn domain_confusion(logits: &Tensor, domains: &[Domain]) -> Result<DomainConfusion, EvalError> {
    if logits.shape() != [domains.len(), 1] {
        return Err(EvalError::Shape(format!(
            "domain logits {:?} for {} samples",
            logits.shape(),
            domains.len()
        )));
    }
    if domains.is_empty() {
        return Err(EvalError::TooFewRows { need: 1, got: 0 });
    }
    let correct = logits
        .data()
        .iter()
        .zip(domains)
        .filter(|(&z, &d)| (z >= 0.0) == (d == Domain::Text))
        .count();
    let single_domain = domains.iter().all(|&d| d == domains[0]);
    if single_domain {
        log::warn!("domain confusion computed on a single-domain set");
    }
    Ok(DomainConfusion {
        accuracy: correct as f64 / domains.len() as f64,
        n: domains.len(),
        single_domain,
    })
}
