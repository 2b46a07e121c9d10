//! Classification metrics, domain confusion, cross-modal search and
//! projection export.

mod classify;
mod pca;
mod probe;
mod retrieval;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use classify::{domain_confusion, prf1, ClassificationMetrics, DomainConfusion, Prf};
pub use pca::{pca_project, Projection};
pub use probe::{domain_probe, mean_pairwise_distance, stratified_halves, ProbeConfig, ProbeReport};
pub use retrieval::{
    first_hit_ranks, recall_at_k, Direction, EmbeddingIndex, IndexRow, Metric, Neighbor,
    RecallReport,
};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_samples: usize,
    /// Absent for models without a category head.
    pub classification: Option<ClassificationMetrics>,
    /// Fresh probe on frozen embeddings.
    pub domain_probe: ProbeReport,
    /// The trained domain head, if the model has one.
    pub domain_head: Option<DomainConfusion>,
    /// Empty when the evaluated samples carry no pair ids.
    pub recall: Vec<RecallReport>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable aligned table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples: {}", self.n_samples);
        let _ = writeln!(s);
        match &self.classification {
            Some(c) => {
                let _ = writeln!(s, "category threshold: sigmoid >= {}", c.threshold);
                let _ = writeln!(s, "{:<10} {:>9} {:>9} {:>9}", "class", "precision", "recall", "f1");
                let mut line = |name: &str, p: &Prf| {
                    let _ = writeln!(s, "{name:<10} {:>9.4} {:>9.4} {:>9.4}", p.precision, p.recall, p.f1);
                };
                for (j, p) in c.per_class.iter().enumerate() {
                    line(&j.to_string(), p);
                }
                line("micro", &c.micro);
                line("macro", &c.macro_avg);
            }
            None => {
                let _ = writeln!(s, "classification: unavailable (no category head)");
            }
        }
        let _ = writeln!(s);
        let p = &self.domain_probe;
        let _ = writeln!(
            s,
            "domain probe accuracy: {:.4} (train {:.4}, {} / {} rows)",
            p.accuracy, p.train_accuracy, p.n_train, p.n_test
        );
        if let Some(h) = &self.domain_head {
            let flag = if h.single_domain { " [single domain]" } else { "" };
            let _ = writeln!(s, "domain head accuracy:  {:.4}{flag}", h.accuracy);
        }
        let _ = writeln!(s);
        if self.recall.is_empty() {
            let _ = writeln!(s, "recall@K: unavailable (no pair ids)");
        } else {
            let _ = write!(s, "{:<10}", "direction");
            for k in &self.recall[0].ks {
                let _ = write!(s, " {:>8}", format!("R@{k}"));
            }
            let _ = writeln!(s, " {:>8} {:>8}", "queries", "excluded");
            for r in &self.recall {
                let _ = write!(s, "{:<10}", r.direction.label());
                for v in &r.recall {
                    let _ = write!(s, " {v:>8.4}");
                }
                let _ = writeln!(s, " {:>8} {:>8}", r.n_queries, r.excluded);
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn table_and_json() {
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let report = MetricsReport {
            n_samples: 2,
            classification: Some(prf1(&t.map(|v| v - 0.5), &t, 0.5).unwrap()),
            domain_probe: ProbeReport {
                accuracy: 0.5,
                train_accuracy: 0.5,
                n_train: 1,
                n_test: 1,
            },
            domain_head: None,
            recall: Vec::new(),
        };
        let table = report.to_table();
        assert!(table.contains("macro"));
        assert!(table.contains("unavailable"));
        let back: MetricsReport = serde_json::from_str(&report.to_json()).unwrap();
        assert_eq!(back, report);
    }
}
