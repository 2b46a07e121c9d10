//! Exact nearest-neighbor search over embeddings and bidirectional
//! recall@K.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::EvalError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    /// `1 − cos(a, b)`.
    #[default]
    Cosine,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Metric::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                let denom = na * nb;
                if denom == 0.0 {
                    1.0
                } else {
                    // Clamped so identical directions give exactly 0.
                    (1.0 - dot / denom).max(0.0)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexRow {
    pub id: String,
    pub domain: Domain,
    pub pair_id: Option<String>,
    pub embedding: Vec<f64>,
}

/// Immutable set of embeddings with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    rows: Vec<IndexRow>,
    dim: usize,
    metric: Metric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub distance: f64,
}

fn by_distance_then_id(a: &(f64, &str), b: &(f64, &str)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1))
}

impl EmbeddingIndex {
    pub fn new(rows: Vec<IndexRow>, metric: Metric) -> Result<Self, EvalError> {
        let dim = rows.first().map_or(0, |r| r.embedding.len());
        let mut seen = HashSet::with_capacity(rows.len());
        for r in &rows {
            if r.embedding.len() != dim {
                return Err(EvalError::Index(format!(
                    "row {} has dimension {}, expected {dim}",
                    r.id,
                    r.embedding.len()
                )));
            }
            if !seen.insert(r.id.as_str()) {
                return Err(EvalError::Index(format!("duplicate id {}", r.id)));
            }
        }
        Ok(Self { rows, dim, metric })
    }

    /// Builds from an `[N × D]` embedding matrix and per-row metadata.
    pub fn from_embeddings(
        embeddings: &Tensor,
        meta: impl IntoIterator<Item = (String, Domain, Option<String>)>,
        metric: Metric,
    ) -> Result<Self, EvalError> {
        let (n, _) = embeddings.dims2()?;
        let rows: Vec<IndexRow> = meta
            .into_iter()
            .enumerate()
            .map(|(i, (id, domain, pair_id))| IndexRow {
                id,
                domain,
                pair_id,
                embedding: embeddings.row(i).to_vec(),
            })
            .collect();
        if rows.len() != n {
            return Err(EvalError::Index(format!(
                "{} metadata rows for {n} embeddings",
                rows.len()
            )));
        }
        Self::new(rows, metric)
    }

    pub fn rows(&self) -> &[IndexRow] {
        &self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Exact k nearest rows, ascending by distance, ties broken by id.
    pub fn knn_search(
        &self,
        query: &[f64],
        k: usize,
        restrict: Option<Domain>,
    ) -> Result<Vec<Neighbor>, EvalError> {
        if query.len() != self.dim {
            return Err(EvalError::Shape(format!(
                "query of dimension {} against index of dimension {}",
                query.len(),
                self.dim
            )));
        }
        let mut scored: Vec<(f64, &str)> = self
            .rows
            .iter()
            .filter(|r| restrict.is_none_or(|d| r.domain == d))
            .map(|r| (self.metric.distance(query, &r.embedding), r.id.as_str()))
            .collect();
        if k > scored.len() {
            return Err(EvalError::TooFewCandidates {
                k,
                available: scored.len(),
            });
        }
        scored.sort_by(by_distance_then_id);
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(distance, id)| Neighbor {
                id: id.to_string(),
                distance,
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl Direction {
    pub fn source(self) -> Domain {
        match self {
            Direction::ImageToText => Domain::Image,
            Direction::TextToImage => Domain::Text,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Direction::ImageToText => "img->txt",
            Direction::TextToImage => "txt->img",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub direction: Direction,
    pub ks: Vec<usize>,
    /// `recall[i]` is recall@`ks[i]`.
    pub recall: Vec<f64>,
    pub n_queries: usize,
    /// Source-domain rows skipped for lacking a counterpart in the other domain.
    pub excluded: usize,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.recall[i])
    }
}

/// For every source-domain row, the 0-based rank of its best-ranked
/// ground-truth counterpart among all target-domain rows. `None` marks rows
/// without a counterpart.
pub fn first_hit_ranks(index: &EmbeddingIndex, direction: Direction) -> Vec<Option<usize>> {
    let source = direction.source();
    let targets: Vec<&IndexRow> = index
        .rows
        .iter()
        .filter(|r| r.domain == source.other())
        .collect();
    let mut by_pair: HashMap<&str, Vec<usize>> = HashMap::new();
    for (t, r) in targets.iter().enumerate() {
        if let Some(p) = &r.pair_id {
            by_pair.entry(p.as_str()).or_default().push(t);
        }
    }
    index
        .rows
        .iter()
        .filter(|r| r.domain == source)
        .map(|q| {
            let truth = q.pair_id.as_deref().and_then(|p| by_pair.get(p))?;
            let dist: Vec<f64> = targets
                .iter()
                .map(|t| index.metric.distance(&q.embedding, &t.embedding))
                .collect();
            // Rank of a target = number of targets ordered strictly before it.
            let best = truth
                .iter()
                .map(|&g| {
                    let key = (dist[g], targets[g].id.as_str());
                    (0..targets.len())
                        .filter(|&o| {
                            by_distance_then_id(&(dist[o], targets[o].id.as_str()), &key)
                                == Ordering::Less
                        })
                        .count()
                })
                .min()
                .expect("non-empty ground truth");
            Some(best)
        })
        .collect()
}

/// Fraction of source-domain queries whose counterpart (any of them, when a
/// query has several) appears in the top `K` of the other domain.
pub fn recall_at_k(index: &EmbeddingIndex, ks: &[usize], direction: Direction) -> RecallReport {
    let ranks = first_hit_ranks(index, direction);
    let excluded = ranks.iter().filter(|r| r.is_none()).count();
    let hits: Vec<usize> = ranks.into_iter().flatten().collect();
    let n = hits.len();
    let recall = ks
        .iter()
        .map(|&k| {
            if n == 0 {
                0.0
            } else {
                hits.iter().filter(|&&r| r < k).count() as f64 / n as f64
            }
        })
        .collect();
    if excluded > 0 {
        log::info!(
            "{}: {excluded} queries without a counterpart excluded",
            direction.label()
        );
    }
    RecallReport {
        direction,
        ks: ks.to_vec(),
        recall,
        n_queries: n,
        excluded,
    }
}
