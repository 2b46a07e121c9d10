//! Training loops: adversarial (category head plus reversed domain head),
//! category-only, and the paired triplet-ranking baseline.
//!
//! All randomness is derived from `(seed, stream)` pairs keyed by epoch or
//! step, so a run resumed from any saved checkpoint replays the uninterrupted
//! run exactly.

use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use crate::data::{domain_targets, label_matrix, BatchStream, Dataset, Domain, Sample};
use crate::error::{OptimError, TrainError};
use crate::eval::{
    domain_confusion, domain_probe, mean_pairwise_distance, prf1, recall_at_k, Direction,
    EmbeddingIndex, Metric, MetricsReport, ProbeConfig, RECALL_KS,
};
use crate::layers::{triplet_ranking_loss, Mode};
use crate::model::{BranchStats, Model, ModelConfig, ModelParams};
use crate::optim::{adam_step, AdamState, LambdaPolicy, LambdaSchedule};
use crate::rng::{streams, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Adversarial,
    /// No domain head, `λ ≡ 0`.
    CategoryOnly,
    /// No heads; text anchors, paired-image positives, random-image negatives.
    TripletBaseline,
}

impl TrainMode {
    /// The model layout this mode trains.
    pub fn configure(self, config: &ModelConfig) -> ModelConfig {
        let mut c = config.clone();
        match self {
            TrainMode::Adversarial => {
                c.category_head = true;
                c.domain_head = true;
            }
            TrainMode::CategoryOnly => {
                c.category_head = true;
                c.domain_head = false;
            }
            TrainMode::TripletBaseline => {
                c.category_head = false;
                c.domain_head = false;
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub max_steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f64,
    /// Steepness of the adaptation-factor schedule.
    pub gamma: f64,
    /// Replaces the schedule with a constant `λ` (adversarial mode only).
    pub lambda_override: Option<f64>,
    pub eval_every: u64,
    /// Written at every evaluation and at the end.
    pub checkpoint: Option<PathBuf>,
    /// Triplet-baseline margin.
    pub margin: f64,
    /// Held-out samples used for the per-evaluation metrics (taken from the
    /// start of the test split).
    pub eval_samples: usize,
    pub probe: ProbeConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Adversarial,
            max_steps: 3000,
            batch_size: 64,
            seed: 0,
            lr: 1e-5,
            gamma: 10.0,
            lambda_override: None,
            eval_every: 500,
            checkpoint: None,
            margin: 0.1,
            eval_samples: 2000,
            probe: ProbeConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.mode != TrainMode::TripletBaseline && self.batch_size % 2 != 0 {
            return bad(format!(
                "batch_size must be even for balanced batches, got {}",
                self.batch_size
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        if let Some(l) = self.lambda_override {
            if !(l.is_finite() && l >= 0.0) {
                return bad(format!("lambda_override must be non-negative, got {l}"));
            }
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return bad(format!("margin must be positive, got {}", self.margin));
        }
        if self.eval_samples < 4 {
            return bad("eval_samples must be at least 4".into());
        }
        Ok(())
    }

    pub fn lambda_policy(&self) -> LambdaPolicy {
        match (self.mode, self.lambda_override) {
            (TrainMode::Adversarial, Some(l)) => LambdaPolicy::Constant(l),
            (TrainMode::Adversarial, None) => {
                LambdaPolicy::Scheduled(LambdaSchedule::new(self.gamma, self.max_steps))
            }
            _ => LambdaPolicy::Constant(0.0),
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Updates applied so far.
    pub step: u64,
    /// Adaptation factor at `step`.
    pub lambda: f64,
    /// Mean training loss over the updates since the previous record. In
    /// triplet mode this is the ranking loss.
    pub loss_c: f64,
    pub loss_d: f64,
    /// Held-out accuracy of a fresh domain probe on frozen embeddings.
    pub confusion: f64,
    pub f1_macro: Option<f64>,
    pub mean_pairwise_dist: f64,
}

/// Running loss sums between two log records.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWindow {
    pub sum_c: f64,
    pub sum_d: f64,
    pub count: u64,
}

/// Trains a fresh model.
pub fn train(
    config: &TrainConfig,
    model_config: &ModelConfig,
    data: &Dataset,
) -> Result<Checkpoint, TrainError> {
    let state = initial_state(config, model_config, data)?;
    run(state, data, config.max_steps)
}

/// Untrained state at step 0: fresh parameters and optimizer, empty history.
pub fn initial_state(
    config: &TrainConfig,
    model_config: &ModelConfig,
    data: &Dataset,
) -> Result<Checkpoint, TrainError> {
    config.validate()?;
    let model_config = config.mode.configure(model_config);
    model_config.validate()?;
    check_dims(&model_config, data)?;
    let model = Model::new(model_config, &mut Rng::stream(config.seed, streams::INIT))?;
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        train_config: config.clone(),
        model,
        adam: AdamState::new(config.lr),
        step: 0,
        initial_distance: None,
        history: Vec::new(),
        window: LossWindow::default(),
    })
}

/// Triplet-ranking baseline: same branches, no heads, pairs required.
pub fn train_triplet_baseline(
    config: &TrainConfig,
    model_config: &ModelConfig,
    data: &Dataset,
) -> Result<Checkpoint, TrainError> {
    let config = TrainConfig {
        mode: TrainMode::TripletBaseline,
        ..config.clone()
    };
    train(&config, model_config, data)
}

/// Continues a saved run up to its configured `max_steps`.
pub fn resume(state: Checkpoint, data: &Dataset) -> Result<Checkpoint, TrainError> {
    let until = state.train_config.max_steps;
    train_until(state, data, until)
}

/// Continues a saved run but stops after `until` updates. The schedule is
/// still defined by `max_steps`, so stopping and resuming later reproduces an
/// uninterrupted run.
pub fn train_until(state: Checkpoint, data: &Dataset, until: u64) -> Result<Checkpoint, TrainError> {
    state.train_config.validate()?;
    check_dims(&state.model.config, data)?;
    if state.step > state.train_config.max_steps {
        return Err(TrainError::Config(format!(
            "checkpoint is at step {} beyond max_steps {}",
            state.step, state.train_config.max_steps
        )));
    }
    let until = until.min(state.train_config.max_steps);
    run(state, data, until)
}

fn check_dims(c: &ModelConfig, data: &Dataset) -> Result<(), TrainError> {
    let h = &data.header;
    let pairs = [
        ("d_image_in", c.d_image_in, h.d_image_in),
        ("d_word", c.d_word, h.d_word),
        ("max_len", c.max_len, h.max_len),
        ("n_categories", c.n_categories, h.n_categories),
    ];
    for (name, model, file) in pairs {
        if model != file {
            return Err(TrainError::Config(format!(
                "model {name} = {model} but the data has {file}"
            )));
        }
    }
    Ok(())
}

/// Per-step source of gradients for the active mode.
struct Stepper<'a> {
    config: &'a TrainConfig,
    policy: LambdaPolicy,
    samples: &'a [Sample],
    batches: BatchStream,
    triplets: Option<TripletPools<'a>>,
}

struct TripletPools<'a> {
    anchors: Vec<Sample>,
    /// Pair id → indices of images in `samples`.
    images_by_pair: HashMap<&'a str, Vec<usize>>,
    images: Vec<usize>,
}

struct StepResult {
    grads: ModelParams,
    loss_c: f64,
    loss_d: f64,
    stats: BranchStats,
}

impl<'a> Stepper<'a> {
    fn new(config: &'a TrainConfig, samples: &'a [Sample]) -> Result<Self, TrainError> {
        let policy = config.lambda_policy();
        if config.mode != TrainMode::TripletBaseline {
            let batches =
                BatchStream::new(samples, config.batch_size, true, config.seed, streams::SHUFFLE)?;
            return Ok(Self {
                config,
                policy,
                samples,
                batches,
                triplets: None,
            });
        }
        let mut images_by_pair: HashMap<&str, Vec<usize>> = HashMap::new();
        let mut images = Vec::new();
        for (i, s) in samples.iter().enumerate() {
            if s.domain == Domain::Image {
                images.push(i);
                if let Some(p) = &s.pair_id {
                    images_by_pair.entry(p.as_str()).or_default().push(i);
                }
            }
        }
        let anchors: Vec<Sample> = samples
            .iter()
            .filter(|s| {
                s.domain == Domain::Text
                    && s.pair_id.as_deref().is_some_and(|p| images_by_pair.contains_key(p))
            })
            .cloned()
            .collect();
        if anchors.is_empty() {
            return Err(TrainError::Config(
                "triplet baseline needs pair ids linking text to image samples".into(),
            ));
        }
        if images.len() < 2 {
            return Err(TrainError::Config(
                "triplet baseline needs at least two images".into(),
            ));
        }
        let batches = BatchStream::new(
            &anchors,
            config.batch_size,
            false,
            config.seed,
            streams::SHUFFLE,
        )?;
        Ok(Self {
            config,
            policy,
            samples,
            batches,
            triplets: Some(TripletPools {
                anchors,
                images_by_pair,
                images,
            }),
        })
    }

    fn compute(&mut self, model: &Model, step: u64) -> Result<StepResult, TrainError> {
        let mut dropout = Rng::stream(self.config.seed, streams::DROPOUT + step);
        if let Some(pools) = &self.triplets {
            let idx = self.batches.batch(&pools.anchors, step as usize)?.to_vec();
            return triplet_step(model, pools, self.samples, &idx, self.config, step, &mut dropout);
        }
        let idx = self.batches.batch(self.samples, step as usize)?;
        let batch: Vec<&Sample> = idx.iter().map(|&i| &self.samples[i]).collect();
        let out = model.forward(&batch, Mode::Train, &mut dropout)?;
        let ct = label_matrix(&batch, model.config.n_categories);
        let dt = domain_targets(&batch);
        let g = model.backward_joint(&out, &ct, &dt, self.policy.lambda_at(step))?;
        Ok(StepResult {
            grads: g.params,
            loss_c: g.loss_c,
            loss_d: g.loss_d,
            stats: out.stats,
        })
    }
}

fn triplet_step(
    model: &Model,
    pools: &TripletPools<'_>,
    samples: &[Sample],
    idx: &[usize],
    config: &TrainConfig,
    step: u64,
    dropout: &mut Rng,
) -> Result<StepResult, TrainError> {
    let mut neg_rng = Rng::stream(config.seed, streams::NEGATIVES + step);
    let b = idx.len();
    let mut batch: Vec<&Sample> = Vec::with_capacity(3 * b);
    let mut positives = Vec::with_capacity(b);
    let mut negatives = Vec::with_capacity(b);
    for &i in idx {
        let anchor = &pools.anchors[i];
        let pair = anchor.pair_id.as_deref().expect("anchors have pair ids");
        let own = &pools.images_by_pair[pair];
        positives.push(&samples[own[0]]);
        let neg = loop {
            let j = pools.images[neg_rng.below(pools.images.len())];
            if samples[j].pair_id.as_deref() != Some(pair) {
                break j;
            }
        };
        negatives.push(&samples[neg]);
        batch.push(anchor);
    }
    batch.extend(positives);
    batch.extend(negatives);
    let out = model.forward(&batch, Mode::Train, dropout)?;
    let rows = |r: std::ops::Range<usize>| out.embedding.select_rows(&r.collect::<Vec<_>>());
    let (a, p, n) = (rows(0..b), rows(b..2 * b), rows(2 * b..3 * b));
    let (loss, g) = triplet_ranking_loss(&a, &p, &n, config.margin).map_err(crate::error::ModelError::from)?;
    let d_emb = Tensor::vstack(&[&g.anchor, &g.positive, &g.negative]).map_err(crate::error::ModelError::from)?;
    let mut grads = model.params.zeros_like();
    model.backward_embedding(&out.cache, &d_emb, &mut grads)?;
    Ok(StepResult {
        grads,
        loss_c: loss,
        loss_d: 0.0,
        stats: out.stats,
    })
}

/// Samples used for the per-record metrics.
fn held_out<'a>(config: &TrainConfig, data: &'a Dataset) -> Vec<&'a Sample> {
    let source = if data.test.is_empty() {
        log::warn!("no test split; tracking metrics on training samples");
        &data.train
    } else {
        &data.test
    };
    source.iter().take(config.eval_samples).collect()
}

struct Snapshot {
    confusion: f64,
    f1_macro: Option<f64>,
    mean_pairwise_dist: f64,
}

fn snapshot(model: &Model, held: &[&Sample], probe: &ProbeConfig) -> Result<Snapshot, TrainError> {
    let pred = model.predict(held)?;
    let domains: Vec<Domain> = held.iter().map(|s| s.domain).collect();
    let f1_macro = match &pred.category_logits {
        Some(z) => Some(prf1(z, &label_matrix(held, model.config.n_categories), 0.5)?.macro_avg.f1),
        None => None,
    };
    Ok(Snapshot {
        confusion: domain_probe(&pred.embedding, &domains, probe)?.accuracy,
        f1_macro,
        mean_pairwise_dist: mean_pairwise_distance(&pred.embedding)?,
    })
}

fn run(mut state: Checkpoint, data: &Dataset, until: u64) -> Result<Checkpoint, TrainError> {
    let config = state.train_config.clone();
    let probe = ProbeConfig {
        seed: config.seed,
        ..config.probe.clone()
    };
    let held = held_out(&config, data);
    let mut stepper = Stepper::new(&config, &data.train)?;
    let policy = config.lambda_policy();
    if state.initial_distance.is_none() {
        let emb = state.model.embed(&held)?;
        state.initial_distance = Some(mean_pairwise_distance(&emb)?);
    }
    log::info!(
        "{:?} training, {} parameters, steps {}..{}",
        config.mode,
        state.model.params.parameter_count(),
        state.step,
        config.max_steps
    );

    for step in state.step..until.max(state.step) {
        let r = stepper.compute(&state.model, step)?;
        if !(r.loss_c.is_finite() && r.loss_d.is_finite()) {
            return Err(abort(state, config.checkpoint.as_ref(), step, "loss"));
        }
        let mut params = state.model.params.clone();
        let mut adam = state.adam.clone();
        match adam_step(&mut params, &r.grads, &mut adam) {
            Ok(()) => {}
            Err(OptimError::NonFiniteGradient(name)) => {
                return Err(abort(state, config.checkpoint.as_ref(), step, &format!("gradient in {name}")));
            }
            Err(e) => return Err(TrainError::Config(e.to_string())),
        }
        params.apply_running_stats(&r.stats);
        if !params.is_finite() {
            return Err(abort(state, config.checkpoint.as_ref(), step, "parameter"));
        }
        state.model.params = params;
        state.adam = adam;
        state.step = step + 1;
        state.window.sum_c += r.loss_c;
        state.window.sum_d += r.loss_d;
        state.window.count += 1;

        if state.step % config.eval_every == 0 || state.step == config.max_steps {
            let snap = snapshot(&state.model, &held, &probe)?;
            let record = LogRecord {
                step: state.step,
                lambda: policy.lambda_at(state.step),
                loss_c: state.window.sum_c / state.window.count as f64,
                loss_d: state.window.sum_d / state.window.count as f64,
                confusion: snap.confusion,
                f1_macro: snap.f1_macro,
                mean_pairwise_dist: snap.mean_pairwise_dist,
            };
            log::info!(
                "step {} lambda {:.4} loss_c {:.4} loss_d {:.4} probe {:.3} f1 {} dist {:.4}",
                record.step,
                record.lambda,
                record.loss_c,
                record.loss_d,
                record.confusion,
                record.f1_macro.map_or("-".into(), |f| format!("{f:.3}")),
                record.mean_pairwise_dist
            );
            let initial = state.initial_distance.unwrap_or(0.0);
            if record.mean_pairwise_dist < 0.1 * initial {
                log::warn!(
                    "embedding distribution collapsing: mean pairwise distance {:.4e} is below 10% of its initial {:.4e}",
                    record.mean_pairwise_dist,
                    initial
                );
            }
            state.history.push(record);
            state.window = LossWindow::default();
            if let Some(path) = &config.checkpoint {
                state.save(path)?;
            }
        } else if state.step == until {
            if let Some(path) = &config.checkpoint {
                state.save(path)?;
            }
        }
    }
    Ok(state)
}

/// Keeps the pre-step state as the last good checkpoint.
fn abort(state: Checkpoint, path: Option<&PathBuf>, step: u64, what: &str) -> TrainError {
    log::error!("non-finite {what} at step {step}; stopping");
    if let Some(path) = path {
        if let Err(e) = state.save(path) {
            log::error!("could not save last good checkpoint: {e}");
        }
    }
    TrainError::NonFinite {
        step,
        what: what.to_string(),
        checkpoint: Box::new(state),
    }
}

/// Full held-out report for a trained model.
pub fn evaluate(
    model: &Model,
    samples: &[&Sample],
    probe: &ProbeConfig,
    metric: Metric,
) -> Result<MetricsReport, TrainError> {
    let pred = model.predict(samples)?;
    let domains: Vec<Domain> = samples.iter().map(|s| s.domain).collect();
    let classification = match &pred.category_logits {
        Some(z) => Some(prf1(z, &label_matrix(samples, model.config.n_categories), 0.5)?),
        None => None,
    };
    let domain_head = match &pred.domain_logits {
        Some(z) => Some(domain_confusion(z, &domains)?),
        None => None,
    };
    let domain_probe = domain_probe(&pred.embedding, &domains, probe)?;
    let mut recall = Vec::new();
    if samples.iter().any(|s| s.pair_id.is_some()) {
        let index = EmbeddingIndex::from_embeddings(
            &pred.embedding,
            samples
                .iter()
                .map(|s| (s.id.clone(), s.domain, s.pair_id.clone())),
            metric,
        )?;
        for dir in [Direction::ImageToText, Direction::TextToImage] {
            recall.push(recall_at_k(&index, &RECALL_KS, dir));
        }
    }
    Ok(MetricsReport {
        n_samples: samples.len(),
        classification,
        domain_probe,
        domain_head,
        recall,
    })
}
