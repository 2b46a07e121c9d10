//! The full embedding network.
//!
//! ```text
//! image [d_in]      → FC → ReLU → dropout → FC → norm ─┐
//!                                                      ├→ embedding [D] ─┬→ category head → [C]
//! text  [L × d_word] → TextCNN → dropout → FC → norm ──┘                 └→ GRL → domain head → [1]
//! ```
//!
//! Each head is FC → ReLU → dropout → FC. The gradient reversal layer is the
//! identity going forward; going backward it multiplies the domain head's
//! gradient by `−λ` before it is added to the category head's gradient at the
//! embedding. Parameter gradients of the domain head itself are not reversed.

use serde::{Deserialize, Serialize};

use crate::data::{Domain, Sample};
use crate::error::{LayerError, ModelError};
use crate::layers::{
    batchnorm_backward, batchnorm_forward, dropout_backward, dropout_forward, fc_backward,
    fc_forward, grl_backward, grl_forward, l2norm_backward, l2norm_forward, relu_backward,
    relu_forward, sigmoid_xent, textcnn_backward, textcnn_forward, BatchNormCache,
    BatchNormParams, DropoutCache, FcCache, FcParams, L2NormCache, Mode, ReluCache,
    RunningStats, TextCnnCache, TextCnnParams,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Normalization at the end of an embedding branch. `Both` applies batch-norm
/// and then L2-normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    BatchNorm,
    L2Norm,
    Both,
}

impl Normalization {
    fn has_batchnorm(self) -> bool {
        matches!(self, Normalization::BatchNorm | Normalization::Both)
    }

    fn has_l2(self) -> bool {
        matches!(self, Normalization::L2Norm | Normalization::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_image_in: usize,
    pub d_word: usize,
    pub max_len: usize,
    /// Hidden width of the image branch.
    pub image_hidden: usize,
    /// Multi-modal embedding dimension `D`.
    pub embed_dim: usize,
    pub n_categories: usize,
    pub text_widths: Vec<usize>,
    pub text_filters: usize,
    /// Hidden width of both heads.
    pub head_hidden: usize,
    pub dropout: f64,
    pub image_norm: Normalization,
    pub text_norm: Normalization,
    pub category_head: bool,
    pub domain_head: bool,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_image_in: 4096,
            d_word: 300,
            max_len: 59,
            image_hidden: 1024,
            embed_dim: 256,
            n_categories: 80,
            text_widths: vec![3, 4, 5],
            text_filters: 128,
            head_hidden: 256,
            dropout: 0.5,
            image_norm: Normalization::BatchNorm,
            text_norm: Normalization::L2Norm,
            category_head: true,
            domain_head: true,
            bn_momentum: 0.9,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("d_image_in", self.d_image_in),
            ("d_word", self.d_word),
            ("max_len", self.max_len),
            ("image_hidden", self.image_hidden),
            ("embed_dim", self.embed_dim),
            ("n_categories", self.n_categories),
            ("text_filters", self.text_filters),
            ("head_hidden", self.head_hidden),
        ] {
            if v == 0 {
                return Err(ModelError::Config(format!("`{name}` must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "`dropout` must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(ModelError::Config("`bn_momentum` must be in [0, 1)".into()));
        }
        TextCnnParams::validate(&self.text_widths, self.text_filters, self.max_len)?;
        Ok(())
    }

    pub fn image_shape(&self) -> Vec<usize> {
        vec![self.d_image_in]
    }

    pub fn text_shape(&self) -> Vec<usize> {
        vec![self.max_len, self.d_word]
    }
}

/// FC → ReLU → dropout → FC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub hidden: FcParams,
    pub out: FcParams,
}

impl HeadParams {
    fn he(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            hidden: FcParams::he(input, hidden, rng),
            out: FcParams::he(hidden, output, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBranch {
    pub fc1: FcParams,
    pub fc2: FcParams,
    pub bn: Option<BatchNormParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextBranch {
    pub cnn: TextCnnParams,
    pub fc: FcParams,
    pub bn: Option<BatchNormParams>,
}

/// Every parameter tensor of the network. Also used as the container for
/// gradients, in which case the batch-norm running statistics are unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub image: ImageBranch,
    pub text: TextBranch,
    pub category: Option<HeadParams>,
    pub domain: Option<HeadParams>,
}

impl ModelParams {
    /// He-initialized weights, zero biases, unit batch-norm scale.
    pub fn init(config: &ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let bn = |on: bool| {
            on.then(|| {
                let mut p = BatchNormParams::new(config.embed_dim);
                p.momentum = config.bn_momentum;
                p
            })
        };
        let image = ImageBranch {
            fc1: FcParams::he(config.d_image_in, config.image_hidden, rng),
            fc2: FcParams::he(config.image_hidden, config.embed_dim, rng),
            bn: bn(config.image_norm.has_batchnorm()),
        };
        let cnn = TextCnnParams::he(
            &config.text_widths,
            config.d_word,
            config.text_filters,
            config.max_len,
            rng,
        )?;
        let text = TextBranch {
            fc: FcParams::he(cnn.output_dim(), config.embed_dim, rng),
            cnn,
            bn: bn(config.text_norm.has_batchnorm()),
        };
        let category = config.category_head.then(|| {
            HeadParams::he(config.embed_dim, config.head_hidden, config.n_categories, rng)
        });
        let domain = config
            .domain_head
            .then(|| HeadParams::he(config.embed_dim, config.head_hidden, 1, rng));
        Ok(Self {
            image,
            text,
            category,
            domain,
        })
    }

    /// Trainable tensors in a fixed order, with stable dotted names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        fn fc<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, p: &'a FcParams) {
            out.push((format!("{name}.weight"), &p.weight));
            out.push((format!("{name}.bias"), &p.bias));
        }
        let mut out = Vec::new();
        fc(&mut out, "image.fc1", &self.image.fc1);
        fc(&mut out, "image.fc2", &self.image.fc2);
        if let Some(bn) = &self.image.bn {
            out.push(("image.bn.gamma".into(), &bn.gamma));
            out.push(("image.bn.beta".into(), &bn.beta));
        }
        for (w, (k, b)) in self
            .text
            .cnn
            .widths
            .iter()
            .zip(self.text.cnn.kernels.iter().zip(&self.text.cnn.biases))
        {
            out.push((format!("text.cnn.w{w}.kernel"), k));
            out.push((format!("text.cnn.w{w}.bias"), b));
        }
        fc(&mut out, "text.fc", &self.text.fc);
        if let Some(bn) = &self.text.bn {
            out.push(("text.bn.gamma".into(), &bn.gamma));
            out.push(("text.bn.beta".into(), &bn.beta));
        }
        if let Some(h) = &self.category {
            fc(&mut out, "category.hidden", &h.hidden);
            fc(&mut out, "category.out", &h.out);
        }
        if let Some(h) = &self.domain {
            fc(&mut out, "domain.hidden", &h.hidden);
            fc(&mut out, "domain.out", &h.out);
        }
        out
    }

    /// Mutable view of the same tensors, in the same order as [`Self::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.push(&mut self.image.fc1.weight);
        out.push(&mut self.image.fc1.bias);
        out.push(&mut self.image.fc2.weight);
        out.push(&mut self.image.fc2.bias);
        if let Some(bn) = &mut self.image.bn {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        for (k, b) in self
            .text
            .cnn
            .kernels
            .iter_mut()
            .zip(self.text.cnn.biases.iter_mut())
        {
            out.push(k);
            out.push(b);
        }
        out.push(&mut self.text.fc.weight);
        out.push(&mut self.text.fc.bias);
        if let Some(bn) = &mut self.text.bn {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        for h in [&mut self.category, &mut self.domain].into_iter().flatten() {
            out.push(&mut h.hidden.weight);
            out.push(&mut h.hidden.bias);
            out.push(&mut h.out.weight);
            out.push(&mut h.out.bias);
        }
        out
    }

    /// Same structure, every tensor zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            *t = t.zeros_like();
        }
        z
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    /// Commits running statistics from a train-mode forward pass.
    pub fn apply_running_stats(&mut self, stats: &BranchStats) {
        if let (Some(bn), Some(s)) = (&mut self.image.bn, &stats.image) {
            bn.apply_running_stats(s);
        }
        if let (Some(bn), Some(s)) = (&mut self.text.bn, &stats.text) {
            bn.apply_running_stats(s);
        }
    }
}

/// Running statistics produced by a train-mode forward pass, per branch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BranchStats {
    pub image: Option<RunningStats>,
    pub text: Option<RunningStats>,
}

#[derive(Debug, Clone)]
struct NormCache {
    bn: Option<BatchNormCache>,
    l2: Option<L2NormCache>,
}

#[derive(Debug, Clone)]
struct ImageCache {
    fc1: FcCache,
    relu: ReluCache,
    drop: DropoutCache,
    fc2: FcCache,
    norm: NormCache,
}

#[derive(Debug, Clone)]
struct TextCache {
    cnn: TextCnnCache,
    drop: DropoutCache,
    fc: FcCache,
    norm: NormCache,
}

#[derive(Debug, Clone)]
struct HeadCache {
    hidden: FcCache,
    relu: ReluCache,
    drop: DropoutCache,
    out: FcCache,
}

/// Caches needed to run the backward pass for one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    image_rows: Vec<usize>,
    text_rows: Vec<usize>,
    image: Option<ImageCache>,
    text: Option<TextCache>,
    category: Option<HeadCache>,
    domain: Option<HeadCache>,
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// `[B × D]`, rows in the order of the input samples.
    pub embedding: Tensor,
    /// `[B × C]`, absent when the model has no category head.
    pub category_logits: Option<Tensor>,
    /// `[B × 1]`, absent when the model has no domain head.
    pub domain_logits: Option<Tensor>,
    pub stats: BranchStats,
    pub cache: ForwardCache,
}

/// Eval-mode outputs over a whole sample list.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub embedding: Tensor,
    pub category_logits: Option<Tensor>,
    pub domain_logits: Option<Tensor>,
}

/// Result of [`Model::backward_joint`].
#[derive(Debug, Clone)]
pub struct JointGrads {
    pub params: ModelParams,
    /// Gradient reaching the embedding: category part minus `λ` times the
    /// domain part.
    pub embedding: Tensor,
    pub loss_c: f64,
    pub loss_d: f64,
}

impl JointGrads {
    /// Reported total loss `L_c + L_d`.
    pub fn total_loss(&self) -> f64 {
        self.loss_c + self.loss_d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

fn norm_forward(
    x: &Tensor,
    bn: Option<&BatchNormParams>,
    l2: bool,
    mode: Mode,
) -> Result<(Tensor, NormCache, Option<RunningStats>), LayerError> {
    let (mut y, bn_cache, stats) = match bn {
        Some(p) => {
            let (y, c, s) = batchnorm_forward(x, p, mode)?;
            (y, Some(c), s)
        }
        None => (x.clone(), None, None),
    };
    let mut l2_cache = None;
    if l2 {
        let (z, c) = l2norm_forward(&y)?;
        y = z;
        l2_cache = Some(c);
    }
    Ok((
        y,
        NormCache {
            bn: bn_cache,
            l2: l2_cache,
        },
        stats,
    ))
}

/// Returns `(dx, dgamma, dbeta)` with the batch-norm grads present iff the
/// branch has batch-norm.
fn norm_backward(
    dy: &Tensor,
    cache: &NormCache,
) -> Result<(Tensor, Option<(Tensor, Tensor)>), LayerError> {
    let mut d = dy.clone();
    if let Some(c) = &cache.l2 {
        d = l2norm_backward(&d, c)?;
    }
    match &cache.bn {
        Some(c) => {
            let (dx, dg, db) = batchnorm_backward(&d, c)?;
            Ok((dx, Some((dg, db))))
        }
        None => Ok((d, None)),
    }
}

fn head_forward(
    x: &Tensor,
    p: &HeadParams,
    dropout: f64,
    mode: Mode,
    rng: &mut Rng,
) -> Result<(Tensor, HeadCache), LayerError> {
    let (h, hidden) = fc_forward(x, &p.hidden)?;
    let (h, relu) = relu_forward(&h);
    let (h, drop) = dropout_forward(&h, dropout, mode, rng)?;
    let (y, out) = fc_forward(&h, &p.out)?;
    Ok((
        y,
        HeadCache {
            hidden,
            relu,
            drop,
            out,
        },
    ))
}

fn head_backward(
    dy: &Tensor,
    cache: &HeadCache,
    p: &HeadParams,
) -> Result<(Tensor, HeadParams), LayerError> {
    let (dh, g_out) = fc_backward(dy, &cache.out, &p.out)?;
    let dh = dropout_backward(&dh, &cache.drop)?;
    let dh = relu_backward(&dh, &cache.relu);
    let (dx, g_hidden) = fc_backward(&dh, &cache.hidden, &p.hidden)?;
    Ok((
        dx,
        HeadParams {
            hidden: g_hidden,
            out: g_out,
        },
    ))
}

/// Stacks rank-1 or rank-2 features of `samples` into a batch tensor.
fn stack_features(samples: &[&Sample], shape: &[usize]) -> Result<Tensor, ModelError> {
    let inner: usize = shape.iter().product();
    let mut data = Vec::with_capacity(samples.len() * inner);
    for s in samples {
        if s.feature.shape() != shape {
            return Err(ModelError::SampleShape {
                id: s.id.clone(),
                got: s.feature.shape().to_vec(),
                expected: shape.to_vec(),
            });
        }
        data.extend_from_slice(s.feature.data());
    }
    let mut full = vec![samples.len()];
    full.extend_from_slice(shape);
    Ok(Tensor::new(&full, data)?)
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        let params = ModelParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    fn image_forward(
        &self,
        x: &Tensor,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Tensor, ImageCache, Option<RunningStats>), LayerError> {
        let p = &self.params.image;
        let (h, fc1) = fc_forward(x, &p.fc1)?;
        let (h, relu) = relu_forward(&h);
        let (h, drop) = dropout_forward(&h, self.config.dropout, mode, rng)?;
        let (h, fc2) = fc_forward(&h, &p.fc2)?;
        let (y, norm, stats) =
            norm_forward(&h, p.bn.as_ref(), self.config.image_norm.has_l2(), mode)?;
        Ok((
            y,
            ImageCache {
                fc1,
                relu,
                drop,
                fc2,
                norm,
            },
            stats,
        ))
    }

    fn text_forward(
        &self,
        x: &Tensor,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<(Tensor, TextCache, Option<RunningStats>), LayerError> {
        let p = &self.params.text;
        let (h, cnn) = textcnn_forward(x, &p.cnn)?;
        let (h, drop) = dropout_forward(&h, self.config.dropout, mode, rng)?;
        let (h, fc) = fc_forward(&h, &p.fc)?;
        let (y, norm, stats) =
            norm_forward(&h, p.bn.as_ref(), self.config.text_norm.has_l2(), mode)?;
        Ok((y, TextCache { cnn, drop, fc, norm }, stats))
    }

    /// Embeds a batch that may mix image and text samples, then runs every
    /// allocated head on the shared embedding. Dropout masks are drawn from
    /// `rng` in the order image branch, text branch, category head, domain
    /// head.
    pub fn forward(
        &self,
        samples: &[&Sample],
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ForwardOut, ModelError> {
        let d = self.config.embed_dim;
        let (image_rows, text_rows): (Vec<usize>, Vec<usize>) =
            (0..samples.len()).partition(|&i| samples[i].domain == Domain::Image);
        let mut embedding = Tensor::zeros(&[samples.len(), d]);
        let mut stats = BranchStats::default();

        let mut image = None;
        if !image_rows.is_empty() {
            let batch: Vec<&Sample> = image_rows.iter().map(|&i| samples[i]).collect();
            let x = stack_features(&batch, &self.config.image_shape())?;
            let (y, cache, s) = self.image_forward(&x, mode, rng)?;
            for (k, &row) in image_rows.iter().enumerate() {
                embedding.row_mut(row).copy_from_slice(y.row(k));
            }
            stats.image = s;
            image = Some(cache);
        }
        let mut text = None;
        if !text_rows.is_empty() {
            let batch: Vec<&Sample> = text_rows.iter().map(|&i| samples[i]).collect();
            let x = stack_features(&batch, &self.config.text_shape())?;
            let (y, cache, s) = self.text_forward(&x, mode, rng)?;
            for (k, &row) in text_rows.iter().enumerate() {
                embedding.row_mut(row).copy_from_slice(y.row(k));
            }
            stats.text = s;
            text = Some(cache);
        }

        let dropout = self.config.dropout;
        let (category_logits, category) = match &self.params.category {
            Some(h) if !samples.is_empty() => {
                let (y, c) = head_forward(&embedding, h, dropout, mode, rng)?;
                (Some(y), Some(c))
            }
            _ => (None, None),
        };
        let (domain_logits, domain) = match &self.params.domain {
            Some(h) if !samples.is_empty() => {
                let (y, c) = head_forward(&grl_forward(&embedding), h, dropout, mode, rng)?;
                (Some(y), Some(c))
            }
            _ => (None, None),
        };
        Ok(ForwardOut {
            embedding,
            category_logits,
            domain_logits,
            stats,
            cache: ForwardCache {
                image_rows,
                text_rows,
                image,
                text,
                category,
                domain,
            },
        })
    }

    /// Backpropagates a gradient at the embedding through both branches,
    /// accumulating into `grads`.
    pub fn backward_embedding(
        &self,
        cache: &ForwardCache,
        d_embedding: &Tensor,
        grads: &mut ModelParams,
    ) -> Result<(), ModelError> {
        if let Some(c) = &cache.image {
            let dy = d_embedding.select_rows(&cache.image_rows);
            let p = &self.params.image;
            let (dh, bn) = norm_backward(&dy, &c.norm)?;
            if let (Some((dg, db)), Some(g)) = (bn, &mut grads.image.bn) {
                g.gamma.add_assign(&dg)?;
                g.beta.add_assign(&db)?;
            }
            let (dh, g2) = fc_backward(&dh, &c.fc2, &p.fc2)?;
            let dh = dropout_backward(&dh, &c.drop)?;
            let dh = relu_backward(&dh, &c.relu);
            let (_, g1) = fc_backward(&dh, &c.fc1, &p.fc1)?;
            accumulate_fc(&mut grads.image.fc1, &g1)?;
            accumulate_fc(&mut grads.image.fc2, &g2)?;
        }
        if let Some(c) = &cache.text {
            let dy = d_embedding.select_rows(&cache.text_rows);
            let p = &self.params.text;
            let (dh, bn) = norm_backward(&dy, &c.norm)?;
            if let (Some((dg, db)), Some(g)) = (bn, &mut grads.text.bn) {
                g.gamma.add_assign(&dg)?;
                g.beta.add_assign(&db)?;
            }
            let (dh, gfc) = fc_backward(&dh, &c.fc, &p.fc)?;
            let dh = dropout_backward(&dh, &c.drop)?;
            let (_, gcnn) = textcnn_backward(&dh, &c.cnn, &p.cnn)?;
            accumulate_fc(&mut grads.text.fc, &gfc)?;
            for (acc, g) in grads.text.cnn.kernels.iter_mut().zip(&gcnn.kernels) {
                acc.add_assign(g)?;
            }
            for (acc, g) in grads.text.cnn.biases.iter_mut().zip(&gcnn.biases) {
                acc.add_assign(g)?;
            }
        }
        Ok(())
    }

    /// Category-head loss and its gradient at the embedding, accumulating
    /// head parameter gradients into `grads`.
    fn category_backward(
        &self,
        out: &ForwardOut,
        targets: &Tensor,
        grads: &mut ModelParams,
    ) -> Result<(f64, Tensor), ModelError> {
        let (Some(p), Some(logits), Some(cache)) = (
            &self.params.category,
            &out.category_logits,
            &out.cache.category,
        ) else {
            return Err(ModelError::MissingHead("category"));
        };
        check_targets(logits, targets)?;
        let (loss, dlogits) = sigmoid_xent(logits, targets)?;
        let (demb, g) = head_backward(&dlogits, cache, p)?;
        accumulate_head(grads.category.as_mut().expect("same layout"), &g)?;
        Ok((loss, demb))
    }

    /// Domain-head loss and the gradient at the GRL output (before
    /// reversal), accumulating head parameter gradients into `grads`.
    fn domain_backward(
        &self,
        out: &ForwardOut,
        targets: &Tensor,
        grads: &mut ModelParams,
    ) -> Result<(f64, Tensor), ModelError> {
        let (Some(p), Some(logits), Some(cache)) =
            (&self.params.domain, &out.domain_logits, &out.cache.domain)
        else {
            return Err(ModelError::MissingHead("domain"));
        };
        check_targets(logits, targets)?;
        let (loss, dlogits) = sigmoid_xent(logits, targets)?;
        let (dgrl, g) = head_backward(&dlogits, cache, p)?;
        accumulate_head(grads.domain.as_mut().expect("same layout"), &g)?;
        Ok((loss, dgrl))
    }

    /// Joint backward pass: `∂L/∂emb = ∂L_c/∂emb − λ·∂L_d/∂emb`.
    ///
    /// Heads that the model does not allocate are skipped (their loss is
    /// reported as 0); `domain_targets` is ignored without a domain head.
    pub fn backward_joint(
        &self,
        out: &ForwardOut,
        category_targets: &Tensor,
        domain_targets: &Tensor,
        lambda: f64,
    ) -> Result<JointGrads, ModelError> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(ModelError::Config(format!(
                "adaptation factor must be finite and non-negative, got {lambda}"
            )));
        }
        let mut grads = self.params.zeros_like();
        let mut d_emb = out.embedding.zeros_like();
        let mut loss_c = 0.0;
        let mut loss_d = 0.0;
        if self.params.category.is_some() {
            let (l, g) = self.category_backward(out, category_targets, &mut grads)?;
            loss_c = l;
            d_emb.add_assign(&g)?;
        }
        if self.params.domain.is_some() {
            let (l, g) = self.domain_backward(out, domain_targets, &mut grads)?;
            loss_d = l;
            d_emb.add_assign(&grl_backward(&g, lambda))?;
        }
        self.backward_embedding(&out.cache, &d_emb, &mut grads)?;
        Ok(JointGrads {
            params: grads,
            embedding: d_emb,
            loss_c,
            loss_d,
        })
    }

    /// Separately computed embedding gradients of the two heads:
    /// `(∂L_c/∂emb, ∂L_d/∂emb)`, the latter without reversal.
    pub fn head_embedding_grads(
        &self,
        out: &ForwardOut,
        category_targets: &Tensor,
        domain_targets: &Tensor,
    ) -> Result<(Tensor, Tensor), ModelError> {
        let mut scratch = self.params.zeros_like();
        let (_, gc) = self.category_backward(out, category_targets, &mut scratch)?;
        let (_, gd) = self.domain_backward(out, domain_targets, &mut scratch)?;
        Ok((gc, gd))
    }

    /// Eval-mode embeddings plus the logits of every allocated head.
    pub fn predict(&self, samples: &[&Sample]) -> Result<Prediction, ModelError> {
        const CHUNK: usize = 256;
        let mut rng = Rng::new(0);
        let mut parts: Vec<ForwardOut> = Vec::new();
        for chunk in samples.chunks(CHUNK) {
            parts.push(self.forward(chunk, Mode::Eval, &mut rng)?);
        }
        let stack = |pick: &dyn Fn(&ForwardOut) -> Option<&Tensor>| -> Result<Option<Tensor>, ModelError> {
            let ts: Option<Vec<&Tensor>> = parts.iter().map(pick).collect();
            match ts {
                Some(ts) if !ts.is_empty() => Ok(Some(Tensor::vstack(&ts)?)),
                _ => Ok(None),
            }
        };
        let embedding = stack(&|o| Some(&o.embedding))?
            .unwrap_or_else(|| Tensor::zeros(&[0, self.config.embed_dim]));
        Ok(Prediction {
            embedding,
            category_logits: stack(&|o| o.category_logits.as_ref())?,
            domain_logits: stack(&|o| o.domain_logits.as_ref())?,
        })
    }

    /// Eval-mode embeddings only; no head is evaluated. Samples are processed
    /// in chunks, which is exact because eval mode has no cross-sample
    /// coupling.
    pub fn embed(&self, samples: &[&Sample]) -> Result<Tensor, ModelError> {
        const CHUNK: usize = 256;
        let d = self.config.embed_dim;
        let mut out = Tensor::zeros(&[samples.len(), d]);
        let embed_only = Model {
            config: self.config.clone(),
            params: ModelParams {
                category: None,
                domain: None,
                ..self.params.clone()
            },
        };
        let mut rng = Rng::new(0);
        for (c, chunk) in samples.chunks(CHUNK).enumerate() {
            let fwd = embed_only.forward(chunk, Mode::Eval, &mut rng)?;
            out.data_mut()[c * CHUNK * d..(c * CHUNK + chunk.len()) * d]
                .copy_from_slice(fwd.embedding.data());
        }
        Ok(out)
    }
}

fn check_targets(logits: &Tensor, targets: &Tensor) -> Result<(), ModelError> {
    if logits.shape() != targets.shape() {
        return Err(ModelError::TargetShape {
            got: targets.shape().to_vec(),
            expected: logits.shape().to_vec(),
        });
    }
    Ok(())
}

fn accumulate_fc(acc: &mut FcParams, g: &FcParams) -> Result<(), ModelError> {
    acc.weight.add_assign(&g.weight)?;
    acc.bias.add_assign(&g.bias)?;
    Ok(())
}

fn accumulate_head(acc: &mut HeadParams, g: &HeadParams) -> Result<(), ModelError> {
    accumulate_fc(&mut acc.hidden, &g.hidden)?;
    accumulate_fc(&mut acc.out, &g.out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{domain_targets, label_matrix};

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            d_image_in: 5,
            d_word: 3,
            max_len: 4,
            image_hidden: 4,
            embed_dim: 3,
            n_categories: 2,
            text_widths: vec![1, 2],
            text_filters: 2,
            head_hidden: 3,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn tiny_batch(cfg: &ModelConfig, rng: &mut Rng) -> Vec<Sample> {
        (0..4)
            .map(|i| {
                let domain = if i % 2 == 0 { Domain::Image } else { Domain::Text };
                let feature = match domain {
                    Domain::Image => rng.gaussian(0.0, 1.0, &[cfg.d_image_in]).unwrap(),
                    Domain::Text => rng.gaussian(0.0, 1.0, &[cfg.max_len, cfg.d_word]).unwrap(),
                };
                Sample {
                    id: format!("s{i}"),
                    domain,
                    feature,
                    labels: Tensor::from_vec(vec![1.0, (i % 3 == 0) as u8 as f64]),
                    pair_id: None,
                }
            })
            .collect()
    }

    #[test]
    fn init_is_deterministic_with_expected_scheme() {
        let cfg = tiny_config();
        let a = ModelParams::init(&cfg, &mut Rng::new(4)).unwrap();
        let b = ModelParams::init(&cfg, &mut Rng::new(4)).unwrap();
        assert_eq!(a, b);
        for (name, t) in a.named() {
            if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with(".gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
        }
        assert_eq!(a.named().len(), a.clone().tensors_mut().len());
    }

    #[test]
    fn he_std_for_wide_fan_in() {
        let p = FcParams::he(4096, 64, &mut Rng::new(1));
        let n = p.weight.len() as f64;
        let mean = p.weight.sum() / n;
        let std = (p.weight.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let want = (2.0f64 / 4096.0).sqrt();
        assert!(((std - want) / want).abs() < 0.05);
    }

    #[test]
    fn embedding_rows_are_unit_for_l2_branch() {
        let cfg = tiny_config();
        let mut rng = Rng::new(2);
        let model = Model::new(cfg.clone(), &mut rng).unwrap();
        let batch = tiny_batch(&cfg, &mut rng);
        let refs: Vec<&Sample> = batch.iter().collect();
        let out = model.forward(&refs, Mode::Train, &mut rng).unwrap();
        for (i, s) in batch.iter().enumerate() {
            if s.domain == Domain::Text {
                let n: f64 = out.embedding.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() <= 1e-10);
            }
        }
        assert_eq!(out.category_logits.as_ref().unwrap().shape(), &[4, 2]);
        assert_eq!(out.domain_logits.as_ref().unwrap().shape(), &[4, 1]);
        assert!(out.stats.image.is_some() && out.stats.text.is_none());
    }

    #[test]
    fn wrong_feature_shape_is_rejected() {
        let cfg = tiny_config();
        let mut rng = Rng::new(3);
        let model = Model::new(cfg.clone(), &mut rng).unwrap();
        let mut batch = tiny_batch(&cfg, &mut rng);
        batch[1].feature = Tensor::zeros(&[cfg.max_len + 1, cfg.d_word]);
        let refs: Vec<&Sample> = batch.iter().collect();
        let err = model.forward(&refs, Mode::Eval, &mut rng).unwrap_err();
        assert!(matches!(err, ModelError::SampleShape { ref id, .. } if id == "s1"));
    }

    #[test]
    fn embed_matches_forward_and_is_permutation_equivariant() {
        let cfg = ModelConfig {
            dropout: 0.5,
            ..tiny_config()
        };
        let mut rng = Rng::new(5);
        let model = Model::new(cfg.clone(), &mut rng).unwrap();
        let batch = tiny_batch(&cfg, &mut rng);
        let refs: Vec<&Sample> = batch.iter().collect();
        let e = model.embed(&refs).unwrap();
        let f = model.forward(&refs, Mode::Eval, &mut Rng::new(9)).unwrap();
        assert_eq!(e, f.embedding);
        let g = model.forward(&refs, Mode::Eval, &mut Rng::new(10)).unwrap();
        assert_eq!(f.category_logits, g.category_logits);
        let rev: Vec<&Sample> = refs.iter().rev().copied().collect();
        let er = model.embed(&rev).unwrap();
        for i in 0..4 {
            assert_eq!(e.row(i), er.row(3 - i));
        }
        assert_eq!(model.embed(&[]).unwrap().shape(), &[0, cfg.embed_dim]);
    }

    #[test]
    fn lambda_zero_gives_category_only_embedding_gradient() {
        let cfg = tiny_config();
        let mut rng = Rng::new(6);
        let model = Model::new(cfg.clone(), &mut rng).unwrap();
        let batch = tiny_batch(&cfg, &mut rng);
        let refs: Vec<&Sample> = batch.iter().collect();
        let out = model.forward(&refs, Mode::Train, &mut rng).unwrap();
        let ct = label_matrix(&refs, cfg.n_categories);
        let dt = domain_targets(&refs);
        let j0 = model.backward_joint(&out, &ct, &dt, 0.0).unwrap();
        let (gc, gd) = model.head_embedding_grads(&out, &ct, &dt).unwrap();
        assert_eq!(j0.embedding, gc);
        let j1 = model.backward_joint(&out, &ct, &dt, 1.0).unwrap();
        for ((a, c), d) in j1.embedding.data().iter().zip(gc.data()).zip(gd.data()) {
            assert!((a - (c - d)).abs() <= 1e-15);
        }
        // Domain head parameters sit above the reversal and do not see λ.
        assert_eq!(j0.params.domain, j1.params.domain);
        assert!(j0.loss_d > 0.0 && j0.loss_c > 0.0);
    }

    #[test]
    fn category_only_model_has_no_domain_tensors() {
        let cfg = ModelConfig {
            domain_head: false,
            ..tiny_config()
        };
        let p = ModelParams::init(&cfg, &mut Rng::new(0)).unwrap();
        assert!(p.named().iter().all(|(n, _)| !n.starts_with("domain")));
        assert!(p.domain.is_none());
    }

    #[test]
    fn config_validation() {
        let bad = ModelConfig {
            embed_dim: 0,
            ..tiny_config()
        };
        assert!(Model::new(bad, &mut Rng::new(0)).is_err());
        let bad = ModelConfig {
            text_widths: vec![2, 5],
            ..tiny_config()
        };
        assert!(Model::new(bad, &mut Rng::new(0)).is_err());
    }
}
