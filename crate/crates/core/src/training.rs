//! Model assembly, the minibatch training loop, evaluation, and seeded
//! multi-round experiment execution.
//!
//! A run is fully determined by (model spec, train config, dataset, seed):
//! weight init, epoch shuffles and dropout masks all draw from separate
//! ChaCha streams derived from the run seed, so rerunning reproduces every
//! result bit for bit (wall time aside).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::layers::{
    Activation, DenseLayer, DropConnectLayer, DropoutLayer, MaskMatrix, Mode, OslLayer,
};
use crate::linalg::{relu, softmax, Matrix};
use crate::losses::{
    center_loss, cross_entropy, focal, large_margin_backward, large_margin_logits, truncated_lq,
    ClassCenters, LossKind,
};
use crate::optim::{CosineSchedule, Optimizer, OptimizerKind, ProbPredictor, SnapshotSet};

/// Loss above which (or on any non-finite value) a round aborts as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

// Sub-stream ids for the per-run ChaCha streams.
const STREAM_INIT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_DROPCONNECT: u64 = 4;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// ---------------------------------------------------------------------------
// Specs

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    Fc,
    Osl,
}

/// Architecture plus loss selection for one experiment arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub classifier: ClassifierKind,
    #[serde(default)]
    pub hidden_dropout: Option<f64>,
    #[serde(default)]
    pub hidden_dropconnect: Option<f64>,
    pub loss: LossKind,
    #[serde(default)]
    pub classifier_bias: bool,
}

impl ModelSpec {
    pub fn validate(&self, class_count: usize) -> Result<()> {
        if self.hidden_widths.is_empty() {
            return Err(Error::Config("hidden_widths must not be empty".into()));
        }
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be >= 1".into()));
        }
        let last = *self.hidden_widths.last().expect("nonempty");
        if self.classifier == ClassifierKind::Osl && last < class_count {
            return Err(Error::Config(format!(
                "each class needs at least one hidden neuron: last hidden width {last} < {class_count} classes"
            )));
        }
        if let Some(p) = self.hidden_dropout {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("hidden_dropout must be in [0, 1), got {p}")));
            }
        }
        if let Some(q) = self.hidden_dropconnect {
            if !(0.0..1.0).contains(&q) {
                return Err(Error::Config(format!(
                    "hidden_dropconnect must be in [0, 1), got {q}"
                )));
            }
        }
        self.loss.validate()?;
        if matches!(self.loss, LossKind::LargeMargin { .. }) {
            if self.classifier == ClassifierKind::Osl {
                return Err(Error::Config(
                    "large_margin loss modifies dense classifier logits and cannot be combined with the osl classifier".into(),
                ));
            }
            if self.classifier_bias {
                return Err(Error::Config(
                    "large_margin loss requires a bias-free classifier".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Epoch,
    Iteration,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub cycles: usize,
    #[serde(default)]
    pub granularity: Granularity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default)]
    pub snapshot_count: Option<usize>,
    pub seed: u64,
}

impl TrainConfig {
    /// Batch size 32, 100 epochs, RMSprop at 1e-3: the small-sample recipe
    /// every arm shares unless configured otherwise.
    pub fn small_sample(seed: u64) -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            optimizer: OptimizerKind::Rmsprop {
                lr: 0.001,
                smoothing: 0.99,
                epsilon: 1e-8,
            },
            schedule: None,
            snapshot_count: None,
            seed,
        }
    }

    pub fn with_snapshots(mut self, count: usize) -> Self {
        self.snapshot_count = Some(count);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.optimizer.validate()?;
        if let Some(count) = self.snapshot_count {
            if count == 0 {
                return Err(Error::Config("snapshot_count must be >= 1".into()));
            }
            let schedule = self.effective_schedule();
            match schedule {
                Some(s) if s.granularity == Granularity::Iteration => {
                    return Err(Error::Config(
                        "snapshots require an epoch-granularity schedule".into(),
                    ));
                }
                Some(s) if s.cycles != count => {
                    return Err(Error::Config(format!(
                        "snapshot_count {count} does not match schedule cycles {}",
                        s.cycles
                    )));
                }
                _ => {}
            }
            if self.epochs % count != 0 {
                return Err(Error::Config(format!(
                    "epochs {} not divisible into {count} snapshot cycles",
                    self.epochs
                )));
            }
        }
        if let Some(s) = &self.schedule {
            if s.cycles == 0 {
                return Err(Error::Config("schedule cycles must be >= 1".into()));
            }
            if s.granularity == Granularity::Epoch && self.epochs % s.cycles != 0 {
                return Err(Error::Config(format!(
                    "epochs {} not divisible into {} schedule cycles",
                    self.epochs, s.cycles
                )));
            }
        }
        Ok(())
    }

    /// A snapshot count implies a matching per-epoch cyclic schedule.
    pub fn effective_schedule(&self) -> Option<ScheduleSpec> {
        self.schedule.or(self.snapshot_count.map(|count| ScheduleSpec {
            cycles: count,
            granularity: Granularity::Epoch,
        }))
    }
}

// ---------------------------------------------------------------------------
// Model

#[derive(Clone, Debug)]
pub enum HiddenUnit {
    Plain(DenseLayer),
    DropConnect(DropConnectLayer),
}

impl HiddenUnit {
    fn dense(&self) -> &DenseLayer {
        match self {
            HiddenUnit::Plain(d) => d,
            HiddenUnit::DropConnect(dc) => &dc.dense,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Classifier {
    Dense(DenseLayer),
    Osl(OslLayer),
}

/// An assembled network: relu hidden stack, optional dropout/dropconnect
/// regularization, and a dense or masked-orthogonal classification layer.
#[derive(Clone, Debug)]
pub struct Model {
    pub hidden: Vec<HiddenUnit>,
    pub classifier: Classifier,
    dropout: Option<DropoutLayer>,
    loss: LossKind,
    centers: Option<ClassCenters>,
}

/// Per-batch caches needed by the backward pass.
struct Trace {
    /// Input to each hidden layer.
    inputs: Vec<Matrix>,
    /// Pre-activations of each hidden layer.
    pres: Vec<Matrix>,
    /// Scaled dropout keep-masks (one per hidden layer when dropout is on).
    dropout_masks: Vec<Option<Matrix>>,
    /// Features entering the classifier.
    features: Matrix,
}

/// Gradients in optimizer order: hidden (weights, bias) pairs, then the
/// classifier.
struct Gradients {
    hidden: Vec<(Matrix, Option<Matrix>)>,
    classifier_weights: Matrix,
    classifier_bias: Option<Matrix>,
}

impl Model {
    pub fn build(spec: &ModelSpec, class_count: usize, seed: u64) -> Result<Model> {
        spec.validate(class_count)?;
        let mut init_rng = stream_rng(seed, STREAM_INIT);
        let mut hidden = Vec::new();
        let mut width = spec.input_dim;
        for (i, &w) in spec.hidden_widths.iter().enumerate() {
            // Hidden layers keep biases; classification layers drop them
            // unless explicitly enabled.
            let dense = DenseLayer::init(width, w, true, Activation::Relu, &mut init_rng);
            let unit = match spec.hidden_dropconnect {
                Some(q) => {
                    let mut dc = DropConnectLayer::new(
                        dense,
                        q,
                        sub_seed(seed, STREAM_DROPCONNECT + i as u64),
                    )?;
                    dc.set_mode(Mode::Eval);
                    HiddenUnit::DropConnect(dc)
                }
                None => HiddenUnit::Plain(dense),
            };
            hidden.push(unit);
            width = w;
        }
        let classifier = match spec.classifier {
            ClassifierKind::Fc => Classifier::Dense(DenseLayer::init(
                width,
                class_count,
                spec.classifier_bias,
                Activation::Softmax,
                &mut init_rng,
            )),
            ClassifierKind::Osl => {
                let mask = MaskMatrix::build(width, class_count)?;
                Classifier::Osl(OslLayer::init(mask, &mut init_rng))
            }
        };
        let dropout = match spec.hidden_dropout {
            Some(p) => Some(DropoutLayer::new(p, sub_seed(seed, STREAM_DROPOUT))?),
            None => None,
        };
        let centers = match spec.loss {
            LossKind::Center { alpha_center, .. } => {
                Some(ClassCenters::new(width, class_count, alpha_center))
            }
            _ => None,
        };
        Ok(Model {
            hidden,
            classifier,
            dropout,
            loss: spec.loss.clone(),
            centers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.hidden
            .first()
            .map(|u| u.dense().input_width())
            .expect("at least one hidden layer")
    }

    pub fn class_count(&self) -> usize {
        match &self.classifier {
            Classifier::Dense(d) => d.output_width(),
            Classifier::Osl(o) => o.classes(),
        }
    }

    /// Classification-layer weights as the input actually sees them
    /// (mask applied for the orthogonal layer).
    pub fn classifier_weights(&self) -> Matrix {
        match &self.classifier {
            Classifier::Dense(d) => d.weights.clone(),
            Classifier::Osl(o) => o.effective_weights(),
        }
    }

    /// Eval-mode features entering the classifier: dropout is the identity,
    /// dropconnect layers use expected weights.
    fn features_eval(&self, x: &Matrix) -> Result<Matrix> {
        let mut h = x.clone();
        for unit in &self.hidden {
            h = match unit {
                HiddenUnit::Plain(d) => d.forward(&h)?,
                HiddenUnit::DropConnect(dc) => {
                    let eval = DenseLayer {
                        weights: dc.eval_weights(),
                        bias: dc.dense.bias.clone(),
                        activation: dc.dense.activation,
                    };
                    eval.forward(&h)?
                }
            };
        }
        Ok(h)
    }

    pub fn logits_eval(&self, x: &Matrix) -> Result<Matrix> {
        let features = self.features_eval(x)?;
        match &self.classifier {
            Classifier::Dense(d) => d.linear(&features),
            Classifier::Osl(o) => o.logits(&features),
        }
    }

    /// Train-mode forward pass, returning the logits and the caches the
    /// backward pass needs.
    fn forward_train(&mut self, x: &Matrix) -> Result<(Matrix, Trace)> {
        let n_hidden = self.hidden.len();
        let mut inputs = Vec::with_capacity(n_hidden);
        let mut pres = Vec::with_capacity(n_hidden);
        let mut dropout_masks = Vec::with_capacity(n_hidden);
        let mut h = x.clone();
        for unit in &mut self.hidden {
            inputs.push(h.clone());
            let pre = match unit {
                HiddenUnit::Plain(d) => d.linear(&h)?,
                HiddenUnit::DropConnect(dc) => {
                    dc.set_mode(Mode::Train);
                    // Sample the per-batch weight mask through the layer's
                    // own stream, then recompute the linear part with it.
                    dc.forward(&h)?;
                    let mask = dc.last_mask().expect("train forward stores a mask");
                    let masked = DenseLayer {
                        weights: dc.dense.weights.hadamard(mask)?,
                        bias: dc.dense.bias.clone(),
                        activation: Activation::Identity,
                    };
                    masked.linear(&h)?
                }
            };
            let mut act = relu(&pre);
            pres.push(pre);
            let mask = match &mut self.dropout {
                Some(layer) => {
                    let (dropped, mask) = layer.forward_train(&act);
                    act = dropped;
                    Some(mask)
                }
                None => None,
            };
            dropout_masks.push(mask);
            h = act;
        }
        let features = h;
        let logits = match &self.classifier {
            Classifier::Dense(d) => d.linear(&features)?,
            Classifier::Osl(o) => o.logits(&features)?,
        };
        Ok((
            logits,
            Trace {
                inputs,
                pres,
                dropout_masks,
                features,
            },
        ))
    }

    /// Backward from dL/dlogits. `feature_grad_extra` adds a term to the
    /// gradient at the classifier input (center loss); when
    /// `classifier_override` is given (large-margin loss differentiates the
    /// classifier itself) it replaces the classifier gradients and the
    /// feature gradient entirely.
    fn backward(
        &self,
        trace: &Trace,
        dlogits: &Matrix,
        feature_grad_extra: Option<&Matrix>,
        classifier_override: Option<(Matrix, Matrix)>,
    ) -> Result<Gradients> {
        let (classifier_weights, classifier_bias, mut dfeat) = match classifier_override {
            Some((dw, dfeat)) => (dw, None, dfeat),
            None => match &self.classifier {
                Classifier::Dense(d) => {
                    let grads = d.backward_linear(dlogits, &trace.features)?;
                    (grads.weights, grads.bias, grads.input)
                }
                Classifier::Osl(o) => {
                    let (dw, dx) = o.backward_logits(dlogits, &trace.features)?;
                    (dw, None, dx)
                }
            },
        };
        if let Some(extra) = feature_grad_extra {
            dfeat.add_assign(extra)?;
        }

        let mut hidden = vec![None; self.hidden.len()];
        for (i, unit) in self.hidden.iter().enumerate().rev() {
            let mut upstream = dfeat;
            if let Some(mask) = &trace.dropout_masks[i] {
                upstream = upstream.hadamard(mask)?;
            }
            let dpre = upstream.hadamard(&trace.pres[i].map(|v| if v > 0.0 { 1.0 } else { 0.0 }))?;
            let grads = match unit {
                HiddenUnit::Plain(d) => d.backward_linear(&dpre, &trace.inputs[i])?,
                HiddenUnit::DropConnect(dc) => dc.backward_linear(&dpre, &trace.inputs[i])?,
            };
            hidden[i] = Some((grads.weights, grads.bias));
            dfeat = grads.input;
        }
        Ok(Gradients {
            hidden: hidden.into_iter().map(|g| g.expect("filled")).collect(),
            classifier_weights,
            classifier_bias,
        })
    }

    /// Apply one optimizer step over all parameters.
    fn apply_step(&mut self, optimizer: &mut Optimizer, grads: &Gradients) -> Result<()> {
        let mut params: Vec<&mut Matrix> = Vec::new();
        let mut gradients: Vec<&Matrix> = Vec::new();
        for (unit, (gw, gb)) in self.hidden.iter_mut().zip(&grads.hidden) {
            let dense = match unit {
                HiddenUnit::Plain(d) => d,
                HiddenUnit::DropConnect(dc) => &mut dc.dense,
            };
            params.push(&mut dense.weights);
            gradients.push(gw);
            if let (Some(b), Some(gb)) = (&mut dense.bias, gb) {
                params.push(b);
                gradients.push(gb);
            }
        }
        match &mut self.classifier {
            Classifier::Dense(d) => {
                params.push(&mut d.weights);
                gradients.push(&grads.classifier_weights);
                if let (Some(b), Some(gb)) = (&mut d.bias, &grads.classifier_bias) {
                    params.push(b);
                    gradients.push(gb);
                }
            }
            Classifier::Osl(o) => {
                params.push(&mut o.weights);
                gradients.push(&grads.classifier_weights);
            }
        }
        optimizer.step(&mut params, &gradients)?;

        // Masked positions get zero gradients, so the update must leave
        // them exactly zero.
        if let Classifier::Osl(o) = &self.classifier {
            debug_assert!(o
                .weights
                .data()
                .iter()
                .zip(o.mask.matrix().data())
                .all(|(&w, &m)| m == 1.0 || w == 0.0));
        }
        Ok(())
    }

    /// One training step on a batch; returns the batch loss.
    fn train_batch(
        &mut self,
        x: &Matrix,
        labels: &[usize],
        optimizer: &mut Optimizer,
        lm_lambda: f64,
    ) -> Result<f64> {
        let (logits, trace) = self.forward_train(x)?;
        let loss = self.loss.clone();
        let (loss_value, grads) = match &loss {
            LossKind::CrossEntropy => {
                let (value, dlogits) = cross_entropy(&softmax(&logits), labels)?;
                (value, self.backward(&trace, &dlogits, None, None)?)
            }
            LossKind::Focal { gamma } => {
                let (value, dlogits) = focal(&softmax(&logits), labels, *gamma)?;
                (value, self.backward(&trace, &dlogits, None, None)?)
            }
            LossKind::TruncatedLq { q, k_thresh } => {
                let (value, dlogits) = truncated_lq(&softmax(&logits), labels, *q, *k_thresh)?;
                (value, self.backward(&trace, &dlogits, None, None)?)
            }
            LossKind::Center { lambda, .. } => {
                let (ce_value, dlogits) = cross_entropy(&softmax(&logits), labels)?;
                let centers = self.centers.as_ref().expect("centers built with loss");
                let out = center_loss(&trace.features, labels, centers, *lambda)?;
                let grads = self.backward(&trace, &dlogits, Some(&out.grad_features), None)?;
                self.centers
                    .as_mut()
                    .expect("centers built with loss")
                    .set_centers(out.center_update);
                (ce_value + out.loss_term, grads)
            }
            LossKind::LargeMargin { margin, .. } => {
                let weights = match &self.classifier {
                    Classifier::Dense(d) => d.weights.clone(),
                    Classifier::Osl(_) => unreachable!("rejected by ModelSpec::validate"),
                };
                let modified =
                    large_margin_logits(&weights, &trace.features, labels, *margin, lm_lambda)?;
                let (value, dmod) = cross_entropy(&softmax(&modified), labels)?;
                let (dw, dfeat) = large_margin_backward(
                    &weights,
                    &trace.features,
                    labels,
                    *margin,
                    lm_lambda,
                    &dmod,
                )?;
                (value, self.backward(&trace, &dmod, None, Some((dw, dfeat)))?)
            }
        };
        self.apply_step(optimizer, &grads)?;
        Ok(loss_value)
    }
}

impl ProbPredictor for Model {
    fn predict_probs(&self, inputs: &Matrix) -> Result<Matrix> {
        Ok(softmax(&self.logits_eval(inputs)?))
    }
}

impl DropConnectLayer {
    /// Backward through the linear part honoring the current mode: the
    /// per-batch mask in train mode, expected-weight scaling in eval mode.
    pub fn backward_linear(
        &self,
        dpre: &Matrix,
        input: &Matrix,
    ) -> Result<crate::layers::DenseGrads> {
        match self.mode {
            Mode::Eval => {
                let eval = DenseLayer {
                    weights: self.eval_weights(),
                    bias: self.dense.bias.clone(),
                    activation: Activation::Identity,
                };
                let mut grads = eval.backward_linear(dpre, input)?;
                grads.weights = grads.weights.scale(1.0 - self.q);
                Ok(grads)
            }
            Mode::Train => {
                let mask = self.last_mask().ok_or_else(|| {
                    Error::State("dropconnect backward without a sampled mask".into())
                })?;
                let masked = DenseLayer {
                    weights: self.dense.weights.hadamard(mask)?,
                    bias: self.dense.bias.clone(),
                    activation: Activation::Identity,
                };
                let mut grads = masked.backward_linear(dpre, input)?;
                grads.weights = grads.weights.hadamard(mask)?;
                Ok(grads)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Run results

/// Everything one training round reports; the unit of statistical
/// aggregation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Eval-mode cross-entropy on the training split after the last epoch.
    pub final_train_loss: f64,
    /// Mean train loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Test accuracy per epoch.
    pub acc_curve: Vec<f64>,
    pub wall_time_secs: f64,
    pub config_hash: String,
}

pub struct TrainOutput {
    pub result: RunResult,
    pub model: Model,
    pub snapshots: Option<SnapshotSet<Model>>,
}

fn sub_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 over (seed ^ tag); enough separation for stream seeding.
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fraction of argmax-correct predictions over one split, in eval mode.
pub fn evaluate(model: &Model, data: &Dataset, split: SplitTag) -> Result<f64> {
    let (x, labels) = data.subset(split);
    if labels.is_empty() {
        return Err(Error::Argument(format!("split {split:?} is empty")));
    }
    let logits = model.logits_eval(&x)?;
    Ok(accuracy_from_logits(&logits, &labels))
}

fn accuracy_from_logits(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for r in 0..logits.rows() {
            let v = logits.get(r, i);
            if v > best_v {
                best_v = v;
                best = r;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

fn mean_cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy(probs, labels)?.0)
}

/// Train one model. Deterministic given (spec, config, data): rerunning
/// with equal inputs reproduces the result bit for bit except wall time.
pub fn train(spec: &ModelSpec, config: &TrainConfig, data: &Dataset) -> Result<TrainOutput> {
    train_fingerprinted(spec, config, data, "")
}

pub fn train_fingerprinted(
    spec: &ModelSpec,
    config: &TrainConfig,
    data: &Dataset,
    config_hash: &str,
) -> Result<TrainOutput> {
    config.validate()?;
    data.validate_for_training()?;
    if spec.input_dim != data.dim() {
        return Err(Error::Config(format!(
            "model input_dim {} does not match dataset dim {}",
            spec.input_dim,
            data.dim()
        )));
    }
    let start = std::time::Instant::now();
    let class_count = data.class_count();
    let mut model = Model::build(spec, class_count, config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut shuffle_rng = stream_rng(config.seed, STREAM_SHUFFLE);

    let (train_x, train_y) = data.subset(SplitTag::Train);
    let (test_x, test_y) = data.subset(SplitTag::Test);
    let n_train = train_y.len();
    let steps_per_epoch = n_train.div_ceil(config.batch_size);

    let schedule = config.effective_schedule().map(|s| {
        let (cycle_length, total) = match s.granularity {
            Granularity::Epoch => (config.epochs / s.cycles, config.epochs),
            Granularity::Iteration => {
                let total = config.epochs * steps_per_epoch;
                (total.div_ceil(s.cycles), total)
            }
        };
        debug_assert!(cycle_length * s.cycles >= total);
        (
            CosineSchedule::new(config.optimizer.learning_rate(), cycle_length, s.cycles)
                .expect("validated"),
            s.granularity,
        )
    });

    let mut snapshots = config.snapshot_count.map(|count| {
        SnapshotSet::new(config.epochs / count)
    });

    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut acc_curve = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        if let Some((cosine, Granularity::Epoch)) = &schedule {
            optimizer.set_rate(cosine.rate(epoch)?);
        }
        let lm_lambda = large_margin_lambda(&spec.loss, epoch);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            if let Some((cosine, Granularity::Iteration)) = &schedule {
                optimizer.set_rate(cosine.rate(global_step)?);
            }
            let batch_x = Matrix::from_fn(train_x.rows(), chunk.len(), |r, c| {
                train_x.get(r, chunk[c])
            });
            let batch_y: Vec<usize> = chunk.iter().map(|&i| train_y[i]).collect();
            let loss = model.train_batch(&batch_x, &batch_y, &mut optimizer, lm_lambda)?;
            if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    epoch,
                    message: format!("batch loss {loss}"),
                });
            }
            epoch_loss += loss * chunk.len() as f64;
            global_step += 1;
        }
        loss_curve.push(epoch_loss / n_train as f64);

        let test_logits = model.logits_eval(&test_x)?;
        acc_curve.push(accuracy_from_logits(&test_logits, &test_y));

        if let Some(set) = &mut snapshots {
            let epochs_done = epoch + 1;
            if epochs_done % (config.epochs / config.snapshot_count.expect("set")) == 0 {
                set.capture(&model, epochs_done)?;
            }
        }
    }

    // Final metrics: snapshot arms report ensemble predictions, plain arms
    // the final model.
    let (train_probs, test_probs) = match &snapshots {
        Some(set) if !set.is_empty() => (
            set.ensemble_predict(&train_x)?,
            set.ensemble_predict(&test_x)?,
        ),
        _ => (
            model.predict_probs(&train_x)?,
            model.predict_probs(&test_x)?,
        ),
    };
    let train_acc = accuracy_from_probs(&train_probs, &train_y);
    let test_acc = accuracy_from_probs(&test_probs, &test_y);
    let final_train_loss = mean_cross_entropy(&train_probs, &train_y)?;

    let result = RunResult {
        seed: config.seed,
        train_acc,
        test_acc,
        final_train_loss,
        loss_curve,
        acc_curve,
        wall_time_secs: start.elapsed().as_secs_f64(),
        config_hash: config_hash.to_string(),
    };
    Ok(TrainOutput {
        result,
        model,
        snapshots,
    })
}

fn accuracy_from_probs(probs: &Matrix, labels: &[usize]) -> f64 {
    accuracy_from_logits(probs, labels)
}

fn large_margin_lambda(loss: &LossKind, epoch: usize) -> f64 {
    match loss {
        LossKind::LargeMargin {
            lambda_start,
            lambda_decay,
            lambda_floor,
            ..
        } => (lambda_start * lambda_decay.powi(epoch as i32)).max(*lambda_floor),
        _ => 0.0,
    }
}

// ---------------------------------------------------------------------------
// Multi-round execution

/// Per-round dataset source. Rounds are seeded `base + round`, so a
/// provider decides how much varies between rounds (fresh sample draw,
/// fresh split, or nothing).
pub trait DataProvider: Sync {
    fn dataset_for_round(&self, round: usize) -> Result<Dataset>;
}

impl<F: Fn(usize) -> Result<Dataset> + Sync> DataProvider for F {
    fn dataset_for_round(&self, round: usize) -> Result<Dataset> {
        self(round)
    }
}

/// One finished round: either the run report plus the final classifier
/// weights, or the error that stopped it.
pub struct RoundOutcome {
    pub round: usize,
    pub seed: u64,
    pub outcome: Result<RoundSuccess>,
}

pub struct RoundSuccess {
    pub result: RunResult,
    pub classifier_weights: Matrix,
}

/// Run `rounds` seeded rounds (seed = base + round), optionally in
/// parallel. Results are ordered by round index regardless of completion
/// order; per-round failures are reported in place and do not stop the
/// remaining rounds.
pub fn run_rounds(
    spec: &ModelSpec,
    config: &TrainConfig,
    provider: &dyn DataProvider,
    rounds: usize,
    workers: usize,
    config_hash: &str,
) -> Result<Vec<RoundOutcome>> {
    if rounds < 2 {
        return Err(Error::Argument(format!(
            "multi-round execution needs rounds >= 2, got {rounds}"
        )));
    }
    let run_one = |round: usize| -> RoundOutcome {
        let seed = config.seed + round as u64;
        let round_config = TrainConfig {
            seed,
            ..config.clone()
        };
        let outcome = provider.dataset_for_round(round).and_then(|data| {
            train_fingerprinted(spec, &round_config, &data, config_hash).map(|out| RoundSuccess {
                classifier_weights: out.model.classifier_weights(),
                result: out.result,
            })
        });
        RoundOutcome {
            round,
            seed,
            outcome,
        }
    };

    let outcomes: Vec<RoundOutcome> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::State(format!("thread pool: {e}")))?;
        pool.install(|| (0..rounds).into_par_iter().map(run_one).collect())
    } else {
        (0..rounds).map(run_one).collect()
    };
    Ok(outcomes)
}
