//! Mini-batch training with checkpoint, plateau and early-stopping callbacks.

use serde::{Deserialize, Serialize};

use super::adam::{AdamConfig, AdamState};
use super::graph::{ForwardOpts, Graph};
use super::layer::LayerKind;
use super::loss::{argmax_accuracy, cross_entropy, one_hot, softmax_ce_grad};
use super::{NnError, Scalar, Tensor};
use crate::keyed_rng;
use crate::rng::permutation;

/// Metric watched by early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    ValLoss,
    ValAccuracy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_alpha: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { factor: 0.5, patience: 5, min_alpha: 1e-7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub early_stop_metric: StopMetric,
    pub batch_size: usize,
    pub alpha: f64,
    pub plateau: PlateauConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 250,
            early_stop_patience: 10,
            early_stop_metric: StopMetric::ValLoss,
            batch_size: 16,
            alpha: 1e-4,
            plateau: PlateauConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.max_epochs == 0 || self.early_stop_patience == 0 || self.batch_size == 0 {
            return Err(NnError::InvalidParam("max_epochs, patience and batch_size must be ≥ 1".into()));
        }
        if self.plateau.patience == 0 || !(self.plateau.factor > 0.0 && self.plateau.factor < 1.0) {
            return Err(NnError::InvalidParam("plateau factor must lie in (0, 1) and patience ≥ 1".into()));
        }
        if self.alpha <= 0.0 {
            return Err(NnError::InvalidParam("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// What the callbacks decided at the end of an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochDecision {
    /// Validation loss improved: snapshot the weights.
    pub checkpoint: bool,
    /// Learning rate after this epoch, if it was reduced.
    pub new_alpha: Option<f64>,
    pub stop: bool,
}

/// The three callbacks, fired in order: checkpoint-on-improvement (strict
/// `<` on validation loss), plateau learning-rate reduction (validation
/// loss), early stopping (configured metric).
#[derive(Debug, Clone)]
pub struct Callbacks {
    stop_metric: StopMetric,
    stop_patience: usize,
    plateau: PlateauConfig,
    alpha: f64,
    best_loss: f64,
    plateau_wait: usize,
    best_stop: f64,
    stop_wait: usize,
}

impl Callbacks {
    pub fn new(config: &TrainConfig) -> Self {
        Callbacks {
            stop_metric: config.early_stop_metric,
            stop_patience: config.early_stop_patience,
            plateau: config.plateau,
            alpha: config.alpha,
            best_loss: f64::INFINITY,
            plateau_wait: 0,
            best_stop: f64::NEG_INFINITY,
            stop_wait: 0,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn observe(&mut self, val_loss: f64, val_acc: f64) -> EpochDecision {
        let checkpoint = val_loss < self.best_loss;
        if checkpoint {
            self.best_loss = val_loss;
            self.plateau_wait = 0;
        } else {
            self.plateau_wait += 1;
        }

        let mut new_alpha = None;
        if self.plateau_wait >= self.plateau.patience {
            let reduced = (self.alpha * self.plateau.factor).max(self.plateau.min_alpha);
            if reduced < self.alpha {
                self.alpha = reduced;
                new_alpha = Some(reduced);
            }
            self.plateau_wait = 0;
        }

        // Early stopping tracks a "higher is better" score.
        let score = match self.stop_metric {
            StopMetric::ValLoss => -val_loss,
            StopMetric::ValAccuracy => val_acc,
        };
        if score > self.best_stop {
            self.best_stop = score;
            self.stop_wait = 0;
        } else {
            self.stop_wait += 1;
        }
        let stop = self.stop_wait >= self.stop_patience;
        EpochDecision { checkpoint, new_alpha, stop }
    }
}

/// In-memory labelled samples of one shape.
#[derive(Debug, Clone)]
pub struct SampleSet<T> {
    pub sample_shape: Vec<usize>,
    pub data: Vec<T>,
    pub labels: Vec<usize>,
    pub ids: Vec<String>,
}

impl<T: Scalar> SampleSet<T> {
    pub fn new(sample_shape: Vec<usize>) -> Self {
        SampleSet { sample_shape, data: Vec::new(), labels: Vec::new(), ids: Vec::new() }
    }

    pub fn push(&mut self, id: impl Into<String>, sample: &[T], label: usize) -> Result<(), NnError> {
        let per: usize = self.sample_shape.iter().product();
        if sample.len() != per {
            return Err(NnError::Shape(format!(
                "sample length {} does not match shape {:?}",
                sample.len(),
                self.sample_shape
            )));
        }
        self.data.extend_from_slice(sample);
        self.labels.push(label);
        self.ids.push(id.into());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[T] {
        let per: usize = self.sample_shape.iter().product();
        &self.data[i * per..(i + 1) * per]
    }

    /// Stack the given samples into a `[B, ...shape]` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>), NnError> {
        let samples: Vec<&[T]> = indices.iter().map(|&i| self.sample(i)).collect();
        let x = Tensor::stack(&self.sample_shape, &samples)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Everything as one tensor.
    pub fn all(&self) -> Result<Tensor<T>, NnError> {
        let mut shape = vec![self.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::from_vec(&shape, self.data.clone())
    }
}

/// Seeded shuffle of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = keyed_rng!(seed, "epoch", epoch);
    permutation(n, &mut rng)
}

/// Split an epoch order into batches; the short final batch is kept. When
/// `merge_singleton` is set a final batch of one sample is folded into the
/// previous batch (batch-norm cannot normalize a single sample).
pub fn batches(order: &[usize], batch_size: usize, merge_singleton: bool) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect();
    if merge_singleton && out.len() > 1 && out.last().map(Vec::len) == Some(1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("previous batch").extend(last);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    /// Learning rate used during this epoch.
    pub alpha: f64,
    pub checkpointed: bool,
    pub lr_reduced: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Evaluation of a graph on a sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    /// Row-major `[n × classes]` probabilities.
    pub probs: Vec<f64>,
}

/// Inference-mode loss (cross-entropy + L2) and argmax accuracy.
pub fn evaluate<T: Scalar>(graph: &Graph<T>, set: &SampleSet<T>, batch_size: usize) -> Result<Evaluation, NnError> {
    let classes = graph.num_classes();
    if set.is_empty() {
        return Err(NnError::InvalidParam("cannot evaluate on an empty set".into()));
    }
    let probs = graph.predict(&set.all()?, batch_size)?;
    let y = one_hot::<T>(&set.labels, classes)?;
    let loss = cross_entropy(&probs, &y, classes, graph.l2_penalty())?.f64();
    let accuracy = argmax_accuracy(&probs, &set.labels, classes);
    Ok(Evaluation { loss, accuracy, probs: probs.iter().map(|v| v.f64()).collect() })
}

/// Result of a training run: the best-checkpoint weights, not the last.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub graph: Graph<T>,
    pub history: History,
}

/// A failed run keeps the history recorded so far.
#[derive(Debug, thiserror::Error)]
#[error("training aborted after {} epochs: {error}", history.epochs.len())]
pub struct TrainFailure {
    pub error: NnError,
    pub history: History,
}

fn has_trainable_batchnorm<T: Scalar>(g: &Graph<T>) -> bool {
    g.layers().iter().any(|l| l.trainable() && matches!(l.kind(), LayerKind::BatchNorm { .. }))
}

/// One optimization step on a batch; returns `(loss, accuracy)` measured in
/// training mode.
pub fn train_step<T: Scalar>(
    graph: &mut Graph<T>,
    adam: &mut AdamState<T>,
    x: &Tensor<T>,
    labels: &[usize],
    opts: ForwardOpts,
) -> Result<(f64, f64), NnError> {
    let n = graph.layers().len();
    if !matches!(graph.layers()[n - 1].kind(), LayerKind::Softmax) || n < 2 {
        return Err(NnError::Graph("training needs a graph ending in softmax".into()));
    }
    let classes = graph.num_classes();
    let trace = graph.forward(x, opts)?;
    let probs = trace.final_output();
    let y = one_hot::<T>(labels, classes)?;
    let loss = cross_entropy(probs, &y, classes, graph.l2_penalty())?;
    if !loss.is_finite() {
        return Err(NnError::Numerical { layer: "loss".into() });
    }
    let acc = argmax_accuracy(probs, labels, classes);
    let seed = softmax_ce_grad(probs, &y, labels.len());
    let grads = graph.backward(&trace, n - 2, seed)?;
    adam.step(graph, &grads)?;
    graph.update_running_stats(&trace);
    Ok((loss.f64(), acc))
}

/// Train `graph` on `train`, validating on `val` after every epoch.
pub fn train_loop<T: Scalar>(
    mut graph: Graph<T>,
    train: &SampleSet<T>,
    val: &SampleSet<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, TrainFailure> {
    let mut history = History::default();
    let fail = |error: NnError, history: History| TrainFailure { error, history };
    if let Err(e) = config.validate() {
        return Err(fail(e, history));
    }
    if train.is_empty() || val.is_empty() {
        return Err(fail(NnError::InvalidParam("train and validation sets must be non-empty".into()), history));
    }
    let mut adam = AdamState::<T>::new(AdamConfig::with_alpha(config.alpha));
    let mut callbacks = Callbacks::new(config);
    let merge = has_trainable_batchnorm(&graph);
    let mut best = graph.clone();
    let mut step = 0u64;

    for epoch in 1..=config.max_epochs {
        let alpha = callbacks.alpha();
        adam.set_alpha(alpha);
        let order = epoch_order(train.len(), config.seed, epoch);
        let mut loss_sum = 0.0;
        let mut acc_sum = 0.0;
        for idx in batches(&order, config.batch_size, merge) {
            let (x, y) = match train.batch(&idx) {
                Ok(b) => b,
                Err(e) => return Err(fail(e, history)),
            };
            step += 1;
            match train_step(&mut graph, &mut adam, &x, &y, ForwardOpts::train(config.seed, step)) {
                Ok((l, a)) => {
                    loss_sum += l * idx.len() as f64;
                    acc_sum += a * idx.len() as f64;
                }
                Err(e) => return Err(fail(e, history)),
            }
        }
        let ev = match evaluate(&graph, val, config.batch_size) {
            Ok(ev) if ev.loss.is_finite() => ev,
            Ok(_) => return Err(fail(NnError::Numerical { layer: "validation loss".into() }, history)),
            Err(e) => return Err(fail(e, history)),
        };
        let decision = callbacks.observe(ev.loss, ev.accuracy);
        if decision.checkpoint {
            best = graph.clone();
            history.best_epoch = Some(epoch);
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_accuracy: acc_sum / train.len() as f64,
            val_loss: ev.loss,
            val_accuracy: ev.accuracy,
            alpha,
            checkpointed: decision.checkpoint,
            lr_reduced: decision.new_alpha.is_some(),
        });
        if decision.stop {
            history.stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome { graph: best, history })
}
