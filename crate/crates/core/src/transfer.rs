//! Frozen-backbone transfer: cut a pretrained graph at its cut point, attach
//! a fresh classification head and fine-tune only the head.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{LeakageReport, Violation};
use crate::nn::graph::{ForwardOpts, Graph, GraphSpec};
use crate::nn::layer::{LayerKind, LayerSpec, GRAPH_INPUT};
use crate::nn::train::{train_loop, History, SampleSet, StopMetric, TrainConfig, TrainFailure};
use crate::nn::{NnError, Tensor};
use crate::persist::{self, CheckpointMeta, PersistError};

#[derive(Debug, thiserror::Error)]
pub enum TransferError {
    #[error("cut point '{0}' is not a layer of the checkpoint graph")]
    CutPointError(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("refusing to fine-tune: the manifest fails the leakage audit ({} violations)", .0.len())]
    LeakageRefusal(Vec<Violation>),
    #[error("invalid transfer config: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Persist(PersistError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Train(#[from] TrainFailure),
}

impl From<PersistError> for TransferError {
    fn from(e: PersistError) -> Self {
        match e {
            PersistError::CorruptCheckpoint(m) => TransferError::CorruptCheckpoint(m),
            PersistError::ProbeMismatch { layer } => {
                TransferError::CorruptCheckpoint(format!("probe activation at '{layer}' not reproduced"))
            }
            other => TransferError::Persist(other),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub dense_width: usize,
    pub dropout_p: f64,
    pub l2_lambda: f64,
    /// Multiplier on the classifier's Glorot init. A small value starts the
    /// head near uniform predictions, so the first low-rate updates are spent
    /// on the class direction rather than undoing a random logit offset.
    pub out_init_scale: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig { dense_width: 64, dropout_p: 0.5, l2_lambda: 1e-4, out_init_scale: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub head: HeadConfig,
    pub fine_tune_alpha: f64,
    pub freeze_backbone: bool,
    pub source_checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            head: HeadConfig::default(),
            fine_tune_alpha: 1e-5,
            freeze_backbone: true,
            source_checkpoint: None,
            train: TrainConfig { early_stop_metric: StopMetric::ValAccuracy, alpha: 1e-5, ..TrainConfig::default() },
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<(), TransferError> {
        if !(self.fine_tune_alpha > 0.0) {
            return Err(TransferError::InvalidParam("fine_tune_alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.head.dropout_p) {
            return Err(TransferError::InvalidParam("dropout_p must lie in [0, 1)".into()));
        }
        if self.head.dense_width == 0 || self.head.l2_lambda < 0.0 {
            return Err(TransferError::InvalidParam("dense_width must be positive and l2_lambda non-negative".into()));
        }
        if !(self.head.out_init_scale > 0.0 && self.head.out_init_scale <= 1.0) {
            return Err(TransferError::InvalidParam("out_init_scale must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

pub const HEAD_GAP: &str = "head_gap";
pub const HEAD_BN: &str = "head_bn";
pub const HEAD_DROPOUT: &str = "head_dropout";
pub const HEAD_DENSE: &str = "head_dense";
pub const HEAD_RELU: &str = "head_relu";
pub const HEAD_OUT: &str = "head_out";
pub const HEAD_SOFTMAX: &str = "head_softmax";
pub const HEAD_LAYERS: [&str; 7] = [HEAD_GAP, HEAD_BN, HEAD_DROPOUT, HEAD_DENSE, HEAD_RELU, HEAD_OUT, HEAD_SOFTMAX];

/// Keep layers up to and including `cut_point` and mark all of them frozen.
pub fn freeze_backbone(graph: &Graph<f32>, cut_point: &str) -> Result<Graph<f32>, TransferError> {
    if graph.layer_index(cut_point).is_none() {
        return Err(TransferError::CutPointError(cut_point.into()));
    }
    let mut g = graph.truncate(cut_point)?;
    g.freeze_all();
    Ok(g)
}

/// Load a checkpoint (CRC and probe verified) and return its frozen backbone.
/// `cut_point` defaults to the one stored in the graph.
pub fn load_frozen_backbone(
    path: &Path,
    cut_point: Option<&str>,
) -> Result<(Graph<f32>, CheckpointMeta), TransferError> {
    let ckpt = persist::load_checkpoint(path)?;
    let cut = match cut_point.or(ckpt.graph.cut_point()) {
        Some(c) => c.to_string(),
        None => return Err(TransferError::CutPointError("<none recorded>".into())),
    };
    Ok((freeze_backbone(&ckpt.graph, &cut)?, ckpt.meta))
}

/// Append GAP → BN → Dropout → Dense(width, L2) → ReLU → Dense(classes) → Softmax.
/// New layers are trainable; the fragment's flags are left as they are.
pub fn attach_head(
    fragment: &Graph<f32>,
    config: &TransferConfig,
    num_classes: usize,
    seed: u64,
) -> Result<Graph<f32>, TransferError> {
    config.validate()?;
    let out = fragment.output_shape();
    if out.len() != 3 {
        return Err(TransferError::ShapeError(format!("fragment output {out:?} is not a feature map")));
    }
    let last = fragment.layers().last().expect("non-empty fragment").name().to_string();
    let channels = out[0];
    let h = &config.head;
    let layers = vec![
        LayerSpec::new(HEAD_GAP, LayerKind::GlobalAvgPool, &[&last]),
        LayerSpec::new(HEAD_BN, LayerKind::batch_norm(channels), &[HEAD_GAP]),
        LayerSpec::new(HEAD_DROPOUT, LayerKind::Dropout { p: h.dropout_p }, &[HEAD_BN]),
        LayerSpec::new(HEAD_DENSE, LayerKind::Dense { inp: channels, out: h.dense_width, l2: h.l2_lambda }, &[HEAD_DROPOUT]),
        LayerSpec::new(HEAD_RELU, LayerKind::Relu, &[HEAD_DENSE]),
        LayerSpec::new(HEAD_OUT, LayerKind::Dense { inp: h.dense_width, out: num_classes, l2: 0.0 }, &[HEAD_RELU]),
        LayerSpec::new(HEAD_SOFTMAX, LayerKind::Softmax, &[HEAD_OUT]),
    ];
    let mut g = fragment.extend(layers, num_classes, seed)?;
    let key = format!("{HEAD_OUT}/weight");
    let mut w = g.tensor(&key).expect("head weight").clone();
    let scale = h.out_init_scale as f32;
    w.data_mut().iter_mut().for_each(|v| *v *= scale);
    g.set_tensor(&key, w)?;
    Ok(g)
}

/// Names of the layers that precede the first head layer.
pub fn backbone_layers(graph: &Graph<f32>) -> Vec<String> {
    graph.layers().iter().map(|l| l.name().to_string()).take_while(|n| n != HEAD_GAP).collect()
}

/// Hash of every backbone parameter and buffer.
pub fn backbone_hash(graph: &Graph<f32>) -> String {
    persist::weights_hash(graph, Some(&backbone_layers(graph)))
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    pub graph: Graph<f32>,
    pub history: History,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

/// Split at the last frozen prefix layer feeding the head: returns the index of
/// that layer when every later layer is trainable and reads only from it or
/// from later layers.
fn frozen_prefix(graph: &Graph<f32>) -> Option<usize> {
    let first_head = graph.layers().iter().position(|l| l.trainable())?;
    if first_head == 0 || graph.layers()[..first_head].iter().any(|l| l.trainable()) {
        return None;
    }
    let cut = first_head - 1;
    let cut_name = graph.layers()[cut].name();
    for i in first_head..graph.layers().len() {
        if !graph.layers()[i].trainable() {
            return None;
        }
        for inp in graph.inputs_of(i) {
            let ok = inp == cut_name || graph.layer_index(inp).is_some_and(|j| j >= first_head);
            if !ok {
                return None;
            }
        }
    }
    Some(cut)
}

/// The trainable tail as a standalone graph whose input is the cut activation.
fn suffix_graph(graph: &Graph<f32>, cut: usize) -> Result<Graph<f32>, NnError> {
    let cut_name = graph.layers()[cut].name().to_string();
    let full = graph.spec();
    let layers: Vec<LayerSpec> = full.layers[cut + 1..]
        .iter()
        .map(|ls| {
            let mut ls = ls.clone();
            for inp in ls.inputs.iter_mut() {
                if *inp == cut_name {
                    *inp = GRAPH_INPUT.to_string();
                }
            }
            ls
        })
        .collect();
    let spec = GraphSpec {
        family: full.family,
        input_shape: graph.shape_of(cut).to_vec(),
        num_classes: full.num_classes,
        cut_point: None,
        layers,
    };
    let names: Vec<String> = spec.layers.iter().map(|l| l.name.clone()).collect();
    let tensors = graph
        .named_tensors()
        .into_iter()
        .filter(|(n, _)| names.iter().any(|l| n.rsplit_once('/').is_some_and(|(ln, _)| ln == l)))
        .map(|(n, t)| (n, t.clone()))
        .collect();
    Graph::from_parts(spec, &tensors)
}

/// Cut-point activations for every sample (inference mode).
fn features(prefix: &Graph<f32>, set: &SampleSet<f32>, batch: usize) -> Result<SampleSet<f32>, NnError> {
    let last = prefix.layers().len() - 1;
    let mut out = SampleSet::new(prefix.shape_of(last).to_vec());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = set.batch(chunk)?;
        let trace = prefix.forward(&x, ForwardOpts::eval())?;
        let per: usize = out.sample_shape.iter().product();
        let y = trace.output(last).expect("computed");
        for (k, &i) in chunk.iter().enumerate() {
            out.push(set.ids[i].as_str(), &y[k * per..(k + 1) * per], set.labels[i])?;
        }
    }
    Ok(out)
}

/// Fine-tune the trainable head at `fine_tune_alpha`. Refuses to start when
/// the leakage report is not clean. When the graph is a frozen prefix
/// followed by a trainable tail, the prefix activations are computed once
/// and only the tail is trained; results are identical to training the whole
/// graph because frozen layers run in inference mode either way.
pub fn fine_tune(
    graph: &Graph<f32>,
    train: &SampleSet<f32>,
    val: &SampleSet<f32>,
    leakage: &LeakageReport,
    config: &TransferConfig,
) -> Result<FineTuneOutcome, TransferError> {
    if !leakage.ok {
        return Err(TransferError::LeakageRefusal(leakage.violations.clone()));
    }
    config.validate()?;
    let train_cfg = TrainConfig { alpha: config.fine_tune_alpha, ..config.train.clone() };
    let before = backbone_hash(graph);

    let trained = match frozen_prefix(graph) {
        Some(cut) => {
            let prefix = graph.truncate(graph.layers()[cut].name())?;
            let tail = suffix_graph(graph, cut)?;
            let ft = features(&prefix, train, train_cfg.batch_size)?;
            let fv = features(&prefix, val, train_cfg.batch_size)?;
            let out = train_loop(tail, &ft, &fv, &train_cfg)?;
            let mut merged = graph.clone();
            for (name, t) in out.graph.named_tensors() {
                merged.set_tensor(&name, t.clone())?;
            }
            (merged, out.history)
        }
        None => {
            let out = train_loop(graph.clone(), train, val, &train_cfg)?;
            (out.graph, out.history)
        }
    };
    let after = backbone_hash(&trained.0);
    Ok(FineTuneOutcome { graph: trained.0, history: trained.1, backbone_hash_before: before, backbone_hash_after: after })
}

/// Run the graph over a set in inference mode; `[n × classes]` probabilities.
pub fn predict_set(graph: &Graph<f32>, set: &SampleSet<f32>, batch: usize) -> Result<Vec<f32>, NnError> {
    if set.is_empty() {
        return Ok(Vec::new());
    }
    let x: Tensor<f32> = set.all()?;
    graph.predict(&x, batch)
}
