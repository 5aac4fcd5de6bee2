//! Miniature CNNs, one per architecture family.
//!
//! | model | family | mechanism kept |
//! |---|---|---|
//! | `mini-vgg` | spatial exploitation | stacked 3×3 convolutions, pooling between blocks |
//! | `mini-inception` | depth / multi-scale | parallel 1×1, 3×3, 5×5 and pool branches concatenated |
//! | `mini-dense` | multi-path | dense blocks where every layer sees all earlier outputs |
//!
//! Every model ends `GlobalAvgPool → Dense(num_classes) → Softmax`. The cut
//! point is the sixth layer of the serialized order.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::{Graph, GraphSpec, LayerKind, LayerSpec, NnError, Scalar, GRAPH_INPUT};

/// Position (1-based) of the transfer cut point in serialized layer order.
pub const CUT_LAYER_POSITION: usize = 6;

/// Smallest spatial extent the models accept.
pub const MIN_SPATIAL: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    SpatialExploitation,
    DepthMultiScale,
    MultiPathDense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelName {
    #[serde(rename = "mini-vgg")]
    MiniVgg,
    #[serde(rename = "mini-inception")]
    MiniInception,
    #[serde(rename = "mini-dense")]
    MiniDense,
}

impl ModelName {
    pub const ALL: [ModelName; 3] = [ModelName::MiniVgg, ModelName::MiniInception, ModelName::MiniDense];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelName::MiniVgg => "mini-vgg",
            ModelName::MiniInception => "mini-inception",
            ModelName::MiniDense => "mini-dense",
        }
    }

    pub fn family(&self) -> Family {
        match self {
            ModelName::MiniVgg => Family::SpatialExploitation,
            ModelName::MiniInception => Family::DepthMultiScale,
            ModelName::MiniDense => Family::MultiPathDense,
        }
    }

    pub fn spec(&self, input_shape: &[usize], num_classes: usize) -> Result<GraphSpec, NnError> {
        match self {
            ModelName::MiniVgg => mini_vgg_spec(input_shape, num_classes),
            ModelName::MiniInception => mini_inception_spec(input_shape, num_classes),
            ModelName::MiniDense => mini_dense_spec(input_shape, num_classes),
        }
    }

    pub fn build<T: Scalar>(&self, input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Graph<T>, NnError> {
        Graph::init(self.spec(input_shape, num_classes)?, seed)
    }
}

impl std::fmt::Display for ModelName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelName::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown model '{s}' (expected mini-vgg, mini-inception or mini-dense)"))
    }
}

fn check_input(input_shape: &[usize]) -> Result<(), NnError> {
    match *input_shape {
        [1, h, w] if h >= MIN_SPATIAL && w >= MIN_SPATIAL => Ok(()),
        _ => Err(NnError::Shape(format!(
            "models need a [1, H, W] input with H, W ≥ {MIN_SPATIAL}, got {input_shape:?}"
        ))),
    }
}

/// Incremental layer-list builder.
struct Builder {
    layers: Vec<LayerSpec>,
}

impl Builder {
    fn new() -> Self {
        Builder { layers: Vec::new() }
    }

    fn add(&mut self, name: &str, kind: LayerKind, inputs: &[&str]) -> String {
        self.layers.push(LayerSpec::new(name, kind, inputs));
        name.to_string()
    }

    fn head(&mut self, from: &str, channels: usize, num_classes: usize) {
        self.add("gap", LayerKind::GlobalAvgPool, &[from]);
        self.add("fc", LayerKind::Dense { inp: channels, out: num_classes, l2: 0.0 }, &["gap"]);
        self.add("softmax", LayerKind::Softmax, &["fc"]);
    }

    fn finish(self, family: Family, input_shape: &[usize], num_classes: usize) -> Result<GraphSpec, NnError> {
        let cut = self.layers[CUT_LAYER_POSITION - 1].name.clone();
        let spec = GraphSpec {
            family: Some(family),
            input_shape: input_shape.to_vec(),
            num_classes,
            cut_point: Some(cut),
            layers: self.layers,
        };
        // Shape propagation doubles as validation.
        Graph::<f32>::init(spec.clone(), 0)?;
        Ok(spec)
    }
}

fn pool2() -> LayerKind {
    LayerKind::MaxPool2d { size: 2, stride: 2, pad: 0 }
}

/// Conv3×3(16)-ReLU-Conv3×3(16)-ReLU-MaxPool, Conv3×3(32)-ReLU-Conv3×3(32)-
/// ReLU-MaxPool, GAP-Dense-Softmax. Cut point: `conv2_1`.
pub fn mini_vgg_spec(input_shape: &[usize], num_classes: usize) -> Result<GraphSpec, NnError> {
    check_input(input_shape)?;
    let mut b = Builder::new();
    b.add("conv1_1", LayerKind::conv_same(1, 16, 3), &[GRAPH_INPUT]);
    b.add("relu1_1", LayerKind::Relu, &["conv1_1"]);
    b.add("conv1_2", LayerKind::conv_same(16, 16, 3), &["relu1_1"]);
    b.add("relu1_2", LayerKind::Relu, &["conv1_2"]);
    b.add("pool1", pool2(), &["relu1_2"]);
    b.add("conv2_1", LayerKind::conv_same(16, 32, 3), &["pool1"]);
    b.add("relu2_1", LayerKind::Relu, &["conv2_1"]);
    b.add("conv2_2", LayerKind::conv_same(32, 32, 3), &["relu2_1"]);
    b.add("relu2_2", LayerKind::Relu, &["conv2_2"]);
    b.add("pool2", pool2(), &["relu2_2"]);
    b.head("pool2", 32, num_classes);
    b.finish(Family::SpatialExploitation, input_shape, num_classes)
}

/// Branch order inside an inception block (also the channel order of its
/// concatenation): 1×1; 1×1→3×3; 1×1→5×5; pool3×3→1×1.
pub const INCEPTION_BRANCHES: [&str; 4] = ["b1", "b2", "b3", "b4"];

/// Width of each inception branch.
pub const INCEPTION_BRANCH_WIDTH: usize = 8;

fn inception_block(b: &mut Builder, prefix: &str, input: &str, in_ch: usize) -> String {
    let w = INCEPTION_BRANCH_WIDTH;
    let n = |s: &str| format!("{prefix}_{s}");
    let b1 = b.add(&n("b1_1x1"), LayerKind::conv_same(in_ch, w, 1), &[input]);
    let b2r = b.add(&n("b2_1x1"), LayerKind::conv_same(in_ch, w, 1), &[input]);
    let b2 = b.add(&n("b2_3x3"), LayerKind::conv_same(w, w, 3), &[&b2r]);
    let b3r = b.add(&n("b3_1x1"), LayerKind::conv_same(in_ch, w, 1), &[input]);
    let b3 = b.add(&n("b3_5x5"), LayerKind::conv_same(w, w, 5), &[&b3r]);
    let b4p = b.add(&n("b4_pool"), LayerKind::MaxPool2d { size: 3, stride: 1, pad: 1 }, &[input]);
    let b4 = b.add(&n("b4_1x1"), LayerKind::conv_same(in_ch, w, 1), &[&b4p]);
    let cat = b.add(&n("concat"), LayerKind::Concat, &[&b1, &b2, &b3, &b4]);
    b.add(&n("relu"), LayerKind::Relu, &[&cat])
}

/// Stem Conv3×3(16)-ReLU-MaxPool, two inception blocks (4 branches × 8
/// channels), GAP-Dense-Softmax. Cut point: `inc1_b2_3x3`.
pub fn mini_inception_spec(input_shape: &[usize], num_classes: usize) -> Result<GraphSpec, NnError> {
    check_input(input_shape)?;
    let mut b = Builder::new();
    b.add("stem_conv", LayerKind::conv_same(1, 16, 3), &[GRAPH_INPUT]);
    b.add("stem_relu", LayerKind::Relu, &["stem_conv"]);
    b.add("stem_pool", pool2(), &["stem_relu"]);
    let out_ch = 4 * INCEPTION_BRANCH_WIDTH;
    let x = inception_block(&mut b, "inc1", "stem_pool", 16);
    let x = inception_block(&mut b, "inc2", &x, out_ch);
    b.head(&x, out_ch, num_classes);
    b.finish(Family::DepthMultiScale, input_shape, num_classes)
}

/// Growth rate of the dense blocks.
pub const DENSE_GROWTH: usize = 8;
/// Layers per dense block.
pub const DENSE_LAYERS: usize = 4;
/// Stem width shared by the inception and dense models.
pub const STEM_CHANNELS: usize = 16;

/// Dense block: layer j sees the channel concat of the block input and all
/// earlier layer outputs. Returns `(output name, output channels)`.
fn dense_block(b: &mut Builder, prefix: &str, input: &str, in_ch: usize) -> (String, usize) {
    let mut feats: Vec<String> = vec![input.to_string()];
    let mut ch = in_ch;
    for j in 1..=DENSE_LAYERS {
        let src = if feats.len() == 1 {
            feats[0].clone()
        } else {
            let refs: Vec<&str> = feats.iter().map(String::as_str).collect();
            b.add(&format!("{prefix}_l{j}_cat"), LayerKind::Concat, &refs)
        };
        let bn = b.add(&format!("{prefix}_l{j}_bn"), LayerKind::batch_norm(ch), &[&src]);
        let relu = b.add(&format!("{prefix}_l{j}_relu"), LayerKind::Relu, &[&bn]);
        let conv = b.add(&format!("{prefix}_l{j}_conv"), LayerKind::conv_same(ch, DENSE_GROWTH, 3), &[&relu]);
        feats.push(conv);
        ch += DENSE_GROWTH;
    }
    let refs: Vec<&str> = feats.iter().map(String::as_str).collect();
    (b.add(&format!("{prefix}_out"), LayerKind::Concat, &refs), ch)
}

/// Stem Conv3×3(16)-ReLU-MaxPool, dense block (4 × BN-ReLU-Conv3×3(8)),
/// transition Conv1×1 halving channels + MaxPool, second dense block,
/// GAP-Dense-Softmax. Cut point: `d1_l1_conv`.
pub fn mini_dense_spec(input_shape: &[usize], num_classes: usize) -> Result<GraphSpec, NnError> {
    check_input(input_shape)?;
    let mut b = Builder::new();
    b.add("stem_conv", LayerKind::conv_same(1, STEM_CHANNELS, 3), &[GRAPH_INPUT]);
    b.add("stem_relu", LayerKind::Relu, &["stem_conv"]);
    b.add("stem_pool", pool2(), &["stem_relu"]);
    let (x, ch) = dense_block(&mut b, "d1", "stem_pool", STEM_CHANNELS);
    let half = ch / 2;
    b.add("trans_conv", LayerKind::conv_same(ch, half, 1), &[&x]);
    b.add("trans_pool", pool2(), &["trans_conv"]);
    let (x, ch) = dense_block(&mut b, "d2", "trans_pool", half);
    b.head(&x, ch, num_classes);
    b.finish(Family::MultiPathDense, input_shape, num_classes)
}

pub fn build_mini_vgg<T: Scalar>(input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Graph<T>, NnError> {
    ModelName::MiniVgg.build(input_shape, num_classes, seed)
}

pub fn build_mini_inception<T: Scalar>(
    input_shape: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<Graph<T>, NnError> {
    ModelName::MiniInception.build(input_shape, num_classes, seed)
}

pub fn build_mini_dense<T: Scalar>(input_shape: &[usize], num_classes: usize, seed: u64) -> Result<Graph<T>, NnError> {
    ModelName::MiniDense.build(input_shape, num_classes, seed)
}

/// One row of a model summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub index: usize,
    pub name: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub inputs: Vec<String>,
    pub output_shape: Vec<usize>,
    pub params: usize,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub family: Option<Family>,
    pub input_shape: Vec<usize>,
    pub cut_point: Option<String>,
    pub layers: Vec<LayerSummary>,
    pub total_params: usize,
    pub trainable_params: usize,
}

impl Summary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "family: {:?}  input: {:?}", self.family, self.input_shape);
        let _ = writeln!(s, "{:>3}  {:<16} {:<14} {:<16} {:>8}  trainable", "#", "name", "type", "output", "params");
        for l in &self.layers {
            let marker = if Some(&l.name) == self.cut_point.as_ref() { "  <- cut point" } else { "" };
            let _ = writeln!(
                s,
                "{:>3}  {:<16} {:<14} {:<16} {:>8}  {}{}",
                l.index,
                l.name,
                l.kind,
                format!("{:?}", l.output_shape),
                l.params,
                l.trainable,
                marker
            );
        }
        let _ = writeln!(s, "cut point: {}", self.cut_point.as_deref().unwrap_or("-"));
        let _ = writeln!(s, "params: {} total, {} trainable", self.total_params, self.trainable_params);
        s
    }
}

/// Deterministic summary of a graph.
pub fn describe<T: Scalar>(graph: &Graph<T>) -> Summary {
    let layers = graph
        .layers()
        .iter()
        .enumerate()
        .map(|(i, l)| LayerSummary {
            index: i + 1,
            name: l.name().to_string(),
            kind: l.kind().type_name().to_string(),
            inputs: l.spec.inputs.clone(),
            output_shape: graph.shape_of(i).to_vec(),
            params: l.param_count(),
            trainable: l.trainable(),
        })
        .collect();
    Summary {
        family: graph.family(),
        input_shape: graph.input_shape().to_vec(),
        cut_point: graph.cut_point().map(str::to_string),
        layers,
        total_params: graph.param_count(),
        trainable_params: graph.trainable_param_count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_names_parse() {
        for m in ModelName::ALL {
            assert_eq!(m.as_str().parse::<ModelName>().unwrap(), m);
        }
        assert!("vgg16".parse::<ModelName>().is_err());
    }

    #[test]
    fn small_inputs_are_rejected() {
        for m in ModelName::ALL {
            assert!(matches!(m.spec(&[1, 16, 188], 2), Err(NnError::Shape(_))));
            assert!(m.spec(&[2, 128, 188], 2).is_err());
        }
    }

    #[test]
    fn cut_points_are_sixth_layer() {
        let want = ["conv2_1", "inc1_b2_3x3", "d1_l1_conv"];
        for (m, w) in ModelName::ALL.iter().zip(want) {
            let s = m.spec(&[1, 32, 40], 2).unwrap();
            assert_eq!(s.cut_point.as_deref(), Some(w));
            assert_eq!(s.layers[CUT_LAYER_POSITION - 1].name, w);
        }
    }
}
