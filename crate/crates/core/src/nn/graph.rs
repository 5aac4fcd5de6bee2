use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layer::{Layer, LayerKind, LayerSpec, Param, GRAPH_INPUT};
use super::ops::{self, BnCache, ConvGeom, PoolGeom};
use super::{NnError, Scalar, Tensor};
use crate::keyed_rng;
use crate::zoo::Family;

/// Weight-free description of a graph: what the checkpoint stores as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub family: Option<Family>,
    /// Sample shape excluding the batch axis, e.g. `[1, 128, 188]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    /// Layer whose output feeds a transfer head.
    pub cut_point: Option<String>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Src {
    Input,
    Layer(usize),
}

/// Training or inference behaviour for batch-norm and dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-call forward options. Dropout masks are drawn from the stream keyed by
/// `(seed, "dropout", step, layer name)`.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    pub mode: Mode,
    pub seed: u64,
    pub step: u64,
}

impl ForwardOpts {
    pub fn eval() -> Self {
        ForwardOpts { mode: Mode::Eval, seed: 0, step: 0 }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        ForwardOpts { mode: Mode::Train, seed, step }
    }
}

#[derive(Debug, Clone)]
enum Cache<T> {
    None,
    Pool(Vec<u32>),
    Bn(BnCache<T>),
    Mask(Vec<T>),
}

/// Recorded activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    batch: usize,
    outputs: Vec<Option<Vec<T>>>,
    caches: Vec<Cache<T>>,
    input: Vec<T>,
    last: usize,
}

impl<T: Scalar> Trace<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Output of layer `i`, if it was computed.
    pub fn output(&self, i: usize) -> Option<&[T]> {
        self.outputs.get(i).and_then(|o| o.as_deref())
    }

    /// Output of the last computed layer.
    pub fn final_output(&self) -> &[T] {
        self.outputs[self.last].as_deref().expect("final layer computed")
    }
}

/// Parameter gradients, aligned with `graph.layers()[i].params[j]`. Frozen
/// layers have an empty list.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub per_layer: Vec<Vec<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradients keyed by `"layer/param"`.
    pub fn named<'a>(&'a self, graph: &'a Graph<T>) -> BTreeMap<String, &'a [T]> {
        let mut out = BTreeMap::new();
        for (layer, grads) in graph.layers.iter().zip(&self.per_layer) {
            for (p, g) in layer.params.iter().zip(grads) {
                out.insert(format!("{}/{}", layer.name(), p.name), g.as_slice());
            }
        }
        out
    }
}

/// A DAG of layers in topological (serialized) order. The last layer is the
/// output.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph<T> {
    family: Option<Family>,
    input_shape: Vec<usize>,
    num_classes: usize,
    cut_point: Option<String>,
    layers: Vec<Layer<T>>,
    wiring: Vec<Vec<Src>>,
    shapes: Vec<Vec<usize>>,
}

/// Resolve wiring and propagate shapes; returns `(wiring, shapes)`.
fn resolve(spec: &GraphSpec) -> Result<(Vec<Vec<Src>>, Vec<Vec<usize>>), NnError> {
    if spec.layers.is_empty() {
        return Err(NnError::Graph("graph has no layers".into()));
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut wiring = Vec::with_capacity(spec.layers.len());
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(spec.layers.len());
    for (i, l) in spec.layers.iter().enumerate() {
        if l.name == GRAPH_INPUT || index.contains_key(l.name.as_str()) {
            return Err(NnError::Graph(format!("duplicate or reserved layer name '{}'", l.name)));
        }
        if l.inputs.is_empty() {
            return Err(NnError::Graph(format!("layer '{}' has no inputs", l.name)));
        }
        let mut srcs = Vec::with_capacity(l.inputs.len());
        for inp in &l.inputs {
            if inp == GRAPH_INPUT {
                srcs.push(Src::Input);
            } else {
                // Only earlier layers are visible, which makes the graph acyclic.
                let j = index
                    .get(inp.as_str())
                    .ok_or_else(|| NnError::Graph(format!("layer '{}' reads unknown or later layer '{inp}'", l.name)))?;
                srcs.push(Src::Layer(*j));
            }
        }
        let in_shapes: Vec<&[usize]> = srcs
            .iter()
            .map(|s| match s {
                Src::Input => spec.input_shape.as_slice(),
                Src::Layer(j) => shapes[*j].as_slice(),
            })
            .collect();
        let out = l
            .kind
            .output_shape(&in_shapes)
            .map_err(|e| NnError::Shape(format!("layer '{}': {e}", l.name)))?;
        index.insert(&l.name, i);
        wiring.push(srcs);
        shapes.push(out);
    }
    if let Some(cut) = &spec.cut_point {
        let i = *index.get(cut.as_str()).ok_or_else(|| NnError::Graph(format!("cut point '{cut}' not in graph")))?;
        if shapes[i].len() != 3 {
            return Err(NnError::Graph(format!("cut point '{cut}' output {:?} is not a feature map", shapes[i])));
        }
    }
    Ok((wiring, shapes))
}

fn he_uniform<T: Scalar>(n: usize, fan_in: usize, rng: &mut impl Rng) -> Vec<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::of(rng.random_range(-limit..limit))).collect()
}

fn glorot_uniform<T: Scalar>(n: usize, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| T::of(rng.random_range(-limit..limit))).collect()
}

impl<T: Scalar> Graph<T> {
    /// Build a graph with freshly initialized weights: He-uniform for
    /// conv/dense layers, Glorot-uniform for a dense layer feeding softmax,
    /// zero biases, γ=1/β=0 and unit running variance for batch-norm.
    pub fn init(spec: GraphSpec, seed: u64) -> Result<Self, NnError> {
        let (wiring, shapes) = resolve(&spec)?;
        let feeds_softmax: Vec<bool> = (0..spec.layers.len())
            .map(|i| {
                spec.layers.iter().enumerate().any(|(j, l)| {
                    matches!(l.kind, LayerKind::Softmax) && wiring[j].contains(&Src::Layer(i))
                })
            })
            .collect();
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, ls) in spec.layers.iter().enumerate() {
            layers.push(Self::init_layer(ls, feeds_softmax[i], seed));
        }
        Ok(Graph {
            family: spec.family,
            input_shape: spec.input_shape,
            num_classes: spec.num_classes,
            cut_point: spec.cut_point,
            layers,
            wiring,
            shapes,
        })
    }

    fn init_layer(ls: &LayerSpec, feeds_softmax: bool, seed: u64) -> Layer<T> {
        let mut params = Vec::new();
        for (pname, shape) in ls.kind.param_shapes() {
            let n: usize = shape.iter().product();
            let mut rng = keyed_rng!(seed, "init", &ls.name, pname);
            let data: Vec<T> = match (&ls.kind, pname) {
                (LayerKind::Conv2d { in_ch, kernel_h, kernel_w, .. }, "weight") => {
                    he_uniform(n, in_ch * kernel_h * kernel_w, &mut rng)
                }
                (LayerKind::Dense { inp, out, .. }, "weight") => {
                    if feeds_softmax {
                        glorot_uniform(n, *inp, *out, &mut rng)
                    } else {
                        he_uniform(n, *inp, &mut rng)
                    }
                }
                (LayerKind::BatchNorm { .. }, "gamma") => vec![T::one(); n],
                _ => vec![T::zero(); n],
            };
            params.push(Param { name: pname.to_string(), value: Tensor::from_vec(&shape, data).expect("shape") });
        }
        let buffers = ls
            .kind
            .buffer_shapes()
            .into_iter()
            .map(|(bname, shape)| {
                let v = if bname == "running_var" { T::one() } else { T::zero() };
                Param { name: bname.to_string(), value: Tensor::filled(&shape, v) }
            })
            .collect();
        Layer { spec: ls.clone(), params, buffers }
    }

    /// Build a graph from a spec plus a full set of named tensors
    /// (`"layer/param"` for parameters and buffers).
    pub fn from_parts(spec: GraphSpec, tensors: &BTreeMap<String, Tensor<T>>) -> Result<Self, NnError> {
        let mut g = Self::init(spec, 0)?;
        let expected: Vec<String> = g.named_tensors().into_iter().map(|(n, _)| n).collect();
        if expected.len() != tensors.len() {
            return Err(NnError::Graph(format!(
                "graph expects {} tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for name in expected {
            let t = tensors.get(&name).ok_or_else(|| NnError::Graph(format!("missing tensor '{name}'")))?;
            g.set_tensor(&name, t.clone())?;
        }
        Ok(g)
    }

    pub fn spec(&self) -> GraphSpec {
        GraphSpec {
            family: self.family,
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            cut_point: self.cut_point.clone(),
            layers: self.layers.iter().map(|l| l.spec.clone()).collect(),
        }
    }

    pub fn family(&self) -> Option<Family> {
        self.family
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn cut_point(&self) -> Option<&str> {
        self.cut_point.as_deref()
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name() == name)
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<T>> {
        self.layers.iter().find(|l| l.name() == name)
    }

    /// Output sample shape of layer `i`.
    pub fn shape_of(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty graph")
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.layers.iter().filter(|l| l.trainable()).map(Layer::param_count).sum()
    }

    /// Input names of layer `i`, as stored in its spec.
    pub fn inputs_of(&self, i: usize) -> &[String] {
        &self.layers[i].spec.inputs
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<(), NnError> {
        let i = self.layer_index(name).ok_or_else(|| NnError::UnknownLayer(name.into()))?;
        self.layers[i].spec.trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        self.layers.iter_mut().for_each(|l| l.spec.trainable = false);
    }

    /// Parameters then buffers, per layer, as `("layer/name", tensor)`.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for l in &self.layers {
            for p in l.params.iter().chain(&l.buffers) {
                out.push((format!("{}/{}", l.name(), p.name), &p.value));
            }
        }
        out
    }

    /// Learnable parameters only, as `("layer/name", tensor, trainable)`.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>, bool)> {
        let mut out = Vec::new();
        for l in &self.layers {
            for p in &l.params {
                out.push((format!("{}/{}", l.name(), p.name), &p.value, l.trainable()));
            }
        }
        out
    }

    fn split_name(full: &str) -> Result<(&str, &str), NnError> {
        full.rsplit_once('/').ok_or_else(|| NnError::Graph(format!("malformed tensor name '{full}'")))
    }

    pub fn tensor(&self, full: &str) -> Option<&Tensor<T>> {
        let (lname, pname) = Self::split_name(full).ok()?;
        let l = self.layer(lname)?;
        l.param(pname).or_else(|| l.buffer(pname))
    }

    pub fn set_tensor(&mut self, full: &str, value: Tensor<T>) -> Result<(), NnError> {
        let (lname, pname) = Self::split_name(full)?;
        let i = self.layer_index(lname).ok_or_else(|| NnError::UnknownLayer(lname.into()))?;
        let layer = &mut self.layers[i];
        let slot = layer
            .params
            .iter_mut()
            .chain(layer.buffers.iter_mut())
            .find(|p| p.name == pname)
            .ok_or_else(|| NnError::Graph(format!("layer '{lname}' has no tensor '{pname}'")))?;
        if slot.value.shape() != value.shape() {
            return Err(NnError::Shape(format!(
                "tensor '{full}' expects shape {:?}, got {:?}",
                slot.value.shape(),
                value.shape()
            )));
        }
        slot.value = value;
        Ok(())
    }

    /// Mutable access to parameter `j` of layer `i`.
    pub fn param_mut(&mut self, i: usize, j: usize) -> &mut Tensor<T> {
        &mut self.layers[i].params[j].value
    }

    /// Same graph with another element type.
    pub fn cast<U: Scalar>(&self) -> Graph<U> {
        Graph {
            family: self.family,
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            cut_point: self.cut_point.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec.clone(),
                    params: l.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect(),
                    buffers: l.buffers.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect(),
                })
                .collect(),
            wiring: self.wiring.clone(),
            shapes: self.shapes.clone(),
        }
    }

    /// Keep layers `0..=name` (weights included) and make `name` the output.
    pub fn truncate(&self, name: &str) -> Result<Self, NnError> {
        let i = self.layer_index(name).ok_or_else(|| NnError::UnknownLayer(name.into()))?;
        Ok(Graph {
            family: self.family,
            input_shape: self.input_shape.clone(),
            num_classes: self.num_classes,
            cut_point: self.cut_point.clone(),
            layers: self.layers[..=i].to_vec(),
            wiring: self.wiring[..=i].to_vec(),
            shapes: self.shapes[..=i].to_vec(),
        })
    }

    /// Append freshly initialized layers (trainable as given in their specs).
    pub fn extend(&self, new_layers: Vec<LayerSpec>, num_classes: usize, seed: u64) -> Result<Self, NnError> {
        let mut spec = self.spec();
        let existing = spec.layers.len();
        spec.layers.extend(new_layers);
        spec.num_classes = num_classes;
        let fresh = Graph::<T>::init(spec, seed)?;
        let mut layers = self.layers.clone();
        layers.extend(fresh.layers.into_iter().skip(existing));
        Ok(Graph { layers, ..fresh })
    }

    /// Sum over dense layers of `λ·Σw²`.
    pub fn l2_penalty(&self) -> T {
        let mut total = T::zero();
        for l in &self.layers {
            if let LayerKind::Dense { l2, .. } = l.kind() {
                if *l2 > 0.0 {
                    let w = l.param("weight").expect("dense weight");
                    total += T::of(*l2) * w.data().iter().map(|&v| v * v).sum::<T>();
                }
            }
        }
        total
    }

    /// Layers reachable backwards from `until`.
    fn live_set(&self, until: usize) -> Vec<bool> {
        let mut live = vec![false; until + 1];
        live[until] = true;
        for i in (0..=until).rev() {
            if !live[i] {
                continue;
            }
            for s in &self.wiring[i] {
                if let Src::Layer(j) = s {
                    live[*j] = true;
                }
            }
        }
        live
    }

    /// Whether layer `i` uses batch statistics / active dropout. Frozen
    /// layers always behave as in inference.
    fn stochastic(&self, i: usize, mode: Mode) -> bool {
        mode == Mode::Train && self.layers[i].trainable()
    }

    /// Forward pass through the whole graph. `x` is `[B, ...input_shape]`.
    pub fn forward(&self, x: &Tensor<T>, opts: ForwardOpts) -> Result<Trace<T>, NnError> {
        self.forward_until(x, opts, self.layers.len() - 1)
    }

    /// Forward pass computing only the ancestors of layer `until`.
    pub fn forward_until(&self, x: &Tensor<T>, opts: ForwardOpts, until: usize) -> Result<Trace<T>, NnError> {
        let shape = x.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            return Err(NnError::Shape(format!(
                "graph expects [B, {:?}], got {:?}",
                self.input_shape, shape
            )));
        }
        let batch = shape[0];
        if batch == 0 {
            return Err(NnError::Shape("empty batch".into()));
        }
        let live = self.live_set(until);
        let mut outputs: Vec<Option<Vec<T>>> = vec![None; until + 1];
        let mut caches: Vec<Cache<T>> = vec![Cache::None; until + 1];
        for i in 0..=until {
            if !live[i] {
                continue;
            }
            let ins: Vec<&[T]> = self.wiring[i]
                .iter()
                .map(|s| match s {
                    Src::Input => x.data(),
                    Src::Layer(j) => outputs[*j].as_deref().expect("topological order"),
                })
                .collect();
            let (out, cache) = self.layer_forward(i, &ins, batch, opts)?;
            if out.iter().any(|v| !v.is_finite()) {
                return Err(NnError::Numerical { layer: self.layers[i].name().to_string() });
            }
            outputs[i] = Some(out);
            caches[i] = cache;
        }
        Ok(Trace { batch, outputs, caches, input: x.data().to_vec(), last: until })
    }

    fn in_shape(&self, i: usize, k: usize) -> &[usize] {
        match self.wiring[i][k] {
            Src::Input => &self.input_shape,
            Src::Layer(j) => &self.shapes[j],
        }
    }

    fn layer_forward(&self, i: usize, ins: &[&[T]], batch: usize, opts: ForwardOpts) -> Result<(Vec<T>, Cache<T>), NnError> {
        let layer = &self.layers[i];
        let s = self.in_shape(i, 0);
        Ok(match *layer.kind() {
            LayerKind::Conv2d { in_ch, out_ch, kernel_h, kernel_w, stride, pad } => {
                let g = ConvGeom::new(in_ch, s[1], s[2], out_ch, kernel_h, kernel_w, stride, pad)?;
                let w = layer.params[0].value.data();
                let b = layer.params[1].value.data();
                (ops::conv2d_forward(ins[0], w, b, &g, batch), Cache::None)
            }
            LayerKind::MaxPool2d { size, stride, pad } => {
                let g = PoolGeom::new(s[0], s[1], s[2], size, stride, pad)?;
                let (y, arg) = ops::maxpool_forward(ins[0], &g, batch);
                (y, Cache::Pool(arg))
            }
            LayerKind::GlobalAvgPool => (ops::gap_forward(ins[0], batch, s[0], s[1] * s[2]), Cache::None),
            LayerKind::BatchNorm { channels, eps, .. } => {
                let spatial = s[1..].iter().product();
                let (y, cache) = ops::batchnorm_forward(
                    ins[0],
                    batch,
                    channels,
                    spatial,
                    layer.params[0].value.data(),
                    layer.params[1].value.data(),
                    layer.buffers[0].value.data(),
                    layer.buffers[1].value.data(),
                    T::of(eps),
                    self.stochastic(i, opts.mode),
                )
                .map_err(|e| match e {
                    NnError::BatchTooSmall => NnError::BatchTooSmall,
                    other => other,
                })?;
                (y, Cache::Bn(cache))
            }
            LayerKind::Dropout { p } => {
                if self.stochastic(i, opts.mode) && p > 0.0 {
                    let mut rng = keyed_rng!(opts.seed, "dropout", opts.step, layer.name());
                    let mask = ops::dropout_mask::<T>(ins[0].len(), p, &mut rng)?;
                    let y = ins[0].iter().zip(&mask).map(|(&a, &m)| a * m).collect();
                    (y, Cache::Mask(mask))
                } else {
                    (ins[0].to_vec(), Cache::None)
                }
            }
            LayerKind::Dense { inp, out, .. } => {
                let w = layer.params[0].value.data();
                let b = layer.params[1].value.data();
                (ops::dense_forward(ins[0], w, b, batch, inp, out), Cache::None)
            }
            LayerKind::Relu => (ops::relu_forward(ins[0]), Cache::None),
            LayerKind::Softmax => (ops::softmax_rows(ins[0], s[0]), Cache::None),
            LayerKind::Flatten => (ins[0].to_vec(), Cache::None),
            LayerKind::Concat => {
                let channels: Vec<usize> = (0..ins.len()).map(|k| self.in_shape(i, k)[0]).collect();
                (ops::concat_forward(ins, &channels, batch, s[1] * s[2]), Cache::None)
            }
        })
    }

    /// Which layers must propagate gradients to their inputs: those with a
    /// trainable parameter somewhere upstream (inclusive).
    fn needs_grad(&self) -> Vec<bool> {
        let mut need = vec![false; self.layers.len()];
        for i in 0..self.layers.len() {
            let own = self.layers[i].trainable() && !self.layers[i].params.is_empty();
            let upstream = self.wiring[i].iter().any(|s| matches!(s, Src::Layer(j) if need[*j]));
            need[i] = own || upstream;
        }
        need
    }

    /// Reverse pass seeded with `grad` = ∂L/∂(output of layer `from`).
    /// Frozen layers receive no parameter gradients but still pass
    /// activation gradients to trainable layers upstream. The L2 term of
    /// trainable dense layers contributes `2λw`.
    pub fn backward(&self, trace: &Trace<T>, from: usize, grad: Vec<T>) -> Result<Gradients<T>, NnError> {
        let need = self.needs_grad();
        let batch = trace.batch;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; from + 1];
        grads[from] = Some(grad);
        let mut per_layer: Vec<Vec<Vec<T>>> = vec![Vec::new(); self.layers.len()];

        for i in (0..=from).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !need[i] {
                continue;
            }
            let layer = &self.layers[i];
            let want_params = layer.trainable() && !layer.params.is_empty();
            let want_dx: Vec<bool> = self.wiring[i].iter().map(|s| matches!(s, Src::Layer(j) if need[*j])).collect();
            let any_dx = want_dx.iter().any(|&b| b);
            let input_of = |k: usize| -> &[T] {
                match self.wiring[i][k] {
                    Src::Input => &trace.input,
                    Src::Layer(j) => trace.outputs[j].as_deref().expect("forward computed input"),
                }
            };
            let s = self.in_shape(i, 0);
            let mut dxs: Vec<Option<Vec<T>>> = vec![None; self.wiring[i].len()];
            match *layer.kind() {
                LayerKind::Conv2d { in_ch, out_ch, kernel_h, kernel_w, stride, pad } => {
                    let g = ConvGeom::new(in_ch, s[1], s[2], out_ch, kernel_h, kernel_w, stride, pad)?;
                    let (dx, dw, db) = ops::conv2d_backward(
                        input_of(0),
                        layer.params[0].value.data(),
                        &dy,
                        &g,
                        batch,
                        any_dx,
                        want_params,
                    );
                    dxs[0] = dx;
                    if want_params {
                        per_layer[i] = vec![dw.expect("dw"), db.expect("db")];
                    }
                }
                LayerKind::MaxPool2d { size, stride, pad } => {
                    let g = PoolGeom::new(s[0], s[1], s[2], size, stride, pad)?;
                    let Cache::Pool(arg) = &trace.caches[i] else { unreachable!("pool cache") };
                    dxs[0] = Some(ops::maxpool_backward(&dy, arg, &g, batch));
                }
                LayerKind::GlobalAvgPool => {
                    dxs[0] = Some(ops::gap_backward(&dy, batch, s[0], s[1] * s[2]));
                }
                LayerKind::BatchNorm { channels, .. } => {
                    let Cache::Bn(cache) = &trace.caches[i] else { unreachable!("bn cache") };
                    let spatial = s[1..].iter().product();
                    let (dx, dg, dbt) =
                        ops::batchnorm_backward(&dy, cache, layer.params[0].value.data(), batch, channels, spatial);
                    dxs[0] = Some(dx);
                    if want_params {
                        per_layer[i] = vec![dg, dbt];
                    }
                }
                LayerKind::Dropout { .. } => {
                    dxs[0] = Some(match &trace.caches[i] {
                        Cache::Mask(m) => dy.iter().zip(m).map(|(&g, &k)| g * k).collect(),
                        _ => dy,
                    });
                }
                LayerKind::Dense { inp, out, l2 } => {
                    let w = layer.params[0].value.data();
                    let (dx, mut dw, db) = ops::dense_backward(input_of(0), w, &dy, batch, inp, out, any_dx);
                    if l2 > 0.0 {
                        let c = T::of(2.0 * l2);
                        dw.iter_mut().zip(w).for_each(|(g, &wv)| *g += c * wv);
                    }
                    dxs[0] = dx;
                    if want_params {
                        per_layer[i] = vec![dw, db];
                    }
                }
                LayerKind::Relu => {
                    dxs[0] = Some(ops::relu_backward(trace.outputs[i].as_deref().expect("relu output"), &dy));
                }
                LayerKind::Softmax => {
                    let p = trace.outputs[i].as_deref().expect("softmax output");
                    dxs[0] = Some(ops::softmax_backward(p, &dy, s[0]));
                }
                LayerKind::Flatten => dxs[0] = Some(dy),
                LayerKind::Concat => {
                    let channels: Vec<usize> = (0..self.wiring[i].len()).map(|k| self.in_shape(i, k)[0]).collect();
                    for (k, part) in ops::concat_backward(&dy, &channels, batch, s[1] * s[2]).into_iter().enumerate() {
                        dxs[k] = Some(part);
                    }
                }
            }
            for g in &per_layer[i] {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NnError::Numerical { layer: layer.name().to_string() });
                }
            }
            for (k, dx) in dxs.into_iter().enumerate() {
                let (Src::Layer(j), true, Some(dx)) = (self.wiring[i][k], want_dx[k], dx) else { continue };
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&dx).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(dx),
                }
            }
        }
        Ok(Gradients { per_layer })
    }

    /// Fold the batch statistics recorded in `trace` into the running
    /// statistics of trainable batch-norm layers:
    /// `running = momentum·running + (1 − momentum)·batch`.
    pub fn update_running_stats(&mut self, trace: &Trace<T>) {
        for i in 0..trace.caches.len().min(self.layers.len()) {
            let (Cache::Bn(cache), LayerKind::BatchNorm { momentum, .. }) = (&trace.caches[i], self.layers[i].kind().clone())
            else {
                continue;
            };
            if !cache.batch_stats {
                continue;
            }
            let m = T::of(momentum);
            let one_m = T::one() - m;
            let layer = &mut self.layers[i];
            for (r, &b) in layer.buffers[0].value.data_mut().iter_mut().zip(&cache.batch_mean) {
                *r = m * *r + one_m * b;
            }
            for (r, &b) in layer.buffers[1].value.data_mut().iter_mut().zip(&cache.batch_var) {
                *r = m * *r + one_m * b;
            }
        }
    }

    /// Inference over `x` in chunks of `batch_size`; returns the concatenated
    /// final outputs.
    pub fn predict(&self, x: &Tensor<T>, batch_size: usize) -> Result<Vec<T>, NnError> {
        let n = x.shape()[0];
        let per = x.len() / n.max(1);
        let mut out = Vec::new();
        let bs = batch_size.max(1);
        let mut start = 0;
        while start < n {
            let end = (start + bs).min(n);
            let mut shape = x.shape().to_vec();
            shape[0] = end - start;
            let chunk = Tensor::from_vec(&shape, x.data()[start * per..end * per].to_vec())?;
            let trace = self.forward(&chunk, ForwardOpts::eval())?;
            out.extend_from_slice(trace.final_output());
            start = end;
        }
        Ok(out)
    }
}
