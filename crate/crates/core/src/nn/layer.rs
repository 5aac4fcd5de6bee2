use serde::{Deserialize, Serialize};

use super::{NnError, Scalar, Tensor};

/// Name used in `inputs` lists to refer to the graph input.
pub const GRAPH_INPUT: &str = "input";

/// Layer vocabulary and per-kind configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d { in_ch: usize, out_ch: usize, kernel_h: usize, kernel_w: usize, stride: usize, pad: usize },
    MaxPool2d { size: usize, stride: usize, pad: usize },
    GlobalAvgPool,
    BatchNorm { channels: usize, momentum: f64, eps: f64 },
    Dropout { p: f64 },
    Dense { inp: usize, out: usize, l2: f64 },
    Relu,
    Softmax,
    Concat,
    Flatten,
}

impl LayerKind {
    /// Square conv with "same" padding for odd kernels.
    pub fn conv_same(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        LayerKind::Conv2d { in_ch, out_ch, kernel_h: kernel, kernel_w: kernel, stride: 1, pad: kernel / 2 }
    }

    pub fn batch_norm(channels: usize) -> Self {
        LayerKind::BatchNorm { channels, momentum: 0.9, eps: 1e-5 }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "Conv2D",
            LayerKind::MaxPool2d { .. } => "MaxPool2D",
            LayerKind::GlobalAvgPool => "GlobalAvgPool",
            LayerKind::BatchNorm { .. } => "BatchNorm",
            LayerKind::Dropout { .. } => "Dropout",
            LayerKind::Dense { .. } => "Dense",
            LayerKind::Relu => "ReLU",
            LayerKind::Softmax => "Softmax",
            LayerKind::Concat => "Concat",
            LayerKind::Flatten => "Flatten",
        }
    }

    /// `(name, shape)` of the learnable parameters.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerKind::Conv2d { in_ch, out_ch, kernel_h, kernel_w, .. } => {
                vec![("weight", vec![out_ch, in_ch, kernel_h, kernel_w]), ("bias", vec![out_ch])]
            }
            LayerKind::Dense { inp, out, .. } => vec![("weight", vec![inp, out]), ("bias", vec![out])],
            LayerKind::BatchNorm { channels, .. } => vec![("gamma", vec![channels]), ("beta", vec![channels])],
            _ => vec![],
        }
    }

    /// Non-learnable persistent state (batch-norm running statistics).
    pub fn buffer_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            LayerKind::BatchNorm { channels, .. } => {
                vec![("running_mean", vec![channels]), ("running_var", vec![channels])]
            }
            _ => vec![],
        }
    }

    /// Output sample shape (batch axis excluded) for the given input shapes.
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, NnError> {
        let single = || -> Result<&[usize], NnError> {
            match inputs {
                [one] => Ok(one),
                _ => Err(NnError::Shape(format!("{} takes exactly one input", self.type_name()))),
            }
        };
        let spatial = |s: &[usize]| -> Result<(usize, usize, usize), NnError> {
            match *s {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(NnError::Shape(format!("{} needs a [C, H, W] input, got {:?}", self.type_name(), s))),
            }
        };
        match *self {
            LayerKind::Conv2d { in_ch, out_ch, kernel_h, kernel_w, stride, pad } => {
                let (c, h, w) = spatial(single()?)?;
                if c != in_ch {
                    return Err(NnError::Shape(format!("conv expects {in_ch} channels, got {c}")));
                }
                let g = super::ops::ConvGeom::new(c, h, w, out_ch, kernel_h, kernel_w, stride, pad)?;
                Ok(vec![out_ch, g.oh, g.ow])
            }
            LayerKind::MaxPool2d { size, stride, pad } => {
                let (c, h, w) = spatial(single()?)?;
                let g = super::ops::PoolGeom::new(c, h, w, size, stride, pad)?;
                Ok(vec![c, g.oh, g.ow])
            }
            LayerKind::GlobalAvgPool => {
                let (c, _, _) = spatial(single()?)?;
                Ok(vec![c])
            }
            LayerKind::BatchNorm { channels, .. } => {
                let s = single()?;
                if s.first() != Some(&channels) || !(s.len() == 1 || s.len() == 3) {
                    return Err(NnError::Shape(format!("batch-norm over {channels} channels got {s:?}")));
                }
                Ok(s.to_vec())
            }
            LayerKind::Dense { inp, out, .. } => {
                let s = single()?;
                if s != [inp] {
                    return Err(NnError::Shape(format!("dense expects [{inp}], got {s:?}")));
                }
                Ok(vec![out])
            }
            LayerKind::Softmax => {
                let s = single()?;
                if s.len() != 1 {
                    return Err(NnError::Shape(format!("softmax expects a vector input, got {s:?}")));
                }
                Ok(s.to_vec())
            }
            LayerKind::Dropout { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(NnError::InvalidParam(format!("dropout fraction {p} outside [0, 1)")));
                }
                Ok(single()?.to_vec())
            }
            LayerKind::Relu => Ok(single()?.to_vec()),
            LayerKind::Flatten => Ok(vec![single()?.iter().product()]),
            LayerKind::Concat => {
                if inputs.is_empty() {
                    return Err(NnError::Shape("concat needs at least one input".into()));
                }
                let (_, h, w) = spatial(inputs[0])?;
                let mut total = 0;
                for s in inputs {
                    let (c, hh, ww) = spatial(s)?;
                    if (hh, ww) != (h, w) {
                        return Err(NnError::Shape(format!("concat spatial mismatch {s:?} vs {:?}", inputs[0])));
                    }
                    total += c;
                }
                Ok(vec![total, h, w])
            }
        }
    }
}

/// Serializable description of one layer (no weights).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Producer layer names, or [`GRAPH_INPUT`].
    pub inputs: Vec<String>,
    pub trainable: bool,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind, inputs: &[&str]) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            trainable: true,
        }
    }
}

/// A named tensor owned by a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// A layer instance: its spec plus parameters and buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub params: Vec<Param<T>>,
    pub buffers: Vec<Param<T>>,
}

impl<T: Scalar> Layer<T> {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn kind(&self) -> &LayerKind {
        &self.spec.kind
    }

    pub fn trainable(&self) -> bool {
        self.spec.trainable
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
