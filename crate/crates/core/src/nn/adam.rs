use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, Graph, NnError, Scalar};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { alpha: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-7 }
    }
}

impl AdamConfig {
    pub fn with_alpha(alpha: f64) -> Self {
        AdamConfig { alpha, ..Default::default() }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// One bias-corrected Adam update of `theta` in place, at step `t ≥ 1`.
///
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`, `θ ← θ − α·m̂/(√v̂ + ε)` with
/// `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
pub fn adam_update<T: Scalar>(cfg: &AdamConfig, t: u64, theta: &mut [T], grad: &[T], mom: &mut Moments<T>) {
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one = T::one();
    let c1 = one - T::of(cfg.beta1.powi(t as i32));
    let c2 = one - T::of(cfg.beta2.powi(t as i32));
    let alpha = T::of(cfg.alpha);
    let eps = T::of(cfg.epsilon);
    for (((th, &g), m), v) in theta.iter_mut().zip(grad).zip(mom.m.iter_mut()).zip(mom.v.iter_mut()) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *th -= alpha * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer state over a graph. Moments are only ever allocated for
/// parameters of trainable layers.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, t: 0, moments: BTreeMap::new() }
    }

    pub fn alpha(&self) -> f64 {
        self.config.alpha
    }

    pub fn set_alpha(&mut self, alpha: f64) {
        self.config.alpha = alpha;
    }

    /// Names (`"layer/param"`) of tensors that own moment buffers.
    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    pub fn moments(&self, name: &str) -> Option<&Moments<T>> {
        self.moments.get(name)
    }

    /// Apply one step to every trainable parameter; returns the names of the
    /// tensors updated.
    pub fn step(&mut self, graph: &mut Graph<T>, grads: &Gradients<T>) -> Result<Vec<String>, NnError> {
        self.t += 1;
        let mut updated = Vec::new();
        for i in 0..graph.layers().len() {
            let layer = &graph.layers()[i];
            if !layer.trainable() || grads.per_layer[i].is_empty() {
                continue;
            }
            let lname = layer.name().to_string();
            let pnames: Vec<String> = layer.params.iter().map(|p| p.name.clone()).collect();
            for (j, pname) in pnames.iter().enumerate() {
                let g = &grads.per_layer[i][j];
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NnError::Numerical { layer: lname.clone() });
                }
                let key = format!("{lname}/{pname}");
                let n = g.len();
                let mom = self
                    .moments
                    .entry(key.clone())
                    .or_insert_with(|| Moments { m: vec![T::zero(); n], v: vec![T::zero(); n] });
                let theta = graph.param_mut(i, j);
                adam_update(&self.config, self.t, theta.data_mut(), g, mom);
                updated.push(key);
            }
        }
        Ok(updated)
    }
}
