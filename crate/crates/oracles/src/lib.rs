//! Brute-force reference computations.
//!
//! Nothing here calls into the code paths it is used to check: convolutions
//! are quadruple loops, the DFT is a direct sum, AUC is pair counting, and
//! gradients come from central differences of forward passes only.

use voxmind::nn::graph::{ForwardOpts, Graph};
use voxmind::nn::loss::{cross_entropy, one_hot};
use voxmind::nn::Tensor;

/// Direct cross-correlation, `x: [C×H×W]`, `w: [F×C×kh×kw]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f64],
    c: usize,
    h: usize,
    w_: usize,
    weight: &[f64],
    bias: &[f64],
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w_ + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; f * oh * ow];
    for fo in 0..f {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = bias[fo];
                for ci in 0..c {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy as usize >= h || ix as usize >= w_ {
                                continue;
                            }
                            s += x[(ci * h + iy as usize) * w_ + ix as usize]
                                * weight[((fo * c + ci) * kh + ki) * kw + kj];
                        }
                    }
                }
                out[(fo * oh + oy) * ow + ox] = s;
            }
        }
    }
    out
}

/// Direct max pooling over `[C×H×W]`; padded cells never win.
pub fn maxpool(x: &[f64], c: usize, h: usize, w: usize, size: usize, stride: usize, pad: usize) -> Vec<f64> {
    let oh = (h + 2 * pad - size) / stride + 1;
    let ow = (w + 2 * pad - size) / stride + 1;
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for ki in 0..size {
                    for kj in 0..size {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            m = m.max(x[(ci * h + iy as usize) * w + ix as usize]);
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

/// `y = x·W + b` with `x: [B×in]`, `W: [in×out]`.
pub fn dense(x: &[f64], w: &[f64], b: &[f64], batch: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * out];
    for r in 0..batch {
        for o in 0..out {
            let mut s = b[o];
            for i in 0..inp {
                s += x[r * inp + i] * w[i * out + o];
            }
            y[r * out + o] = s;
        }
    }
    y
}

/// `|Σ_n x[n]·w[n]·e^{−j2πkn/N}|` for `k = 0..=N/2`.
pub fn dft_magnitude(frame: &[f64], window: &[f64]) -> Vec<f64> {
    let n = frame.len();
    (0..=n / 2)
        .map(|k| {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (t, (&x, &w)) in frame.iter().zip(window).enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * t % n) as f64 / n as f64;
                re += x * w * ang.cos();
                im += x * w * ang.sin();
            }
            (re * re + im * im).sqrt()
        })
        .collect()
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()).collect()
}

/// HTK mel scale.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

/// Mann–Whitney statistic `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)` by enumerating pairs.
pub fn pair_count_auc(positive: &[bool], scores: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for (i, &pi) in positive.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positive.iter().enumerate() {
            if pj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / pairs
}

/// `(fpr, tpr)` for the rule "predict positive when score ≥ threshold".
pub fn rates_at(positive: &[bool], scores: &[f64], threshold: f64) -> (f64, f64) {
    let (mut tp, mut fp, mut p, mut n) = (0.0, 0.0, 0.0, 0.0);
    for (&y, &s) in positive.iter().zip(scores) {
        if y {
            p += 1.0;
            if s >= threshold {
                tp += 1.0;
            }
        } else {
            n += 1.0;
            if s >= threshold {
                fp += 1.0;
            }
        }
    }
    (fp / n, tp / p)
}

/// `[[TP, FN], [FP, TN]]` by per-pair counting.
pub fn confusion(actual_positive: &[bool], predicted_positive: &[bool]) -> [[usize; 2]; 2] {
    let mut m = [[0usize; 2]; 2];
    for (&a, &p) in actual_positive.iter().zip(predicted_positive) {
        let r = if a { 0 } else { 1 };
        let c = if p { 0 } else { 1 };
        m[r][c] += 1;
    }
    m
}

/// Scalar Adam written out step by step; returns θ after each step.
pub fn adam_scalar_trace(
    theta0: f64,
    grads: &[f64],
    alpha: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Vec<f64> {
    let mut theta = theta0;
    let mut m = 0.0;
    let mut v = 0.0;
    let mut out = Vec::new();
    for (t, &g) in grads.iter().enumerate() {
        let step = (t + 1) as i32;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        let m_hat = m / (1.0 - beta1.powi(step));
        let v_hat = v / (1.0 - beta2.powi(step));
        theta -= alpha * m_hat / (v_hat.sqrt() + eps);
        out.push(theta);
    }
    out
}

/// Loss of a graph ending in softmax on one batch, forward pass only.
pub fn graph_loss(graph: &Graph<f64>, x: &Tensor<f64>, labels: &[usize], opts: ForwardOpts) -> f64 {
    let trace = graph.forward(x, opts).expect("forward");
    let y = one_hot::<f64>(labels, graph.num_classes()).expect("labels");
    cross_entropy(trace.final_output(), &y, graph.num_classes(), graph.l2_penalty()).expect("loss")
}

/// Central-difference derivative of the loss w.r.t. parameter `(layer, param, index)`.
pub fn finite_difference(
    graph: &Graph<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    opts: ForwardOpts,
    coord: (usize, usize, usize),
    h: f64,
) -> f64 {
    let (i, j, k) = coord;
    let mut plus = graph.clone();
    plus.param_mut(i, j).data_mut()[k] += h;
    let mut minus = graph.clone();
    minus.param_mut(i, j).data_mut()[k] -= h;
    (graph_loss(&plus, x, labels, opts) - graph_loss(&minus, x, labels, opts)) / (2.0 * h)
}

/// Relative error with a floor on the magnitude so that gradients that are
/// both essentially zero compare by absolute difference.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Tiny deterministic generator for test fixtures (SplitMix64).
pub struct Fixture(u64);

impl Fixture {
    pub fn new(seed: u64) -> Self {
        Fixture(seed)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    pub fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.uniform(lo, hi)).collect()
    }
}
