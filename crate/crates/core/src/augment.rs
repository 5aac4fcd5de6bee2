//! Training-only spectrogram augmentation: masking, noise and random erasing,
//! composed in a seeded random order per copy.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::MelSpectrogram;
use crate::keyed_rng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AugmentError {
    #[error("mask width {width} is not in 1..={limit}")]
    InvalidMaskWidth { width: usize, limit: usize },
    #[error("invalid augmentation parameter: {0}")]
    InvalidParam(String),
    #[error("clip '{0}' is already augmented")]
    AlreadyAugmented(String),
    #[error("clip '{clip_id}' belongs to the {split} split; only training clips may be augmented")]
    SplitRefused { clip_id: String, split: String },
}

fn masked(spec: &MelSpectrogram) -> MelSpectrogram {
    let mut out = spec.clone();
    out.augmented = true;
    out
}

fn mask_band(
    len: usize,
    max_width: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(usize, usize), AugmentError> {
    if max_width == 0 || max_width > len {
        return Err(AugmentError::InvalidMaskWidth { width: max_width, limit: len });
    }
    let width = rng.random_range(1..=max_width);
    let start = rng.random_range(0..=len - width);
    Ok((start, width))
}

/// Zero one contiguous band of columns, width uniform in `[1, max_width_frames]`.
pub fn time_mask(
    spec: &MelSpectrogram,
    max_width_frames: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MelSpectrogram, AugmentError> {
    let (start, width) = mask_band(spec.n_frames, max_width_frames, rng)?;
    let mut out = masked(spec);
    for row in out.data.chunks_mut(spec.n_frames) {
        row[start..start + width].fill(0.0);
    }
    Ok(out)
}

/// Zero one contiguous band of mel rows, width uniform in `[1, max_width_bins]`.
pub fn freq_mask(
    spec: &MelSpectrogram,
    max_width_bins: usize,
    rng: &mut ChaCha8Rng,
) -> Result<MelSpectrogram, AugmentError> {
    let (start, width) = mask_band(spec.n_mels, max_width_bins, rng)?;
    let mut out = masked(spec);
    out.data[start * spec.n_frames..(start + width) * spec.n_frames].fill(0.0);
    Ok(out)
}

/// `time_masks` time masks followed by `freq_masks` frequency masks.
pub fn spec_augment(
    spec: &MelSpectrogram,
    time_masks: usize,
    freq_masks: usize,
    widths: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<MelSpectrogram, AugmentError> {
    if time_masks == 0 || freq_masks == 0 {
        return Err(AugmentError::InvalidParam("SpecAugment needs at least one mask of each kind".into()));
    }
    let mut out = masked(spec);
    for _ in 0..time_masks {
        out = time_mask(&out, widths.0, rng)?;
    }
    for _ in 0..freq_masks {
        out = freq_mask(&out, widths.1, rng)?;
    }
    Ok(out)
}

/// Add `N(0, sigma²)` to every cell and clamp to `[0, 1]`.
pub fn gaussian_noise(spec: &MelSpectrogram, sigma: f64, rng: &mut ChaCha8Rng) -> Result<MelSpectrogram, AugmentError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(AugmentError::InvalidParam(format!("sigma must be non-negative, got {sigma}")));
    }
    let mut out = masked(spec);
    if sigma == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    for v in out.data.iter_mut() {
        *v = (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

pub const ERASE_ATTEMPTS: usize = 10;

/// Zero one rectangle whose area fraction is uniform in `area_range` and whose
/// height/width ratio is log-uniform in `aspect_range`. If no sampled rectangle
/// fits after [`ERASE_ATTEMPTS`] tries the input is returned with
/// `erase_skipped` set.
pub fn random_erase(
    spec: &MelSpectrogram,
    area_range: (f64, f64),
    aspect_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<MelSpectrogram, AugmentError> {
    let (alo, ahi) = area_range;
    let (rlo, rhi) = aspect_range;
    if !(0.0 < alo && alo <= ahi && ahi < 1.0) {
        return Err(AugmentError::InvalidParam(format!("area range ({alo}, {ahi}) must satisfy 0 < lo <= hi < 1")));
    }
    if !(0.0 < rlo && rlo <= rhi && rhi.is_finite()) {
        return Err(AugmentError::InvalidParam(format!("aspect range ({rlo}, {rhi}) must be positive")));
    }
    let (h, w) = (spec.n_mels, spec.n_frames);
    let total = (h * w) as f64;
    let mut out = masked(spec);
    for _ in 0..ERASE_ATTEMPTS {
        let area = if alo == ahi { alo } else { rng.random_range(alo..ahi) } * total;
        let aspect = if rlo == rhi { rlo } else { rng.random_range(rlo.ln()..rhi.ln()).exp() };
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh > h || ew > w {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        for r in top..top + eh {
            out.data[r * w + left..r * w + left + ew].fill(0.0);
        }
        return Ok(out);
    }
    out.erase_skipped = true;
    Ok(out)
}

fn default_probability() -> f64 {
    0.5
}

/// One augmentation with its kind-specific parameters. Mask widths are given as
/// fractions of the relevant axis; the absolute bound is `max(1, floor(frac·len))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OpKind {
    TimeMask { max_width_frac: f64 },
    FreqMask { max_width_frac: f64 },
    SpecAugment { time_masks: usize, freq_masks: usize, max_time_frac: f64, max_freq_frac: f64 },
    GaussianNoise { sigma_min: f64, sigma_max: f64 },
    RandomErase { area_min: f64, area_max: f64, aspect_min: f64, aspect_max: f64 },
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::TimeMask { .. } => "time_mask",
            OpKind::FreqMask { .. } => "freq_mask",
            OpKind::SpecAugment { .. } => "spec_augment",
            OpKind::GaussianNoise { .. } => "gaussian_noise",
            OpKind::RandomErase { .. } => "random_erase",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentOp {
    pub op: OpKind,
    #[serde(default = "default_probability")]
    pub probability: f64,
}

impl AugmentOp {
    pub fn new(op: OpKind, probability: f64) -> Self {
        AugmentOp { op, probability }
    }
}

fn width_bound(frac: f64, len: usize) -> usize {
    ((frac * len as f64).floor() as usize).max(1)
}

impl AugmentOp {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(AugmentError::InvalidParam(format!("probability {} outside [0, 1]", self.probability)));
        }
        let frac_ok = |f: f64| f > 0.0 && f <= 1.0;
        let ok = match &self.op {
            OpKind::TimeMask { max_width_frac } | OpKind::FreqMask { max_width_frac } => frac_ok(*max_width_frac),
            OpKind::SpecAugment { time_masks, freq_masks, max_time_frac, max_freq_frac } => {
                *time_masks >= 1 && *freq_masks >= 1 && frac_ok(*max_time_frac) && frac_ok(*max_freq_frac)
            }
            OpKind::GaussianNoise { sigma_min, sigma_max } => 0.0 <= *sigma_min && sigma_min <= sigma_max,
            OpKind::RandomErase { area_min, area_max, aspect_min, aspect_max } => {
                0.0 < *area_min && area_min <= area_max && *area_max < 1.0 && 0.0 < *aspect_min && aspect_min <= aspect_max
            }
        };
        if ok {
            Ok(())
        } else {
            Err(AugmentError::InvalidParam(format!("bad parameters for {}: {:?}", self.op.name(), self.op)))
        }
    }

    /// Apply unconditionally (the probability draw happens in the pipeline).
    pub fn apply(&self, spec: &MelSpectrogram, rng: &mut ChaCha8Rng) -> Result<MelSpectrogram, AugmentError> {
        match &self.op {
            OpKind::TimeMask { max_width_frac } => time_mask(spec, width_bound(*max_width_frac, spec.n_frames), rng),
            OpKind::FreqMask { max_width_frac } => freq_mask(spec, width_bound(*max_width_frac, spec.n_mels), rng),
            OpKind::SpecAugment { time_masks, freq_masks, max_time_frac, max_freq_frac } => spec_augment(
                spec,
                *time_masks,
                *freq_masks,
                (width_bound(*max_time_frac, spec.n_frames), width_bound(*max_freq_frac, spec.n_mels)),
                rng,
            ),
            OpKind::GaussianNoise { sigma_min, sigma_max } => {
                let sigma = if sigma_min == sigma_max { *sigma_min } else { rng.random_range(*sigma_min..*sigma_max) };
                gaussian_noise(spec, sigma, rng)
            }
            OpKind::RandomErase { area_min, area_max, aspect_min, aspect_max } => {
                random_erase(spec, (*area_min, *area_max), (*aspect_min, *aspect_max), rng)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPipeline {
    pub ops: Vec<AugmentOp>,
    pub seed: u64,
    pub copies_per_sample: usize,
}

impl Default for AugmentPipeline {
    fn default() -> Self {
        AugmentPipeline::standard(0)
    }
}

impl AugmentPipeline {
    /// Five ops at probability 0.5 with the default magnitudes, three copies.
    pub fn standard(seed: u64) -> Self {
        let p = default_probability();
        AugmentPipeline {
            ops: vec![
                AugmentOp::new(OpKind::TimeMask { max_width_frac: 0.1 }, p),
                AugmentOp::new(OpKind::FreqMask { max_width_frac: 0.1 }, p),
                AugmentOp::new(
                    OpKind::SpecAugment { time_masks: 2, freq_masks: 2, max_time_frac: 0.1, max_freq_frac: 0.1 },
                    p,
                ),
                AugmentOp::new(OpKind::GaussianNoise { sigma_min: 0.01, sigma_max: 0.05 }, p),
                AugmentOp::new(
                    OpKind::RandomErase { area_min: 0.02, area_max: 0.2, aspect_min: 0.3, aspect_max: 3.3 },
                    p,
                ),
            ],
            seed,
            copies_per_sample: 3,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.ops.is_empty() {
            return Err(AugmentError::InvalidParam("pipeline has no ops".into()));
        }
        if self.copies_per_sample == 0 {
            return Err(AugmentError::InvalidParam("copies_per_sample must be positive".into()));
        }
        self.ops.iter().try_for_each(AugmentOp::validate)
    }
}

/// Produce `copies_per_sample` augmented copies of a raw spectrogram. Each copy
/// shuffles the op order and flips each op's coin from streams keyed on
/// `(seed, clip, sample_index, copy)`; each op draws from its own stream.
pub fn apply_pipeline(
    pipeline: &AugmentPipeline,
    spec: &MelSpectrogram,
    sample_index: u64,
) -> Result<Vec<MelSpectrogram>, AugmentError> {
    if spec.augmented {
        return Err(AugmentError::AlreadyAugmented(spec.source_clip_id.clone()));
    }
    pipeline.validate()?;
    let seed = pipeline.seed;
    let clip = spec.source_clip_id.as_str();
    (0..pipeline.copies_per_sample)
        .map(|copy| {
            let mut order_rng = keyed_rng!(seed, "augment-order", clip, sample_index, copy);
            let mut order: Vec<usize> = (0..pipeline.ops.len()).collect();
            order.shuffle(&mut order_rng);
            let mut out = masked(spec);
            for i in order {
                let op = &pipeline.ops[i];
                if order_rng.random::<f64>() >= op.probability {
                    continue;
                }
                let mut rng = keyed_rng!(seed, "augment-op", clip, sample_index, copy, i);
                let skipped = out.erase_skipped;
                out = op.apply(&out, &mut rng)?;
                out.erase_skipped |= skipped;
            }
            Ok(out)
        })
        .collect()
}
