//! Clip normalization, STFT, mel filterbank, dB scaling and file I/O.

use std::fmt;
use std::io::BufWriter;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::exec;

#[derive(Debug, thiserror::Error)]
pub enum AudioError {
    #[error("invalid audio: {0}")]
    InvalidAudio(String),
    #[error("sample rate mismatch: clip has {clip} Hz, parameters expect {params} Hz")]
    ParamMismatch { clip: u32, params: u32 },
    #[error("invalid spectrogram parameters: {0}")]
    InvalidParams(String),
    #[error("mel filter {band} covers no FFT bin")]
    DegenerateFilterbank { band: usize },
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
    #[error("png: {0}")]
    Png(#[from] png::EncodingError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Stable,
    Unstable,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Stable, Label::Unstable];

    /// Class index used by the classifiers; Unstable is index 1.
    pub fn index(self) -> usize {
        match self {
            Label::Stable => 0,
            Label::Unstable => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn is_positive(self) -> bool {
        self == Label::Unstable
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Stable => "Stable",
            Label::Unstable => "Unstable",
        })
    }
}

impl FromStr for Label {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "stable" => Ok(Label::Stable),
            "unstable" => Ok(Label::Unstable),
            _ => Err(format!("unknown label '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub subject_id: String,
    pub label: Label,
    pub clip_id: String,
}

impl AudioClip {
    pub fn duration_samples(&self) -> usize {
        self.samples.len()
    }
}

/// Scale so the peak absolute amplitude is 1. All-zero input is returned as is.
pub fn normalize_clip(
    raw: &[f64],
    sample_rate: u32,
    subject_id: &str,
    label: Label,
    clip_id: &str,
) -> Result<AudioClip, AudioError> {
    if raw.is_empty() {
        return Err(AudioError::InvalidAudio(format!("clip '{clip_id}' is empty")));
    }
    if sample_rate == 0 {
        return Err(AudioError::InvalidAudio("sample rate must be positive".into()));
    }
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(AudioError::InvalidAudio(format!("clip '{clip_id}' has a non-finite sample at {i}")));
    }
    let peak = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let samples = if peak > 0.0 { raw.iter().map(|v| v / peak).collect() } else { raw.to_vec() };
    Ok(AudioClip { samples, sample_rate, subject_id: subject_id.into(), label, clip_id: clip_id.into() })
}

/// Zero-pad or truncate to exactly `len` samples.
pub fn fix_length(samples: &mut Vec<f64>, len: usize) {
    samples.resize(len, 0.0);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    Hann,
    Rectangular,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
                .collect(),
            Window::Rectangular => vec![1.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrogramParams {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub window: Window,
    pub center_pad: bool,
    pub db_floor: f64,
}

impl Default for SpectrogramParams {
    fn default() -> Self {
        SpectrogramParams {
            sample_rate: 48_000,
            n_fft: 2048,
            hop: 512,
            n_mels: 128,
            f_min: 0.0,
            f_max: 8000.0,
            window: Window::Hann,
            center_pad: true,
            db_floor: -80.0,
        }
    }
}

impl SpectrogramParams {
    pub fn validate(&self) -> Result<(), AudioError> {
        let bad = |m: String| Err(AudioError::InvalidParams(m));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive".into());
        }
        if self.n_fft < 2 {
            return bad("n_fft must be at least 2".into());
        }
        if self.hop == 0 || self.hop > self.n_fft {
            return bad(format!("hop {} must be in 1..={}", self.hop, self.n_fft));
        }
        if self.n_mels == 0 {
            return bad("n_mels must be at least 1".into());
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        if !(self.f_min >= 0.0 && self.f_min < self.f_max && self.f_max <= nyquist) {
            return bad(format!("need 0 <= f_min < f_max <= {nyquist}, got {}..{}", self.f_min, self.f_max));
        }
        if !(self.db_floor < 0.0 && self.db_floor.is_finite()) {
            return bad("db_floor must be negative".into());
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// With centring the signal is reflect-padded by `n_fft/2` on the left and
    /// `n_fft - n_fft/2` on the right, so odd windows keep `1 + len/hop` frames.
    pub fn n_frames(&self, len: usize) -> usize {
        if self.center_pad {
            1 + len / self.hop
        } else if len <= self.n_fft {
            1
        } else {
            1 + (len - self.n_fft) / self.hop
        }
    }
}

/// Row-major 2-D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// `[(n_fft/2+1) × n_frames]` magnitude array.
pub fn stft_magnitude(clip: &AudioClip, params: &SpectrogramParams) -> Result<Matrix, AudioError> {
    params.validate()?;
    if clip.sample_rate != params.sample_rate {
        return Err(AudioError::ParamMismatch { clip: clip.sample_rate, params: params.sample_rate });
    }
    if clip.samples.is_empty() {
        return Err(AudioError::InvalidAudio(format!("clip '{}' is empty", clip.clip_id)));
    }
    let n = params.n_fft;
    let x = &clip.samples;
    let frames = params.n_frames(x.len());
    let window = params.window.coefficients(n);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(n);
    let pad = if params.center_pad { (n / 2) as isize } else { 0 };
    let bins = params.n_bins();

    let columns = exec::map_range(frames, |t| {
        let start = (t * params.hop) as isize - pad;
        let mut buf: Vec<Complex<f64>> = (0..n)
            .map(|j| {
                let i = start + j as isize;
                let v = if params.center_pad {
                    x[reflect_index(i, x.len())]
                } else if (i as usize) < x.len() {
                    x[i as usize]
                } else {
                    0.0
                };
                Complex::new(v * window[j], 0.0)
            })
            .collect();
        fft.process(&mut buf);
        buf[..bins].iter().map(|c| c.norm()).collect::<Vec<f64>>()
    });
    let mut out = Matrix::zeros(bins, frames);
    for (t, col) in columns.iter().enumerate() {
        for (k, v) in col.iter().enumerate() {
            out.data[k * frames + t] = *v;
        }
    }
    Ok(out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequencies (Hz) of the `n_mels` triangular filters.
pub fn mel_centers(params: &SpectrogramParams) -> Vec<f64> {
    mel_edges(params)[1..=params.n_mels].to_vec()
}

fn mel_edges(params: &SpectrogramParams) -> Vec<f64> {
    let lo = hz_to_mel(params.f_min);
    let hi = hz_to_mel(params.f_max);
    let m = params.n_mels + 1;
    (0..=m).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / m as f64)).collect()
}

/// `[n_mels × (n_fft/2+1)]` unnormalized triangular filters on the HTK mel scale.
pub fn mel_filterbank(params: &SpectrogramParams) -> Result<Matrix, AudioError> {
    params.validate()?;
    let bins = params.n_bins();
    let edges = mel_edges(params);
    let freq = |k: usize| k as f64 * params.sample_rate as f64 / params.n_fft as f64;
    let mut fb = Matrix::zeros(params.n_mels, bins);
    for m in 0..params.n_mels {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut any = false;
        for k in 0..bins {
            let f = freq(k);
            let w = ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0);
            if w > 0.0 {
                any = true;
            }
            fb.data[m * bins + k] = w;
        }
        if !any {
            return Err(AudioError::DegenerateFilterbank { band: m });
        }
    }
    Ok(fb)
}

/// `10·log10(p / max)` clamped to `[db_floor, 0]`, then mapped to `[0, 1]`.
pub fn normalize_db(power: &Matrix, db_floor: f64) -> Matrix {
    let max = power.data.iter().fold(0.0f64, |m, &v| m.max(v));
    if max <= 0.0 {
        return Matrix::zeros(power.rows, power.cols);
    }
    let tiny = f64::MIN_POSITIVE;
    let data = power
        .data
        .iter()
        .map(|&p| {
            let db = (10.0 * (p.max(tiny) / max).log10()).clamp(db_floor, 0.0);
            (db - db_floor) / -db_floor
        })
        .collect();
    Matrix { rows: power.rows, cols: power.cols, data }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MelSpectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    /// Row-major `[n_mels × n_frames]`, row 0 is the lowest band.
    pub data: Vec<f32>,
    pub params: SpectrogramParams,
    pub source_clip_id: String,
    pub subject_id: String,
    pub label: Label,
    pub augmented: bool,
    /// Set when a random erase found no rectangle that fits and was skipped.
    #[serde(default)]
    pub erase_skipped: bool,
}

impl MelSpectrogram {
    pub fn shape(&self) -> [usize; 2] {
        [self.n_mels, self.n_frames]
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.n_frames + c]
    }
}

pub fn mel_spectrogram(clip: &AudioClip, params: &SpectrogramParams) -> Result<MelSpectrogram, AudioError> {
    let fb = mel_filterbank(params)?;
    mel_spectrogram_with(clip, params, &fb)
}

/// As [`mel_spectrogram`] with a precomputed filterbank.
pub fn mel_spectrogram_with(
    clip: &AudioClip,
    params: &SpectrogramParams,
    filterbank: &Matrix,
) -> Result<MelSpectrogram, AudioError> {
    let mag = stft_magnitude(clip, params)?;
    let (bins, frames) = (mag.rows, mag.cols);
    let power: Vec<f64> = mag.data.iter().map(|m| m * m).collect();
    let mut mel = Matrix::zeros(params.n_mels, frames);
    for m in 0..params.n_mels {
        let w = filterbank.row(m);
        let out = &mut mel.data[m * frames..(m + 1) * frames];
        for (k, &wk) in w.iter().enumerate().take(bins) {
            if wk == 0.0 {
                continue;
            }
            let prow = &power[k * frames..(k + 1) * frames];
            for (o, p) in out.iter_mut().zip(prow) {
                *o += wk * p;
            }
        }
    }
    let norm = normalize_db(&mel, params.db_floor);
    Ok(MelSpectrogram {
        n_mels: params.n_mels,
        n_frames: frames,
        data: norm.data.iter().map(|&v| v as f32).collect(),
        params: params.clone(),
        source_clip_id: clip.clip_id.clone(),
        subject_id: clip.subject_id.clone(),
        label: clip.label,
        augmented: false,
        erase_skipped: false,
    })
}

/// Read a WAV file as mono f64 samples in `[-1, 1]`; multi-channel input is averaged.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32), AudioError> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => {
            reader.samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>()?
        }
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader.samples::<i32>().map(|s| s.map(|v| v as f64 / scale)).collect::<Result<_, _>>()?
        }
    };
    if channels == 0 {
        return Err(AudioError::InvalidAudio("zero channels".into()));
    }
    let mono = interleaved.chunks(channels).map(|c| c.iter().sum::<f64>() / channels as f64).collect();
    Ok((mono, spec.sample_rate))
}

/// Write mono 32-bit float WAV.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), AudioError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        w.write_sample(s as f32)?;
    }
    w.finalize()?;
    Ok(())
}

/// Load a WAV, fix it to `len` samples and peak-normalize it.
pub fn load_clip(
    path: &Path,
    len: usize,
    subject_id: &str,
    label: Label,
    clip_id: &str,
) -> Result<AudioClip, AudioError> {
    let (mut samples, sr) = read_wav(path)?;
    fix_length(&mut samples, len);
    normalize_clip(&samples, sr, subject_id, label, clip_id)
}

/// 8-bit grayscale, value ×255, image row 0 is mel band 0.
pub fn write_png(path: &Path, spec: &MelSpectrogram) -> Result<(), AudioError> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), spec.n_frames as u32, spec.n_mels as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    let bytes: Vec<u8> = spec.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    w.write_image_data(&bytes)?;
    w.finish()?;
    Ok(())
}
