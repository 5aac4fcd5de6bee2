//! Manifests, subject-independent splitting, leakage audit, the synthetic
//! two-class voice corpus and seeded batch streaming.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{self, AudioError, Label, MelSpectrogram};
use crate::augment::{self, AugmentError, AugmentPipeline};
use crate::nn::train::{batches, epoch_order, SampleSet};
use crate::nn::Tensor;
use crate::persist::{self, PersistError};
use crate::rng::permutation;
use crate::{exec, keyed_rng};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("need at least 3 subjects, found {0}")]
    InsufficientSubjects(usize),
    #[error("subject '{subject}' holds {clips} of {total} clips, more than the training fraction allows")]
    UnsatisfiableSplit { subject: String, clips: usize, total: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("spectrogram for clip '{0}' is missing")]
    MissingSpectrogram(String),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub subject_id: String,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrogram_path: Option<String>,
    pub split: Split,
    #[serde(default)]
    pub augmented: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_clip_id: Option<String>,
}

impl ManifestEntry {
    pub fn new(clip_id: &str, subject_id: &str, label: Label) -> Self {
        ManifestEntry {
            clip_id: clip_id.into(),
            subject_id: subject_id.into(),
            label,
            audio_path: None,
            spectrogram_path: None,
            split: Split::Unassigned,
            augmented: false,
            source_clip_id: None,
        }
    }
}

/// Entries plus the directory relative paths resolve against.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Manifest { entries, base_dir: PathBuf::new() }
    }

    pub fn parse_jsonl(text: &str) -> Result<Vec<ManifestEntry>, DatasetError> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| DatasetError::Manifest { line: i + 1, message: e.to_string() })
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("entry json"));
            s.push('\n');
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let entries = Self::parse_jsonl(&fs::read_to_string(path)?)?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Manifest { entries, base_dir })
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    /// SHA-256 of the JSONL serialization.
    pub fn hash(&self) -> String {
        persist::sha256_hex(self.to_jsonl().as_bytes())
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn clip_ids(&self, split: Split) -> BTreeSet<String> {
        self.in_split(split).map(|e| e.clip_id.clone()).collect()
    }

    /// Entries with the augmented copies removed.
    pub fn raw(&self) -> Manifest {
        Manifest {
            entries: self.entries.iter().filter(|e| !e.augmented).cloned().collect(),
            base_dir: self.base_dir.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub seed: u64,
    #[serde(default = "yes")]
    pub stratify_by_label: bool,
}

fn yes() -> bool {
    true
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { fractions: [0.70, 0.15, 0.15], seed: 0, stratify_by_label: true }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let sum: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|f| !(*f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(DatasetError::InvalidParam(format!(
                "split fractions must be positive and sum to 1, got {:?}",
                self.fractions
            )));
        }
        Ok(())
    }
}

struct Subject {
    id: String,
    clips: usize,
    stratum: Option<Label>,
}

/// Assign whole subjects to Train/Val/Test. Within each label stratum,
/// subjects go largest first to the split whose clip deficit against its
/// target is largest; ties in size and in deficit are broken by seeded
/// shuffles. Once only as many subjects remain as there are empty splits,
/// the remaining subjects are reserved for those splits.
pub fn split_by_subject(manifest: &Manifest, spec: &SplitSpec) -> Result<Manifest, DatasetError> {
    spec.validate()?;
    if let Some(e) = manifest.entries.iter().find(|e| e.split != Split::Unassigned || e.augmented) {
        return Err(DatasetError::InvalidParam(format!(
            "clip '{}' is already assigned or augmented; splitting needs a raw, unassigned manifest",
            e.clip_id
        )));
    }
    let mut by_subject: BTreeMap<&str, (usize, BTreeSet<Label>)> = BTreeMap::new();
    for e in &manifest.entries {
        let s = by_subject.entry(&e.subject_id).or_default();
        s.0 += 1;
        s.1.insert(e.label);
    }
    if by_subject.len() < 3 {
        return Err(DatasetError::InsufficientSubjects(by_subject.len()));
    }
    let total = manifest.entries.len();
    for (id, (n, _)) in &by_subject {
        if *n as f64 > spec.fractions[0] * total as f64 {
            return Err(DatasetError::UnsatisfiableSplit { subject: id.to_string(), clips: *n, total });
        }
    }

    let subjects: Vec<Subject> = by_subject
        .into_iter()
        .map(|(id, (clips, labels))| Subject {
            id: id.to_string(),
            clips,
            stratum: if spec.stratify_by_label && labels.len() == 1 { labels.into_iter().next() } else { None },
        })
        .collect();
    let mut strata: BTreeMap<Option<Label>, Vec<&Subject>> = BTreeMap::new();
    for s in &subjects {
        strata.entry(s.stratum).or_default().push(s);
    }

    let mut assignment: HashMap<&str, Split> = HashMap::new();
    let mut subjects_in = [0usize; 3];
    let mut remaining = subjects.len();
    for (key, members) in strata {
        let tag = key.map(|l| l.to_string()).unwrap_or_else(|| "mixed".into());
        let mut rng = keyed_rng!(spec.seed, "split", tag.as_str());
        let perm = permutation(members.len(), &mut rng);
        let mut ordered: Vec<&Subject> = perm.iter().map(|&i| members[i]).collect();
        ordered.sort_by(|a, b| b.clips.cmp(&a.clips));
        let stratum_total: usize = members.iter().map(|s| s.clips).sum();
        let target: Vec<f64> = spec.fractions.iter().map(|f| f * stratum_total as f64).collect();
        let mut filled = [0usize; 3];
        let split_order = permutation(3, &mut rng);

        for s in ordered {
            let empty: Vec<usize> = (0..3).filter(|&k| subjects_in[k] == 0).collect();
            let candidates: Vec<usize> = if !empty.is_empty() && remaining <= empty.len() { empty } else { vec![0, 1, 2] };
            let deficit = |k: usize| target[k] - filled[k] as f64;
            let mut best = candidates[0];
            for &k in &candidates[1..] {
                let (dk, db) = (deficit(k), deficit(best));
                let rank = |x: usize| split_order.iter().position(|&v| v == x).unwrap();
                if dk > db || (dk == db && rank(k) < rank(best)) {
                    best = k;
                }
            }
            filled[best] += s.clips;
            subjects_in[best] += 1;
            remaining -= 1;
            assignment.insert(&s.id, Split::ASSIGNED[best]);
        }
    }

    let mut out = manifest.clone();
    for e in &mut out.entries {
        e.split = assignment[e.subject_id.as_str()];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    SubjectOverlap { subject_id: String, splits: Vec<Split> },
    AugmentedOutsideTrain { clip_id: String, split: Split },
    AugmentedSourceNotTrain { clip_id: String, source_clip_id: Option<String> },
    DuplicateClipId { clip_id: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

pub fn check_leakage(manifest: &Manifest) -> LeakageReport {
    let mut violations = Vec::new();
    let mut splits: BTreeMap<&str, BTreeSet<Split>> = BTreeMap::new();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for e in &manifest.entries {
        if e.split != Split::Unassigned {
            splits.entry(&e.subject_id).or_default().insert(e.split);
        }
        *seen.entry(&e.clip_id).or_default() += 1;
    }
    for (subject, s) in splits {
        if s.len() > 1 {
            violations.push(Violation::SubjectOverlap { subject_id: subject.into(), splits: s.into_iter().collect() });
        }
    }
    let split_of: HashMap<&str, Split> = manifest.entries.iter().map(|e| (e.clip_id.as_str(), e.split)).collect();
    for e in manifest.entries.iter().filter(|e| e.augmented) {
        if e.split != Split::Train {
            violations.push(Violation::AugmentedOutsideTrain { clip_id: e.clip_id.clone(), split: e.split });
        }
        let source_ok = e.source_clip_id.as_deref().and_then(|s| split_of.get(s)).is_some_and(|s| *s == Split::Train)
            && manifest
                .entries
                .iter()
                .any(|o| Some(&o.clip_id) == e.source_clip_id.as_ref() && !o.augmented);
        if !source_ok {
            violations.push(Violation::AugmentedSourceNotTrain {
                clip_id: e.clip_id.clone(),
                source_clip_id: e.source_clip_id.clone(),
            });
        }
    }
    for (clip, n) in seen {
        if n > 1 {
            violations.push(Violation::DuplicateClipId { clip_id: clip.into() });
        }
    }
    LeakageReport { ok: violations.is_empty(), violations }
}

/// Augment one entry; anything outside the training split is refused.
pub fn augment_entry(
    pipeline: &AugmentPipeline,
    entry: &ManifestEntry,
    spec: &MelSpectrogram,
    sample_index: u64,
) -> Result<Vec<(ManifestEntry, MelSpectrogram)>, DatasetError> {
    if entry.split != Split::Train {
        return Err(AugmentError::SplitRefused { clip_id: entry.clip_id.clone(), split: entry.split.to_string() }.into());
    }
    let copies = augment::apply_pipeline(pipeline, spec, sample_index)?;
    Ok(copies
        .into_iter()
        .enumerate()
        .map(|(c, s)| {
            let e = ManifestEntry {
                clip_id: augmented_clip_id(&entry.clip_id, c),
                subject_id: entry.subject_id.clone(),
                label: entry.label,
                audio_path: None,
                spectrogram_path: None,
                split: Split::Train,
                augmented: true,
                source_clip_id: Some(entry.clip_id.clone()),
            };
            (e, s)
        })
        .collect())
}

pub fn augmented_clip_id(clip_id: &str, copy: usize) -> String {
    format!("{clip_id}~aug{copy}")
}

/// Augment every raw training entry, `lookup` supplying each spectrogram.
/// Copies are returned grouped by source in manifest order; `sample_index`
/// is the entry's position in the manifest.
pub fn augment_train<F>(
    manifest: &Manifest,
    pipeline: &AugmentPipeline,
    lookup: F,
) -> Result<Vec<(ManifestEntry, MelSpectrogram)>, DatasetError>
where
    F: Fn(&ManifestEntry) -> Result<MelSpectrogram, DatasetError> + Sync,
{
    let work: Vec<(usize, &ManifestEntry)> =
        manifest.entries.iter().enumerate().filter(|(_, e)| e.split == Split::Train && !e.augmented).collect();
    let results = exec::map_slice(&work, |(i, e)| {
        let spec = lookup(e)?;
        augment_entry(pipeline, e, &spec, *i as u64)
    });
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Per-subject voice parameters of the synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthVoice {
    pub subject_id: String,
    pub label: Label,
    pub f0: f64,
    pub vibrato_rate: f64,
    pub vibrato_depth: f64,
    pub harmonic_gains: Vec<f64>,
    /// Unstable only: harmonic tilt exponent (positive brightens).
    pub tilt: f64,
    /// Unstable only: level of continuous aspiration noise relative to the
    /// harmonic peak.
    pub breathiness: f64,
}

pub const SYNTH_HARMONICS: usize = 12;

/// Subject `i` is Unstable when `i` is odd.
pub fn synth_voice(seed: u64, index: usize) -> SynthVoice {
    let mut rng = keyed_rng!(seed, "synth-subject", index);
    let label = if index % 2 == 1 { Label::Unstable } else { Label::Stable };
    let f0 = rng.random_range(110.0..220.0);
    let vibrato_rate = rng.random_range(4.0..6.0);
    let vibrato_depth = rng.random_range(0.005..0.015);
    let unstable = label == Label::Unstable;
    let tilt = if unstable { rng.random_range(0.3..0.8) } else { 0.0 };
    let breathiness = if unstable { rng.random_range(0.04..0.08) } else { 0.0 };
    let harmonic_gains = (1..=SYNTH_HARMONICS)
        .map(|h| rng.random_range(0.7..1.3) * (h as f64).powf(-1.0 + tilt))
        .collect();
    SynthVoice {
        subject_id: format!("s{index:02}"),
        label,
        f0,
        vibrato_rate,
        vibrato_depth,
        harmonic_gains,
        tilt,
        breathiness,
    }
}

/// One clip, peak-normalized to 0.9. Stable voices are a vibrato harmonic
/// series over a faint noise floor; Unstable voices add pitch jitter,
/// continuous breath noise and strong broadband noise bursts.
pub fn synth_samples(seed: u64, voice: &SynthVoice, clip: usize, sample_rate: u32, len: usize) -> Vec<f64> {
    let mut rng = keyed_rng!(seed, "synth-clip", voice.subject_id.as_str(), clip);
    let sr = sample_rate as f64;
    let f0 = voice.f0 * rng.random_range(0.97..1.03);
    let phases: Vec<f64> = (0..SYNTH_HARMONICS).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    let vib_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let unstable = voice.label == Label::Unstable;
    let nyquist = sr / 2.0;

    let mut x = vec![0.0; len];
    let mut phi = 0.0f64;
    let mut jitter = 0.0f64;
    let jitter_step = Normal::new(0.0, 0.002).unwrap();
    for (n, out) in x.iter_mut().enumerate() {
        let t = n as f64 / sr;
        if unstable {
            jitter = (jitter + jitter_step.sample(&mut rng)).clamp(-0.06, 0.06) * 0.9995;
        }
        let f = f0 * (1.0 + voice.vibrato_depth * (std::f64::consts::TAU * voice.vibrato_rate * t + vib_phase).sin() + jitter);
        phi += f / sr;
        let mut s = 0.0;
        for (h, (g, p)) in voice.harmonic_gains.iter().zip(&phases).enumerate() {
            if (h + 1) as f64 * f >= nyquist {
                break;
            }
            s += g * (std::f64::consts::TAU * (h + 1) as f64 * phi + p).sin();
        }
        *out = s;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let floor = Normal::new(0.0, (0.003 + voice.breathiness) * peak).unwrap();
    for v in x.iter_mut() {
        *v += floor.sample(&mut rng);
    }
    if unstable {
        let bursts = rng.random_range(6..=10);
        let noise = Normal::new(0.0, 0.5 * peak).unwrap();
        for _ in 0..bursts {
            let blen = ((rng.random_range(0.03..0.08) * sr) as usize).clamp(1, len);
            let start = rng.random_range(0..=len - blen);
            let gain = rng.random_range(0.6..1.0);
            for j in 0..blen {
                let env = 0.5 - 0.5 * (std::f64::consts::TAU * j as f64 / blen as f64).cos();
                x[start + j] += gain * env * noise.sample(&mut rng);
            }
        }
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    x.iter_mut().for_each(|v| *v *= 0.9 / peak);
    x
}

fn check_synth_counts(n_subjects: usize, clips_per_subject: usize, sample_rate: u32, duration_s: f64) -> Result<usize, DatasetError> {
    if n_subjects < 6 || n_subjects % 2 != 0 {
        return Err(DatasetError::InvalidParam(format!("n_subjects must be even and >= 6, got {n_subjects}")));
    }
    if clips_per_subject < 2 {
        return Err(DatasetError::InvalidParam(format!("clips_per_subject must be >= 2, got {clips_per_subject}")));
    }
    let len = (sample_rate as f64 * duration_s).round() as usize;
    if sample_rate == 0 || len == 0 {
        return Err(DatasetError::InvalidParam("sample rate and duration must be positive".into()));
    }
    Ok(len)
}

pub fn synth_clip_id(subject: usize, clip: usize) -> String {
    format!("s{subject:02}_c{clip:02}")
}

/// In-memory corpus: entries (unassigned) and their normalized clips.
pub fn synth_clips(
    seed: u64,
    n_subjects: usize,
    clips_per_subject: usize,
    sample_rate: u32,
    duration_s: f64,
) -> Result<(Manifest, Vec<audio::AudioClip>), DatasetError> {
    let len = check_synth_counts(n_subjects, clips_per_subject, sample_rate, duration_s)?;
    let work: Vec<(usize, usize)> =
        (0..n_subjects).flat_map(|s| (0..clips_per_subject).map(move |c| (s, c))).collect();
    let voices: Vec<SynthVoice> = (0..n_subjects).map(|i| synth_voice(seed, i)).collect();
    let clips = exec::map_slice(&work, |&(s, c)| {
        let v = &voices[s];
        let samples = synth_samples(seed, v, c, sample_rate, len);
        audio::normalize_clip(&samples, sample_rate, &v.subject_id, v.label, &synth_clip_id(s, c))
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()?;
    let entries = clips.iter().map(|c| ManifestEntry::new(&c.clip_id, &c.subject_id, c.label)).collect();
    Ok((Manifest::new(entries), clips))
}

/// Write the corpus as 32-bit float WAVs under `out_dir/audio/` and return
/// the unassigned manifest (paths relative to `out_dir`).
pub fn synth_corpus(
    seed: u64,
    n_subjects: usize,
    clips_per_subject: usize,
    sample_rate: u32,
    duration_s: f64,
    out_dir: &Path,
) -> Result<Manifest, DatasetError> {
    let (mut manifest, clips) = synth_clips(seed, n_subjects, clips_per_subject, sample_rate, duration_s)?;
    fs::create_dir_all(out_dir.join("audio"))?;
    for (e, c) in manifest.entries.iter_mut().zip(&clips) {
        let rel = format!("audio/{}.wav", c.clip_id);
        audio::write_wav(&out_dir.join(&rel), &c.samples, sample_rate)?;
        e.audio_path = Some(rel);
    }
    manifest.base_dir = out_dir.to_path_buf();
    Ok(manifest)
}

/// Load one entry's spectrogram tensor as `[1 × n_mels × n_frames]` data.
pub fn load_spectrogram(manifest: &Manifest, entry: &ManifestEntry) -> Result<(Vec<usize>, Vec<f32>), DatasetError> {
    let missing = || DatasetError::MissingSpectrogram(entry.clip_id.clone());
    let rel = entry.spectrogram_path.as_deref().ok_or_else(missing)?;
    let path = manifest.resolve(rel);
    if !path.is_file() {
        return Err(missing());
    }
    let (dims, data) = persist::read_tensor(&path)?;
    let shape = match dims.as_slice() {
        [h, w] => vec![1, *h, *w],
        [1, h, w] => vec![1, *h, *w],
        _ => return Err(DatasetError::InvalidParam(format!("clip '{}' has tensor dims {dims:?}", entry.clip_id))),
    };
    Ok((shape, data))
}

/// Seeded mini-batches over one split. Epoch `e` is a shuffle keyed on
/// `(seed, e)`; every entry appears once per epoch and the short final batch
/// is kept.
pub struct BatchStream<'a> {
    manifest: &'a Manifest,
    entries: Vec<&'a ManifestEntry>,
    batch_size: usize,
    seed: u64,
}

pub fn load_batchstream<'a>(
    manifest: &'a Manifest,
    split: Split,
    batch_size: usize,
    seed: u64,
) -> Result<BatchStream<'a>, DatasetError> {
    if batch_size == 0 {
        return Err(DatasetError::InvalidParam("batch_size must be positive".into()));
    }
    let entries: Vec<&ManifestEntry> = manifest.in_split(split).collect();
    for e in &entries {
        match &e.spectrogram_path {
            Some(p) if manifest.resolve(p).is_file() => {}
            _ => return Err(DatasetError::MissingSpectrogram(e.clip_id.clone())),
        }
    }
    Ok(BatchStream { manifest, entries, batch_size, seed })
}

pub struct Batch {
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
    pub clip_ids: Vec<String>,
}

impl<'a> BatchStream<'a> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clip_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.clip_id.clone()).collect()
    }

    /// Index batches of epoch `e` (positions into this split's entries).
    pub fn epoch_indices(&self, epoch: usize) -> Vec<Vec<usize>> {
        batches(&epoch_order(self.entries.len(), self.seed, epoch), self.batch_size, false)
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Result<Batch, DatasetError>> + '_ {
        self.epoch_indices(epoch).into_iter().map(move |idx| {
            let mut shape = None;
            let mut data = Vec::new();
            let mut labels = Vec::new();
            let mut clip_ids = Vec::new();
            for i in idx {
                let e = self.entries[i];
                let (s, d) = load_spectrogram(self.manifest, e)?;
                if shape.get_or_insert_with(|| s.clone()) != &s {
                    return Err(DatasetError::InvalidParam(format!("clip '{}' has a different shape", e.clip_id)));
                }
                data.extend(d);
                labels.push(e.label.index());
                clip_ids.push(e.clip_id.clone());
            }
            let mut full = vec![labels.len()];
            full.extend(shape.unwrap_or_default());
            let x = Tensor::from_vec(&full, data).map_err(|e| DatasetError::InvalidParam(e.to_string()))?;
            Ok(Batch { x, labels, clip_ids })
        })
    }

    /// The whole split in manifest order.
    pub fn load_all(&self) -> Result<SampleSet<f32>, DatasetError> {
        let mut set: Option<SampleSet<f32>> = None;
        for e in &self.entries {
            let (s, d) = load_spectrogram(self.manifest, e)?;
            let set = set.get_or_insert_with(|| SampleSet::new(s.clone()));
            set.push(e.clip_id.as_str(), &d, e.label.index()).map_err(|err| DatasetError::InvalidParam(err.to_string()))?;
        }
        Ok(set.unwrap_or_else(|| SampleSet::new(Vec::new())))
    }
}
