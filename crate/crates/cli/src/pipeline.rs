//! Data preparation and the three phase runners.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use voxmind::audio::{self, MelSpectrogram};
use voxmind::dataset::{
    self, augment_train, check_leakage, load_batchstream, split_by_subject, LeakageReport, Manifest, ManifestEntry,
    Split,
};
use voxmind::metrics::{evaluate_probs, EvalReport};
use voxmind::nn::train::{train_loop, History, SampleSet, TrainConfig};
use voxmind::persist::{self, CheckpointMeta};
use voxmind::transfer::{self, FineTuneOutcome};
use voxmind::zoo::ModelName;

use crate::config::{ExperimentConfig, Phase};
use crate::runlog::{kind, RunLog, Tag};
use crate::CliError;

pub const DATA_DIR: &str = "data";
pub const SPLIT_MANIFEST: &str = "manifest.split.jsonl";
pub const AUGMENTED_MANIFEST: &str = "manifest.augmented.jsonl";
pub const RUNS_DIR: &str = "runs";
pub const RUN_LOG: &str = "run_log.jsonl";
pub const CHECKPOINT_FILE: &str = "model.vsmc";

/// Split manifest (raw entries only) and the training-augmented manifest.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: Manifest,
    pub augmented: Manifest,
    pub leakage: LeakageReport,
    pub sample_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub model: ModelName,
    pub phase: u8,
    pub seed: u64,
    pub report: EvalReport,
    pub history: History,
    /// Relative to the output directory.
    pub checkpoint: Option<String>,
    pub train_size: usize,
    /// SHA-256 of the sorted, newline-joined test clip ids.
    pub test_clips_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_sha256_before: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backbone_sha256_after: Option<String>,
}

pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub log: RunLog,
}

fn rel(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value).expect("json") + "\n")?;
    Ok(())
}

pub fn clip_set_hash<'a>(ids: impl IntoIterator<Item = &'a String>) -> String {
    let mut v: Vec<&String> = ids.into_iter().collect();
    v.sort();
    let joined = v.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("\n");
    persist::sha256_hex(joined.as_bytes())
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, CliError> {
        cfg.validate()?;
        let out = cfg.output_dir.clone();
        fs::create_dir_all(&out)?;
        let log = RunLog::open(&out.join(RUN_LOG))?;
        Ok(Experiment { cfg, out, log })
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out.join(DATA_DIR)
    }

    pub fn run_dir(&self, model: ModelName, seed: u64, phase: u8) -> PathBuf {
        self.out.join(RUNS_DIR).join(model.as_str()).join(format!("seed{seed}")).join(format!("p{phase}"))
    }

    fn tag(model: ModelName, phase: u8, seed: u64) -> Tag {
        Tag { model: Some(model.as_str().into()), phase: Some(phase), seed: Some(seed) }
    }

    /// Synthesize the corpus at the configured manifest path if it does not exist.
    pub fn ensure_corpus(&mut self) -> Result<(), CliError> {
        if self.cfg.manifest.exists() {
            return Ok(());
        }
        let dir = self.cfg.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
        let c = &self.cfg.corpus;
        let m = dataset::synth_corpus(c.seed, c.n_subjects, c.clips_per_subject, c.sample_rate, c.duration_s, &dir)?;
        m.write(&self.cfg.manifest)?;
        self.log.append("corpus_synthesized", &Tag::default(), Some(rel(&self.cfg.manifest, &self.out)), Some(m.hash()))?;
        Ok(())
    }

    /// Split (if needed), audit, compute spectrograms and augment the training split.
    pub fn prepare(&mut self) -> Result<Prepared, CliError> {
        self.ensure_corpus()?;
        let source = Manifest::read(&self.cfg.manifest)?;
        let raw = source.raw();
        if raw.entries.len() != source.entries.len() {
            return Err(CliError::Input("the input manifest must not contain augmented entries".into()));
        }
        let unassigned = raw.entries.iter().filter(|e| e.split == Split::Unassigned).count();
        let mut split = match unassigned {
            0 => raw,
            n if n == raw.entries.len() => split_by_subject(&raw, &self.cfg.split)?,
            _ => return Err(CliError::Input("manifest mixes assigned and unassigned entries".into())),
        };
        let leak = check_leakage(&split);
        if !leak.ok {
            return Err(CliError::LeakageRefusal(leak.violations));
        }

        let data = self.data_dir();
        let spec_dir = data.join("spectrograms");
        fs::create_dir_all(spec_dir.join("aug"))?;
        let params = &self.cfg.spectrogram;
        let fb = audio::mel_filterbank(params)?;
        let clip_len = self.cfg.clip_len();
        let base = split.base_dir.clone();
        let mut shape: Option<Vec<usize>> = None;
        for e in split.entries.iter_mut() {
            let path = match (&e.spectrogram_path, &e.audio_path) {
                (Some(p), _) => fs::canonicalize(base.join(p)).map_err(|_| dataset::DatasetError::MissingSpectrogram(e.clip_id.clone()))?,
                (None, Some(a)) => {
                    let clip = audio::load_clip(&base.join(a), clip_len, &e.subject_id, e.label, &e.clip_id)?;
                    let mel = audio::mel_spectrogram_with(&clip, params, &fb)?;
                    let p = spec_dir.join(format!("{}.vstn", e.clip_id));
                    persist::write_tensor(&p, &[mel.n_mels, mel.n_frames], &mel.data)?;
                    p
                }
                (None, None) => return Err(CliError::Input(format!("clip '{}' has neither audio nor spectrogram", e.clip_id))),
            };
            let (dims, _) = persist::read_tensor(&path)?;
            let s = vec![1, dims[dims.len() - 2], dims[dims.len() - 1]];
            if shape.get_or_insert_with(|| s.clone()) != &s {
                return Err(CliError::Input(format!("clip '{}' has spectrogram shape {s:?}", e.clip_id)));
            }
            e.spectrogram_path = Some(rel(&path, &data));
        }
        split.base_dir = data.clone();
        split.write(&data.join(SPLIT_MANIFEST))?;
        let sample_shape = shape.ok_or_else(|| CliError::Input("manifest is empty".into()))?;

        let params = params.clone();
        let copies = augment_train(&split, &self.cfg.augment, |e: &ManifestEntry| {
            let (s, d) = dataset::load_spectrogram(&split, e)?;
            Ok(MelSpectrogram {
                n_mels: s[1],
                n_frames: s[2],
                data: d,
                params: params.clone(),
                source_clip_id: e.clip_id.clone(),
                subject_id: e.subject_id.clone(),
                label: e.label,
                augmented: false,
                erase_skipped: false,
            })
        })?;
        let mut augmented = split.clone();
        for (mut e, spec) in copies {
            let p = spec_dir.join("aug").join(format!("{}.vstn", e.clip_id));
            persist::write_tensor(&p, &[spec.n_mels, spec.n_frames], &spec.data)?;
            e.spectrogram_path = Some(rel(&p, &data));
            augmented.entries.push(e);
        }
        augmented.write(&data.join(AUGMENTED_MANIFEST))?;
        let leakage = check_leakage(&augmented);
        if !leakage.ok {
            return Err(CliError::LeakageRefusal(leakage.violations));
        }
        self.log.append("data_prepared", &Tag::default(), Some(format!("{DATA_DIR}/{AUGMENTED_MANIFEST}")), Some(augmented.hash()))?;
        Ok(Prepared { split, augmented, leakage, sample_shape })
    }

    fn load(&self, manifest: &Manifest, split: Split, batch: usize, seed: u64) -> Result<SampleSet<f32>, CliError> {
        Ok(load_batchstream(manifest, split, batch, seed)?.load_all()?)
    }

    /// The single read of the test split for one (model, phase, seed).
    fn read_test_once(&mut self, prep: &Prepared, tag: &Tag) -> Result<SampleSet<f32>, CliError> {
        let set = self.load(&prep.split, Split::Test, 1, 0)?;
        self.log.append(kind::TEST_READ, tag, None, Some(clip_set_hash(&set.ids)))?;
        Ok(set)
    }

    fn evaluate_test(&mut self, prep: &Prepared, graph: &voxmind::nn::Graph<f32>, tag: &Tag, batch: usize) -> Result<(EvalReport, String), CliError> {
        let test = self.read_test_once(prep, tag)?;
        let probs = transfer::predict_set(graph, &test, batch)?;
        let labels: Vec<_> = test.labels.iter().map(|&i| voxmind::audio::Label::from_index(i).expect("binary")).collect();
        Ok((evaluate_probs(&labels, &probs)?, clip_set_hash(&test.ids)))
    }

    fn meta(&self, prep: &Prepared, model: ModelName, phase: u8, seed: u64) -> CheckpointMeta {
        CheckpointMeta {
            phase,
            seed,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            source_manifest_hash: if phase == 2 { prep.augmented.hash() } else { prep.split.hash() },
            model: Some(model.as_str().into()),
        }
    }

    fn save(&mut self, graph: &voxmind::nn::Graph<f32>, dir: &Path, meta: &CheckpointMeta, tag: &Tag) -> Result<String, CliError> {
        let path = dir.join(CHECKPOINT_FILE);
        persist::save_checkpoint(graph, &path, meta)?;
        let r = rel(&path, &self.out);
        self.log.append(kind::CHECKPOINT_WRITTEN, tag, Some(r.clone()), Some(persist::sha256_hex(&fs::read(&path)?)))?;
        Ok(r)
    }

    fn finish(&self, dir: &Path, result: &PhaseResult) -> Result<(), CliError> {
        write_json(&dir.join("history.json"), &result.history)?;
        write_json(&dir.join("eval.json"), &result.report)?;
        write_json(&dir.join("result.json"), result)?;
        Ok(())
    }

    fn train_from_scratch(
        &mut self,
        prep: &Prepared,
        model: ModelName,
        seed: u64,
        phase: u8,
    ) -> Result<PhaseResult, CliError> {
        if !prep.leakage.ok {
            return Err(CliError::LeakageRefusal(prep.leakage.violations.clone()));
        }
        let (manifest, base_cfg) = match phase {
            1 => (&prep.split, &self.cfg.phase1),
            _ => (&prep.augmented, &self.cfg.phase2),
        };
        let cfg = TrainConfig { seed, ..base_cfg.clone() };
        let train = self.load(manifest, Split::Train, cfg.batch_size, seed)?;
        let val = self.load(&prep.split, Split::Val, cfg.batch_size, seed)?;
        let tag = Self::tag(model, phase, seed);
        let dir = self.run_dir(model, seed, phase);
        fs::create_dir_all(&dir)?;

        let graph = model.build::<f32>(&prep.sample_shape, 2, seed)?;
        self.log.append(kind::TRAIN_START, &tag, None, None)?;
        let out = train_loop(graph, &train, &val, &cfg)?;
        self.log.append(kind::TRAIN_END, &tag, None, None)?;
        let meta = self.meta(prep, model, phase, seed);
        let checkpoint = self.save(&out.graph, &dir, &meta, &tag)?;
        let (report, test_hash) = self.evaluate_test(prep, &out.graph, &tag, cfg.batch_size)?;
        let result = PhaseResult {
            model,
            phase,
            seed,
            report,
            history: out.history,
            checkpoint: Some(checkpoint),
            train_size: train.len(),
            test_clips_sha256: test_hash,
            backbone_sha256_before: None,
            backbone_sha256_after: None,
        };
        self.finish(&dir, &result)?;
        Ok(result)
    }

    /// Baseline: train from scratch on raw training clips.
    pub fn run_phase1(&mut self, prep: &Prepared, model: ModelName, seed: u64) -> Result<PhaseResult, CliError> {
        self.train_from_scratch(prep, model, seed, 1)
    }

    /// Train on raw plus augmented training clips; the checkpoint is written
    /// before the test split is read.
    pub fn run_phase2(&mut self, prep: &Prepared, model: ModelName, seed: u64) -> Result<PhaseResult, CliError> {
        self.train_from_scratch(prep, model, seed, 2)
    }

    /// Fine-tune a head on the frozen phase-2 backbone with raw clips.
    pub fn run_phase3(&mut self, prep: &Prepared, model: ModelName, seed: u64) -> Result<PhaseResult, CliError> {
        if !prep.leakage.ok {
            return Err(CliError::LeakageRefusal(prep.leakage.violations.clone()));
        }
        let source = match &self.cfg.phase3.source_checkpoint {
            Some(p) => p.clone(),
            None => self.run_dir(model, seed, 2).join(CHECKPOINT_FILE),
        };
        if !source.is_file() {
            return Err(CliError::MissingCheckpoint(source));
        }
        let cfg = {
            let mut c = self.cfg.phase3.clone();
            c.train.seed = seed;
            c
        };
        let train = self.load(&prep.split, Split::Train, cfg.train.batch_size, seed)?;
        let val = self.load(&prep.split, Split::Val, cfg.train.batch_size, seed)?;
        let tag = Self::tag(model, 3, seed);
        let dir = self.run_dir(model, seed, 3);
        fs::create_dir_all(&dir)?;

        let (fragment, _) = transfer::load_frozen_backbone(&source, None)?;
        let graph = transfer::attach_head(&fragment, &cfg, 2, seed)?;
        self.log.append(kind::TRAIN_START, &tag, Some(rel(&source, &self.out)), None)?;
        let FineTuneOutcome { graph, history, backbone_hash_before, backbone_hash_after } =
            transfer::fine_tune(&graph, &train, &val, &prep.leakage, &cfg)?;
        self.log.append(kind::TRAIN_END, &tag, None, None)?;
        let meta = self.meta(prep, model, 3, seed);
        let checkpoint = self.save(&graph, &dir, &meta, &tag)?;
        let (report, test_hash) = self.evaluate_test(prep, &graph, &tag, cfg.train.batch_size)?;
        let result = PhaseResult {
            model,
            phase: 3,
            seed,
            report,
            history,
            checkpoint: Some(checkpoint),
            train_size: train.len(),
            test_clips_sha256: test_hash,
            backbone_sha256_before: Some(backbone_hash_before),
            backbone_sha256_after: Some(backbone_hash_after),
        };
        self.finish(&dir, &result)?;
        Ok(result)
    }

    pub fn run_phase(&mut self, prep: &Prepared, phase: Phase, model: ModelName, seed: u64) -> Result<PhaseResult, CliError> {
        match phase {
            Phase::P1 => self.run_phase1(prep, model, seed),
            Phase::P2 => self.run_phase2(prep, model, seed),
            Phase::P3 => self.run_phase3(prep, model, seed),
            Phase::All => unreachable!("expanded by caller"),
        }
    }

    /// Every configured (phase, model, seed) in order: phases outermost per
    /// model and seed so phase 3 always follows its phase 2.
    pub fn run_all(&mut self, phase: Phase) -> Result<(Prepared, Vec<PhaseResult>), CliError> {
        self.log.append(kind::RUN_START, &Tag::default(), None, None)?;
        let prep = self.prepare()?;
        let mut results = Vec::new();
        for model in self.cfg.models.clone() {
            for &seed in &self.cfg.seeds.clone() {
                for p in phase.expand() {
                    results.push(self.run_phase(&prep, p, model, seed)?);
                }
            }
        }
        self.log.append(kind::RUN_END, &Tag::default(), None, None)?;
        Ok((prep, results))
    }
}

/// Load every `result.json` under `out/runs`, sorted by (model, phase, seed).
pub fn collect_results(out: &Path) -> Result<Vec<PhaseResult>, CliError> {
    let mut found = BTreeMap::new();
    let runs = out.join(RUNS_DIR);
    if !runs.is_dir() {
        return Ok(Vec::new());
    }
    for model in fs::read_dir(&runs)? {
        for seed in fs::read_dir(model?.path())? {
            for phase in fs::read_dir(seed?.path())? {
                let p = phase?.path().join("result.json");
                if p.is_file() {
                    let r: PhaseResult = serde_json::from_str(&fs::read_to_string(&p)?)
                        .map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?;
                    found.insert((r.model, r.phase, r.seed), r);
                }
            }
        }
    }
    Ok(found.into_values().collect())
}
