use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use voxmind::audio::{self, SpectrogramParams};
use voxmind::dataset::{self, check_leakage, split_by_subject, Manifest, Split};
use voxmind::metrics::evaluate_probs;
use voxmind::persist;
use voxmind::transfer;
use voxmind_cli::audit::{audit_data, audit_run, AuditReport};
use voxmind_cli::config::{ExperimentConfig, Phase};
use voxmind_cli::pipeline::{collect_results, Experiment, PhaseResult, RUN_LOG};
use voxmind_cli::report;

#[derive(Parser)]
#[command(name = "voxmind", version, about = "Voice-spectrogram classification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-class corpus (WAV files + manifest.jsonl).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 12)]
        subjects: usize,
        #[arg(long, default_value_t = 10)]
        clips: usize,
        #[arg(long, default_value_t = 48_000)]
        sample_rate: u32,
        #[arg(long, default_value_t = 2.0)]
        duration: f64,
    },
    /// Compute mel spectrograms for every clip with audio and write a new manifest.
    Spectrogram {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write 8-bit PNG previews.
        #[arg(long)]
        png: bool,
    },
    /// Assign subjects to train/val/test.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Split, compute spectrograms and augment the training split.
    Augment(Common),
    /// Train from scratch (phase 1 or 2).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "p1")]
        phase: Phase,
    },
    /// Fine-tune a head on a frozen phase-2 backbone (phase 3).
    Transfer {
        #[command(flatten)]
        common: Common,
        /// Phase-2 checkpoint; defaults to the one under the output directory.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of a manifest with spectrograms.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Rebuild the report bundle from results under the output directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit a manifest for leakage; exit code 1 on any violation.
    VerifyManifest {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Run the configured phases end to end and write the report.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        phase: Option<Phase>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn spectrogram_params(config: &Option<PathBuf>) -> Result<SpectrogramParams> {
    Ok(match config {
        Some(p) => ExperimentConfig::load(p)?.spectrogram,
        None => SpectrogramParams::default(),
    })
}

fn finish(exp: &Experiment, prep: &voxmind_cli::pipeline::Prepared, results: &[PhaseResult]) -> Result<bool> {
    let mut audit = AuditReport::default();
    audit_data(prep, exp.cfg.augment.copies_per_sample, &mut audit);
    audit_run(&exp.out.join(RUN_LOG), results, &mut audit)?;
    let all = collect_results(&exp.out)?;
    report::write_bundle(&exp.out.join("report"), &report::summarize(&all))?;
    std::fs::write(exp.out.join("audit.json"), serde_json::to_string_pretty(&audit)? + "\n")?;
    print!("{}", audit.render());
    println!("report written to {}", exp.out.join("report").display());
    Ok(audit.ok())
}

fn run_phases(common: &Common, phase: Phase, source: Option<PathBuf>) -> Result<bool> {
    let mut cfg = load_config(common)?;
    if source.is_some() {
        cfg.phase3.source_checkpoint = source;
    }
    let mut exp = Experiment::new(cfg)?;
    let (prep, results) = exp.run_all(phase)?;
    finish(&exp, &prep, &results)
}

fn write_spectrograms(manifest: &Path, out: &Path, params: &SpectrogramParams, png: bool) -> Result<()> {
    let mut m = Manifest::read(manifest)?;
    let dir = out.join("spectrograms");
    std::fs::create_dir_all(&dir)?;
    let fb = audio::mel_filterbank(params)?;
    let len = (2.0 * params.sample_rate as f64) as usize;
    for e in m.entries.iter_mut() {
        let Some(a) = &e.audio_path else { continue };
        let clip = audio::load_clip(&m.base_dir.join(a), len, &e.subject_id, e.label, &e.clip_id)?;
        let mel = audio::mel_spectrogram_with(&clip, params, &fb)?;
        persist::write_tensor(&dir.join(format!("{}.vstn", e.clip_id)), &[mel.n_mels, mel.n_frames], &mel.data)?;
        if png {
            audio::write_png(&dir.join(format!("{}.png", e.clip_id)), &mel)?;
        }
        e.spectrogram_path = Some(format!("spectrograms/{}.vstn", e.clip_id));
        e.audio_path = Some(std::fs::canonicalize(m.base_dir.join(a))?.to_string_lossy().into_owned());
    }
    m.base_dir = out.to_path_buf();
    m.write(&out.join("manifest.jsonl"))?;
    println!("{} spectrograms written to {}", m.entries.len(), dir.display());
    Ok(())
}

fn evaluate(checkpoint: &Path, manifest: &Path, split: &str) -> Result<()> {
    let split = match split.to_ascii_lowercase().as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => bail!("unknown split '{other}'"),
    };
    let m = Manifest::read(manifest)?;
    let set = dataset::load_batchstream(&m, split, 16, 0)?.load_all()?;
    let ckpt = persist::load_checkpoint(checkpoint)?;
    let probs = transfer::predict_set(&ckpt.graph, &set, 16)?;
    let labels: Vec<_> = set.labels.iter().map(|&i| voxmind::audio::Label::from_index(i).unwrap()).collect();
    println!("{}", serde_json::to_string_pretty(&evaluate_probs(&labels, &probs)?)?);
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { out, seed, subjects, clips, sample_rate, duration } => {
            let m = dataset::synth_corpus(seed, subjects, clips, sample_rate, duration, &out)?;
            m.write(&out.join("manifest.jsonl"))?;
            println!("{} clips written to {}", m.entries.len(), out.display());
            Ok(true)
        }
        Command::Spectrogram { manifest, out, config, png } => {
            write_spectrograms(&manifest, &out, &spectrogram_params(&config)?, png)?;
            Ok(true)
        }
        Command::Split { manifest, out, config, seed } => {
            let mut spec = match &config {
                Some(p) => ExperimentConfig::load(p)?.split,
                None => Default::default(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let m = split_by_subject(&Manifest::read(&manifest)?, &spec)?;
            m.write(&out)?;
            for s in Split::ASSIGNED {
                println!("{s}: {} clips", m.in_split(s).count());
            }
            Ok(check_leakage(&m).ok)
        }
        Command::Augment(common) => {
            let mut exp = Experiment::new(load_config(&common)?)?;
            let prep = exp.prepare()?;
            let mut audit = AuditReport::default();
            audit_data(&prep, exp.cfg.augment.copies_per_sample, &mut audit);
            print!("{}", audit.render());
            Ok(audit.ok())
        }
        Command::Train { common, phase } => {
            if !matches!(phase, Phase::P1 | Phase::P2) {
                bail!("train runs phase p1 or p2; use `transfer` for phase 3");
            }
            run_phases(&common, phase, None)
        }
        Command::Transfer { common, source } => run_phases(&common, Phase::P3, source),
        Command::Evaluate { checkpoint, manifest, split } => {
            evaluate(&checkpoint, &manifest, &split)?;
            Ok(true)
        }
        Command::Report { out } => {
            let results = collect_results(&out)?;
            if results.is_empty() {
                bail!("no results under {}", out.display());
            }
            report::write_bundle(&out.join("report"), &report::summarize(&results))?;
            print!("{}", report::render_markdown(&report::read_bundle(&out.join("report"))?));
            Ok(true)
        }
        Command::VerifyManifest { manifest } => {
            let m = Manifest::read(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
            let r = check_leakage(&m);
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(r.ok)
        }
        Command::Run { common, phase } => {
            let cfg = load_config(&common)?;
            let phase = phase.unwrap_or(cfg.phase);
            run_phases(&common, phase, None)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
