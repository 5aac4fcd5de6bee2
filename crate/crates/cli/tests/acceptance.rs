//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! `VOXMIND_ACCEPTANCE=1,2,8` runs a subset. Criteria 7 and 10 share one
//! desk-scale run (three seeds, three families) and dominate the runtime.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use voxmind::audio::{mel_spectrogram, stft_magnitude, AudioClip, Label, SpectrogramParams, Window};
use voxmind::dataset::{
    check_leakage, load_batchstream, split_by_subject, Manifest, ManifestEntry, Split, SplitSpec,
    Violation,
};
use voxmind::metrics::{auc, roc_curve};
use voxmind::nn::adam::{adam_update, AdamConfig, Moments};
use voxmind::nn::graph::{ForwardOpts, Graph, GraphSpec};
use voxmind::nn::layer::{LayerKind, LayerSpec, GRAPH_INPUT};
use voxmind::nn::loss::{one_hot, softmax_ce_grad};
use voxmind::nn::ops::{conv2d_forward, dense_forward, maxpool_forward, ConvGeom, PoolGeom};
use voxmind::nn::train::{epoch_order, Callbacks, SampleSet, StopMetric, TrainConfig};
use voxmind::nn::Tensor;
use voxmind::persist::{self, decode_checkpoint, encode_checkpoint, load_checkpoint, probe_activation, weights_hash};
use voxmind::transfer::{self, backbone_layers, TransferConfig};
use voxmind::zoo::ModelName;
use voxmind_cli::audit::{audit_data, audit_run, AuditReport};
use voxmind_cli::config::{ExperimentConfig, Phase};
use voxmind_cli::pipeline::{collect_results, Experiment, PhaseResult, Prepared, CHECKPOINT_FILE, RUN_LOG};
use voxmind_cli::report::{self, Bundle};
use voxmind_cli::CliError;
use voxmind_oracles as oracle;
use voxmind_oracles::Fixture;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

// ---------------------------------------------------------------- 1: gradients

fn l(name: &str, kind: LayerKind, inputs: &[&str]) -> LayerSpec {
    LayerSpec::new(name, kind, inputs)
}

fn small_graph(input: &[usize], layers: Vec<LayerSpec>, seed: u64) -> Graph<f64> {
    let spec = GraphSpec { family: None, input_shape: input.to_vec(), num_classes: 3, cut_point: None, layers };
    let mut g = Graph::<f64>::init(spec, seed).expect("valid graph");
    // Non-default biases and affine params so no gradient is trivially zero.
    let mut r = Fixture::new(seed ^ 0x5eed);
    for i in 0..g.layers().len() {
        for j in 0..g.layers()[i].params.len() {
            for v in g.param_mut(i, j).data_mut() {
                *v += r.uniform(-0.3, 0.3);
            }
        }
    }
    g
}

/// Worst relative error over `n` random coordinates of the parameters of `layers`.
fn grad_check(g: &Graph<f64>, batch: usize, labels: &[usize], layers: &[&str], n: usize, seed: u64) -> Result<f64, String> {
    let mut shape = vec![batch];
    shape.extend_from_slice(g.input_shape());
    let len = shape.iter().product();
    let x = Tensor::from_vec(&shape, Fixture::new(seed).vec(len, -1.0, 1.0)).unwrap();
    let opts = ForwardOpts::train(seed, 1);
    let trace = g.forward(&x, opts).map_err(|e| e.to_string())?;
    let y = one_hot::<f64>(labels, g.num_classes()).unwrap();
    let grads = g
        .backward(&trace, g.layers().len() - 2, softmax_ce_grad(trace.final_output(), &y, labels.len()))
        .map_err(|e| e.to_string())?;
    let mut coords = Vec::new();
    for (i, layer) in g.layers().iter().enumerate().filter(|(_, l)| layers.contains(&l.name())) {
        for (j, p) in layer.params.iter().enumerate() {
            coords.extend((0..p.value.len()).map(|k| (i, j, k)));
        }
    }
    let mut r = Fixture::new(seed + 1);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let c = coords[r.below(coords.len())];
        let num = oracle::finite_difference(g, &x, labels, opts, c, 1e-5);
        let err = oracle::relative_error(grads.per_layer[c.0][c.1][c.2], num);
        ensure!(err < 1e-4, "{} param {} idx {}: rel error {err:e}", g.layers()[c.0].name(), c.1, c.2);
        worst = worst.max(err);
    }
    Ok(worst)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let conv = small_graph(
        &[2, 7, 6],
        vec![
            l("c1", LayerKind::conv_same(2, 3, 3), &[GRAPH_INPUT]),
            l("c2", LayerKind::Conv2d { in_ch: 3, out_ch: 4, kernel_h: 3, kernel_w: 2, stride: 2, pad: 0 }, &["c1"]),
            l("gap", LayerKind::GlobalAvgPool, &["c2"]),
            l("fc", LayerKind::Dense { inp: 4, out: 3, l2: 0.0 }, &["gap"]),
            l("sm", LayerKind::Softmax, &["fc"]),
        ],
        1,
    );
    let dense = small_graph(
        &[2, 3, 3],
        vec![
            l("flat", LayerKind::Flatten, &[GRAPH_INPUT]),
            l("fc1", LayerKind::Dense { inp: 18, out: 7, l2: 1e-2 }, &["flat"]),
            l("relu", LayerKind::Relu, &["fc1"]),
            l("fc2", LayerKind::Dense { inp: 7, out: 3, l2: 0.0 }, &["relu"]),
            l("sm", LayerKind::Softmax, &["fc2"]),
        ],
        2,
    );
    let bn = small_graph(
        &[1, 5, 5],
        vec![
            l("c1", LayerKind::conv_same(1, 3, 3), &[GRAPH_INPUT]),
            l("bn1", LayerKind::batch_norm(3), &["c1"]),
            l("relu", LayerKind::Relu, &["bn1"]),
            l("gap", LayerKind::GlobalAvgPool, &["relu"]),
            l("bn2", LayerKind::batch_norm(3), &["gap"]),
            l("fc", LayerKind::Dense { inp: 3, out: 3, l2: 0.0 }, &["bn2"]),
            l("sm", LayerKind::Softmax, &["fc"]),
        ],
        3,
    );
    // Pooling has no parameters: its gradient is checked through the convs below it.
    let pool = small_graph(
        &[1, 8, 8],
        vec![
            l("c1", LayerKind::conv_same(1, 2, 3), &[GRAPH_INPUT]),
            l("p1", LayerKind::MaxPool2d { size: 2, stride: 2, pad: 0 }, &["c1"]),
            l("c2", LayerKind::conv_same(2, 3, 3), &["p1"]),
            l("p2", LayerKind::MaxPool2d { size: 3, stride: 1, pad: 1 }, &["c2"]),
            l("gap", LayerKind::GlobalAvgPool, &["p2"]),
            l("fc", LayerKind::Dense { inp: 3, out: 3, l2: 0.0 }, &["gap"]),
            l("sm", LayerKind::Softmax, &["fc"]),
        ],
        4,
    );
    // The only path from the bias to the loss is the softmax + CE composite.
    let softmax = small_graph(
        &[1, 2, 2],
        vec![
            l("flat", LayerKind::Flatten, &[GRAPH_INPUT]),
            l("fc", LayerKind::Dense { inp: 4, out: 3, l2: 0.0 }, &["flat"]),
            l("sm", LayerKind::Softmax, &["fc"]),
        ],
        5,
    );
    let cases: [(&str, &Graph<f64>, usize, &[usize], &[&str]); 5] = [
        ("conv", &conv, 3, &[0, 2, 1], &["c1", "c2"]),
        ("dense", &dense, 4, &[0, 1, 2, 1], &["fc1", "fc2"]),
        ("batch-norm", &bn, 4, &[2, 0, 1, 0], &["bn1", "bn2"]),
        ("pooling", &pool, 2, &[1, 2], &["c1", "c2"]),
        ("softmax+ce", &softmax, 5, &[0, 1, 2, 2, 1], &["fc"]),
    ];
    let mut parts = Vec::new();
    for (k, (name, g, batch, labels, layers)) in cases.iter().enumerate() {
        let worst = grad_check(g, *batch, labels, layers, 100, 10 + k as u64).map_err(|e| format!("{name}: {e}"))?;
        parts.push(format!("{name} {worst:.1e}"));
    }
    let secs = t.elapsed().as_secs_f64();
    ensure!(secs < 120.0, "took {secs:.1}s");
    Ok(format!("worst rel error: {} ({secs:.1}s)", parts.join(", ")))
}

// ------------------------------------------------------------------ 2: kernels

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(if a.len() == b.len() { 0.0 } else { f64::INFINITY }, f64::max)
}

fn per_sample(batch: usize, len: usize, f: impl Fn(usize, usize) -> Vec<f64>) -> Vec<f64> {
    (0..batch).flat_map(|i| f(i * len, (i + 1) * len)).collect()
}

fn reflect_pad(x: &[f64], left: usize, right: usize) -> Vec<f64> {
    let mut out: Vec<f64> = (1..=left).rev().map(|i| x[i]).collect();
    out.extend_from_slice(x);
    out.extend((1..=right).map(|i| x[x.len() - 1 - i]));
    out
}

fn criterion_2() -> Outcome {
    let mut r = Fixture::new(2);
    let (mut conv, mut pool, mut dense) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let (c, f, kh, kw) = (1 + r.below(4), 1 + r.below(5), 1 + r.below(4), 1 + r.below(4));
        let (stride, pad, batch) = (1 + r.below(2), r.below(kh.min(kw)), 1 + r.below(3));
        let (h, w) = (kh + r.below(7), kw + r.below(7));
        let g = ConvGeom::new(c, h, w, f, kh, kw, stride, pad).unwrap();
        let (x, wt, b) = (r.vec(batch * g.in_len(), -1.0, 1.0), r.vec(f * c * kh * kw, -1.0, 1.0), r.vec(f, -0.5, 0.5));
        let want = per_sample(batch, g.in_len(), |a, z| oracle::conv2d(&x[a..z], c, h, w, &wt, &b, f, kh, kw, stride, pad));
        conv = conv.max(max_abs_diff(&conv2d_forward(&x, &wt, &b, &g, batch), &want));

        let (size, stride) = (1 + r.below(3), 1 + r.below(3));
        let pad = r.below(size);
        let (c, h, w) = (1 + r.below(4), size + r.below(8), size + r.below(8));
        let g = PoolGeom::new(c, h, w, size, stride, pad).unwrap();
        let x = r.vec(batch * g.in_len(), -2.0, 2.0);
        let want = per_sample(batch, g.in_len(), |a, z| oracle::maxpool(&x[a..z], c, h, w, size, stride, pad));
        pool = pool.max(max_abs_diff(&maxpool_forward(&x, &g, batch).0, &want));

        let (inp, out) = (1 + r.below(40), 1 + r.below(20));
        let (x, w, b) = (r.vec(batch * inp, -1.0, 1.0), r.vec(inp * out, -1.0, 1.0), r.vec(out, -1.0, 1.0));
        dense = dense.max(max_abs_diff(&dense_forward(&x, &w, &b, batch, inp, out), &oracle::dense(&x, &w, &b, batch, inp, out)));
    }
    ensure!(conv < 1e-6 && pool < 1e-6 && dense < 1e-6, "max diff conv {conv:e} pool {pool:e} dense {dense:e}");

    let mut stft = 0.0f64;
    for case in 0..60 {
        let n_fft = [2, 3, 8, 15, 16, 31, 64, 100, 128, 200, 255, 256][case % 12];
        let hop = 1 + r.below(n_fft);
        let len = n_fft + hop * (1 + r.below(4)) + r.below(hop);
        let window = if case % 3 == 0 { Window::Rectangular } else { Window::Hann };
        let center = case % 2 == 0 && len > n_fft - n_fft / 2;
        let x = r.vec(len, -1.0, 1.0);
        let p = SpectrogramParams { sample_rate: 8000, n_fft, hop, n_mels: 4, f_max: 4000.0, window, center_pad: center, ..Default::default() };
        let clip = AudioClip { samples: x.clone(), sample_rate: 8000, subject_id: "s".into(), label: Label::Stable, clip_id: "c".into() };
        let got = stft_magnitude(&clip, &p).map_err(|e| e.to_string())?;
        let padded = if center { reflect_pad(&x, n_fft / 2, n_fft - n_fft / 2) } else { x };
        let win = if window == Window::Hann { oracle::hann(n_fft) } else { vec![1.0; n_fft] };
        ensure!(got.cols == 1 + (padded.len() - n_fft) / hop, "n_fft {n_fft}: {} frames", got.cols);
        for t in 0..got.cols {
            for (k, w) in oracle::dft_magnitude(&padded[t * hop..t * hop + n_fft], &win).iter().enumerate() {
                stft = stft.max(oracle::relative_error(got.at(k, t), *w));
            }
        }
    }
    ensure!(stft < 1e-6, "STFT rel error {stft:e}");
    Ok(format!("conv {conv:.1e}, pool {pool:.1e}, dense {dense:.1e} on 50 shapes; STFT rel {stft:.1e} on 60 windows <= 256"))
}

// ------------------------------------------------------------- 3: spectrogram

fn criterion_3() -> Outcome {
    let p = SpectrogramParams::default();
    let mut r = Fixture::new(3);
    let mut worst = 0.0f32;
    for case in 0..20 {
        let partials: Vec<(f64, f64)> = (0..4).map(|_| (r.uniform(80.0, 4000.0), r.uniform(0.1, 1.0))).collect();
        let x: Vec<f64> = (0..96_000)
            .map(|i| {
                let t = i as f64 / 48_000.0;
                partials.iter().map(|(f, a)| a * (std::f64::consts::TAU * f * t).sin()).sum::<f64>() + r.uniform(-0.05, 0.05)
            })
            .collect();
        let gain = r.uniform(0.01, 10.0);
        let clip = |s: Vec<f64>| AudioClip { samples: s, sample_rate: 48_000, subject_id: "s".into(), label: Label::Stable, clip_id: "c".into() };
        let a = mel_spectrogram(&clip(x.clone()), &p).map_err(|e| e.to_string())?;
        let b = mel_spectrogram(&clip(x.iter().map(|v| v * gain).collect()), &p).map_err(|e| e.to_string())?;
        ensure!(a.shape() == [128, 188], "case {case}: shape {:?}", a.shape());
        ensure!(a.data.iter().chain(&b.data).all(|v| (0.0..=1.0).contains(v)), "case {case}: value outside [0, 1]");
        let d = a.data.iter().zip(&b.data).map(|(u, v)| (u - v).abs()).fold(0.0f32, f32::max);
        ensure!(d < 1e-5, "case {case}: gain {gain:.3} moved a cell by {d:e}");
        worst = worst.max(d);
    }
    Ok(format!("128 x 188 in [0, 1]; worst gain drift {worst:.1e} over 20 clips"))
}

// -------------------------------------------------------------------- 4: Adam

fn criterion_4() -> Outcome {
    for alpha in [1e-5, 1e-4, 1e-3, 0.1] {
        let cfg = AdamConfig::with_alpha(alpha);
        let mut theta = [0.3f64];
        let mut m = Moments { m: vec![0.0], v: vec![0.0] };
        adam_update(&cfg, 1, &mut theta, &[1.0], &mut m);
        let d = (theta[0] - 0.3 + alpha / (1.0 + cfg.epsilon)).abs();
        ensure!(d < 1e-9, "alpha {alpha}: first step off by {d:e}");
    }
    let cfg = AdamConfig { alpha: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-7 };
    let mut worst = 0.0f64;
    for grads in [[0.5, -1.5, 2.0], [1.0, 1.0, 1.0], [-3.0, 0.01, 0.0], [1e-4, -2e-4, 3e-4]] {
        let want = oracle::adam_scalar_trace(1.25, &grads, cfg.alpha, cfg.beta1, cfg.beta2, cfg.epsilon);
        let mut theta = [1.25f64];
        let mut m = Moments { m: vec![0.0], v: vec![0.0] };
        for (t, g) in grads.iter().enumerate() {
            adam_update(&cfg, t as u64 + 1, &mut theta, &[*g], &mut m);
            worst = worst.max((theta[0] - want[t]).abs());
        }
    }
    ensure!(worst < 1e-12, "three-step trace off by {worst:e}");
    Ok(format!("first step exact to 1e-9; trace diff {worst:.1e}"))
}

// --------------------------------------------------------------------- 5: AUC

fn as_labels(pos: &[bool]) -> Vec<Label> {
    pos.iter().map(|&p| if p { Label::Unstable } else { Label::Stable }).collect()
}

fn criterion_5() -> Outcome {
    let mut r = Fixture::new(5);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let n = 2 + r.below(999);
        let mut pos: Vec<bool> = (0..n).map(|_| r.below(2) == 1).collect();
        (pos[0], pos[1]) = (true, false);
        let levels = [0, 3, 20][case % 3];
        let scores: Vec<f64> = (0..n)
            .map(|_| if levels == 0 { r.uniform(0.0, 1.0) } else { r.below(levels + 1) as f64 / levels as f64 })
            .collect();
        let a = auc(&roc_curve(&as_labels(&pos), &scores).map_err(|e| e.to_string())?);
        worst = worst.max((a - oracle::pair_count_auc(&pos, &scores)).abs());
    }
    ensure!(worst < 1e-12, "trapezoid vs pair counting {worst:e}");
    let pos = as_labels(&[true, true, false, true, false, false]);
    let perfect = auc(&roc_curve(&pos, &[0.9, 0.8, 0.1, 0.7, 0.2, 0.0]).unwrap());
    let uniform = auc(&roc_curve(&pos, &[0.5; 6]).unwrap());
    ensure!(perfect == 1.0 && uniform == 0.5, "perfect {perfect}, uniform {uniform}");
    Ok(format!("max diff {worst:.1e} over 200 instances; perfect 1.0, uniform 0.5"))
}

// ----------------------------------------------------------------- 6: leakage

fn toy_corpus(clips: &[usize], labels: &[Label]) -> Manifest {
    let mut entries = Vec::new();
    for (s, (&n, &l)) in clips.iter().zip(labels).enumerate() {
        entries.extend((0..n).map(|c| ManifestEntry::new(&format!("s{s}_c{c}"), &format!("s{s}"), l)));
    }
    Manifest::new(entries)
}

fn with_copies(m: &Manifest, copies: usize) -> Manifest {
    let mut out = m.clone();
    for e in m.in_split(Split::Train) {
        for c in 0..copies {
            let mut a = e.clone();
            a.clip_id = voxmind::dataset::augmented_clip_id(&e.clip_id, c);
            a.augmented = true;
            a.source_clip_id = Some(e.clip_id.clone());
            out.entries.push(a);
        }
    }
    out
}

fn reduced_config(out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.manifest = out.join("corpus").join("manifest.jsonl");
    cfg.output_dir = out.join("out");
    cfg.seeds = vec![1];
    cfg.corpus.n_subjects = 6;
    cfg.corpus.clips_per_subject = 4;
    cfg.corpus.sample_rate = 16_000;
    cfg.corpus.duration_s = 1.0;
    cfg.spectrogram = SpectrogramParams { sample_rate: 16_000, n_fft: 512, hop: 256, n_mels: 32, ..Default::default() };
    cfg.augment.copies_per_sample = 2;
    for t in [&mut cfg.phase1, &mut cfg.phase2, &mut cfg.phase3.train] {
        t.max_epochs = 3;
        t.batch_size = 8;
    }
    cfg
}

fn criterion_6() -> Outcome {
    let mut r = Fixture::new(6);
    let mut clean = 0;
    while clean < 500 {
        let n = 3 + r.below(28);
        let clips: Vec<usize> = (0..n).map(|_| 1 + r.below(15)).collect();
        let labels: Vec<Label> = (0..n).map(|_| if r.below(2) == 0 { Label::Stable } else { Label::Unstable }).collect();
        let spec = SplitSpec { seed: r.next_u64(), stratify_by_label: r.below(3) > 0, ..Default::default() };
        match split_by_subject(&toy_corpus(&clips, &labels), &spec) {
            Ok(m) => {
                ensure!(check_leakage(&m).ok && check_leakage(&with_copies(&m, 2)).ok, "corpus {clean} leaks");
                clean += 1;
            }
            // A subject holding over 70% of the clips cannot be placed; that is an input error.
            Err(voxmind::dataset::DatasetError::UnsatisfiableSplit { .. }) => {}
            Err(e) => return Err(e.to_string()),
        }
    }

    let labels: Vec<Label> = (0..8).map(|i| if i % 2 == 0 { Label::Stable } else { Label::Unstable }).collect();
    let base = with_copies(&split_by_subject(&toy_corpus(&[6; 8], &labels), &SplitSpec::default()).unwrap(), 2);
    let mut overlap = base.clone();
    let i = overlap.entries.iter().position(|e| e.split == Split::Train && !e.augmented).unwrap();
    overlap.entries[i].split = Split::Val;
    let mut in_test = base.clone();
    let i = in_test.entries.iter().position(|e| e.augmented).unwrap();
    in_test.entries[i].split = Split::Test;
    let mut source = base.clone();
    let val_id = source.in_split(Split::Val).next().unwrap().clip_id.clone();
    let i = source.entries.iter().position(|e| e.augmented).unwrap();
    source.entries[i].source_clip_id = Some(val_id);
    let found = |m: &Manifest, f: fn(&Violation) -> bool| check_leakage(m).violations.iter().any(f);
    ensure!(found(&overlap, |v| matches!(v, Violation::SubjectOverlap { .. })), "subject overlap missed");
    ensure!(found(&in_test, |v| matches!(v, Violation::AugmentedOutsideTrain { .. })), "augmented-in-test missed");
    ensure!(found(&source, |v| matches!(v, Violation::AugmentedSourceNotTrain { .. })), "augmented source outside train missed");

    let dirty = check_leakage(&overlap);
    let source_g: Graph<f32> = ModelName::MiniVgg.build(&[1, 32, 33], 2, 1).unwrap();
    let frag = transfer::freeze_backbone(&source_g, source_g.cut_point().unwrap()).map_err(|e| e.to_string())?;
    let head = transfer::attach_head(&frag, &TransferConfig::default(), 2, 2).map_err(|e| e.to_string())?;
    let empty = SampleSet::new(vec![1, 32, 33]);
    ensure!(
        matches!(transfer::fine_tune(&head, &empty, &empty, &dirty, &TransferConfig::default()), Err(transfer::TransferError::LeakageRefusal(_))),
        "fine_tune accepted a dirty manifest"
    );

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = reduced_config(dir.path());
    std::fs::create_dir_all(cfg.manifest.parent().unwrap()).unwrap();
    let mut bad_input = overlap.raw();
    bad_input.base_dir = cfg.manifest.parent().unwrap().to_path_buf();
    bad_input.write(&cfg.manifest).map_err(|e| e.to_string())?;
    let mut exp = Experiment::new(cfg).map_err(|e| e.to_string())?;
    ensure!(matches!(exp.prepare(), Err(CliError::LeakageRefusal(_))), "prepare accepted a dirty manifest");
    let prep = Prepared { split: overlap.raw(), augmented: overlap.clone(), leakage: dirty, sample_shape: vec![1, 32, 63] };
    for phase in [Phase::P1, Phase::P2, Phase::P3] {
        ensure!(
            matches!(exp.run_phase(&prep, phase, ModelName::MiniVgg, 1), Err(CliError::LeakageRefusal(_))),
            "{phase:?} runner accepted a dirty manifest"
        );
    }
    Ok("500 random corpora clean; 3 planted faults detected; fine_tune, prepare and P1/P2/P3 refuse".into())
}

// ------------------------------------------------------- shared full-run helpers

struct Run {
    exp: Experiment,
    prep: Prepared,
    results: Vec<PhaseResult>,
    audit: AuditReport,
    bundle: Bundle,
    elapsed: Duration,
}

fn full_run(cfg: ExperimentConfig) -> Result<Run, String> {
    let t = Instant::now();
    let mut exp = Experiment::new(cfg).map_err(|e| e.to_string())?;
    let (prep, results) = exp.run_all(Phase::All).map_err(|e| e.to_string())?;
    let mut audit = AuditReport::default();
    audit_data(&prep, exp.cfg.augment.copies_per_sample, &mut audit);
    audit_run(&exp.out.join(RUN_LOG), &results, &mut audit).map_err(|e| e.to_string())?;
    let bundle = report::summarize(&collect_results(&exp.out).map_err(|e| e.to_string())?);
    report::write_bundle(&exp.out.join("report"), &bundle).map_err(|e| e.to_string())?;
    Ok(Run { exp, prep, results, audit, bundle, elapsed: t.elapsed() })
}

fn desk_config(out: &Path) -> Result<ExperimentConfig, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let mut cfg = ExperimentConfig::load(&path).map_err(|e| e.to_string())?;
    cfg.manifest = out.join("corpus").join("manifest.jsonl");
    cfg.output_dir = out.join("out");
    Ok(cfg)
}

/// The desk run shared by criteria 7 and 10; kept alive with its tempdir.
struct Desk {
    _dir: tempfile::TempDir,
    run: Result<Run, String>,
}

fn desk(cache: &mut Option<Desk>) -> &Result<Run, String> {
    &cache
        .get_or_insert_with(|| {
            let dir = tempfile::tempdir().expect("tempdir");
            let run = desk_config(dir.path()).and_then(full_run);
            Desk { _dir: dir, run }
        })
        .run
}

// ---------------------------------------------------------------- 7: freezing

fn criterion_7(run: &Result<Run, String>) -> Outcome {
    let run = run.as_ref().map_err(|e| format!("desk run failed: {e}"))?;
    let mut checked = 0;
    for r in run.results.iter().filter(|r| r.phase == 3) {
        ensure!(
            r.backbone_sha256_before.is_some() && r.backbone_sha256_before == r.backbone_sha256_after,
            "{} seed {}: backbone hash changed during fine-tuning",
            r.model,
            r.seed
        );
        // Independently: the saved phase-3 backbone equals the phase-2 checkpoint it came from.
        let p3 = load_checkpoint(&run.exp.out.join(r.checkpoint.as_ref().unwrap())).map_err(|e| e.to_string())?;
        let p2 = load_checkpoint(&run.exp.run_dir(r.model, r.seed, 2).join(CHECKPOINT_FILE)).map_err(|e| e.to_string())?;
        let names = backbone_layers(&p3.graph);
        ensure!(names.len() == voxmind::zoo::CUT_LAYER_POSITION, "{}: backbone has {} layers", r.model, names.len());
        ensure!(
            weights_hash(&p3.graph, Some(&names)) == weights_hash(&p2.graph, Some(&names)),
            "{} seed {}: phase-3 backbone differs from its phase-2 source",
            r.model,
            r.seed
        );
        checked += 1;
    }
    let families: std::collections::BTreeSet<_> = run.results.iter().filter(|r| r.phase == 3).map(|r| r.model).collect();
    ensure!(families.len() == 3, "phase 3 ran for {} families", families.len());
    Ok(format!("backbone hashes unchanged in {checked} phase-3 runs across 3 families"))
}

// ------------------------------------------------------------- 8: determinism

fn file_hashes(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, persist::sha256_hex(&std::fs::read(&p).unwrap_or_default()));
            }
        }
    }
    out
}

/// Clip ids of every training batch of every epoch that ran, per (model, phase, seed).
fn batch_orders(run: &Run) -> Result<Vec<Vec<String>>, String> {
    let mut out = Vec::new();
    for r in &run.results {
        let (manifest, bs) = match r.phase {
            1 => (&run.prep.split, run.exp.cfg.phase1.batch_size),
            2 => (&run.prep.augmented, run.exp.cfg.phase2.batch_size),
            _ => (&run.prep.split, run.exp.cfg.phase3.train.batch_size),
        };
        let set = load_batchstream(manifest, Split::Train, bs, r.seed).and_then(|s| s.load_all()).map_err(|e| e.to_string())?;
        for epoch in 1..=r.history.epochs.len() {
            out.push(epoch_order(set.len(), r.seed, epoch).into_iter().map(|i| set.ids[i].clone()).collect());
        }
    }
    Ok(out)
}

fn checkpoint_hashes(run: &Run) -> Result<Vec<String>, String> {
    run.results
        .iter()
        .map(|r| {
            let c = load_checkpoint(&run.exp.out.join(r.checkpoint.as_ref().unwrap())).map_err(|e| e.to_string())?;
            Ok(weights_hash(&c.graph, None))
        })
        .collect()
}

fn criterion_8() -> Outcome {
    let (a_dir, b_dir) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = full_run(reduced_config(a_dir.path()))?;
    // The second run takes the sequential path, so parallel and sequential must agree too.
    voxmind::exec::set_sequential(true);
    let b = full_run(reduced_config(b_dir.path()));
    voxmind::exec::set_sequential(false);
    let b = b?;

    let specs = |r: &Run| file_hashes(&r.exp.data_dir().join("spectrograms"));
    let (sa, sb) = (specs(&a), specs(&b));
    let n_aug = sa.keys().filter(|k| k.starts_with("aug")).count();
    ensure!(n_aug > 0, "no augmented spectrograms written");
    ensure!(sa == sb, "spectrogram files differ");
    ensure!(a.prep.augmented.entries == b.prep.augmented.entries, "augmented manifests differ");
    ensure!(batch_orders(&a)? == batch_orders(&b)?, "batch orders differ");
    let hist = |r: &Run| serde_json::to_string(&r.results.iter().map(|x| &x.history).collect::<Vec<_>>()).unwrap();
    ensure!(hist(&a) == hist(&b), "training histories differ");
    ensure!(checkpoint_hashes(&a)? == checkpoint_hashes(&b)?, "trained weights differ");
    let bundle = |r: &Run| file_hashes(&r.exp.out.join("report"));
    ensure!(bundle(&a) == bundle(&b) && a.bundle == b.bundle, "report bundles differ");
    Ok(format!(
        "{} spectrograms ({n_aug} augmented), {} phase runs, {} report files identical; parallel vs sequential",
        sa.len(),
        a.results.len(),
        bundle(&a).len()
    ))
}

// ------------------------------------------------------------- 9: persistence

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let meta = persist::CheckpointMeta {
        phase: 2,
        seed: 9,
        created_at: "2026-01-01T00:00:00Z".into(),
        source_manifest_hash: "00".repeat(32),
        model: None,
    };
    let mut r = Fixture::new(9);
    let x = Tensor::from_vec(&[4, 1, 32, 40], (0..4 * 32 * 40).map(|_| r.uniform(0.0, 1.0) as f32).collect()).unwrap();
    let bits = |v: Vec<f32>| v.into_iter().map(f32::to_bits).collect::<Vec<_>>();
    let mut rejected = 0;
    for model in ModelName::ALL {
        let g: Graph<f32> = model.build(&[1, 32, 40], 2, 90).unwrap();
        let path = dir.path().join(format!("{model}.vsmc"));
        let probe = persist::save_checkpoint(&g, &path, &meta).map_err(|e| e.to_string())?;
        let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
        ensure!(bits(back.graph.predict(&x, 2).unwrap()) == bits(g.predict(&x, 2).unwrap()), "{model}: predictions differ");
        let act = probe_activation(&back.graph, &probe.layer).map_err(|e| e.to_string())?;
        ensure!(bits(act.clone()) == bits(probe_activation(&g, &probe.layer).unwrap()), "{model}: probe differs");
        ensure!(persist::hash_f32(&act) == probe.activation_sha256, "{model}: probe hash differs");

        let bytes = encode_checkpoint(&g, &meta).map_err(|e| e.to_string())?;
        for _ in 0..50 {
            let mut bad = bytes.clone();
            let at = r.below(bad.len());
            bad[at] ^= 1 << r.below(8);
            ensure!(decode_checkpoint(&bad).is_err(), "{model}: corrupted byte {at} accepted");
            rejected += 1;
        }
        let mut on_disk = std::fs::read(&path).unwrap();
        let mid = on_disk.len() / 2;
        on_disk[mid] ^= 0xff;
        std::fs::write(&path, on_disk).unwrap();
        ensure!(load_checkpoint(&path).is_err(), "{model}: corrupted file loaded");
    }
    Ok(format!("bit-identical predictions and probes for 3 families; {rejected} corruptions rejected"))
}

// --------------------------------------------------------- 10: end to end

fn criterion_10(run: &Result<Run, String>) -> Outcome {
    let run = run.as_ref().map_err(|e| format!("desk run failed: {e}"))?;
    let failed: Vec<&str> = run.audit.checks.iter().filter(|c| !c.ok).map(|c| c.name.as_str()).collect();
    ensure!(failed.is_empty(), "audit failed: {failed:?}");
    let c = &run.exp.cfg.corpus;
    ensure!((c.n_subjects, c.clips_per_subject, run.exp.cfg.seeds.len()) == (12, 10, 3), "not the 12 x 10, 3-seed protocol");
    let median = |m: ModelName, p: u8| {
        run.bundle.summaries.iter().find(|s| s.model == m && s.phase == p).and_then(|s| s.median)
    };
    let mut lines = Vec::new();
    let mut bad = Vec::new();
    for m in ModelName::ALL {
        let (Some(p1), Some(p2), Some(p3)) = (median(m, 1), median(m, 2), median(m, 3)) else {
            return Err(format!("{m}: missing medians"));
        };
        let p3_auc = p3.auc.unwrap_or(f64::NAN);
        lines.push(format!("{m} acc P1 {:.3} P2 {:.3} P3 {:.3} auc P3 {p3_auc:.3}", p1.accuracy, p2.accuracy, p3.accuracy));
        if p3.accuracy < p1.accuracy {
            bad.push(format!("{m}: P3 accuracy below P1"));
        }
        if p3.accuracy < 0.90 {
            bad.push(format!("{m}: P3 accuracy {:.3} < 0.90", p3.accuracy));
        }
        if !(p3_auc >= 0.95) {
            bad.push(format!("{m}: P3 AUC {p3_auc:.3} < 0.95"));
        }
    }
    let mins = run.elapsed.as_secs_f64() / 60.0;
    if mins > 45.0 {
        bad.push(format!("runtime {mins:.1} min > 45"));
    }
    let detail = format!("{}; {mins:.1} min", lines.join("; "));
    if bad.is_empty() { Ok(detail) } else { Err(format!("{}; {detail}", bad.join("; "))) }
}

// ------------------------------------------------------------ 11: callbacks

fn replay(cfg: &TrainConfig, schedule: &[(f64, f64)]) -> (Option<usize>, Vec<usize>) {
    let mut cb = Callbacks::new(cfg);
    let mut reduced = Vec::new();
    for (i, &(loss, acc)) in schedule.iter().enumerate() {
        let d = cb.observe(loss, acc);
        if d.new_alpha.is_some() {
            reduced.push(i + 1);
        }
        if d.stop {
            return (Some(i + 1), reduced);
        }
    }
    (None, reduced)
}

fn criterion_11() -> Outcome {
    let cfg = |m| TrainConfig { early_stop_metric: m, alpha: 1e-4, ..TrainConfig::default() };
    ensure!(TrainConfig::default().early_stop_patience == 10, "default patience is not 10");

    // Loss plateaus after epoch 3: plateau drops at 8 and 13, stop at 13.
    let mut s = vec![(1.0, 0.5), (0.9, 0.6), (0.8, 0.7)];
    s.extend(std::iter::repeat_n((0.8, 0.7), 20));
    let got = replay(&cfg(StopMetric::ValLoss), &s);
    ensure!(got == (Some(13), vec![8, 13]), "loss plateau: {got:?}");

    // Accuracy peaks at epoch 3 while loss keeps falling: stop at 13, no drops.
    let s: Vec<(f64, f64)> = (0..30).map(|i| (1.0 - 0.01 * i as f64, if i < 3 { 0.5 + 0.1 * i as f64 } else { 0.7 })).collect();
    let got = replay(&cfg(StopMetric::ValAccuracy), &s);
    ensure!(got == (Some(13), vec![]), "accuracy stall: {got:?}");

    // Improvement at epoch 9 resets both counters: drops at 7, 14, 19; stop at 19.
    let mut s = vec![(1.0, 0.0)];
    s.extend(std::iter::repeat_n((0.9, 0.0), 7));
    s.extend(std::iter::repeat_n((0.5, 0.0), 21));
    let got = replay(&cfg(StopMetric::ValLoss), &s);
    ensure!(got == (Some(19), vec![7, 14, 19]), "reset: {got:?}");

    // Never improving after epoch 1 under val accuracy: stop at 11.
    let got = replay(&cfg(StopMetric::ValAccuracy), &[(1.0, 0.5); 15]);
    ensure!(got == (Some(11), vec![6, 11]), "flat: {got:?}");
    Ok("4 scripted schedules match; patience 10".into())
}

// -------------------------------------------------------------------- driver

fn main() {
    let wanted: Option<Vec<u32>> = std::env::var("VOXMIND_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let on = |n: u32| wanted.as_ref().is_none_or(|w| w.contains(&n));
    let mut desk_run: Option<Desk> = None;
    let names = [
        "gradient oracle",
        "kernel oracles",
        "spectrogram contract",
        "Adam first step and trace",
        "AUC equivalence",
        "leakage suite",
        "backbone freezing",
        "determinism",
        "persistence",
        "end-to-end directional check",
        "callback schedules",
    ];
    let mut failures = 0;
    for (i, name) in names.iter().enumerate() {
        let n = i as u32 + 1;
        if !on(n) {
            println!("SKIP {n:>2} {name}");
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| match n {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(desk(&mut desk_run)),
            8 => criterion_8(),
            9 => criterion_9(),
            10 => criterion_10(desk(&mut desk_run)),
            _ => criterion_11(),
        }))
        .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>().map(String::as_str).or(p.downcast_ref::<&str>().copied()))));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {n:>2} {name}: {d} [{secs:.1}s]"),
            Err(e) => {
                failures += 1;
                println!("FAIL {n:>2} {name}: {e} [{secs:.1}s]");
            }
        }
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
