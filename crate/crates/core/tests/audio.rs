use proptest::prelude::*;
use voxmind::audio::{
    hz_to_mel, load_clip, mel_centers, mel_filterbank, mel_spectrogram, normalize_clip, read_wav, stft_magnitude,
    write_wav, AudioClip, Label, SpectrogramParams, Window,
};
use voxmind_oracles as oracle;
use voxmind_oracles::Fixture;

fn clip(samples: Vec<f64>, sample_rate: u32) -> AudioClip {
    AudioClip { samples, sample_rate, subject_id: "s1".into(), label: Label::Unstable, clip_id: "c1".into() }
}

/// Random two-second 48 kHz clip: a few partials plus noise.
fn voice(r: &mut Fixture) -> Vec<f64> {
    let partials: Vec<(f64, f64)> = (0..4).map(|_| (r.uniform(80.0, 4000.0), r.uniform(0.1, 1.0))).collect();
    (0..96_000)
        .map(|i| {
            let t = i as f64 / 48_000.0;
            partials.iter().map(|(f, a)| a * (2.0 * std::f64::consts::PI * f * t).sin()).sum::<f64>()
                + r.uniform(-0.05, 0.05)
        })
        .collect()
}

#[test]
fn two_seconds_at_defaults_is_128_by_188_in_unit_range() {
    let mut r = Fixture::new(1);
    let m = mel_spectrogram(&clip(voice(&mut r), 48_000), &SpectrogramParams::default()).unwrap();
    assert_eq!(m.shape(), [128, 188]);
    assert_eq!(m.data.len(), 128 * 188);
    assert!(m.data.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(m.data.contains(&1.0));
    assert!(!m.augmented);
    assert_eq!((m.source_clip_id.as_str(), m.subject_id.as_str(), m.label), ("c1", "s1", Label::Unstable));
}

#[test]
fn gain_invariance_on_random_clips() {
    let p = SpectrogramParams::default();
    let mut r = Fixture::new(2);
    for case in 0..20 {
        let x = voice(&mut r);
        let base = mel_spectrogram(&clip(x.clone(), 48_000), &p).unwrap();
        let c = r.uniform(0.01, 10.0);
        let scaled = mel_spectrogram(&clip(x.iter().map(|v| v * c).collect(), 48_000), &p).unwrap();
        let d = base.data.iter().zip(&scaled.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(d < 1e-5, "case {case}: gain {c} moved a cell by {d}");

        // Doubling is exact in floating point, so the output is too.
        let doubled = mel_spectrogram(&clip(x.iter().map(|v| v * 2.0).collect(), 48_000), &p).unwrap();
        assert_eq!(doubled.data, base.data, "case {case}");
    }
}

#[test]
fn peak_normalization_cancels_gain() {
    let mut r = Fixture::new(3);
    let x = r.vec(500, -0.7, 0.7);
    let a = normalize_clip(&x, 8000, "s", Label::Stable, "c").unwrap();
    let scaled: Vec<f64> = x.iter().map(|v| v * 0.1).collect();
    let b = normalize_clip(&scaled, 8000, "s", Label::Stable, "c").unwrap();
    for (u, v) in a.samples.iter().zip(&b.samples) {
        assert!((u - v).abs() < 1e-12);
    }
    assert_eq!(a.samples.iter().fold(0.0f64, |m, v| m.max(v.abs())), 1.0);
    assert_eq!(a.duration_samples(), 500);
}

#[test]
fn silence_gives_zeros_everywhere() {
    let p = SpectrogramParams::default();
    let z = clip(vec![0.0; 96_000], 48_000);
    assert!(stft_magnitude(&z, &p).unwrap().data.iter().all(|&v| v == 0.0));
    let m = mel_spectrogram(&z, &p).unwrap();
    assert_eq!(m.shape(), [128, 188]);
    assert!(m.data.iter().all(|&v| v == 0.0));
}

#[test]
fn single_band_covers_the_whole_range() {
    let p = SpectrogramParams { n_mels: 1, f_min: 300.0, f_max: 6000.0, ..Default::default() };
    let fb = mel_filterbank(&p).unwrap();
    let hz = |k: usize| k as f64 * 48_000.0 / 2048.0;
    let support: Vec<usize> = (0..fb.cols).filter(|&k| fb.at(0, k) > 0.0).collect();
    assert!(hz(support[0]) > 300.0 && hz(support[0] - 1) <= 300.0);
    let last = *support.last().unwrap();
    assert!(hz(last) < 6000.0 && hz(last + 1) >= 6000.0);
    // one contiguous triangle peaking at the mel midpoint
    assert_eq!(support.len(), last - support[0] + 1);
    let centre = mel_centers(&p)[0];
    let peak = support.iter().copied().max_by(|a, b| fb.at(0, *a).total_cmp(&fb.at(0, *b))).unwrap();
    assert!((hz(peak) - centre).abs() <= 48_000.0 / 2048.0);
}

#[test]
fn mel_formula_at_one_kilohertz() {
    assert!((hz_to_mel(1000.0) - 999.99).abs() < 0.01);
    assert_eq!(hz_to_mel(1000.0), oracle::hz_to_mel(1000.0));
}

#[test]
fn default_filterbank_rows() {
    let p = SpectrogramParams::default();
    let fb = mel_filterbank(&p).unwrap();
    assert_eq!((fb.rows, fb.cols), (128, 1025));
    let mut last_peak = 0;
    for m in 0..fb.rows {
        let row = fb.row(m);
        assert!(row.iter().all(|&w| w >= 0.0));
        assert!(row.iter().any(|&w| w > 0.0), "band {m} is empty");
        let peak = (0..row.len()).max_by(|a, b| row[*a].total_cmp(&row[*b])).unwrap();
        assert!(peak >= last_peak, "band {m} peaks below band {}", m.saturating_sub(1));
        last_peak = peak;
    }
    let centres = mel_centers(&p);
    assert!(centres.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn wav_round_trip_and_length_fixing() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = Fixture::new(4);
    let x: Vec<f64> = r.vec(1000, -0.5, 0.5);

    let f32_path = dir.path().join("f.wav");
    write_wav(&f32_path, &x, 16_000).unwrap();
    let (back, sr) = read_wav(&f32_path).unwrap();
    assert_eq!(sr, 16_000);
    assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-7));

    // 16-bit PCM stereo is downmixed by averaging.
    let pcm_path = dir.path().join("p.wav");
    let spec = hound::WavSpec { channels: 2, sample_rate: 8000, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(&pcm_path, spec).unwrap();
    for (l, rr) in [(16384i16, 0i16), (-32768, -32768), (100, 300)] {
        w.write_sample(l).unwrap();
        w.write_sample(rr).unwrap();
    }
    w.finalize().unwrap();
    let (mono, _) = read_wav(&pcm_path).unwrap();
    assert_eq!(mono, vec![0.25, -1.0, 200.0 / 32768.0]);

    let short = load_clip(&f32_path, 1500, "s", Label::Stable, "c").unwrap();
    assert_eq!(short.duration_samples(), 1500);
    assert!(short.samples[1000..].iter().all(|&v| v == 0.0));
    let long = load_clip(&f32_path, 10, "s", Label::Stable, "c").unwrap();
    assert_eq!(long.duration_samples(), 10);
    assert!(long.samples.iter().all(|v| v.abs() <= 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn centred_frame_count(len in 1usize..5000, n_fft in 2usize..300, hop_frac in 0.01f64..1.0) {
        let hop = ((n_fft as f64 * hop_frac) as usize).clamp(1, n_fft);
        let p = SpectrogramParams {
            sample_rate: 8000, n_fft, hop, n_mels: 1, f_max: 4000.0, ..Default::default()
        };
        prop_assume!(len > n_fft - n_fft / 2);
        let x: Vec<f64> = (0..len).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let m = stft_magnitude(&clip(x, 8000), &p).unwrap();
        prop_assert_eq!(m.cols, 1 + len / hop);
        prop_assert_eq!(m.rows, n_fft / 2 + 1);
        prop_assert!(m.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn stft_equals_direct_dft(seed in any::<u64>(), n_fft in 2usize..=256, rect in any::<bool>()) {
        let mut r = Fixture::new(seed);
        let hop = 1 + r.below(n_fft);
        let x = r.vec(n_fft + 2 * hop, -1.0, 1.0);
        let window = if rect { Window::Rectangular } else { Window::Hann };
        let p = SpectrogramParams {
            sample_rate: 8000, n_fft, hop, n_mels: 1, f_max: 4000.0, window, center_pad: false, ..Default::default()
        };
        let m = stft_magnitude(&clip(x.clone(), 8000), &p).unwrap();
        let win = if rect { vec![1.0; n_fft] } else { oracle::hann(n_fft) };
        for t in 0..m.cols {
            let want = oracle::dft_magnitude(&x[t * hop..t * hop + n_fft], &win);
            for (k, w) in want.iter().enumerate() {
                prop_assert!(oracle::relative_error(m.at(k, t), *w) < 1e-6);
            }
        }
    }

    #[test]
    fn mel_output_stays_in_unit_range(seed in any::<u64>(), gain in 1e-3f64..1e3) {
        let p = SpectrogramParams { sample_rate: 16_000, n_fft: 512, hop: 256, n_mels: 24, ..Default::default() };
        let mut r = Fixture::new(seed);
        let x: Vec<f64> = r.vec(4000, -1.0, 1.0).into_iter().map(|v| v * gain).collect();
        let m = mel_spectrogram(&clip(x, 16_000), &p).unwrap();
        prop_assert_eq!(m.shape(), [24, 1 + 4000 / 256]);
        prop_assert!(m.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
