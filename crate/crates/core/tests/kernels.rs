//! Forward kernels and the STFT against brute-force oracles.

use voxmind::audio::{stft_magnitude, AudioClip, Label, SpectrogramParams, Window};
use voxmind::nn::ops::{conv2d_forward, dense_forward, maxpool_forward, ConvGeom, PoolGeom};
use voxmind_oracles as oracle;
use voxmind_oracles::Fixture;

const SHAPES: usize = 50;
const TOL: f64 = 1e-6;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn conv2d_matches_nested_loops() {
    let mut r = Fixture::new(11);
    for case in 0..SHAPES {
        let (c, f) = (1 + r.below(4), 1 + r.below(5));
        let (kh, kw) = (1 + r.below(4), 1 + r.below(4));
        let stride = 1 + r.below(2);
        let pad = r.below(kh.min(kw));
        let h = kh + r.below(7);
        let w = kw + r.below(7);
        let batch = 1 + r.below(3);
        let g = ConvGeom::new(c, h, w, f, kh, kw, stride, pad).unwrap();
        let x = r.vec(batch * c * h * w, -1.0, 1.0);
        let wt = r.vec(f * c * kh * kw, -1.0, 1.0);
        let b = r.vec(f, -0.5, 0.5);
        let got = conv2d_forward(&x, &wt, &b, &g, batch);
        let want: Vec<f64> = (0..batch)
            .flat_map(|i| oracle::conv2d(&x[i * g.in_len()..(i + 1) * g.in_len()], c, h, w, &wt, &b, f, kh, kw, stride, pad))
            .collect();
        let d = max_abs_diff(&got, &want);
        assert!(d < TOL, "case {case}: {g:?} batch {batch} diff {d}");
    }
}

#[test]
fn maxpool_matches_nested_loops() {
    let mut r = Fixture::new(12);
    for case in 0..SHAPES {
        let size = 1 + r.below(3);
        let stride = 1 + r.below(3);
        let pad = r.below(size);
        let (c, h, w) = (1 + r.below(4), size + r.below(8), size + r.below(8));
        let batch = 1 + r.below(3);
        let g = PoolGeom::new(c, h, w, size, stride, pad).unwrap();
        let x = r.vec(batch * g.in_len(), -2.0, 2.0);
        let (got, _) = maxpool_forward(&x, &g, batch);
        let want: Vec<f64> = (0..batch)
            .flat_map(|i| oracle::maxpool(&x[i * g.in_len()..(i + 1) * g.in_len()], c, h, w, size, stride, pad))
            .collect();
        let d = max_abs_diff(&got, &want);
        assert!(d < TOL, "case {case}: {g:?} diff {d}");
    }
}

#[test]
fn dense_matches_nested_loops() {
    let mut r = Fixture::new(13);
    for case in 0..SHAPES {
        let (batch, inp, out) = (1 + r.below(5), 1 + r.below(40), 1 + r.below(20));
        let x = r.vec(batch * inp, -1.0, 1.0);
        let w = r.vec(inp * out, -1.0, 1.0);
        let b = r.vec(out, -1.0, 1.0);
        let d = max_abs_diff(&dense_forward(&x, &w, &b, batch, inp, out), &oracle::dense(&x, &w, &b, batch, inp, out));
        assert!(d < TOL, "case {case}: {batch}x{inp}->{out} diff {d}");
    }
}

#[test]
fn f32_kernels_track_the_f64_oracle() {
    let mut r = Fixture::new(14);
    let g = ConvGeom::new(3, 9, 7, 4, 3, 3, 1, 1).unwrap();
    let x = r.vec(2 * g.in_len(), -1.0, 1.0);
    let w = r.vec(4 * 3 * 9, -1.0, 1.0);
    let b = r.vec(4, -1.0, 1.0);
    let f = |v: &[f64]| v.iter().map(|&a| a as f32).collect::<Vec<f32>>();
    let got: Vec<f64> = conv2d_forward(&f(&x), &f(&w), &f(&b), &g, 2).into_iter().map(f64::from).collect();
    let want: Vec<f64> = (0..2)
        .flat_map(|i| oracle::conv2d(&x[i * g.in_len()..(i + 1) * g.in_len()], 3, 9, 7, &w, &b, 4, 3, 3, 1, 1))
        .collect();
    assert!(max_abs_diff(&got, &want) < 1e-5);
}

fn params(n_fft: usize, hop: usize, window: Window, center_pad: bool) -> SpectrogramParams {
    SpectrogramParams { sample_rate: 8000, n_fft, hop, n_mels: 4, f_max: 4000.0, window, center_pad, ..Default::default() }
}

fn clip(samples: Vec<f64>) -> AudioClip {
    AudioClip { samples, sample_rate: 8000, subject_id: "s".into(), label: Label::Stable, clip_id: "c".into() }
}

/// numpy-style "reflect" padding, `left` and `right` samples.
fn reflect_pad(x: &[f64], left: usize, right: usize) -> Vec<f64> {
    let mut out: Vec<f64> = (1..=left).rev().map(|i| x[i]).collect();
    out.extend_from_slice(x);
    out.extend((1..=right).map(|i| x[x.len() - 1 - i]));
    out
}

fn check_stft(n_fft: usize, hop: usize, window: Window, center: bool, x: Vec<f64>) {
    let p = params(n_fft, hop, window, center);
    let got = stft_magnitude(&clip(x.clone()), &p).unwrap();
    let padded = if center { reflect_pad(&x, n_fft / 2, n_fft - n_fft / 2) } else { x.clone() };
    let win = match window {
        Window::Hann => oracle::hann(n_fft),
        Window::Rectangular => vec![1.0; n_fft],
    };
    assert_eq!(got.rows, n_fft / 2 + 1);
    assert_eq!(got.cols, p.n_frames(x.len()));
    for t in 0..got.cols {
        let want = oracle::dft_magnitude(&padded[t * hop..t * hop + n_fft], &win);
        for (k, w) in want.iter().enumerate() {
            let e = oracle::relative_error(got.at(k, t), *w);
            assert!(e < TOL, "n_fft {n_fft} hop {hop} frame {t} bin {k}: {} vs {w}", got.at(k, t));
        }
    }
}

#[test]
fn stft_matches_direct_dft() {
    let mut r = Fixture::new(15);
    for case in 0..40 {
        let n_fft = [2, 3, 8, 15, 16, 31, 64, 100, 128, 255, 256][case % 11];
        let hop = 1 + r.below(n_fft);
        let len = n_fft + hop * (1 + r.below(4)) + r.below(hop);
        let window = if case % 3 == 0 { Window::Rectangular } else { Window::Hann };
        check_stft(n_fft, hop, window, case % 2 == 0 && len > n_fft - n_fft / 2, r.vec(len, -1.0, 1.0));
    }
}

#[test]
fn stft_of_a_bin_centred_sinusoid_peaks_at_that_bin() {
    let n = 64;
    let x: Vec<f64> = (0..4 * n).map(|i| (2.0 * std::f64::consts::PI * 5.0 * i as f64 / n as f64).cos()).collect();
    let m = stft_magnitude(&clip(x), &params(n, n, Window::Rectangular, false)).unwrap();
    for t in 0..m.cols {
        let col: Vec<f64> = (0..m.rows).map(|k| m.at(k, t)).collect();
        let peak = col.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(peak, 5);
        assert!((col[5] - n as f64 / 2.0).abs() < 1e-9);
    }
}
