//! Signal-level contracts checked against independent FFT measurements and
//! randomized invariants.

use std::f64::consts::PI;

use proptest::prelude::*;
use rfsep_dsp::*;
use rustfft::FftPlanner;

/// Peak frequency of a Hann-windowed excerpt, zero-padded to 16384 points.
fn peak_hz(x: &[f64], center: usize, len: usize) -> f64 {
    let n = 16384;
    let start = center - len / 2;
    let w = hann(len);
    let mut buf: Vec<Complex64> = (0..n)
        .map(|i| Complex64::new(if i < len { x[start + i] * w[i] } else { 0.0 }, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let k = (1..n / 2).max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm())).unwrap();
    k as f64 * SAMPLE_RATE as f64 / n as f64
}

/// Instantaneous frequency at a clip edge, extrapolated linearly from two
/// short windows next to it.
fn edge_frequency(x: &[f64], at_start: bool) -> f64 {
    let (len, n) = (512, x.len() as f64);
    let (c1, c2) = if at_start { (256, 768) } else { (x.len() - 256, x.len() - 768) };
    let (f1, f2) = (peak_hz(x, c1, len), peak_hz(x, c2, len));
    let edge = if at_start { 0.0 } else { n };
    f1 + (f2 - f1) / (c2 as f64 - c1 as f64) * (edge - c1 as f64)
}

#[test]
fn chirp_edges_hit_their_endpoint_frequencies() {
    for (from, to) in [(200.0, 2000.0), (2000.0, 200.0)] {
        let w = synth_source(&SourceSpec::chirp(from, to, 1.0)).unwrap();
        let (f0, f1) = (edge_frequency(w.samples(), true), edge_frequency(w.samples(), false));
        assert!((f0 - from).abs() <= 0.05 * from, "start {f0} vs {from}");
        assert!((f1 - to).abs() <= 0.05 * to, "end {f1} vs {to}");
    }
}

fn band_energy_fraction(x: &[f64], lo: f64, hi: f64) -> f64 {
    let n = x.len();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let df = SAMPLE_RATE as f64 / n as f64;
    let (mut inside, mut total) = (0.0, 0.0);
    for (k, c) in buf.iter().enumerate() {
        let f = k.min(n - k) as f64 * df;
        total += c.norm_sqr();
        if (lo..=hi).contains(&f) {
            inside += c.norm_sqr();
        }
    }
    inside / total
}

#[test]
fn band_noise_keeps_its_energy_in_band() {
    for seed in 0..5 {
        let w = synth_source(&SourceSpec::band_noise(100.0, 800.0, 1.0, seed)).unwrap();
        assert!(band_energy_fraction(w.samples(), 100.0, 800.0) >= 0.9);
        assert!((w.peak() - SOURCE_PEAK).abs() < 1e-12);
    }
}

#[test]
fn drawn_classes_stay_in_their_bands() {
    let low = synth_source(&SourceSpec::draw(SourceClass::NoiseLow, 1.0, 7)).unwrap();
    assert!(band_energy_fraction(low.samples(), 100.0, 800.0) >= 0.9);
    let high = synth_source(&SourceSpec::draw(SourceClass::NoiseHigh, 1.0, 7)).unwrap();
    assert!(band_energy_fraction(high.samples(), 3000.0, 7000.0) >= 0.9);
}

#[test]
fn silence_prefix_only_shifts_frames() {
    let plan = StftPlan::new(1024, 160).unwrap();
    let x: Vec<f64> = (0..8000).map(|i| 0.3 * (2.0 * PI * 523.0 * i as f64 / 16000.0).sin()).collect();
    let shift_frames = 7;
    let mut shifted = vec![0.0; shift_frames * 160];
    shifted.extend_from_slice(&x);
    let (a, b) = (plan.analyze(&x).unwrap(), plan.analyze(&shifted).unwrap());
    // frame interiors: away from both clip edges so reflect padding never enters
    for f in 4..a.n_frames - 4 {
        for (u, v) in a.frame(f).iter().zip(b.frame(f + shift_frames)) {
            assert!((u - v).norm() < 1e-9);
        }
    }
}

#[test]
fn full_pipeline_shapes_for_one_second() {
    let w = synth_source(&SourceSpec::draw(SourceClass::AmTone, 1.0, 1)).unwrap();
    let spec = stft(w.samples(), N_FFT, HOP).unwrap();
    assert_eq!(spec.n_frames, 101);
    let fb = mel_filterbank(N_FFT, N_MELS, SAMPLE_RATE as f64, 0.0, 8000.0).unwrap();
    let mel = mel_spectrogram(&spec, &fb).unwrap();
    assert_eq!(mel.shape(), [101, 64]);
    assert!(mel.data.iter().all(|&v| v >= LOG_MEL_FLOOR));
    let mag = invert_mel(&mel, &fb).unwrap();
    let out = griffin_lim(&mag, 8, N_FFT, HOP).unwrap();
    assert_eq!(out.samples.len(), 16000);
}

fn noise(seed: u64, n: usize) -> Waveform {
    synth_source(&SourceSpec::band_noise(50.0, 7000.0, n as f64 / 16000.0, seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixing_hits_the_requested_snr(snr in -15.0f64..15.0, s1 in 0u64..1000, s2 in 0u64..1000) {
        let t = synth_source(&SourceSpec::draw(SourceClass::ALL[(s1 % 6) as usize], 0.25, s1)).unwrap();
        let n = noise(s2, t.len());
        let m = mix_at_snr(&t, &n, snr).unwrap();
        let measured = snr_db(m.target.samples(), m.noise.samples());
        prop_assert!((measured - snr).abs() <= 1e-6, "{} vs {}", measured, snr);
        prop_assert!(m.mixture.peak() <= 1.0);
        for ((x, a), b) in m.mixture.samples().iter().zip(m.target.samples()).zip(m.noise.samples()) {
            prop_assert!((x - (a + b)).abs() < 1e-12);
        }
    }

    #[test]
    fn stft_frame_count_is_len_over_hop_plus_one(len in 160usize..6000, hop_pow in 4u32..9) {
        let hop = 1usize << hop_pow;
        prop_assume!(len >= hop);
        let x: Vec<f64> = (0..len).map(|i| (i as f64 * 0.01).sin()).collect();
        let spec = stft(&x, 512, hop).unwrap();
        prop_assert_eq!(spec.n_frames, len / hop + 1);
        prop_assert_eq!(spec.bins(), 257);
    }

    #[test]
    fn loudness_is_scale_covariant(gain in 0.05f64..1.0, seed in 0u64..500) {
        let w = synth_source(&SourceSpec::draw(SourceClass::ALL[(seed % 6) as usize], 1.0, seed)).unwrap();
        let l0 = measure_loudness(&w).unwrap();
        let l1 = measure_loudness(&w.scaled(gain).unwrap()).unwrap();
        prop_assert!((l1 - l0 - 20.0 * gain.log10()).abs() < 1e-9);
    }

    #[test]
    fn wav_round_trip_is_within_one_lsb(seed in 0u64..1000, amp in 0.01f64..1.0) {
        let src = noise(seed, 2000);
        let w = src.scaled(amp / src.peak()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        wav_write(&path, &w).unwrap();
        let back = wav_read(&path).unwrap();
        prop_assert_eq!(back.sample_rate(), SAMPLE_RATE);
        prop_assert_eq!(back.len(), w.len());
        for (a, b) in w.samples().iter().zip(back.samples()) {
            prop_assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn griffin_lim_convergence_is_monotone(seed in 0u64..10_000) {
        // arbitrary non-negative magnitude, not necessarily consistent
        let mut rng = rfsep_tensor::SeededRng::new(seed);
        let data = (0..20 * 129).map(|_| rng.normal_f64().abs()).collect();
        let mag = Magnitude { n_frames: 20, n_bins: 129, data };
        let c = griffin_lim(&mag, 16, 256, 64).unwrap().convergence;
        prop_assert!(c.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-12)), "{:?}", c);
    }
}
