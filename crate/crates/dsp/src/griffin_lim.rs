//! Griffin–Lim phase retrieval.
//!
//! Iterates in the padded signal domain, where the least-squares inverse STFT
//! is exact: every sample under at least one window is free. That makes the
//! spectral convergence `‖M − |STFT(x)|‖ / ‖M‖` provably non-increasing. The
//! returned waveform is the central part of the padded signal.

use rustfft::num_complex::Complex64;

use crate::error::{invalid, Result};
use crate::stft::{ComplexSpec, Magnitude, StftPlan};

#[derive(Debug, Clone, PartialEq)]
pub struct GriffinLimOutput {
    /// `(frames − 1)·hop` samples, not clipped.
    pub samples: Vec<f64>,
    /// Spectral convergence after each iteration.
    pub convergence: Vec<f64>,
}

/// Reconstruct a waveform from `mag` with `iters` iterations.
pub fn griffin_lim(mag: &Magnitude, iters: usize, n_fft: usize, hop: usize) -> Result<GriffinLimOutput> {
    if iters == 0 {
        return Err(invalid("griffin_lim", "iters must be >= 1"));
    }
    let plan = StftPlan::new(n_fft, hop)?;
    if mag.n_bins != plan.bins() {
        return Err(invalid("griffin_lim", format!("{} bins, plan expects {}", mag.n_bins, plan.bins())));
    }
    if mag.n_frames < 2 {
        return Err(invalid("griffin_lim", "need at least two frames"));
    }
    if mag.data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(invalid("griffin_lim", "magnitudes must be finite and non-negative"));
    }
    let out_len = (mag.n_frames - 1) * hop;
    let norm = mag.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(GriffinLimOutput {
            samples: vec![0.0; out_len],
            convergence: vec![0.0; iters],
        });
    }

    let mut spec = ComplexSpec {
        n_frames: mag.n_frames,
        n_fft,
        hop,
        data: init_phase(mag, n_fft, hop),
    };
    let mut convergence = Vec::with_capacity(iters);
    let mut signal = Vec::new();
    for _ in 0..iters {
        signal = plan.synthesize_padded(&spec);
        let analysed = plan.analyze_padded(&signal, mag.n_frames);
        let mut err = 0.0;
        for ((target, &m), &a) in spec.data.iter_mut().zip(&mag.data).zip(&analysed.data) {
            let r = a.norm();
            err += (m - r) * (m - r);
            *target = if r > 0.0 { a * (m / r) } else { Complex64::new(m, 0.0) };
        }
        convergence.push(err.sqrt() / norm);
    }
    let pad = n_fft / 2;
    Ok(GriffinLimOutput {
        samples: signal[pad..pad + out_len].to_vec(),
        convergence,
    })
}

/// Phase-vocoder warm start. Each spectral peak carries a sinusoid whose
/// phase advances by its (parabolically interpolated) frequency times the
/// hop; bins around a peak take that phase plus the linear phase of the
/// shifted analysis window, `π(p + δ − k)`.
fn init_phase(mag: &Magnitude, n_fft: usize, hop: usize) -> Vec<Complex64> {
    use std::f64::consts::PI;
    let bins = mag.n_bins;
    // running sinusoid phase and frequency of the peak that owned each bin
    let mut prev_theta = vec![0.0f64; bins];
    let mut prev_omega = vec![0.0f64; bins];
    let mut out = Vec::with_capacity(mag.data.len());
    for t in 0..mag.n_frames {
        let m = mag.frame(t);
        let floor = m.iter().cloned().fold(0.0, f64::max) * 1e-6;
        let peaks: Vec<usize> = (1..bins - 1)
            .filter(|&k| m[k] > floor && m[k] > m[k - 1] && m[k] >= m[k + 1])
            .collect();
        let mut theta = vec![0.0f64; bins];
        let mut omega = vec![0.0f64; bins];
        let mut phase = vec![0.0f64; bins];
        if !peaks.is_empty() {
            let tracks: Vec<(f64, f64, f64)> = peaks
                .iter()
                .map(|&p| {
                    let (a, b, c) = (m[p - 1].max(1e-300).ln(), m[p].ln(), m[p + 1].max(1e-300).ln());
                    let den = a - 2.0 * b + c;
                    let delta = if den.abs() > 1e-12 { (0.5 * (a - c) / den).clamp(-0.5, 0.5) } else { 0.0 };
                    let w = 2.0 * PI * (p as f64 + delta) / n_fft as f64;
                    let th = if t == 0 { 0.0 } else { prev_theta[p] + 0.5 * (prev_omega[p] + w) * hop as f64 };
                    (delta, w, th)
                })
                .collect();
            let mut j = 0;
            for k in 0..bins {
                while j + 1 < peaks.len() && k * 2 > peaks[j] + peaks[j + 1] {
                    j += 1;
                }
                let (delta, w, th) = tracks[j];
                theta[k] = th;
                omega[k] = w;
                phase[k] = th + PI * (peaks[j] as f64 + delta - k as f64);
            }
        }
        out.extend(m.iter().zip(&phase).map(|(&a, &ph)| Complex64::from_polar(a, ph)));
        prev_theta = theta;
        prev_omega = omega;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_source, SourceClass, SourceSpec};
    use crate::stft::stft;

    #[test]
    fn zero_magnitude_gives_silence() {
        let mag = Magnitude {
            n_frames: 101,
            n_bins: 513,
            data: vec![0.0; 101 * 513],
        };
        let out = griffin_lim(&mag, 4, 1024, 160).unwrap();
        assert_eq!(out.samples.len(), 16000);
        assert!(out.samples.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_iterations_is_an_error() {
        let mag = Magnitude {
            n_frames: 4,
            n_bins: 513,
            data: vec![1.0; 4 * 513],
        };
        assert!(griffin_lim(&mag, 0, 1024, 160).is_err());
    }

    #[test]
    fn converges_on_a_real_signal() {
        let w = synth_source(&SourceSpec::draw(SourceClass::AmTone, 1.0, 3)).unwrap();
        let mag = stft(w.samples(), 1024, 160).unwrap().magnitude();
        let out = griffin_lim(&mag, 32, 1024, 160).unwrap();
        assert!(*out.convergence.last().unwrap() <= 0.15, "{:?}", out.convergence.last());
        assert_eq!(out.samples.len(), 16000);
    }

    #[test]
    fn convergence_never_increases() {
        for class in SourceClass::ALL {
            let w = synth_source(&SourceSpec::draw(class, 1.0, 11)).unwrap();
            let mag = stft(w.samples(), 1024, 160).unwrap().magnitude();
            let c = griffin_lim(&mag, 32, 1024, 160).unwrap().convergence;
            assert!(c.windows(2).all(|p| p[1] <= p[0] * (1.0 + 1e-12)), "{class}: {c:?}");
        }
    }
}
