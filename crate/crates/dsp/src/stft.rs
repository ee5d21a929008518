//! Short-time Fourier analysis with a periodic Hann window and centered frames.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{invalid, DspError, Result};

pub const N_FFT: usize = 1024;
pub const HOP: usize = 160;

/// Frames × bins complex spectrum, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpec {
    pub n_frames: usize,
    pub n_fft: usize,
    pub hop: usize,
    pub data: Vec<Complex64>,
}

impl ComplexSpec {
    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn frame(&self, i: usize) -> &[Complex64] {
        let b = self.bins();
        &self.data[i * b..(i + 1) * b]
    }

    pub fn magnitude(&self) -> Magnitude {
        Magnitude {
            n_frames: self.n_frames,
            n_bins: self.bins(),
            data: self.data.iter().map(|c| c.norm()).collect(),
        }
    }
}

/// Frames × bins non-negative linear magnitudes, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Magnitude {
    pub n_frames: usize,
    pub n_bins: usize,
    pub data: Vec<f64>,
}

impl Magnitude {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_bins..(i + 1) * self.n_bins]
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.n_frames, self.n_bins]
    }
}

/// Periodic Hann window: `0.5 − 0.5·cos(2πn/N)`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Reusable FFT plans for one `(n_fft, hop)` pair.
pub struct StftPlan {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for StftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StftPlan").field("n_fft", &self.n_fft).field("hop", &self.hop).finish()
    }
}

impl StftPlan {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        if n_fft < 2 || !n_fft.is_power_of_two() {
            return Err(invalid("stft", format!("n_fft must be a power of two, got {n_fft}")));
        }
        if hop == 0 || hop > n_fft {
            return Err(invalid("stft", format!("hop must be in 1..={n_fft}, got {hop}")));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            n_fft,
            hop,
            window: hann(n_fft),
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        })
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// `floor(len / hop) + 1`.
    pub fn frames_for(&self, len: usize) -> usize {
        len / self.hop + 1
    }

    /// Length of the padded-domain signal covered by `n_frames` frames.
    pub fn padded_len(&self, n_frames: usize) -> usize {
        (n_frames - 1) * self.hop + self.n_fft
    }

    /// Centered analysis with reflect padding of `n_fft/2` on both sides.
    pub fn analyze(&self, x: &[f64]) -> Result<ComplexSpec> {
        if x.len() < self.hop || x.len() < 2 {
            return Err(DspError::TooShort {
                op: "stft",
                len: x.len(),
                need: self.hop.max(2),
            });
        }
        let n_frames = self.frames_for(x.len());
        let pad = self.n_fft / 2;
        let padded: Vec<f64> = (0..self.padded_len(n_frames))
            .map(|i| x[reflect(i as isize - pad as isize, x.len())])
            .collect();
        Ok(self.analyze_padded(&padded, n_frames))
    }

    /// Frames read directly from an already padded signal.
    pub(crate) fn analyze_padded(&self, padded: &[f64], n_frames: usize) -> ComplexSpec {
        let bins = self.bins();
        let mut data = Vec::with_capacity(n_frames * bins);
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        for f in 0..n_frames {
            let start = f * self.hop;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(padded[start + j] * self.window[j], 0.0);
            }
            self.forward.process(&mut buf);
            data.extend_from_slice(&buf[..bins]);
        }
        ComplexSpec {
            n_frames,
            n_fft: self.n_fft,
            hop: self.hop,
            data,
        }
    }

    /// Least-squares inverse over the padded domain: `Σ w·ifft(X) / Σ w²`.
    ///
    /// Samples no window touches (`Σ w² = 0`) are left at zero.
    pub(crate) fn synthesize_padded(&self, spec: &ComplexSpec) -> Vec<f64> {
        let n = self.n_fft;
        let len = self.padded_len(spec.n_frames);
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for f in 0..spec.n_frames {
            let frame = spec.frame(f);
            buf[..frame.len()].copy_from_slice(frame);
            for k in 1..n / 2 {
                buf[n - k] = frame[k].conj();
            }
            // the real signal's DC and Nyquist bins are real
            buf[0].im = 0.0;
            buf[n / 2].im = 0.0;
            self.inverse.process(&mut buf);
            let start = f * self.hop;
            for j in 0..n {
                let w = self.window[j];
                out[start + j] += w * buf[j].re / n as f64;
                norm[start + j] += w * w;
            }
        }
        for (o, &s) in out.iter_mut().zip(&norm) {
            *o = if s > 1e-12 { *o / s } else { 0.0 };
        }
        out
    }

    /// Inverse of [`StftPlan::analyze`], returning `len` samples.
    pub fn istft(&self, spec: &ComplexSpec, len: usize) -> Result<Vec<f64>> {
        if spec.n_fft != self.n_fft || spec.hop != self.hop {
            return Err(invalid("istft", "spectrum was produced with a different plan"));
        }
        let pad = self.n_fft / 2;
        let full = self.synthesize_padded(spec);
        if pad + len > full.len() {
            return Err(invalid("istft", format!("{} frames cannot cover {len} samples", spec.n_frames)));
        }
        Ok(full[pad..pad + len].to_vec())
    }
}

/// numpy-style `reflect` index (edge sample not repeated), bouncing as often as needed.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// One-shot [`StftPlan::analyze`].
pub fn stft(x: &[f64], n_fft: usize, hop: usize) -> Result<ComplexSpec> {
    StftPlan::new(n_fft, hop)?.analyze(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_seconds_gives_1001_frames_of_513_bins() {
        let spec = stft(&vec![0.1; 160_000], 1024, 160).unwrap();
        assert_eq!(spec.n_frames, 1001);
        assert_eq!(spec.bins(), 513);
        assert_eq!(spec.data.len(), 1001 * 513);
    }

    #[test]
    fn bin_frequency_sine_peaks_at_its_bin() {
        for k in [5usize, 64, 300] {
            let f = k as f64 * 16000.0 / 1024.0;
            let x: Vec<f64> = (0..16000).map(|i| (2.0 * PI * f * i as f64 / 16000.0).sin()).collect();
            let mag = stft(&x, 1024, 160).unwrap().magnitude();
            let row = mag.frame(50);
            let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(peak, k);
        }
    }

    #[test]
    fn parseval_holds_per_frame() {
        let x: Vec<f64> = (0..4000).map(|i| ((i * 7919) % 97) as f64 / 97.0 - 0.5).collect();
        let plan = StftPlan::new(256, 64).unwrap();
        let spec = plan.analyze(&x).unwrap();
        let pad = 128;
        let padded: Vec<f64> = (0..plan.padded_len(spec.n_frames))
            .map(|i| x[reflect(i as isize - pad, x.len())])
            .collect();
        let w = hann(256);
        for f in [0, 10, spec.n_frames - 1] {
            let time: f64 = (0..256).map(|j| (padded[f * 64 + j] * w[j]).powi(2)).sum();
            let row = spec.frame(f);
            let freq: f64 = row
                .iter()
                .enumerate()
                .map(|(k, c)| if k == 0 || k == 128 { c.norm_sqr() } else { 2.0 * c.norm_sqr() })
                .sum();
            assert!((freq / 256.0 - time).abs() < 1e-9 * time.max(1.0));
        }
    }

    #[test]
    fn istft_inverts_stft() {
        let x: Vec<f64> = (0..3000).map(|i| (i as f64 * 0.05).sin() * 0.4).collect();
        let plan = StftPlan::new(512, 128).unwrap();
        let y = plan.istft(&plan.analyze(&x).unwrap(), x.len()).unwrap();
        let err = x.iter().zip(&y).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn bad_parameters_are_rejected() {
        assert!(StftPlan::new(1000, 160).is_err());
        assert!(StftPlan::new(1024, 2048).is_err());
        assert!(StftPlan::new(1024, 0).is_err());
        assert!(matches!(stft(&[0.0; 100], 1024, 160), Err(DspError::TooShort { .. })));
    }

    #[test]
    fn reflect_matches_numpy() {
        // np.pad([0,1,2,3], 5, mode="reflect") → [1,2,3,2,1, 0,1,2,3, 2,1,0,1,2]
        let idx: Vec<usize> = (-5..9).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![1, 2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2]);
    }
}
