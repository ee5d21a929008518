//! HTK-scale triangular filterbank, log-mel analysis and its non-negative inverse.

use rfsep_tensor::Tensor;

use crate::error::{invalid, DspError, Result};
use crate::stft::{ComplexSpec, Magnitude};

pub const N_MELS: usize = 64;
/// Magnitude floor before `log10`; the smallest mel value is `log10(MEL_FLOOR) = −5`.
pub const MEL_FLOOR: f64 = 1e-5;
pub const LOG_MEL_FLOOR: f64 = -5.0;

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `n_mels × bins` triangular weights stored sparsely per filter.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    n_bins: usize,
    /// First bin of each filter's support.
    starts: Vec<usize>,
    /// Weights over each filter's contiguous support.
    weights: Vec<Vec<f64>>,
}

impl MelFilterbank {
    pub fn n_mels(&self) -> usize {
        self.starts.len()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    /// Dense `[n_mels][bins]` matrix.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        (0..self.n_mels())
            .map(|m| {
                let mut row = vec![0.0; self.n_bins];
                row[self.starts[m]..self.starts[m] + self.weights[m].len()].copy_from_slice(&self.weights[m]);
                row
            })
            .collect()
    }

    /// Bin of each filter's maximum weight.
    pub fn peak_bins(&self) -> Vec<usize> {
        self.weights
            .iter()
            .zip(&self.starts)
            .map(|(w, &s)| s + (0..w.len()).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap_or(0))
            .collect()
    }

    /// `y = F·x` for one frame.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.starts)
            .map(|(w, &s)| w.iter().zip(&x[s..]).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `x = Fᵀ·y` for one frame.
    pub fn project_t(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n_bins];
        for ((w, &s), &yv) in self.weights.iter().zip(&self.starts).zip(y) {
            for (j, &wv) in w.iter().enumerate() {
                x[s + j] += wv * yv;
            }
        }
        x
    }
}

/// Triangles with unit peak centered on `n_mels` points evenly spaced in mel
/// between `fmin` and `fmax`.
pub fn mel_filterbank(n_fft: usize, n_mels: usize, sr: f64, fmin: f64, fmax: f64) -> Result<MelFilterbank> {
    if n_mels < 2 {
        return Err(invalid("mel_filterbank", format!("n_mels must be >= 2, got {n_mels}")));
    }
    if fmax > sr / 2.0 {
        return Err(DspError::AboveNyquist {
            freq: fmax,
            nyquist: sr / 2.0,
        });
    }
    if !(fmin >= 0.0 && fmin < fmax) {
        return Err(invalid("mel_filterbank", format!("need 0 <= fmin < fmax, got {fmin}..{fmax}")));
    }
    let n_bins = n_fft / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sr / n_fft as f64;
    let mut starts = Vec::with_capacity(n_mels);
    let mut weights = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row: Vec<f64> = (0..n_bins)
            .map(|k| {
                let f = k as f64 * bin_hz;
                ((f - lo) / (c - lo)).min((hi - f) / (hi - c)).max(0.0)
            })
            .collect();
        let first = row.iter().position(|&w| w > 0.0);
        let last = row.iter().rposition(|&w| w > 0.0);
        match (first, last) {
            (Some(a), Some(b)) => {
                starts.push(a);
                weights.push(row[a..=b].to_vec());
            }
            _ => {
                return Err(invalid(
                    "mel_filterbank",
                    format!("filter {m} ({lo:.1}..{hi:.1} Hz) covers no FFT bin; use fewer mels or a longer FFT"),
                ))
            }
        }
    }
    Ok(MelFilterbank {
        n_bins,
        starts,
        weights,
    })
}

/// Frames × mels log10 magnitudes, floored at −5.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpec {
    pub n_frames: usize,
    pub n_mels: usize,
    pub data: Vec<f64>,
}

impl MelSpec {
    pub fn frame(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_mels..(i + 1) * self.n_mels]
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.n_frames, self.n_mels]
    }

    /// Keep the first `n` frames.
    pub fn crop(&self, n: usize) -> Result<MelSpec> {
        if n > self.n_frames {
            return Err(invalid("mel crop", format!("cannot keep {n} of {} frames", self.n_frames)));
        }
        Ok(MelSpec {
            n_frames: n,
            n_mels: self.n_mels,
            data: self.data[..n * self.n_mels].to_vec(),
        })
    }

    /// As a `[frames, mels]` f32 tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new([self.n_frames, self.n_mels], self.data.iter().map(|&v| v as f32).collect())
            .expect("shape matches data")
    }

    /// From any tensor holding `frames × mels` values; values below the floor are raised to it.
    pub fn from_tensor(t: &Tensor, n_mels: usize) -> Result<MelSpec> {
        if n_mels == 0 || t.numel() % n_mels != 0 {
            return Err(invalid("mel from tensor", format!("{:?} is not a multiple of {n_mels} mels", t.shape())));
        }
        Ok(MelSpec {
            n_frames: t.numel() / n_mels,
            n_mels,
            data: t.data().iter().map(|&v| (v as f64).max(LOG_MEL_FLOOR)).collect(),
        })
    }
}

/// `log10(max(F·|X|, 1e-5))` per frame.
pub fn mel_spectrogram(spec: &ComplexSpec, fb: &MelFilterbank) -> Result<MelSpec> {
    mel_from_magnitude(&spec.magnitude(), fb)
}

pub fn mel_from_magnitude(mag: &Magnitude, fb: &MelFilterbank) -> Result<MelSpec> {
    if mag.n_bins != fb.n_bins() {
        return Err(invalid(
            "mel_spectrogram",
            format!("{} bins vs filterbank over {}", mag.n_bins, fb.n_bins()),
        ));
    }
    let mut data = Vec::with_capacity(mag.n_frames * fb.n_mels());
    for f in 0..mag.n_frames {
        data.extend(fb.project(mag.frame(f)).into_iter().map(|v| v.max(MEL_FLOOR).log10()));
    }
    Ok(MelSpec {
        n_frames: mag.n_frames,
        n_mels: fb.n_mels(),
        data,
    })
}

const NNLS_ITERS: usize = 200;

/// Non-negative least-squares magnitude whose mel projection matches `10^mel`.
///
/// Multiplicative updates `x ← x ⊙ Fᵀy / FᵀFx` keep every entry ≥ 0 and
/// decrease `‖Fx − y‖²` monotonically.
pub fn invert_mel(mel: &MelSpec, fb: &MelFilterbank) -> Result<Magnitude> {
    if mel.n_mels != fb.n_mels() {
        return Err(invalid("invert_mel", format!("{} mels vs filterbank of {}", mel.n_mels, fb.n_mels())));
    }
    // start from the flat spectrum each filter would see: x = Fᵀ(y / rowsum) / colsum
    let row_sum = fb.project(&vec![1.0; fb.n_bins()]);
    let col_sum = fb.project_t(&vec![1.0; fb.n_mels()]);
    let mut data = Vec::with_capacity(mel.n_frames * fb.n_bins());
    for f in 0..mel.n_frames {
        let y: Vec<f64> = mel.frame(f).iter().map(|&v| 10f64.powf(v)).collect();
        let fty = fb.project_t(&y);
        let flat: Vec<f64> = y.iter().zip(&row_sum).map(|(a, r)| a / r).collect();
        let mut x: Vec<f64> = fb
            .project_t(&flat)
            .iter()
            .zip(&col_sum)
            .map(|(&a, &c)| if c > 0.0 { a / c } else { 0.0 })
            .collect();
        for _ in 0..NNLS_ITERS {
            let denom = fb.project_t(&fb.project(&x));
            for ((xv, &num), &den) in x.iter_mut().zip(&fty).zip(&denom) {
                if den > 0.0 {
                    *xv *= num / den;
                }
            }
        }
        data.extend(x);
    }
    Ok(Magnitude {
        n_frames: mel.n_frames,
        n_bins: fb.n_bins(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn preset() -> MelFilterbank {
        mel_filterbank(1024, 64, 16000.0, 0.0, 8000.0).unwrap()
    }

    #[test]
    fn thousand_hz_is_about_a_thousand_mels() {
        assert!((hz_to_mel(1000.0) - 999.99).abs() < 0.01);
        assert!((mel_to_hz(hz_to_mel(1234.5)) - 1234.5).abs() < 1e-9);
    }

    #[test]
    fn filters_are_nonnegative_contiguous_and_ordered() {
        let fb = preset();
        let dense = fb.dense();
        for row in &dense {
            assert!(row.iter().all(|&w| w >= 0.0));
            let nz: Vec<usize> = (0..row.len()).filter(|&k| row[k] > 0.0).collect();
            assert!(!nz.is_empty());
            assert_eq!(nz.last().unwrap() - nz[0] + 1, nz.len());
        }
        let peaks = fb.peak_bins();
        assert_eq!(peaks.len(), 64);
        assert!(peaks.windows(2).all(|p| p[0] < p[1]), "{peaks:?}");
    }

    #[test]
    fn fmax_above_nyquist_fails() {
        assert!(matches!(
            mel_filterbank(1024, 64, 16000.0, 0.0, 9000.0),
            Err(DspError::AboveNyquist { .. })
        ));
        assert!(mel_filterbank(1024, 1, 16000.0, 0.0, 8000.0).is_err());
    }

    #[test]
    fn zero_spectrum_sits_on_the_floor() {
        let mag = Magnitude {
            n_frames: 3,
            n_bins: 513,
            data: vec![0.0; 3 * 513],
        };
        let mel = mel_from_magnitude(&mag, &preset()).unwrap();
        assert_eq!(mel.shape(), [3, 64]);
        assert!(mel.data.iter().all(|&v| v == -5.0));
    }

    #[test]
    fn doubling_magnitude_adds_log10_2() {
        let data: Vec<f64> = (0..2 * 513).map(|i| 1.0 + (i % 17) as f64).collect();
        let mag = Magnitude {
            n_frames: 2,
            n_bins: 513,
            data: data.clone(),
        };
        let twice = Magnitude {
            data: data.iter().map(|v| 2.0 * v).collect(),
            ..mag.clone()
        };
        let (a, b) = (mel_from_magnitude(&mag, &preset()).unwrap(), mel_from_magnitude(&twice, &preset()).unwrap());
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((y - x - 2f64.log10()).abs() < 1e-12);
        }
    }

    #[test]
    fn inversion_round_trips_through_the_filterbank() {
        let fb = preset();
        // smooth in-band content
        let data: Vec<f64> = (0..4 * 513)
            .map(|i| {
                let k = (i % 513) as f64;
                (1.0 + (k / 40.0).sin().abs()) * (-(k / 300.0)).exp()
            })
            .collect();
        let mag = Magnitude {
            n_frames: 4,
            n_bins: 513,
            data,
        };
        let mel = mel_from_magnitude(&mag, &fb).unwrap();
        let inv = invert_mel(&mel, &fb).unwrap();
        assert_eq!(inv.shape(), [4, 513]);
        assert!(inv.data.iter().all(|&v| v >= 0.0));
        for f in 0..4 {
            let y: Vec<f64> = mel.frame(f).iter().map(|v| 10f64.powf(*v)).collect();
            let y_hat = fb.project(inv.frame(f));
            let num: f64 = y.iter().zip(&y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den: f64 = y.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(num / den <= 0.10, "frame {f}: {}", num / den);
        }
    }

    #[test]
    fn floor_mel_inverts_to_near_zero() {
        let fb = preset();
        let mel = MelSpec {
            n_frames: 2,
            n_mels: 64,
            data: vec![-5.0; 128],
        };
        let inv = invert_mel(&mel, &fb).unwrap();
        assert!(inv.data.iter().all(|&v| (0.0..1e-4).contains(&v)));
    }
}
