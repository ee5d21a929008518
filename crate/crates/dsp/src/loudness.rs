//! Simplified single-channel BS.1770 loudness: K-weighting, 400 ms blocks at
//! 75 % overlap, absolute gate at −70 LUFS. No relative gate, no true peak.

use std::f64::consts::PI;

use crate::error::{invalid, DspError, Result};
use crate::waveform::Waveform;

const BLOCK_S: f64 = 0.4;
const STEP_S: f64 = 0.1;
const ABSOLUTE_GATE: f64 = -70.0;
const OFFSET: f64 = -0.691;

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 3],
}

impl Biquad {
    fn normalized(b: [f64; 3], a: [f64; 3]) -> Self {
        Self {
            b: b.map(|v| v / a[0]),
            a: a.map(|v| v / a[0]),
        }
    }

    /// Direct form II transposed from zero state.
    fn filter(&self, x: &[f64]) -> Vec<f64> {
        let (mut z1, mut z2) = (0.0, 0.0);
        x.iter()
            .map(|&v| {
                let y = self.b[0] * v + z1;
                z1 = self.b[1] * v - self.a[1] * y + z2;
                z2 = self.b[2] * v - self.a[2] * y;
                y
            })
            .collect()
    }
}

/// Shelf (+4 dB above ~1.5 kHz) and high-pass (38 Hz) stages designed for `rate`.
fn k_weighting(rate: f64) -> [Biquad; 2] {
    let a = 10f64.powf(4.0 / 40.0);
    let w0 = 2.0 * PI * 1500.0 / rate;
    let (c, alpha) = (w0.cos(), w0.sin() / (2.0 * std::f64::consts::FRAC_1_SQRT_2));
    let sa = 2.0 * a.sqrt() * alpha;
    let shelf = Biquad::normalized(
        [
            a * ((a + 1.0) + (a - 1.0) * c + sa),
            -2.0 * a * ((a - 1.0) + (a + 1.0) * c),
            a * ((a + 1.0) + (a - 1.0) * c - sa),
        ],
        [
            (a + 1.0) - (a - 1.0) * c + sa,
            2.0 * ((a - 1.0) - (a + 1.0) * c),
            (a + 1.0) - (a - 1.0) * c - sa,
        ],
    );
    let w0 = 2.0 * PI * 38.0 / rate;
    let (c, alpha) = (w0.cos(), w0.sin() / (2.0 * 0.5));
    let highpass = Biquad::normalized(
        [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0],
        [1.0 + alpha, -2.0 * c, 1.0 - alpha],
    );
    [shelf, highpass]
}

/// Integrated loudness in LUFS.
pub fn measure_loudness(w: &Waveform) -> Result<f64> {
    let rate = w.sample_rate() as f64;
    let block = (BLOCK_S * rate).round() as usize;
    let step = (STEP_S * rate).round() as usize;
    if w.len() < block {
        return Err(DspError::TooShort {
            op: "measure_loudness",
            len: w.len(),
            need: block,
        });
    }
    if w.samples().iter().all(|&v| v == 0.0) {
        return Err(DspError::Silent("measure_loudness"));
    }
    let [shelf, hp] = k_weighting(rate);
    let y = hp.filter(&shelf.filter(w.samples()));
    let blocks: Vec<f64> = (0..=(y.len() - block) / step)
        .map(|j| {
            let s = &y[j * step..j * step + block];
            s.iter().map(|v| v * v).sum::<f64>() / block as f64
        })
        .collect();
    let kept: Vec<f64> = blocks
        .into_iter()
        .filter(|&ms| ms > 0.0 && OFFSET + 10.0 * ms.log10() > ABSOLUTE_GATE)
        .collect();
    if kept.is_empty() {
        return Err(DspError::Silent("measure_loudness (every block gated)"));
    }
    Ok(OFFSET + 10.0 * (kept.iter().sum::<f64>() / kept.len() as f64).log10())
}

/// Apply the pure gain that brings `w` to `target_lufs`; returns the gain too.
pub fn normalize_to_lufs(w: &Waveform, target_lufs: f64) -> Result<(Waveform, f64)> {
    if !target_lufs.is_finite() {
        return Err(invalid("normalize_to_lufs", format!("target must be finite, got {target_lufs}")));
    }
    let current = measure_loudness(w)?;
    let gain = 10f64.powf((target_lufs - current) / 20.0);
    Ok((w.scaled(gain)?, gain))
}
