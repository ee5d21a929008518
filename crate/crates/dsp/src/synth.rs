//! The six synthetic source classes.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rfsep_tensor::SeededRng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{invalid, DspError, Result};
use crate::waveform::{peak_of, Waveform, SAMPLE_RATE};

/// Peak amplitude of every synthesized source before mixing.
pub const SOURCE_PEAK: f64 = 0.5;

const AM_DEPTH: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SourceClass {
    Sine,
    ChirpUp,
    ChirpDown,
    AmTone,
    NoiseLow,
    NoiseHigh,
}

impl SourceClass {
    pub const ALL: [SourceClass; 6] = [
        SourceClass::Sine,
        SourceClass::ChirpUp,
        SourceClass::ChirpDown,
        SourceClass::AmTone,
        SourceClass::NoiseLow,
        SourceClass::NoiseHigh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SourceClass::Sine => "sine",
            SourceClass::ChirpUp => "chirp_up",
            SourceClass::ChirpDown => "chirp_down",
            SourceClass::AmTone => "am_tone",
            SourceClass::NoiseLow => "noise_low",
            SourceClass::NoiseHigh => "noise_high",
        }
    }
}

impl fmt::Display for SourceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SourceClass {
    type Err = DspError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| invalid("source class", format!("unknown class {s:?}")))
    }
}

/// Parameters of one synthetic source.
///
/// `f_start`/`f_end` mean: the tone frequency for `Sine` and the carrier for
/// `AmTone` (both use `f_start` only), the sweep endpoints for chirps, and
/// the band edges for the two noise classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SourceSpec {
    pub class: SourceClass,
    pub f_start: f64,
    pub f_end: f64,
    /// Amplitude-modulation rate, `AmTone` only.
    pub mod_hz: f64,
    pub duration: f64,
    pub seed: u64,
}

impl SourceSpec {
    pub fn sine(f0: f64, duration: f64) -> Self {
        Self {
            class: SourceClass::Sine,
            f_start: f0,
            f_end: f0,
            mod_hz: 0.0,
            duration,
            seed: 0,
        }
    }

    pub fn chirp(from: f64, to: f64, duration: f64) -> Self {
        let class = if to >= from { SourceClass::ChirpUp } else { SourceClass::ChirpDown };
        Self {
            class,
            f_start: from,
            f_end: to,
            mod_hz: 0.0,
            duration,
            seed: 0,
        }
    }

    pub fn band_noise(lo: f64, hi: f64, duration: f64, seed: u64) -> Self {
        let class = if hi <= 1000.0 { SourceClass::NoiseLow } else { SourceClass::NoiseHigh };
        Self {
            class,
            f_start: lo,
            f_end: hi,
            mod_hz: 0.0,
            duration,
            seed,
        }
    }

    /// Draw class-typical parameters from `seed`.
    pub fn draw(class: SourceClass, duration: f64, seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, 0x5eed);
        let mut u = |lo: f64, hi: f64| rng.uniform_range(lo, hi);
        let (f_start, f_end, mod_hz) = match class {
            SourceClass::Sine => {
                let f = u(300.0, 1000.0);
                (f, f, 0.0)
            }
            SourceClass::ChirpUp => (u(200.0, 400.0), u(1500.0, 2500.0), 0.0),
            SourceClass::ChirpDown => (u(1500.0, 2500.0), u(200.0, 400.0), 0.0),
            SourceClass::AmTone => (u(1200.0, 3000.0), 0.0, u(4.0, 8.0)),
            SourceClass::NoiseLow => (u(100.0, 200.0), u(600.0, 800.0), 0.0),
            SourceClass::NoiseHigh => (u(3000.0, 3500.0), u(6000.0, 7000.0), 0.0),
        };
        Self {
            class,
            f_start,
            f_end,
            mod_hz,
            duration,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let nyquist = SAMPLE_RATE as f64 / 2.0;
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(invalid("synth_source", format!("duration must be > 0, got {}", self.duration)));
        }
        let mut freqs = vec![self.f_start];
        match self.class {
            SourceClass::Sine => {}
            SourceClass::AmTone => freqs.push(self.mod_hz),
            _ => freqs.push(self.f_end),
        }
        for f in freqs {
            if !f.is_finite() || f < 0.0 {
                return Err(invalid("synth_source", format!("bad frequency {f}")));
            }
            if f >= nyquist {
                return Err(DspError::AboveNyquist { freq: f, nyquist });
            }
        }
        if matches!(self.class, SourceClass::NoiseLow | SourceClass::NoiseHigh) && self.f_start >= self.f_end {
            return Err(invalid("synth_source", "band edges must satisfy lo < hi"));
        }
        Ok(())
    }
}

/// Render `spec` at the fixed sample rate, normalized to peak [`SOURCE_PEAK`].
pub fn synth_source(spec: &SourceSpec) -> Result<Waveform> {
    spec.validate()?;
    let sr = SAMPLE_RATE as f64;
    let n = (spec.duration * sr).round() as usize;
    if n == 0 {
        return Err(invalid("synth_source", "duration shorter than one sample"));
    }
    let t = |i: usize| i as f64 / sr;
    let mut x: Vec<f64> = match spec.class {
        SourceClass::Sine => (0..n).map(|i| (2.0 * PI * spec.f_start * t(i)).sin()).collect(),
        SourceClass::ChirpUp | SourceClass::ChirpDown => {
            // linear sweep: phase = 2π (f0·t + k·t²/2), k = (f1 − f0)/duration
            let k = (spec.f_end - spec.f_start) / spec.duration;
            (0..n)
                .map(|i| {
                    let ti = t(i);
                    (2.0 * PI * (spec.f_start * ti + 0.5 * k * ti * ti)).sin()
                })
                .collect()
        }
        SourceClass::AmTone => (0..n)
            .map(|i| {
                let ti = t(i);
                let env = 1.0 + AM_DEPTH * (2.0 * PI * spec.mod_hz * ti).sin();
                env * (2.0 * PI * spec.f_start * ti).sin()
            })
            .collect(),
        SourceClass::NoiseLow | SourceClass::NoiseHigh => band_noise(n, spec.f_start, spec.f_end, spec.seed),
    };
    let peak = peak_of(&x);
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= SOURCE_PEAK / peak);
    }
    Waveform::new(x, SAMPLE_RATE)
}

/// Gaussian noise with every FFT bin outside `[lo, hi]` zeroed.
fn band_noise(n: usize, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let mut rng = SeededRng::new(seed);
    let mut buf: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.normal_f64(), 0.0)).collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    let df = SAMPLE_RATE as f64 / n as f64;
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * df;
        if f < lo || f > hi {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.into_iter().map(|c| c.re / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sine_starts_at_zero_with_full_length() {
        let w = synth_source(&SourceSpec::sine(440.0, 1.0)).unwrap();
        assert_eq!(w.len(), 16000);
        assert_eq!(w.samples()[0], 0.0);
        assert!((w.peak() - SOURCE_PEAK).abs() < 1e-12);
    }

    #[test]
    fn above_nyquist_is_rejected() {
        let r = synth_source(&SourceSpec::sine(9000.0, 1.0));
        assert!(matches!(r, Err(DspError::AboveNyquist { .. })));
        let r = synth_source(&SourceSpec::chirp(200.0, 8000.0, 1.0));
        assert!(matches!(r, Err(DspError::AboveNyquist { .. })));
    }

    #[test]
    fn same_seed_same_noise() {
        let s = SourceSpec::band_noise(100.0, 800.0, 0.5, 42);
        assert_eq!(synth_source(&s).unwrap(), synth_source(&s).unwrap());
        let other = SourceSpec { seed: 43, ..s };
        assert_ne!(synth_source(&s).unwrap(), synth_source(&other).unwrap());
    }

    #[test]
    fn class_names_round_trip() {
        for c in SourceClass::ALL {
            assert_eq!(c.name().parse::<SourceClass>().unwrap(), c);
        }
        assert!("drum".parse::<SourceClass>().is_err());
    }

    #[test]
    fn drawn_specs_are_valid() {
        for c in SourceClass::ALL {
            for seed in 0..20 {
                let s = SourceSpec::draw(c, 1.0, seed);
                assert_eq!(s.class, c);
                synth_source(&s).unwrap();
            }
        }
    }
}
