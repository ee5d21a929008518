use crate::error::{DspError, Result};

/// The fixed sample rate of every clip.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mono audio with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    /// Rejects non-finite samples and anything beyond full scale.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(DspError::NonFinite);
        }
        let peak = peak_of(&samples);
        if peak > 1.0 {
            return Err(DspError::Clipping { peak });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Like [`Waveform::new`] but hard-clips to `[-1, 1]` instead of failing.
    pub fn clipped(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(samples.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(), sample_rate)
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f64 {
        peak_of(&self.samples)
    }

    /// Mean square.
    pub fn power(&self) -> f64 {
        power_of(&self.samples)
    }

    /// Multiply by `gain`; fails if the result clips.
    pub fn scaled(&self, gain: f64) -> Result<Self> {
        Self::new(self.samples.iter().map(|v| v * gain).collect(), self.sample_rate)
    }
}

pub(crate) fn peak_of(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub(crate) fn power_of(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}
