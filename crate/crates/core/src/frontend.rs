//! Waveform ↔ codec-sized log-mel tensors.

use rfsep_dsp::{griffin_lim, LOG_MEL_FLOOR, invert_mel, mel_filterbank, mel_spectrogram, MelFilterbank, MelSpec, StftPlan, Waveform};
use rfsep_tensor::Tensor;

use crate::config::ExperimentConfig;
use crate::error::{invalid, Result};

/// Far above any full-scale signal (a full-scale sine peaks near 2.7).
const MAX_LOG_MEL: f32 = 4.0;

/// Mel analysis and Griffin–Lim resynthesis at the configured resolution.
pub struct Frontend {
    plan: StftPlan,
    fb: MelFilterbank,
    frames: usize,
    n_mels: usize,
    n_fft: usize,
    hop: usize,
    gl_iters: usize,
    sample_rate: u32,
}

impl Frontend {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let d = &cfg.dsp;
        Ok(Self {
            plan: StftPlan::new(d.n_fft, d.hop)?,
            fb: mel_filterbank(d.n_fft, d.n_mels, d.sample_rate as f64, 0.0, d.sample_rate as f64 / 2.0)?,
            frames: cfg.codec_frames(),
            n_mels: d.n_mels,
            n_fft: d.n_fft,
            hop: d.hop,
            gl_iters: d.griffin_lim_iters,
            sample_rate: d.sample_rate,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    /// `[1, frames, mels]` log-mel of `w`; shorter inputs are zero-padded, longer ones cropped.
    pub fn mel(&self, w: &Waveform) -> Result<Tensor> {
        if w.sample_rate() != self.sample_rate {
            return Err(invalid(format!(
                "sample rate {} Hz, expected {} Hz",
                w.sample_rate(),
                self.sample_rate
            )));
        }
        let need = (self.frames - 1) * self.hop;
        let mut x = w.samples().to_vec();
        if x.len() < need {
            x.resize(need, 0.0);
        }
        let mel = mel_spectrogram(&self.plan.analyze(&x)?, &self.fb)?.crop(self.frames)?;
        Ok(mel.to_tensor().reshape([1, self.frames, self.n_mels])?)
    }

    /// Stack the mels of several waveforms into `[N, 1, frames, mels]`.
    pub fn mel_batch<'a>(&self, ws: impl IntoIterator<Item = &'a Waveform>) -> Result<Tensor> {
        let mels = ws.into_iter().map(|w| self.mel(w)).collect::<Result<Vec<_>>>()?;
        let n = mels.len();
        Ok(Tensor::stack(&mels)?.reshape([n, 1, self.frames, self.n_mels])?)
    }

    /// Griffin–Lim waveform of `len` samples from a `frames × mels` log-mel.
    /// Non-finite or implausibly loud values (from a diverged sampler) are clamped.
    pub fn vocode(&self, mel: &Tensor, len: usize) -> Result<Waveform> {
        let safe = mel.map(|v| if v.is_finite() { v.min(MAX_LOG_MEL) } else { LOG_MEL_FLOOR as f32 });
        let spec = MelSpec::from_tensor(&safe, self.n_mels)?;
        if spec.n_frames != self.frames {
            return Err(invalid(format!("vocoder expects {} frames, got {}", self.frames, spec.n_frames)));
        }
        let mag = invert_mel(&spec, &self.fb)?;
        let out = griffin_lim(&mag, self.gl_iters, self.n_fft, self.hop)?;
        let mut s = out.samples;
        s.resize(len, 0.0);
        Ok(Waveform::clipped(s, self.sample_rate)?)
    }
}
