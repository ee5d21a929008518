//! Audio side of the separation pipeline: synthetic sources, SNR and loudness
//! controlled mixing, STFT and log-mel analysis, and Griffin–Lim resynthesis.
//!
//! All signal math is done in f64; only [`MelSpec::to_tensor`] narrows to f32.

pub mod error;
pub mod griffin_lim;
pub mod loudness;
pub mod mel;
pub mod mix;
pub mod stft;
pub mod synth;
pub mod wav;
pub mod waveform;

pub use error::{DspError, Result};
pub use griffin_lim::{griffin_lim, GriffinLimOutput};
pub use loudness::{measure_loudness, normalize_to_lufs};
pub use mel::{
    hz_to_mel, invert_mel, mel_filterbank, mel_from_magnitude, mel_spectrogram, mel_to_hz, MelFilterbank,
    MelSpec, LOG_MEL_FLOOR, MEL_FLOOR, N_MELS,
};
pub use mix::{mix_at_snr, snr_db, Mixture};
pub use rustfft::num_complex::Complex64;
pub use stft::{hann, stft, ComplexSpec, Magnitude, StftPlan, HOP, N_FFT};
pub use synth::{synth_source, SourceClass, SourceSpec, SOURCE_PEAK};
pub use wav::{wav_read, wav_write};
pub use waveform::{Waveform, SAMPLE_RATE};
