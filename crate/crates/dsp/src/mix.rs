use crate::error::{DspError, Result};
use crate::waveform::{peak_of, power_of, Waveform};

/// Result of [`mix_at_snr`]. `target` and `noise` are the components actually
/// summed into `mixture`, after any joint peak-protection gain.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub mixture: Waveform,
    pub target: Waveform,
    pub noise: Waveform,
    /// Gain applied to the raw noise to reach the requested SNR.
    pub noise_gain: f64,
    /// Joint gain applied to both components to keep the mixture and both
    /// components within full scale; 1.0 when no rescaling was needed.
    pub joint_gain: f64,
}

/// Scale `noise` so that `10·log10(P_target / P_noise) = snr_db`, then sum.
pub fn mix_at_snr(target: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Mixture> {
    if target.len() != noise.len() {
        return Err(DspError::LengthMismatch {
            op: "mix_at_snr",
            a: target.len(),
            b: noise.len(),
        });
    }
    if !snr_db.is_finite() {
        return Err(crate::error::invalid("mix_at_snr", format!("snr_db must be finite, got {snr_db}")));
    }
    let (pt, pn) = (target.power(), noise.power());
    if pn == 0.0 {
        return Err(DspError::Silent("mix_at_snr noise"));
    }
    if pt == 0.0 {
        return Err(DspError::Silent("mix_at_snr target"));
    }
    let noise_gain = (pt / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    let scaled: Vec<f64> = noise.samples().iter().map(|v| v * noise_gain).collect();
    let sum: Vec<f64> = target.samples().iter().zip(&scaled).map(|(a, b)| a + b).collect();
    // every stored component must stay within full scale, not only the sum
    let peak = peak_of(&sum).max(peak_of(&scaled)).max(target.peak());
    let joint_gain = if peak > 1.0 { (1.0 - 1e-9) / peak } else { 1.0 };
    let apply = |x: &[f64]| x.iter().map(|v| v * joint_gain).collect::<Vec<_>>();
    let sr = target.sample_rate();
    Ok(Mixture {
        mixture: Waveform::new(apply(&sum), sr)?,
        target: Waveform::new(apply(target.samples()), sr)?,
        noise: Waveform::new(apply(&scaled), sr)?,
        noise_gain,
        joint_gain,
    })
}

/// `10·log10(P_target / P_noise)` in dB.
pub fn snr_db(target: &[f64], noise: &[f64]) -> f64 {
    10.0 * (power_of(target) / power_of(noise)).log10()
}
