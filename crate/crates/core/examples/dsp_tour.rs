//! From synthesis to mel and back: mixing at an SNR, loudness, the mel
//! front end and Griffin–Lim resynthesis.

use rfsep::config::{ExperimentConfig, Preset};
use rfsep::frontend::Frontend;
use rfsep_dsp::{measure_loudness, mix_at_snr, normalize_to_lufs, snr_db, synth_source, SourceClass, SourceSpec};

fn main() -> anyhow::Result<()> {
    let cfg = ExperimentConfig::preset(Preset::Desk);
    let fe = Frontend::new(&cfg)?;
    let target = synth_source(&SourceSpec::draw(SourceClass::ChirpUp, 1.0, 3))?;
    let noise = synth_source(&SourceSpec::draw(SourceClass::NoiseHigh, 1.0, 4))?;
    let mix = mix_at_snr(&target, &noise, -5.0)?;
    println!("requested -5 dB, measured {:.9} dB", snr_db(mix.target.samples(), mix.noise.samples()));

    let (placed, gain) = normalize_to_lufs(&mix.mixture, -30.0)?;
    println!("loudness {:.2} -> {:.2} LUFS (gain {gain:.3})", measure_loudness(&mix.mixture)?, measure_loudness(&placed)?);

    let mel = fe.mel(&target)?;
    println!("log-mel {:?}", mel.shape());
    let back = fe.vocode(&mel, target.len())?;
    let mel2 = fe.mel(&back)?;
    let lsd = rfsep::metrics::log_spectral_distance(mel.data(), mel2.data())?;
    println!("Griffin-Lim resynthesis: {} samples, LSD to the original mel {lsd:.2} dB", back.len());
    Ok(())
}
