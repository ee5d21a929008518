//! Mix a sine with low-band noise at 0 dB and extract the sine by query.

mod common;

use rfsep::frontend::Frontend;
use rfsep::pipeline::{separate_waveform, Generator, Sampler};
use rfsep::train::{load_classifier, load_vae, vocab_of, ModelKind};
use rfsep_dsp::{mix_at_snr, synth_source, wav_write, SourceSpec};

fn main() -> anyhow::Result<()> {
    let (cfg, layout) = common::setup()?;
    common::ensure_model(&cfg, &layout, ModelKind::Flow)?;
    let secs = cfg.dataset.clip_seconds;
    let sine = synth_source(&SourceSpec::sine(440.0, secs))?;
    let noise = synth_source(&SourceSpec::band_noise(150.0, 700.0, secs, 7))?;
    let mix = mix_at_snr(&sine, &noise, 0.0)?;

    let vocab = vocab_of(&cfg)?;
    let fe = Frontend::new(&cfg)?;
    let vae = load_vae(&layout)?;
    let sampler = Sampler::load(&cfg, &layout, Generator::Flow)?;
    let clf = load_classifier(&layout)?;
    for query in ["sine", "noise_low"] {
        let id = vocab.id(query)?;
        let sep = separate_waveform(&cfg, &vae, &sampler, &fe, &mix.mixture, id, cfg.sampler.steps, cfg.seed)?;
        let path = layout.separate_dir().join(format!("example_{}.wav", query.replace(' ', "_")));
        std::fs::create_dir_all(layout.separate_dir())?;
        wav_write(&path, &sep.estimate)?;
        let windows = sep.estimate_mel.shape()[0];
        let scores = clf.consistency_scores(&sep.estimate_mel, &vec![id; windows])?;
        let score = scores.iter().sum::<f64>() / windows as f64;
        println!("query {query:<10} consistency {score:.3}  -> {}", path.display());
    }
    Ok(())
}
