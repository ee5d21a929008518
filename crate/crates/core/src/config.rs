//! Experiment configuration: one JSON document determines every artifact.

use std::path::Path;

use rfsep_dsp::SourceClass;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierTrainConfig;
use crate::error::{io_err, Error, Result};
use crate::flow::{DiffusionConfig, Solver, DEFAULT_SIGMA_MIN};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Source classes, in vocabulary order.
    pub classes: Vec<String>,
    /// Mixtures whose target is each class.
    pub mixtures_per_class: usize,
    pub clip_seconds: f64,
    /// Inclusive-exclusive range of mixture SNRs in dB.
    pub snr_db: [f64; 2],
    /// Range of integrated loudness the mixture is placed at.
    pub lufs: [f64; 2],
    /// Train / val / test fractions.
    pub splits: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DspConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub griffin_lim_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub sigma_min: f64,
    pub grad_clip: f64,
    pub base_width: usize,
    pub film_hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub grad_clip: f64,
    pub schedule: DiffusionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Flow steps for `separate` and `evaluate`.
    pub steps: usize,
    pub solver: Solver,
    /// Step counts swept by `bench-steps`.
    pub bench_steps: Vec<usize>,
    /// Items run through Griffin–Lim in `evaluate` and timed in `bench-steps`;
    /// `None` means all of them.
    pub vocode_items: Option<usize>,
    /// Items processed together by the sampler.
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub dsp: DspConfig,
    pub vae: VaeTrainConfig,
    pub classifier: ClassifierTrainConfig,
    pub flow: FlowTrainConfig,
    pub diffusion: DiffusionTrainConfig,
    pub sampler: SamplerConfig,
}

/// Named configurations shipped with the library.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// 1 s clips, ~2.4k mixtures, 20k codec / 50k flow steps.
    Desk,
    /// The reduced run used by the acceptance suite.
    Acceptance,
    /// A few steps of everything; for smoke and reproducibility tests.
    Tiny,
    /// 10 s clips and 1M-step schedules at lr 5e-5; impractical on a CPU.
    Large,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "acceptance" => Ok(Self::Acceptance),
            "tiny" => Ok(Self::Tiny),
            "large" => Ok(Self::Large),
            other => Err(Error::Config(format!("unknown preset {other:?} (desk, acceptance, tiny, large)"))),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        let desk = Self::desk();
        match p {
            Preset::Desk => desk,
            Preset::Acceptance => Self {
                dataset: DatasetConfig {
                    mixtures_per_class: 100,
                    ..desk.dataset
                },
                vae: VaeTrainConfig { steps: 2500, ..desk.vae },
                classifier: ClassifierTrainConfig { steps: 800, ..desk.classifier },
                flow: FlowTrainConfig { steps: 5000, ..desk.flow },
                diffusion: DiffusionTrainConfig { steps: 5000, ..desk.diffusion },
                sampler: SamplerConfig {
                    vocode_items: Some(12),
                    ..desk.sampler
                },
                ..desk
            },
            Preset::Tiny => Self {
                dataset: DatasetConfig {
                    mixtures_per_class: 10,
                    ..desk.dataset
                },
                vae: VaeTrainConfig { steps: 6, batch: 4, ..desk.vae },
                classifier: ClassifierTrainConfig {
                    steps: 6,
                    batch: 4,
                    ..desk.classifier
                },
                flow: FlowTrainConfig { steps: 6, batch: 4, ..desk.flow },
                diffusion: DiffusionTrainConfig { steps: 6, batch: 4, ..desk.diffusion },
                sampler: SamplerConfig {
                    steps: 2,
                    bench_steps: vec![1, 2, 3],
                    vocode_items: Some(2),
                    ..desk.sampler
                },
                ..desk
            },
            Preset::Large => Self {
                dataset: DatasetConfig {
                    clip_seconds: 10.0,
                    ..desk.dataset
                },
                vae: VaeTrainConfig { steps: 1_000_000, ..desk.vae },
                flow: FlowTrainConfig {
                    steps: 1_000_000,
                    lr: 5e-5,
                    ..desk.flow
                },
                diffusion: DiffusionTrainConfig {
                    steps: 1_000_000,
                    lr: 5e-5,
                    ..desk.diffusion
                },
                ..desk
            },
        }
    }

    fn desk() -> Self {
        Self {
            seed: 20240917,
            dataset: DatasetConfig {
                classes: SourceClass::ALL.iter().map(|c| c.name().to_string()).collect(),
                mixtures_per_class: 400,
                clip_seconds: 1.0,
                snr_db: [-15.0, 15.0],
                lufs: [-35.0, -25.0],
                splits: [0.8, 0.1, 0.1],
            },
            dsp: DspConfig {
                sample_rate: rfsep_dsp::SAMPLE_RATE,
                n_fft: rfsep_dsp::N_FFT,
                hop: rfsep_dsp::HOP,
                n_mels: rfsep_dsp::N_MELS,
                griffin_lim_iters: 32,
            },
            vae: VaeTrainConfig {
                steps: 20_000,
                batch: 8,
                lr: 1e-3,
                beta: 1e-3,
            },
            classifier: ClassifierTrainConfig {
                steps: 2000,
                batch: 16,
                lr: 1e-3,
            },
            flow: FlowTrainConfig {
                steps: 50_000,
                batch: 8,
                lr: 1e-3,
                sigma_min: DEFAULT_SIGMA_MIN,
                grad_clip: 1.0,
                base_width: 32,
                film_hidden: 256,
            },
            diffusion: DiffusionTrainConfig {
                steps: 50_000,
                batch: 8,
                lr: 1e-3,
                grad_clip: 1.0,
                schedule: DiffusionConfig::default(),
            },
            sampler: SamplerConfig {
                steps: 10,
                solver: Solver::Euler,
                bench_steps: vec![1, 2, 5, 10, 25, 50, 100, 200],
                vocode_items: None,
                batch: 16,
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    /// Hash of everything a training run of `kind` depends on, except step
    /// counts of that model and of models downstream of it, so a longer run
    /// may resume a shorter one.
    pub fn resume_key(&self, kind: &str) -> String {
        let mut c = self.clone();
        c.classifier.steps = 0;
        c.flow.steps = 0;
        c.diffusion.steps = 0;
        if kind == "vae" || kind == "classifier" {
            c.vae.steps = 0;
        }
        c.sampler = Self::desk().sampler;
        c.hash()
    }

    pub fn source_classes(&self) -> Result<Vec<SourceClass>> {
        self.dataset
            .classes
            .iter()
            .map(|c| c.parse::<SourceClass>().map_err(|_| Error::Config(format!("unknown source class {c:?}"))))
            .collect()
    }

    /// Mel frames fed to the codec: the STFT frame count rounded down to a multiple of 4.
    pub fn codec_frames(&self) -> usize {
        let len = (self.dataset.clip_seconds * self.dsp.sample_rate as f64).round() as usize;
        (len / self.dsp.hop + 1) / 4 * 4
    }

    pub fn clip_len(&self) -> usize {
        (self.dataset.clip_seconds * self.dsp.sample_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = &self.dataset;
        let classes = self.source_classes()?;
        let mut uniq = classes.clone();
        uniq.sort_by_key(|c| c.name());
        uniq.dedup();
        if uniq.len() != classes.len() {
            return bad("dataset.classes contains duplicates".into());
        }
        if classes.len() < 2 {
            return bad(format!("need at least 2 source classes, got {}", classes.len()));
        }
        if d.mixtures_per_class == 0 {
            return bad("dataset.mixtures_per_class must be positive".into());
        }
        let [lo, hi] = d.snr_db;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= -60.0 && hi <= 60.0) {
            return bad(format!("dataset.snr_db {:?} must be an ordered range within [-60, 60]", d.snr_db));
        }
        let [llo, lhi] = d.lufs;
        if !(llo.is_finite() && lhi.is_finite() && llo <= lhi && lhi <= 0.0) {
            return bad(format!("dataset.lufs {:?} must be an ordered range at or below 0", d.lufs));
        }
        if d.splits.iter().any(|f| !(*f >= 0.0)) || (d.splits.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("dataset.splits {:?} must be non-negative and sum to 1", d.splits));
        }
        if !(d.clip_seconds > 0.0 && d.clip_seconds <= 60.0) {
            return bad(format!("dataset.clip_seconds {} out of range", d.clip_seconds));
        }
        let p = &self.dsp;
        if p.sample_rate != rfsep_dsp::SAMPLE_RATE {
            return bad(format!("dsp.sample_rate must be {}", rfsep_dsp::SAMPLE_RATE));
        }
        if p.hop == 0 || p.n_fft < 2 || p.n_fft % 2 != 0 || p.hop > p.n_fft {
            return bad(format!("dsp n_fft {} / hop {} invalid", p.n_fft, p.hop));
        }
        if p.n_mels == 0 || p.n_mels % 8 != 0 || p.n_mels > p.n_fft / 2 {
            return bad(format!("dsp.n_mels {} must be a positive multiple of 8 below n_fft/2", p.n_mels));
        }
        if self.codec_frames() < 8 {
            return bad("clip too short for the codec".into());
        }
        let positive = [
            ("vae.batch", self.vae.batch),
            ("classifier.batch", self.classifier.batch),
            ("flow.batch", self.flow.batch),
            ("flow.base_width", self.flow.base_width),
            ("flow.film_hidden", self.flow.film_hidden),
            ("diffusion.batch", self.diffusion.batch),
            ("sampler.steps", self.sampler.steps),
            ("sampler.batch", self.sampler.batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, lr) in [
            ("vae.lr", self.vae.lr),
            ("classifier.lr", self.classifier.lr),
            ("flow.lr", self.flow.lr),
            ("diffusion.lr", self.diffusion.lr),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.vae.beta >= 0.0) {
            return bad("vae.beta must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.flow.sigma_min) {
            return bad(format!("flow.sigma_min {} must lie in [0, 1)", self.flow.sigma_min));
        }
        crate::flow::DiffusionSchedule::new(&self.diffusion.schedule).map_err(|e| Error::Config(e.to_string()))?;
        if self.sampler.bench_steps.is_empty() || self.sampler.bench_steps.contains(&0) {
            return bad("sampler.bench_steps must be non-empty and positive".into());
        }
        if self.sampler.bench_steps.iter().any(|&n| n > self.diffusion.schedule.steps) {
            return bad("sampler.bench_steps may not exceed the diffusion step count".into());
        }
        Ok(())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in [Preset::Desk, Preset::Acceptance, Preset::Tiny, Preset::Large] {
            ExperimentConfig::preset(p).validate().unwrap();
        }
        assert_eq!(ExperimentConfig::preset(Preset::Desk).codec_frames(), 100);
    }

    #[test]
    fn json_round_trip_and_hash() {
        let c = ExperimentConfig::preset(Preset::Acceptance);
        let back = ExperimentConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 64);
        let mut d = c.clone();
        d.seed += 1;
        assert_ne!(d.hash(), c.hash());
    }

    #[test]
    fn resume_key_ignores_step_count() {
        let c = ExperimentConfig::preset(Preset::Tiny);
        let mut longer = c.clone();
        longer.flow.steps += 10;
        longer.diffusion.steps += 3;
        assert_eq!(c.resume_key("flow"), longer.resume_key("flow"));
        assert_eq!(c.resume_key("vae"), longer.resume_key("vae"));
        longer.vae.steps += 1;
        assert_ne!(c.resume_key("flow"), longer.resume_key("flow"));
        assert_eq!(c.resume_key("vae"), longer.resume_key("vae"));
    }

    #[test]
    fn rejects_invalid_values() {
        let base = ExperimentConfig::preset(Preset::Tiny);
        let mut c = base.clone();
        c.dataset.snr_db = [-70.0, 0.0];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.dataset.classes = vec!["sine".into()];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.dataset.classes.push("banjo".into());
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.flow.sigma_min = 1.0;
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_json("{\"seed\": 1}").is_err());
        let mut json: serde_json::Value = serde_json::from_str(&base.to_json()).unwrap();
        json["surprise"] = 1.into();
        assert!(ExperimentConfig::from_json(&json.to_string()).is_err());
    }
}
