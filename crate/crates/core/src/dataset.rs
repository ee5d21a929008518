//! Synthetic mixture corpus: WAV files plus a JSON-lines manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rfsep_dsp::{measure_loudness, mix_at_snr, synth_source, wav_read, wav_write, SourceClass, SourceSpec, Waveform};
use rfsep_tensor::SeededRng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{io_err, Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split {other:?} (train, val, test)"))),
        }
    }
}

/// One mixture. Paths are relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub mixture_path: String,
    pub target_path: String,
    pub noise_path: String,
    pub query_text: String,
    pub snr_db: f64,
    /// Product of the peak-protection gain and the loudness-placement gain,
    /// applied equally to target and noise.
    pub gain_applied: f64,
    /// Mixture seed; the two source seeds are derived from it.
    pub seed: u64,
    pub split: Split,
    pub target_class: String,
    pub noise_class: String,
    pub target_seed: u64,
    pub noise_seed: u64,
    pub lufs: f64,
}

/// Loaded manifest plus the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

/// A mixture's three waveforms.
pub struct Triple {
    pub mixture: Waveform,
    pub target: Waveform,
    pub noise: Waveform,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "no dataset manifest at {} (run gen-data first)",
                path.display()
            )));
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|source| Error::Json {
                    context: format!("{} line {}", path.display(), i + 1),
                    source,
                })
            })
            .collect::<Result<Vec<ManifestRecord>>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            records,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn read(&self, rec: &ManifestRecord) -> Result<Triple> {
        let rd = |p: &str| -> Result<Waveform> { Ok(wav_read(self.root.join(p))?) };
        Ok(Triple {
            mixture: rd(&rec.mixture_path)?,
            target: rd(&rec.target_path)?,
            noise: rd(&rec.noise_path)?,
        })
    }
}

/// Parameters of one mixture, drawn before any audio is synthesized.
#[derive(Debug, Clone, PartialEq)]
pub struct MixturePlan {
    pub index: usize,
    pub seed: u64,
    pub target: SourceClass,
    pub noise: SourceClass,
    pub snr_db: f64,
    pub lufs: f64,
    pub split: Split,
    pub target_seed: u64,
    pub noise_seed: u64,
}

/// Split of the `j`-th of `n` mixtures sharing a target class.
fn split_of(j: usize, n: usize, fractions: [f64; 3]) -> Split {
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = (fractions[1] * n as f64).round() as usize;
    if j < n_train {
        Split::Train
    } else if j < n_train + n_val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Mixture `i` targets class `i mod K`; the noise class is drawn from the
/// other classes, so target and noise never share a class. Splits are
/// stratified by target class.
pub fn plan_mixtures(cfg: &ExperimentConfig) -> Result<Vec<MixturePlan>> {
    cfg.validate()?;
    let classes = cfg.source_classes()?;
    let k = classes.len();
    let per = cfg.dataset.mixtures_per_class;
    let d = &cfg.dataset;
    Ok((0..k * per)
        .map(|i| {
            let seed = rfsep_tensor::rng::mix64(cfg.seed ^ rfsep_tensor::rng::mix64(i as u64 + 1));
            let mut rng = SeededRng::derive(seed, 1);
            let target = classes[i % k];
            let mut other = rng.below(k - 1);
            if other >= i % k {
                other += 1;
            }
            MixturePlan {
                index: i,
                seed,
                target,
                noise: classes[other],
                snr_db: rng.uniform_range(d.snr_db[0], d.snr_db[1]),
                lufs: rng.uniform_range(d.lufs[0], d.lufs[1]),
                split: split_of(i / k, per, d.splits),
                target_seed: rng.next_u64(),
                noise_seed: rng.next_u64(),
            }
        })
        .collect())
}

/// Synthesize, mix at the planned SNR and place at the planned loudness.
/// If loudness placement would clip, the gain is reduced to keep every
/// component within full scale.
pub fn render_mixture(plan: &MixturePlan, clip_seconds: f64) -> Result<(Triple, f64)> {
    let t = synth_source(&SourceSpec::draw(plan.target, clip_seconds, plan.target_seed))?;
    let n = synth_source(&SourceSpec::draw(plan.noise, clip_seconds, plan.noise_seed))?;
    let mix = mix_at_snr(&t, &n, plan.snr_db)?;
    let lufs_gain = 10f64.powf((plan.lufs - measure_loudness(&mix.mixture)?) / 20.0);
    let peak = mix.mixture.peak().max(mix.target.peak()).max(mix.noise.peak());
    let gain = lufs_gain.min((1.0 - 1e-9) / peak);
    Ok((
        Triple {
            mixture: mix.mixture.scaled(gain)?,
            target: mix.target.scaled(gain)?,
            noise: mix.noise.scaled(gain)?,
        },
        gain * mix.joint_gain,
    ))
}

/// Write every mixture's WAVs under `out/wav/<split>/` and the manifest to
/// `out/manifest.jsonl`. Re-running with the same config rewrites identical bytes.
pub fn gen_dataset(cfg: &ExperimentConfig, out: &Path) -> Result<Dataset> {
    let plans = plan_mixtures(cfg)?;
    for s in [Split::Train, Split::Val, Split::Test] {
        let dir = out.join("wav").join(s.name());
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    let mut records = Vec::with_capacity(plans.len());
    for p in &plans {
        let (tri, gain) = render_mixture(p, cfg.dataset.clip_seconds)?;
        let stem = format!("wav/{}/{:05}", p.split.name(), p.index);
        let rec = ManifestRecord {
            mixture_path: format!("{stem}_mix.wav"),
            target_path: format!("{stem}_target.wav"),
            noise_path: format!("{stem}_noise.wav"),
            query_text: p.target.name().to_string(),
            snr_db: p.snr_db,
            gain_applied: gain,
            seed: p.seed,
            split: p.split,
            target_class: p.target.name().to_string(),
            noise_class: p.noise.name().to_string(),
            target_seed: p.target_seed,
            noise_seed: p.noise_seed,
            lufs: p.lufs,
        };
        for (path, w) in [
            (&rec.mixture_path, &tri.mixture),
            (&rec.target_path, &tri.target),
            (&rec.noise_path, &tri.noise),
        ] {
            wav_write(out.join(path), w)?;
        }
        records.push(rec);
    }
    let path = out.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    for r in &records {
        let line = serde_json::to_string(r).expect("record serializes");
        writeln!(f, "{line}").map_err(io_err(&path))?;
    }
    Ok(Dataset {
        root: out.to_path_buf(),
        records,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::config::Preset;

    fn cfg(per_class: usize) -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(Preset::Tiny);
        c.dataset.mixtures_per_class = per_class;
        c
    }

    #[test]
    fn plans_pair_distinct_classes_and_balance_targets() {
        let plans = plan_mixtures(&cfg(200)).unwrap();
        assert_eq!(plans.len(), 1200);
        assert!(plans.iter().all(|p| p.target != p.noise));
        for c in SourceClass::ALL {
            assert_eq!(plans.iter().filter(|p| p.target == c).count(), 200);
        }
        assert!(plans.iter().all(|p| (-15.0..15.0).contains(&p.snr_db)));
        let count = |s| plans.iter().filter(|p| p.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (960, 120, 120));
    }

    #[test]
    fn splits_share_no_source_seed() {
        let plans = plan_mixtures(&cfg(200)).unwrap();
        let seeds = |s: Split| -> HashSet<u64> {
            plans
                .iter()
                .filter(|p| p.split == s)
                .flat_map(|p| [p.target_seed, p.noise_seed])
                .collect()
        };
        let (tr, va, te) = (seeds(Split::Train), seeds(Split::Val), seeds(Split::Test));
        assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
    }

    #[test]
    fn rendered_mixture_hits_snr_and_loudness() {
        for p in plan_mixtures(&cfg(2)).unwrap() {
            let (tri, _) = render_mixture(&p, 1.0).unwrap();
            let snr = rfsep_dsp::snr_db(tri.target.samples(), tri.noise.samples());
            assert!((snr - p.snr_db).abs() < 1e-6);
            let sum: Vec<f64> = tri.target.samples().iter().zip(tri.noise.samples()).map(|(a, b)| a + b).collect();
            assert!(sum.iter().zip(tri.mixture.samples()).all(|(a, b)| (a - b).abs() < 1e-12));
            let l = rfsep_dsp::measure_loudness(&tri.mixture).unwrap();
            assert!(l <= p.lufs + 1e-6, "{l} vs {}", p.lufs);
        }
    }
}
