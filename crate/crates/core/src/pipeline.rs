//! Separation, evaluation and the step-count benchmark.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rfsep_dsp::{wav_write, Waveform};
use rfsep_tensor::rng::mix64;
use rfsep_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::classifier::QueryClassifier;
use crate::codec::Vae;
use crate::config::ExperimentConfig;
use crate::dataset::{Dataset, Split};
use crate::error::{io_err, Error, Result};
use crate::flow::{ddim_integrate, initial_noise, integrate, DiffusionSchedule, Solver};
use crate::frontend::Frontend;
use crate::layout::{ensure_parent, Layout};
use crate::metrics::{embedding_stats, frechet_distance, linear_fit_r2, log_spectral_distance, si_sdr, EmbedStats, MetricSummary};
use crate::plot::{line_chart, spectrogram_panels, Series};
use crate::train::{chunked, concat_outer, load_classifier, load_vae, load_vfield, vocab_of, MelCorpus, ModelKind};
use crate::vfield::VField;

/// Which generative model produces the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Flow,
    Diffusion,
}

impl Generator {
    pub fn name(self) -> &'static str {
        match self {
            Generator::Flow => "flow",
            Generator::Diffusion => "diffusion",
        }
    }

    pub fn kind(self) -> ModelKind {
        match self {
            Generator::Flow => ModelKind::Flow,
            Generator::Diffusion => ModelKind::Diffusion,
        }
    }
}

impl std::str::FromStr for Generator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Generator::Flow),
            "diffusion" => Ok(Generator::Diffusion),
            other => Err(Error::Invalid(format!("unknown model {other:?} (flow, diffusion)"))),
        }
    }
}

/// A trained generator with its sampler.
pub struct Sampler {
    pub net: VField,
    pub generator: Generator,
    pub solver: Solver,
    pub schedule: DiffusionSchedule,
}

impl Sampler {
    pub fn load(cfg: &ExperimentConfig, layout: &Layout, generator: Generator) -> Result<Self> {
        Ok(Self {
            net: load_vfield(layout, generator.kind())?,
            generator,
            solver: cfg.sampler.solver,
            schedule: DiffusionSchedule::new(&cfg.diffusion.schedule)?,
        })
    }

    /// Latents for standardised mixture latents `zm`, one seed per item,
    /// processed `chunk` items at a time.
    pub fn sample(&self, zm: &Tensor, query_ids: &[usize], seeds: &[u64], steps: usize, chunk: usize) -> Result<Tensor> {
        let n = zm.shape()[0];
        if query_ids.len() != n || seeds.len() != n {
            return Err(Error::Invalid(format!("{n} latents, {} queries, {} seeds", query_ids.len(), seeds.len())));
        }
        let field = |x: &Tensor, ts: &[f64], q: &[usize]| self.net.predict(x, ts, q);
        let mut start = 0;
        chunked(zm, chunk, |zc| {
            let b = zc.shape()[0];
            let (ids, sd) = (&query_ids[start..start + b], &seeds[start..start + b]);
            start += b;
            let z0 = (0..b)
                .map(|i| initial_noise(&zc.slice_outer(i, i + 1)?, sd[i]))
                .collect::<Result<Vec<_>>>()?;
            let z0 = concat_outer(&z0.iter().collect::<Vec<_>>())?;
            match self.generator {
                Generator::Flow => integrate(field, &z0, zc, ids, steps, self.solver),
                Generator::Diffusion => ddim_integrate(field, &z0, zc, ids, steps, &self.schedule),
            }
        })
    }
}

/// Seed of the initial noise for a mixture with manifest seed `seed`.
pub fn sampling_seed(seed: u64) -> u64 {
    mix64(seed ^ 0x7361_6d70)
}

pub fn encode_mixtures(vae: &Vae, mels: &Tensor, chunk: usize) -> Result<Tensor> {
    chunked(mels, chunk, |c| vae.encode_standardized(c))
}

pub fn decode_latents(vae: &Vae, z: &Tensor, chunk: usize) -> Result<Tensor> {
    chunked(z, chunk, |c| vae.decode_standardized(c))
}

/// Every intermediate of one separation.
pub struct Separation {
    pub estimate: Waveform,
    /// `[chunks, 1, frames, mels]`
    pub mixture_mel: Tensor,
    pub estimate_mel: Tensor,
    pub zm: Tensor,
    pub z1: Tensor,
}

/// Separate a waveform of any length: it is cut into codec-sized windows,
/// each window is separated, and the vocoded windows are concatenated.
pub fn separate_waveform(
    cfg: &ExperimentConfig,
    vae: &Vae,
    sampler: &Sampler,
    fe: &Frontend,
    mixture: &Waveform,
    query_id: usize,
    steps: usize,
    seed: u64,
) -> Result<Separation> {
    if mixture.is_empty() {
        return Err(Error::Invalid("mixture is empty".into()));
    }
    let win = cfg.clip_len();
    let windows: Vec<Waveform> = mixture
        .samples()
        .chunks(win)
        .map(|c| Waveform::new(c.to_vec(), mixture.sample_rate()))
        .collect::<std::result::Result<_, _>>()?;
    let mels = fe.mel_batch(&windows)?;
    let zm = encode_mixtures(vae, &mels, cfg.sampler.batch)?;
    let seeds: Vec<u64> = (0..windows.len()).map(|i| mix64(sampling_seed(seed) ^ i as u64)).collect();
    let z1 = sampler.sample(&zm, &vec![query_id; windows.len()], &seeds, steps, cfg.sampler.batch)?;
    let est = decode_latents(vae, &z1, cfg.sampler.batch)?;
    let mut out = Vec::with_capacity(mixture.len());
    for (i, w) in windows.iter().enumerate() {
        out.extend_from_slice(fe.vocode(&est.slice_outer(i, i + 1)?, w.len())?.samples());
    }
    Ok(Separation {
        estimate: Waveform::new(out, mixture.sample_rate())?,
        mixture_mel: mels,
        estimate_mel: est,
        zm,
        z1,
    })
}

/// Frames of all windows joined along time, as `[frames, mels]`.
pub fn join_windows(mels: &Tensor) -> Result<Tensor> {
    let s = mels.shape();
    Ok(mels.clone().reshape([s[0] * s[2], s[3]])?)
}

/// Set-level and per-item scores of one system against the clean targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub system: String,
    /// Fréchet distance between classifier embeddings of the outputs and of the clean targets.
    pub frechet: f64,
    pub lsd: MetricSummary,
    /// Probability the classifier assigns to the query class.
    pub consistency: MetricSummary,
    /// On the vocoded subset only.
    pub si_sdr: MetricSummary,
}

/// References shared by every system scored on a split.
pub struct References<'a> {
    pub target_mels: &'a Tensor,
    pub target_stats: EmbedStats,
    pub query_ids: &'a [usize],
    pub target_wavs: &'a [Waveform],
    pub classifier: &'a QueryClassifier,
}

impl<'a> References<'a> {
    pub fn new(
        target_mels: &'a Tensor,
        query_ids: &'a [usize],
        target_wavs: &'a [Waveform],
        classifier: &'a QueryClassifier,
    ) -> Result<Self> {
        Ok(Self {
            target_stats: embedding_stats(&classifier.embeddings(target_mels)?)?,
            target_mels,
            query_ids,
            target_wavs,
            classifier,
        })
    }

    /// Score `mels` (aligned with the targets) and the waveforms of the first items.
    pub fn score(&self, system: &str, mels: &Tensor, wavs: &[Waveform]) -> Result<MetricRow> {
        let n = self.target_mels.shape()[0];
        if mels.shape() != self.target_mels.shape() {
            return Err(Error::Invalid(format!("{:?} estimates for {:?} targets", mels.shape(), self.target_mels.shape())));
        }
        let stats = embedding_stats(&self.classifier.embeddings(mels)?)?;
        let lsd = (0..n)
            .map(|i| {
                log_spectral_distance(mels.slice_outer(i, i + 1)?.data(), self.target_mels.slice_outer(i, i + 1)?.data())
            })
            .collect::<Result<Vec<_>>>()?;
        let sdr = wavs
            .iter()
            .zip(self.target_wavs)
            .map(|(e, t)| si_sdr(e.samples(), t.samples()))
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricRow {
            system: system.to_string(),
            frechet: frechet_distance(&stats, &self.target_stats)?,
            lsd: MetricSummary::new(lsd),
            consistency: MetricSummary::new(self.classifier.consistency_scores(mels, self.query_ids)?),
            si_sdr: MetricSummary::new(sdr),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub model: Generator,
    pub steps: usize,
    pub items: usize,
    pub vocoded_items: usize,
    pub config_hash: String,
    /// "unprocessed" (the mixture itself) first, then the model.
    pub rows: Vec<MetricRow>,
}

impl EvalReport {
    pub fn row(&self, system: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.system == system)
    }

    pub fn file_name(model: Generator, steps: usize, split: Split) -> String {
        format!("metrics_{}_n{steps}_{}.json", model.name(), split.name())
    }
}

/// Test-split data loaded once and reused by evaluation, benchmarking and
/// the query-swap study.
pub struct EvalSet {
    pub cfg: ExperimentConfig,
    pub ds: Dataset,
    pub fe: Frontend,
    pub corpus: MelCorpus,
    pub vae: Vae,
    pub classifier: QueryClassifier,
    pub zm: Tensor,
    pub seeds: Vec<u64>,
    pub split: Split,
}

impl EvalSet {
    pub fn load(cfg: &ExperimentConfig, layout: &Layout, split: Split) -> Result<Self> {
        let vae = load_vae(layout)?;
        let classifier = load_classifier(layout)?;
        let ds = Dataset::load(&layout.data())?;
        let fe = Frontend::new(cfg)?;
        let corpus = MelCorpus::build(&ds, split, &fe, &vocab_of(cfg)?)?;
        if corpus.len() < 2 {
            return Err(Error::Invalid(format!("the {} split needs at least 2 items", split.name())));
        }
        let zm = encode_mixtures(&vae, &corpus.mixture, cfg.sampler.batch)?;
        let seeds = corpus.records.iter().map(|r| sampling_seed(r.seed)).collect();
        Ok(Self {
            cfg: cfg.clone(),
            ds,
            fe,
            corpus,
            vae,
            classifier,
            zm,
            seeds,
            split,
        })
    }

    pub fn vocoded_items(&self) -> usize {
        self.cfg.sampler.vocode_items.unwrap_or(usize::MAX).min(self.corpus.len())
    }

    /// Decoded estimate mels for the target queries.
    pub fn estimate(&self, sampler: &Sampler, steps: usize) -> Result<Tensor> {
        self.estimate_for(sampler, steps, &self.corpus.target_ids)
    }

    pub fn estimate_for(&self, sampler: &Sampler, steps: usize, ids: &[usize]) -> Result<Tensor> {
        let z1 = sampler.sample(&self.zm, ids, &self.seeds, steps, self.cfg.sampler.batch)?;
        decode_latents(&self.vae, &z1, self.cfg.sampler.batch)
    }

    pub fn vocode(&self, mels: &Tensor, k: usize) -> Result<Vec<Waveform>> {
        let len = self.cfg.clip_len();
        (0..k).map(|i| self.fe.vocode(&mels.slice_outer(i, i + 1)?, len)).collect()
    }

    fn waves(&self, k: usize, pick: impl Fn(crate::dataset::Triple) -> Waveform) -> Result<Vec<Waveform>> {
        self.corpus.records[..k].iter().map(|r| Ok(pick(self.ds.read(r)?))).collect()
    }

    pub fn target_wavs(&self, k: usize) -> Result<Vec<Waveform>> {
        self.waves(k, |t| t.target)
    }

    pub fn mixture_wavs(&self, k: usize) -> Result<Vec<Waveform>> {
        self.waves(k, |t| t.mixture)
    }
}

/// Score the model's estimates and the unprocessed mixtures on a split;
/// writes the metrics JSON, vocoded estimates and a few triptychs under `eval/`.
pub fn evaluate(cfg: &ExperimentConfig, layout: &Layout, split: Split, model: Generator, steps: usize) -> Result<EvalReport> {
    let set = EvalSet::load(cfg, layout, split)?;
    let sampler = Sampler::load(cfg, layout, model)?;
    let est = set.estimate(&sampler, steps)?;
    let k = set.vocoded_items();
    let est_wavs = set.vocode(&est, k)?;
    let targets = set.target_wavs(k)?;
    let refs = References::new(&set.corpus.target, &set.corpus.target_ids, &targets, &set.classifier)?;
    let rows = vec![
        refs.score("unprocessed", &set.corpus.mixture, &set.mixture_wavs(k)?)?,
        refs.score(model.name(), &est, &est_wavs)?,
    ];
    let report = EvalReport {
        split,
        model,
        steps,
        items: set.corpus.len(),
        vocoded_items: k,
        config_hash: cfg.hash(),
        rows,
    };
    let dir = layout.eval_dir();
    let est_dir = dir.join(format!("estimates_{}_n{steps}_{}", model.name(), split.name()));
    for (i, w) in est_wavs.iter().enumerate() {
        let name = Path::new(&set.corpus.records[i].mixture_path)
            .file_name()
            .map(|f| f.to_string_lossy().replace("_mix", "_est"))
            .unwrap_or_else(|| format!("{i:05}_est.wav"));
        let p = est_dir.join(name);
        ensure_parent(&p)?;
        wav_write(&p, w)?;
    }
    for i in 0..k.min(4) {
        let item = |t: &Tensor| t.slice_outer(i, i + 1);
        spectrogram_panels(
            &[&item(&set.corpus.mixture)?, &item(&est)?, &item(&set.corpus.target)?],
            set.fe.n_mels(),
            &est_dir.join(format!("triptych_{i}.png")),
        )?;
    }
    write_json(&dir.join(EvalReport::file_name(model, steps, split)), &report)?;
    Ok(report)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(v).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub steps: usize,
    pub sampler_seconds_per_item: f64,
    /// Codec decoding plus Griffin–Lim, per item.
    pub decode_vocoder_seconds_per_item: f64,
    pub frechet: f64,
    pub consistency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub split: Split,
    pub items: usize,
    pub rows: Vec<BenchRow>,
    /// Least-squares fit of flow sampler seconds per item against steps.
    pub flow_time_slope: f64,
    pub flow_time_intercept: f64,
    pub flow_time_r2: f64,
}

impl BenchReport {
    pub fn row(&self, model: &str, steps: usize) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.model == model && r.steps == steps)
    }
}

/// Items vocoded per benchmark row for the decode/vocoder timing.
const BENCH_VOCODE_ITEMS: usize = 4;

/// Sweep the configured step counts for both generators on a split.
/// Writes `bench/bench_steps.{csv,json}` and two PNG charts.
pub fn bench_steps(cfg: &ExperimentConfig, layout: &Layout, split: Split) -> Result<BenchReport> {
    let flow = Sampler::load(cfg, layout, Generator::Flow)?;
    let diffusion = Sampler::load(cfg, layout, Generator::Diffusion)?;
    let set = EvalSet::load(cfg, layout, split)?;
    let n = set.corpus.len();
    let refs = References::new(&set.corpus.target, &set.corpus.target_ids, &[], &set.classifier)?;
    let un = refs.score("unprocessed", &set.corpus.mixture, &[])?;
    let mut rows = vec![BenchRow {
        model: "unprocessed".into(),
        steps: 0,
        sampler_seconds_per_item: 0.0,
        decode_vocoder_seconds_per_item: 0.0,
        frechet: un.frechet,
        consistency: un.consistency.mean,
    }];
    let kv = BENCH_VOCODE_ITEMS.min(n);
    for s in [&flow, &diffusion] {
        for &steps in &cfg.sampler.bench_steps {
            let t0 = Instant::now();
            let z1 = s.sample(&set.zm, &set.corpus.target_ids, &set.seeds, steps, cfg.sampler.batch)?;
            let sampler_time = t0.elapsed().as_secs_f64() / n as f64;
            let t1 = Instant::now();
            let est = decode_latents(&set.vae, &z1, cfg.sampler.batch)?;
            let decode_time = t1.elapsed().as_secs_f64() / n as f64;
            let t2 = Instant::now();
            set.vocode(&est, kv)?;
            let vocode_time = t2.elapsed().as_secs_f64() / kv as f64;
            let row = refs.score(s.generator.name(), &est, &[])?;
            rows.push(BenchRow {
                model: s.generator.name().into(),
                steps,
                sampler_seconds_per_item: sampler_time,
                decode_vocoder_seconds_per_item: decode_time + vocode_time,
                frechet: row.frechet,
                consistency: row.consistency.mean,
            });
        }
    }
    let flow_rows: Vec<&BenchRow> = rows.iter().filter(|r| r.model == "flow").collect();
    let xs: Vec<f64> = flow_rows.iter().map(|r| r.steps as f64).collect();
    let ys: Vec<f64> = flow_rows.iter().map(|r| r.sampler_seconds_per_item).collect();
    let (slope, intercept, r2) = linear_fit_r2(&xs, &ys)?;
    let report = BenchReport {
        split,
        items: n,
        rows,
        flow_time_slope: slope,
        flow_time_intercept: intercept,
        flow_time_r2: r2,
    };
    write_bench(&report, &layout.bench_dir())?;
    Ok(report)
}

fn write_bench(report: &BenchReport, dir: &Path) -> Result<()> {
    let mut csv = String::from("model,steps,sampler_seconds_per_item,decode_vocoder_seconds_per_item,frechet,consistency\n");
    for r in &report.rows {
        csv += &format!(
            "{},{},{},{},{},{}\n",
            r.model, r.steps, r.sampler_seconds_per_item, r.decode_vocoder_seconds_per_item, r.frechet, r.consistency
        );
    }
    let csv_path = dir.join("bench_steps.csv");
    ensure_parent(&csv_path)?;
    std::fs::write(&csv_path, csv).map_err(io_err(&csv_path))?;
    write_json(&dir.join("bench_steps.json"), report)?;
    let series = |f: &dyn Fn(&BenchRow) -> f64| -> Vec<Series> {
        [("flow", [214, 39, 40]), ("diffusion", [31, 119, 180])]
            .iter()
            .map(|(m, c)| Series {
                color: *c,
                points: report.rows.iter().filter(|r| r.model == *m).map(|r| (r.steps as f64, f(r))).collect(),
            })
            .collect()
    };
    line_chart(&series(&|r| r.sampler_seconds_per_item), false, &dir.join("bench_steps_time.png"))?;
    line_chart(&series(&|r| r.frechet), true, &dir.join("bench_steps_frechet.png"))
}

/// Outcome of separating each mixture once per source class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySwapReport {
    pub items: usize,
    /// Fraction of mixtures where both estimates are classified as their query.
    pub both_match: f64,
    /// Fraction of all estimates classified as their query.
    pub per_estimate: f64,
}

/// For the first `items` mixtures of the set, separate with the target's
/// query and with the noise's query, and classify both estimates.
pub fn query_swap(set: &EvalSet, sampler: &Sampler, steps: usize, items: usize) -> Result<QuerySwapReport> {
    let n = items.min(set.corpus.len());
    if n == 0 {
        return Err(Error::Invalid("query swap needs at least one item".into()));
    }
    let a = set.estimate_for(sampler, steps, &set.corpus.target_ids)?.slice_outer(0, n)?;
    let b = set.estimate_for(sampler, steps, &set.corpus.noise_ids)?.slice_outer(0, n)?;
    let pa = set.classifier.predict(&a)?;
    let pb = set.classifier.predict(&b)?;
    let ok_a: Vec<bool> = (0..n).map(|i| pa[i] == set.corpus.target_ids[i]).collect();
    let ok_b: Vec<bool> = (0..n).map(|i| pb[i] == set.corpus.noise_ids[i]).collect();
    let both = (0..n).filter(|&i| ok_a[i] && ok_b[i]).count();
    let single = ok_a.iter().chain(&ok_b).filter(|&&v| v).count();
    Ok(QuerySwapReport {
        items: n,
        both_match: both as f64 / n as f64,
        per_estimate: single as f64 / (2 * n) as f64,
    })
}

/// Default output paths of `separate`.
pub fn separation_paths(layout: &Layout, mixture: &Path, query: &str) -> (PathBuf, PathBuf) {
    let stem = mixture.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "mixture".into());
    let q = query.replace(' ', "_");
    let dir = layout.separate_dir();
    (dir.join(format!("{stem}_{q}.wav")), dir.join(format!("{stem}_{q}.mel.png")))
}
