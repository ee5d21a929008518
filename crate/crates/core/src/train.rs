//! Training loops for the codec, the query classifier, the flow network and
//! the diffusion baseline. Every step draws from `SeededRng::derive(seed, step)`
//! and Adam state is checkpointed, so a resumed run is bitwise identical to
//! an uninterrupted one.

use std::fmt::Write as _;
use std::path::Path;

use rfsep_tensor::rng::mix64;
use rfsep_tensor::{Bound, ParamSet, SeededRng, Tape, Tensor, Var};
use serde_json::json;

use crate::checkpoint::Checkpoint;
use crate::classifier::{gather_batch, train_query_classifier, QueryClassifier};
use crate::codec::{init_vae, vae_loss, LatentStats, Vae, VaeShape, LATENT_CHANNELS};
use crate::condition::QueryVocab;
use crate::config::ExperimentConfig;
use crate::dataset::{Dataset, ManifestRecord, Split};
use crate::error::{io_err, Error, Result};
use crate::flow::{ddpm_training_step, rfm_training_step, DiffusionSchedule, TrainingStep};
use crate::frontend::Frontend;
use crate::layout::{ensure_parent, Layout};
use crate::optim::Optimizer;
use crate::vfield::{vf_forward, VField, VFieldConfig};

/// Steps between intermediate checkpoints.
pub const CHECKPOINT_EVERY: usize = 1000;
/// Items per forward pass when encoding a corpus.
const ENCODE_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Vae,
    Classifier,
    Flow,
    Diffusion,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Vae => "vae",
            ModelKind::Classifier => "classifier",
            ModelKind::Flow => "flow",
            ModelKind::Diffusion => "diffusion",
        }
    }

    fn param_prefix(self) -> &'static str {
        match self {
            ModelKind::Vae => "vae.",
            ModelKind::Classifier => "classifier.",
            ModelKind::Flow | ModelKind::Diffusion => "",
        }
    }

    /// Seed of this model's initialisation and minibatch streams.
    pub fn seed(self, cfg: &ExperimentConfig) -> u64 {
        let stream = match self {
            ModelKind::Vae => 0x7661_6500,
            ModelKind::Classifier => 0x636c_6600,
            ModelKind::Flow => 0x666c_6f00,
            ModelKind::Diffusion => 0x6469_6600,
        };
        mix64(cfg.seed ^ mix64(stream))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Continue from an existing checkpoint of the same model and config.
    pub resume: bool,
    /// Print a progress line to stderr every few hundred steps.
    pub progress: bool,
}

/// Log-mels of one split, with the vocabulary ids of both sources.
pub struct MelCorpus {
    pub mixture: Tensor,
    pub target: Tensor,
    pub noise: Tensor,
    pub target_ids: Vec<usize>,
    pub noise_ids: Vec<usize>,
    pub records: Vec<ManifestRecord>,
}

impl MelCorpus {
    pub fn build(ds: &Dataset, split: Split, fe: &Frontend, vocab: &QueryVocab) -> Result<Self> {
        let records: Vec<ManifestRecord> = ds.split(split).into_iter().cloned().collect();
        if records.is_empty() {
            return Err(Error::Invalid(format!("the {} split is empty", split.name())));
        }
        let (mut mix, mut tgt, mut noi) = (Vec::new(), Vec::new(), Vec::new());
        for r in &records {
            let tri = ds.read(r)?;
            mix.push(fe.mel(&tri.mixture)?);
            tgt.push(fe.mel(&tri.target)?);
            noi.push(fe.mel(&tri.noise)?);
        }
        let stack = |v: Vec<Tensor>| -> Result<Tensor> {
            let n = v.len();
            Ok(Tensor::stack(&v)?.reshape([n, 1, fe.frames(), fe.n_mels()])?)
        };
        Ok(Self {
            target_ids: records.iter().map(|r| vocab.id(&r.target_class)).collect::<Result<_>>()?,
            noise_ids: records.iter().map(|r| vocab.id(&r.noise_class)).collect::<Result<_>>()?,
            mixture: stack(mix)?,
            target: stack(tgt)?,
            noise: stack(noi)?,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Concatenate tensors along the leading axis.
pub fn concat_outer(parts: &[&Tensor]) -> Result<Tensor> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    let data: Vec<f32> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Ok(Tensor::new(shape, data)?)
}

/// Apply `f` to `[N, ...]` in chunks along the leading axis and re-concatenate.
pub fn chunked(x: &Tensor, chunk: usize, mut f: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let n = x.shape()[0];
    let outs = (0..n)
        .step_by(chunk.max(1))
        .map(|s| f(&x.slice_outer(s, (s + chunk).min(n))?))
        .collect::<Result<Vec<_>>>()?;
    concat_outer(&outs.iter().collect::<Vec<_>>())
}

pub fn vocab_of(cfg: &ExperimentConfig) -> Result<QueryVocab> {
    QueryVocab::new(&cfg.dataset.classes)
}

pub fn vfield_config(cfg: &ExperimentConfig) -> VFieldConfig {
    VFieldConfig {
        base_width: cfg.flow.base_width,
        latent_channels: LATENT_CHANNELS,
        film_hidden: cfg.flow.film_hidden,
        vocab_size: cfg.dataset.classes.len(),
    }
}

/// Per-step loss columns, written as CSV with a leading `step` column.
#[derive(Debug, Clone)]
struct LossLog {
    header: Vec<&'static str>,
    rows: Vec<Vec<f64>>,
}

impl LossLog {
    fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    fn write(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let mut s = format!("step,{}\n", self.header.join(","));
        for (i, r) in self.rows.iter().enumerate() {
            let cols: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            writeln!(s, "{i},{}", cols.join(",")).expect("string write");
        }
        std::fs::write(path, s).map_err(io_err(path))
    }

    /// Keep the first `k` rows of an earlier log.
    fn restore(&mut self, path: &Path, k: usize) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let rows: Vec<Vec<f64>> = text
            .lines()
            .skip(1)
            .take(k)
            .map(|l| l.split(',').skip(1).map(|v| v.parse::<f64>()).collect::<std::result::Result<Vec<_>, _>>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        if rows.len() != k {
            return Err(Error::Invalid(format!("{} has {} rows, checkpoint is at step {k}", path.display(), rows.len())));
        }
        self.rows = rows;
        Ok(())
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[i]).collect()
    }
}

fn base_meta(kind: ModelKind, cfg: &ExperimentConfig, step: usize, adam_step: u64) -> serde_json::Value {
    json!({
        "kind": kind.name(),
        "step": step,
        "adam_step": adam_step,
        "config_hash": cfg.hash(),
        "resume_key": cfg.resume_key(kind.name()),
        "classes": cfg.dataset.classes,
    })
}

fn merge(mut a: serde_json::Value, b: serde_json::Value) -> serde_json::Value {
    if let (Some(a), serde_json::Value::Object(b)) = (a.as_object_mut(), b) {
        a.extend(b);
    }
    a
}

fn load_kind(layout: &Layout, kind: ModelKind, hint: &str) -> Result<Checkpoint> {
    let path = layout.checkpoint(kind.name());
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "no {} checkpoint at {} (run {hint} first)",
            kind.name(),
            path.display()
        )));
    }
    let ck = Checkpoint::load(&path)?;
    if ck.meta_str("kind") != Some(kind.name()) {
        return Err(Error::Checkpoint {
            path,
            msg: format!("expected a {} checkpoint, found {:?}", kind.name(), ck.meta_str("kind")),
        });
    }
    Ok(ck)
}

/// If resuming, restore parameters, Adam state and the loss log; returns the start step.
fn try_resume(
    layout: &Layout,
    kind: ModelKind,
    cfg: &ExperimentConfig,
    total: usize,
    opts: &TrainOptions,
    params: &mut ParamSet,
    opt: &mut Optimizer,
    log: &mut LossLog,
) -> Result<usize> {
    let path = layout.checkpoint(kind.name());
    if !opts.resume || !path.exists() {
        return Ok(0);
    }
    let ck = load_kind(layout, kind, "")?;
    if ck.meta_str("resume_key") != Some(cfg.resume_key(kind.name()).as_str()) {
        return Err(Error::Config(format!(
            "{} was trained with a different configuration; cannot resume",
            path.display()
        )));
    }
    let k = ck.meta_u64("step").unwrap_or(0) as usize;
    if k > total {
        return Err(Error::Config(format!("checkpoint is at step {k}, beyond the configured {total} steps")));
    }
    let restored = ck.params(&[kind.param_prefix()]);
    let fresh: Vec<&String> = params.names().iter().collect();
    let names: Vec<&String> = restored.names().iter().filter(|n| !n.starts_with("adam.") && !n.starts_with("latent_stats.")).collect();
    if names != fresh {
        return Err(Error::Checkpoint {
            path,
            msg: "parameter set does not match the configured architecture".into(),
        });
    }
    for (dst, (_, src)) in params.tensors_mut().iter_mut().zip(restored.iter().filter(|(n, _)| !n.starts_with("adam.") && !n.starts_with("latent_stats."))) {
        *dst = src.clone();
    }
    opt.state = ck
        .adam(params, ck.meta_u64("adam_step").unwrap_or(0))
        .ok_or_else(|| Error::Checkpoint {
            path: path.clone(),
            msg: "optimizer state missing".into(),
        })?;
    log.restore(&layout.loss_csv(kind.name()), k)?;
    Ok(k)
}

/// The shared loop: one fresh tape per step, Adam update, periodic saves.
#[allow(clippy::too_many_arguments)]
fn run_steps(
    kind: ModelKind,
    params: &mut ParamSet,
    opt: &mut Optimizer,
    log: &mut LossLog,
    start: usize,
    total: usize,
    opts: &TrainOptions,
    mut step_fn: impl FnMut(usize, &mut Tape, &Bound) -> Result<(Var, Vec<f64>)>,
    mut save: impl FnMut(usize, &ParamSet, &Optimizer, &LossLog) -> Result<()>,
) -> Result<()> {
    for step in start..total {
        let mut tape = Tape::new();
        let b = params.bind(&mut tape, true);
        let (loss, mut cols) = step_fn(step, &mut tape, &b)?;
        let grads = tape.backward(loss)?;
        let g = b.grads(&grads, params);
        let norm = opt.step(params, g)?;
        cols.push(norm);
        if !cols[0].is_finite() {
            return Err(Error::Invalid(format!("{} loss diverged at step {step}", kind.name())));
        }
        log.rows.push(cols);
        if opts.progress && (step % 250 == 0 || step + 1 == total) {
            eprintln!("[{}] step {}/{} loss {:.5}", kind.name(), step + 1, total, log.rows[step][0]);
        }
        if (step + 1) % CHECKPOINT_EVERY == 0 || step + 1 == total {
            save(step + 1, params, opt, log)?;
        }
    }
    if start == total {
        save(total, params, opt, log)?;
    }
    Ok(())
}

fn save_model(
    layout: &Layout,
    kind: ModelKind,
    cfg: &ExperimentConfig,
    step: usize,
    params: &ParamSet,
    opt: &Optimizer,
    log: &LossLog,
    extra_tensors: Vec<(String, Tensor)>,
    extra_meta: serde_json::Value,
) -> Result<()> {
    let mut ck = Checkpoint::new(merge(base_meta(kind, cfg, step, opt.state.step), extra_meta));
    ck.push_params(params);
    for (n, t) in extra_tensors {
        ck.push(n, t);
    }
    ck.push_adam(params, &opt.state);
    ck.save(&layout.checkpoint(kind.name()))?;
    log.write(&layout.loss_csv(kind.name()))
}

fn open_dataset(cfg: &ExperimentConfig, layout: &Layout) -> Result<(Dataset, Frontend, QueryVocab)> {
    Ok((Dataset::load(&layout.data())?, Frontend::new(cfg)?, vocab_of(cfg)?))
}

/// Train the mel codec on every clean and mixed clip of the train split,
/// then fit the latent standardisation on the posterior means.
pub fn train_vae(cfg: &ExperimentConfig, layout: &Layout, opts: &TrainOptions) -> Result<Vae> {
    let (ds, fe, vocab) = open_dataset(cfg, layout)?;
    let corpus = MelCorpus::build(&ds, Split::Train, &fe, &vocab)?;
    let all = concat_outer(&[&corpus.target, &corpus.noise, &corpus.mixture])?;
    let shape = VaeShape::new(fe.frames(), fe.n_mels())?;
    let seed = ModelKind::Vae.seed(cfg);
    let mut params = init_vae(seed);
    let mut opt = Optimizer::new(&params, cfg.vae.lr, None);
    let mut log = LossLog::new(&["loss", "recon", "kl", "grad_norm"]);
    let total = cfg.vae.steps;
    let start = try_resume(layout, ModelKind::Vae, cfg, total, opts, &mut params, &mut opt, &mut log)?;
    let [lc, lh, lw] = shape.latent_shape();
    let m = all.shape()[0];
    let (batch, beta) = (cfg.vae.batch, cfg.vae.beta);
    let fit_stats = |params: &ParamSet| -> Result<LatentStats> {
        let vae = Vae {
            params: params.clone(),
            shape,
            stats: LatentStats::identity(LATENT_CHANNELS),
        };
        LatentStats::fit(&chunked(&all, ENCODE_CHUNK, |x| vae.encode_mu(x))?)
    };
    run_steps(
        ModelKind::Vae,
        &mut params,
        &mut opt,
        &mut log,
        start,
        total,
        opts,
        |step, tape, b| {
            let mut rng = SeededRng::derive(seed, step as u64 + 1);
            let idx: Vec<usize> = (0..batch).map(|_| rng.below(m)).collect();
            let eps = Tensor::randn_from([batch, lc, lh, lw], &mut rng);
            let x = tape.constant(gather_batch(&all, &idx)?);
            let l = vae_loss(tape, b, x, beta, &eps)?;
            let v = tape.value(l.total).item() as f64;
            Ok((l.total, vec![v, l.recon, l.kl]))
        },
        |step, params, opt, log| {
            let stats = fit_stats(params)?;
            save_model(
                layout,
                ModelKind::Vae,
                cfg,
                step,
                params,
                opt,
                log,
                vec![
                    ("latent_stats.mean".into(), Tensor::new([LATENT_CHANNELS], stats.mean.clone())?),
                    ("latent_stats.std".into(), Tensor::new([LATENT_CHANNELS], stats.std.clone())?),
                ],
                json!({"frames": shape.frames, "mels": shape.mels, "beta": beta}),
            )
        },
    )?;
    load_vae(layout)
}

pub fn load_vae(layout: &Layout) -> Result<Vae> {
    let ck = load_kind(layout, ModelKind::Vae, "train-vae")?;
    let get = |n: &str| -> Result<Vec<f32>> {
        Ok(ck
            .get(n)
            .ok_or_else(|| Error::Checkpoint {
                path: layout.checkpoint("vae"),
                msg: format!("missing {n}"),
            })?
            .data()
            .to_vec())
    };
    let dim = |k: &str| ck.meta_u64(k).unwrap_or(0) as usize;
    Ok(Vae {
        params: ck.params(&["vae."]),
        shape: VaeShape::new(dim("frames"), dim("mels"))?,
        stats: LatentStats {
            mean: get("latent_stats.mean")?,
            std: get("latent_stats.std")?,
        },
    })
}

/// Train the query classifier on the clean sources of the train split.
pub fn train_classifier(cfg: &ExperimentConfig, layout: &Layout, opts: &TrainOptions) -> Result<QueryClassifier> {
    let (ds, fe, vocab) = open_dataset(cfg, layout)?;
    let corpus = MelCorpus::build(&ds, Split::Train, &fe, &vocab)?;
    let mels = concat_outer(&[&corpus.target, &corpus.noise])?;
    let labels: Vec<usize> = corpus.target_ids.iter().chain(&corpus.noise_ids).copied().collect();
    let seed = ModelKind::Classifier.seed(cfg);
    let (clf, losses) = train_query_classifier(&mels, &labels, vocab.len(), &cfg.classifier, seed)?;
    if opts.progress {
        eprintln!("[classifier] {} steps, final loss {:.4}", losses.len(), losses.last().copied().unwrap_or(f64::NAN));
    }
    let val_acc = match MelCorpus::build(&ds, Split::Val, &fe, &vocab) {
        Ok(v) => {
            let mels = concat_outer(&[&v.target, &v.noise])?;
            let labels: Vec<usize> = v.target_ids.iter().chain(&v.noise_ids).copied().collect();
            Some(clf.accuracy(&mels, &labels)?)
        }
        Err(Error::Invalid(_)) => None,
        Err(e) => return Err(e),
    };
    let mut ck = Checkpoint::new(merge(
        base_meta(ModelKind::Classifier, cfg, losses.len(), 0),
        json!({"n_classes": clf.n_classes, "mels": fe.n_mels(), "val_accuracy": val_acc}),
    ));
    ck.push_params(&clf.params);
    ck.save(&layout.checkpoint("classifier"))?;
    let mut log = LossLog::new(&["loss"]);
    log.rows = losses.into_iter().map(|l| vec![l]).collect();
    log.write(&layout.loss_csv("classifier"))?;
    Ok(clf)
}

pub fn load_classifier(layout: &Layout) -> Result<QueryClassifier> {
    let ck = load_kind(layout, ModelKind::Classifier, "train-vae")?;
    Ok(QueryClassifier {
        params: ck.params(&["classifier."]),
        n_classes: ck.meta_u64("n_classes").unwrap_or(0) as usize,
    })
}

/// Standardised latents of a split. Pair `j < M` is (target `j`, its query);
/// pair `M + j` is (noise `j`, its query); both condition on mixture `j`.
pub struct LatentCorpus {
    pub mixture: Tensor,
    pub sources: Tensor,
    pub ids: Vec<usize>,
}

impl LatentCorpus {
    pub fn encode(vae: &Vae, corpus: &MelCorpus) -> Result<Self> {
        let enc = |x: &Tensor| chunked(x, ENCODE_CHUNK, |c| vae.encode_standardized(c));
        Ok(Self {
            mixture: enc(&corpus.mixture)?,
            sources: concat_outer(&[&enc(&corpus.target)?, &enc(&corpus.noise)?])?,
            ids: corpus.target_ids.iter().chain(&corpus.noise_ids).copied().collect(),
        })
    }

    pub fn pairs(&self) -> usize {
        self.ids.len()
    }

    pub fn mixture_row(&self, pair: usize) -> usize {
        pair % self.mixture.shape()[0]
    }
}

/// What a vector-field training step fed the network, for inspection.
pub struct StepObservation<'a> {
    pub step: usize,
    pub pairs: &'a [usize],
    pub mixture_rows: &'a [usize],
    pub zm: &'a Tensor,
    pub data: &'a TrainingStep,
}

/// Train the flow network (or, for `ModelKind::Diffusion`, the ε-prediction
/// baseline) on latents of the train split. `observer` sees every step.
pub fn train_vfield(
    kind: ModelKind,
    cfg: &ExperimentConfig,
    layout: &Layout,
    opts: &TrainOptions,
    mut observer: Option<&mut dyn FnMut(&StepObservation)>,
) -> Result<VField> {
    if !matches!(kind, ModelKind::Flow | ModelKind::Diffusion) {
        return Err(Error::Invalid(format!("{} is not a vector-field model", kind.name())));
    }
    let vae = load_vae(layout)?;
    let (ds, fe, vocab) = open_dataset(cfg, layout)?;
    let lat = LatentCorpus::encode(&vae, &MelCorpus::build(&ds, Split::Train, &fe, &vocab)?)?;
    let vcfg = vfield_config(cfg);
    let seed = kind.seed(cfg);
    let mut net = VField::new(vcfg, seed)?;
    let (steps, batch, lr, clip) = match kind {
        ModelKind::Flow => (cfg.flow.steps, cfg.flow.batch, cfg.flow.lr, cfg.flow.grad_clip),
        _ => (cfg.diffusion.steps, cfg.diffusion.batch, cfg.diffusion.lr, cfg.diffusion.grad_clip),
    };
    let sched = DiffusionSchedule::new(&cfg.diffusion.schedule)?;
    let sigma = cfg.flow.sigma_min;
    let mut opt = Optimizer::new(&net.params, lr, Some(clip));
    let mut log = LossLog::new(&["loss", "grad_norm"]);
    let start = try_resume(layout, kind, cfg, steps, opts, &mut net.params, &mut opt, &mut log)?;
    let extra = match kind {
        ModelKind::Flow => json!({"vfield": vcfg, "sigma_min": sigma}),
        _ => json!({"vfield": vcfg, "schedule": cfg.diffusion.schedule}),
    };
    run_steps(
        kind,
        &mut net.params,
        &mut opt,
        &mut log,
        start,
        steps,
        opts,
        |step, tape, b| {
            let mut rng = SeededRng::derive(seed, step as u64 + 1);
            let pairs: Vec<usize> = (0..batch).map(|_| rng.below(lat.pairs())).collect();
            let rows: Vec<usize> = pairs.iter().map(|&p| lat.mixture_row(p)).collect();
            let z1 = gather_batch(&lat.sources, &pairs)?;
            let zm = gather_batch(&lat.mixture, &rows)?;
            let ids: Vec<usize> = pairs.iter().map(|&p| lat.ids[p]).collect();
            let f = |tape: &mut Tape, x: Var, ts: &[f64], q: &[usize]| vf_forward(tape, b, &vcfg, x, ts, q);
            let data = match kind {
                ModelKind::Flow => rfm_training_step(tape, f, &z1, &zm, &ids, sigma, &mut rng)?,
                _ => ddpm_training_step(tape, f, &z1, &zm, &ids, &sched, &mut rng)?,
            };
            if let Some(obs) = observer.as_mut() {
                obs(&StepObservation {
                    step,
                    pairs: &pairs,
                    mixture_rows: &rows,
                    zm: &zm,
                    data: &data,
                });
            }
            Ok((data.loss, vec![data.loss_value]))
        },
        |step, params, opt, log| save_model(layout, kind, cfg, step, params, opt, log, vec![], extra.clone()),
    )?;
    load_vfield(layout, kind)
}

pub fn load_vfield(layout: &Layout, kind: ModelKind) -> Result<VField> {
    let hint = if kind == ModelKind::Flow { "train-flow" } else { "train-diffusion" };
    let ck = load_kind(layout, kind, hint)?;
    let cfg: VFieldConfig = serde_json::from_value(ck.meta["vfield"].clone()).map_err(|source| Error::Json {
        context: format!("{} metadata", layout.checkpoint(kind.name()).display()),
        source,
    })?;
    let all = ck.params(&[""]);
    let mut params = ParamSet::new();
    for (n, t) in all.iter().filter(|(n, _)| !n.starts_with("adam.")) {
        params.insert(n, t.clone());
    }
    Ok(VField { cfg, params })
}

/// Step-indexed training losses from a run's CSV (first data column).
pub fn read_losses(path: &Path) -> Result<Vec<f64>> {
    let mut log = LossLog::new(&[]);
    let n = std::fs::read_to_string(path).map_err(io_err(path))?.lines().count().saturating_sub(1);
    log.restore(path, n)?;
    Ok(log.column(0))
}
