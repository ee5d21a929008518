use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use rfsep::config::{ExperimentConfig, Preset};
use rfsep::dataset::{gen_dataset, Split};
use rfsep::frontend::Frontend;
use rfsep::layout::Layout;
use rfsep::pipeline::{bench_steps, evaluate, join_windows, separate_waveform, separation_paths, Generator, Sampler};
use rfsep::plot::spectrogram_panels;
use rfsep::train::{load_classifier, load_vae, train_classifier, train_vae, train_vfield, vocab_of, ModelKind, TrainOptions};

#[derive(Parser)]
#[command(name = "rfsep", version, about = "Query-conditioned source separation with rectified flow matching")]
struct Cli {
    /// Experiment config (JSON); overrides --preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Built-in config: desk, acceptance, tiny or large.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment directory.
    #[arg(long, global = true, default_value = "rfsep-run")]
    out: PathBuf,
    /// Quieter output.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the mixture corpus into <out>/data.
    GenData,
    /// Train the mel codec, then the query classifier used for scoring.
    TrainVae {
        #[arg(long)]
        resume: bool,
    },
    /// Retrain only the query classifier.
    TrainClassifier,
    /// Train the flow-matching vector field (needs the codec).
    TrainFlow {
        #[arg(long)]
        resume: bool,
    },
    /// Train the diffusion baseline (needs the codec).
    TrainDiffusion {
        #[arg(long)]
        resume: bool,
    },
    /// Separate one mixture WAV with a text query.
    Separate {
        #[arg(long)]
        mixture: PathBuf,
        #[arg(long)]
        query: String,
        /// Sampler steps (default: the config's).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "flow")]
        model: String,
        /// Clean reference, shown as a third panel in the figure.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Output WAV (default: <out>/separate/<name>_<query>.wav).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write mels and latents to <output>.intermediates.fspk.
        #[arg(long)]
        dump: bool,
    },
    /// Metrics of a model and of the unprocessed mixtures on a split.
    Evaluate {
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "flow")]
        model: String,
    },
    /// Quality and wall-clock against sampler steps, for flow and diffusion.
    BenchSteps {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Quick internal consistency checks.
    Selftest,
    /// Print the resolved config as JSON.
    ShowConfig,
}

fn load_config(cli: &Cli) -> rfsep::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset(cli.preset.parse::<Preset>()?),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    let layout = Layout::new(&cli.out);
    let opts = |resume| TrainOptions {
        resume,
        progress: !cli.quiet,
    };
    let say = |msg: String| {
        if !cli.quiet {
            println!("{msg}");
        }
    };
    match &cli.command {
        Command::GenData => {
            let ds = gen_dataset(&cfg, &layout.data())?;
            say(format!("wrote {} mixtures to {}", ds.records.len(), layout.data().display()));
        }
        Command::TrainVae { resume } => {
            train_vae(&cfg, &layout, &opts(*resume))?;
            train_classifier(&cfg, &layout, &opts(false))?;
            say(format!("codec and classifier saved under {}", layout.root.join("checkpoints").display()));
        }
        Command::TrainClassifier => {
            train_classifier(&cfg, &layout, &opts(false))?;
        }
        Command::TrainFlow { resume } => {
            let net = train_vfield(ModelKind::Flow, &cfg, &layout, &opts(*resume), None)?;
            say(format!("flow network ({} parameters) saved to {}", net.param_count(), layout.checkpoint("flow").display()));
        }
        Command::TrainDiffusion { resume } => {
            train_vfield(ModelKind::Diffusion, &cfg, &layout, &opts(*resume), None)?;
            say(format!("diffusion network saved to {}", layout.checkpoint("diffusion").display()));
        }
        Command::Separate {
            mixture,
            query,
            steps,
            model,
            reference,
            output,
            dump,
        } => separate(&cfg, &layout, mixture, query, steps.unwrap_or(cfg.sampler.steps), model, reference.as_deref(), output.clone(), *dump, &say)?,
        Command::Evaluate { split, steps, model } => {
            let split: Split = split.parse()?;
            let report = evaluate(&cfg, &layout, split, model.parse()?, steps.unwrap_or(cfg.sampler.steps))?;
            for r in &report.rows {
                say(format!(
                    "{:<12} frechet {:>9.4}  lsd(median) {:>7.3}  consistency {:.3}  si-sdr {:>7.2} dB",
                    r.system, r.frechet, r.lsd.median, r.consistency.mean, r.si_sdr.mean
                ));
            }
        }
        Command::BenchSteps { split } => {
            let report = bench_steps(&cfg, &layout, split.parse()?)?;
            for r in &report.rows {
                say(format!(
                    "{:<12} N={:<4} sampler {:.4}s (+{:.3}s)  frechet {:.4}  consistency {:.3}",
                    r.model, r.steps, r.sampler_seconds_per_item, r.decode_vocoder_seconds_per_item, r.frechet, r.consistency
                ));
            }
            say(format!("flow sampler time vs steps: r² = {:.4}", report.flow_time_r2));
        }
        Command::Selftest => {
            let checks = rfsep::selftest::run();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                anyhow::bail!("self-test failed");
            }
        }
        Command::ShowConfig => println!("{}", cfg.to_json()),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn separate(
    cfg: &ExperimentConfig,
    layout: &Layout,
    mixture: &Path,
    query: &str,
    steps: usize,
    model: &str,
    reference: Option<&Path>,
    output: Option<PathBuf>,
    dump: bool,
    say: &dyn Fn(String),
) -> anyhow::Result<()> {
    let query_id = vocab_of(cfg)?.id(query)?;
    let generator: Generator = model.parse()?;
    let wav = rfsep_dsp::wav_read(mixture).map_err(rfsep::Error::from).with_context(|| format!("reading {}", mixture.display()))?;
    let vae = load_vae(layout)?;
    let sampler = Sampler::load(cfg, layout, generator)?;
    let fe = Frontend::new(cfg)?;
    let sep = separate_waveform(cfg, &vae, &sampler, &fe, &wav, query_id, steps, cfg.seed)?;
    let (default_wav, default_png) = separation_paths(layout, mixture, query);
    let (wav_path, png_path) = match output {
        Some(p) => (p.clone(), p.with_extension("mel.png")),
        None => (default_wav, default_png),
    };
    if let Some(dir) = wav_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    rfsep_dsp::wav_write(&wav_path, &sep.estimate)?;
    let mix_mel = join_windows(&sep.mixture_mel)?;
    let est_mel = join_windows(&sep.estimate_mel)?;
    let mut panels = vec![mix_mel, est_mel];
    if let Some(r) = reference {
        let rw = rfsep_dsp::wav_read(r).map_err(rfsep::Error::from).with_context(|| format!("reading {}", r.display()))?;
        let windows: Vec<rfsep_dsp::Waveform> = rw
            .samples()
            .chunks(cfg.clip_len())
            .map(|c| rfsep_dsp::Waveform::new(c.to_vec(), rw.sample_rate()))
            .collect::<Result<_, _>>()?;
        let m = join_windows(&fe.mel_batch(&windows)?)?;
        if m.shape() == panels[0].shape() {
            panels.push(m);
        } else {
            anyhow::bail!("reference length differs from the mixture");
        }
    }
    spectrogram_panels(&panels.iter().collect::<Vec<_>>(), fe.n_mels(), &png_path)?;
    if dump {
        let mut ck = rfsep::checkpoint::Checkpoint::new(serde_json::json!({"query": query, "steps": steps, "model": model}));
        ck.push("mixture_mel", sep.mixture_mel.clone());
        ck.push("zm", sep.zm.clone());
        ck.push("z1", sep.z1.clone());
        ck.push("estimate_mel", sep.estimate_mel.clone());
        ck.save(&wav_path.with_extension("intermediates.fspk"))?;
    }
    if let Ok(clf) = load_classifier(layout) {
        let est = clf.consistency_scores(&sep.estimate_mel, &vec![query_id; sep.estimate_mel.shape()[0]])?;
        let mix = clf.consistency_scores(&sep.mixture_mel, &vec![query_id; sep.mixture_mel.shape()[0]])?;
        say(format!(
            "consistency with {query:?}: mixture {:.3} → estimate {:.3}",
            rfsep::metrics::mean(&mix),
            rfsep::metrics::mean(&est)
        ));
    }
    say(format!("wrote {} and {}", wav_path.display(), png_path.display()));
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| c.downcast_ref::<rfsep::Error>().is_some_and(|e| e.is_validation()));
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
