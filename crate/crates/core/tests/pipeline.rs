mod common;

use std::sync::OnceLock;

use rfsep::config::ExperimentConfig;
use rfsep::dataset::{Dataset, Split};
use rfsep::frontend::Frontend;
use rfsep::layout::Layout;
use rfsep::pipeline::{
    bench_steps, evaluate, separate_waveform, EvalReport, EvalSet, Generator, References, Sampler,
};
use rfsep::train::{load_vae, vocab_of};
use rfsep_dsp::Waveform;

struct Fixture {
    _dir: tempfile::TempDir,
    cfg: ExperimentConfig,
    layout: Layout,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = common::tiny();
        let dir = tempfile::tempdir().unwrap();
        let layout = common::prepare_all(&cfg, dir.path());
        Fixture { _dir: dir, cfg, layout }
    })
}

#[test]
fn separation_keeps_duration_and_is_deterministic() {
    let f = fixture();
    let ds = Dataset::load(&f.layout.data()).unwrap();
    let tri = ds.read(ds.split(Split::Test)[0]).unwrap();
    // 1.5 clips long, so the windowing path is exercised
    let mut s = tri.mixture.samples().to_vec();
    s.extend_from_slice(&tri.mixture.samples()[..8000]);
    let mix = Waveform::new(s, 16000).unwrap();
    let vae = load_vae(&f.layout).unwrap();
    let fe = Frontend::new(&f.cfg).unwrap();
    let q = vocab_of(&f.cfg).unwrap().id("Sine!").unwrap();
    for g in [Generator::Flow, Generator::Diffusion] {
        let sampler = Sampler::load(&f.cfg, &f.layout, g).unwrap();
        let a = separate_waveform(&f.cfg, &vae, &sampler, &fe, &mix, q, 3, 11).unwrap();
        let b = separate_waveform(&f.cfg, &vae, &sampler, &fe, &mix, q, 3, 11).unwrap();
        assert!((a.estimate.len() as i64 - mix.len() as i64).abs() <= f.cfg.dsp.hop as i64);
        assert_eq!(a.estimate.samples(), b.estimate.samples());
        assert_eq!(a.estimate_mel.shape(), &[2, 1, 100, 64]);
        let c = separate_waveform(&f.cfg, &vae, &sampler, &fe, &mix, q, 3, 12).unwrap();
        assert_ne!(a.z1.data(), c.z1.data());
    }
}

#[test]
fn wrong_sample_rate_is_rejected() {
    let f = fixture();
    let vae = load_vae(&f.layout).unwrap();
    let fe = Frontend::new(&f.cfg).unwrap();
    let sampler = Sampler::load(&f.cfg, &f.layout, Generator::Flow).unwrap();
    let w = Waveform::new(vec![0.1; 8000], 8000).unwrap();
    let err = separate_waveform(&f.cfg, &vae, &sampler, &fe, &w, 0, 2, 1).err().unwrap();
    assert!(err.is_validation(), "{err}");
    assert!(vocab_of(&f.cfg).unwrap().id("trumpet").unwrap_err().is_validation());
}

#[test]
fn identity_and_unprocessed_evaluations() {
    let f = fixture();
    let report = evaluate(&f.cfg, &f.layout, Split::Test, Generator::Flow, 2).unwrap();
    let set = EvalSet::load(&f.cfg, &f.layout, Split::Test).unwrap();
    let k = set.vocoded_items();
    let targets = set.target_wavs(k).unwrap();
    let refs = References::new(&set.corpus.target, &set.corpus.target_ids, &targets, &set.classifier).unwrap();

    // estimates ≡ clean targets
    let id = refs.score("oracle", &set.corpus.target, &targets).unwrap();
    assert!(id.frechet.abs() < 1e-6, "{}", id.frechet);
    assert!(id.lsd.per_item.iter().all(|&v| v == 0.0));
    let clean = set.classifier.consistency_scores(&set.corpus.target, &set.corpus.target_ids).unwrap();
    assert_eq!(id.consistency.per_item, clean);
    assert!(id.si_sdr.per_item.iter().all(|&v| v == rfsep::metrics::SI_SDR_CAP_DB));

    // estimates ≡ mixtures reproduces the unprocessed row exactly
    let un = refs.score("unprocessed", &set.corpus.mixture, &set.mixture_wavs(k).unwrap()).unwrap();
    assert_eq!(Some(&un), report.row("unprocessed"));

    // the report on disk is the returned one
    let path = f.layout.eval_dir().join(EvalReport::file_name(Generator::Flow, 2, Split::Test));
    let back: EvalReport = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(back, report);
    assert_eq!(report.items, 6);
    assert!(report.row("flow").is_some());
}

#[test]
fn empty_split_is_an_error() {
    let f = fixture();
    let mut cfg = f.cfg.clone();
    cfg.dataset.splits = [0.9, 0.1, 0.0];
    let dir = tempfile::tempdir().unwrap();
    common::copy_dir(&f.layout.root.join("checkpoints"), &dir.path().join("checkpoints"));
    let layout = Layout::new(dir.path());
    rfsep::dataset::gen_dataset(&cfg, &layout.data()).unwrap();
    let err = evaluate(&cfg, &layout, Split::Test, Generator::Flow, 2).unwrap_err();
    assert!(err.is_validation(), "{err}");
}

#[test]
fn bench_reports_every_row() {
    let f = fixture();
    let report = bench_steps(&f.cfg, &f.layout, Split::Test).unwrap();
    assert_eq!(report.rows.len(), 1 + 2 * f.cfg.sampler.bench_steps.len());
    for n in &f.cfg.sampler.bench_steps {
        assert!(report.row("flow", *n).is_some() && report.row("diffusion", *n).is_some());
    }
    assert!(report.rows.iter().all(|r| r.frechet.is_finite() && r.frechet >= 0.0));
    for name in ["bench_steps.csv", "bench_steps.json", "bench_steps_time.png", "bench_steps_frechet.png"] {
        assert!(f.layout.bench_dir().join(name).exists(), "{name}");
    }
    let csv = std::fs::read_to_string(f.layout.bench_dir().join("bench_steps.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + report.rows.len());
}

#[test]
fn missing_checkpoints_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    let cfg = common::tiny();
    for r in [
        Sampler::load(&cfg, &layout, Generator::Flow).err(),
        Sampler::load(&cfg, &layout, Generator::Diffusion).err(),
    ] {
        assert!(matches!(r, Some(rfsep::Error::MissingPrerequisite(_))));
    }
    assert!(matches!(bench_steps(&cfg, &layout, Split::Test), Err(rfsep::Error::MissingPrerequisite(_))));
}
