mod common;

use rfsep::condition::channel_slice;
use rfsep::layout::Layout;
use rfsep::train::{read_losses, train_vfield, LatentCorpus, MelCorpus, ModelKind, StepObservation, TrainOptions};
use rfsep_tensor::{SeededRng, Tensor};

#[test]
fn flow_loss_at_step_zero_is_mean_squared_target() {
    let cfg = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let layout = common::prepare_codec(&cfg, dir.path());
    let mut first: Option<(Vec<usize>, Tensor)> = None;
    let mut obs = |o: &StepObservation| {
        if o.step == 0 {
            first = Some((o.pairs.to_vec(), o.data.target.clone()));
        }
    };
    train_vfield(ModelKind::Flow, &cfg, &layout, &common::quiet(), Some(&mut obs)).unwrap();
    let (pairs, logged_target) = first.unwrap();

    // Rebuild the batch from the data and the step-0 stream, independently of the trainer.
    let vae = rfsep::train::load_vae(&layout).unwrap();
    let ds = rfsep::dataset::Dataset::load(&layout.data()).unwrap();
    let fe = rfsep::frontend::Frontend::new(&cfg).unwrap();
    let vocab = rfsep::train::vocab_of(&cfg).unwrap();
    let lat = LatentCorpus::encode(&vae, &MelCorpus::build(&ds, rfsep::dataset::Split::Train, &fe, &vocab).unwrap()).unwrap();
    let mut rng = SeededRng::derive(ModelKind::Flow.seed(&cfg), 1);
    let redrawn: Vec<usize> = (0..cfg.flow.batch).map(|_| rng.below(lat.pairs())).collect();
    assert_eq!(redrawn, pairs);
    for _ in 0..cfg.flow.batch {
        rng.uniform_f64();
    }
    let z1 = rfsep::classifier::gather_batch(&lat.sources, &pairs).unwrap();
    let z0 = Tensor::randn_from(z1.shape().to_vec(), &mut rng);
    let sigma = cfg.flow.sigma_min;
    let v: Vec<f64> = z1.data().iter().zip(z0.data()).map(|(&a, &b)| a as f64 - (1.0 - sigma) * b as f64).collect();
    let mean_v2 = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
    let logged = read_losses(&layout.loss_csv("flow")).unwrap()[0];
    assert!((logged - mean_v2).abs() <= 1e-5 * mean_v2, "{logged} vs {mean_v2}");
    assert!(logged_target.data().iter().zip(&v).all(|(&a, &b)| (a as f64 - b).abs() < 1e-5));
}

#[test]
fn resumed_run_is_bitwise_identical_to_uninterrupted() {
    let mut cfg = common::tiny();
    let a = tempfile::tempdir().unwrap();
    let la = common::prepare_codec(&cfg, a.path());
    let b = tempfile::tempdir().unwrap();
    common::copy_dir(a.path(), b.path());
    let lb = Layout::new(b.path());

    for kind in [ModelKind::Flow, ModelKind::Diffusion] {
        cfg.flow.steps = 3;
        cfg.diffusion.steps = 3;
        train_vfield(kind, &cfg, &la, &common::quiet(), None).unwrap();
        cfg.flow.steps = 7;
        cfg.diffusion.steps = 7;
        let resume = TrainOptions {
            resume: true,
            progress: false,
        };
        train_vfield(kind, &cfg, &la, &resume, None).unwrap();
        train_vfield(kind, &cfg, &lb, &common::quiet(), None).unwrap();
        let read = |l: &Layout, p: std::path::PathBuf| std::fs::read(p).unwrap_or_else(|e| panic!("{l:?}: {e}"));
        assert_eq!(read(&la, la.checkpoint(kind.name())), read(&lb, lb.checkpoint(kind.name())), "{}", kind.name());
        assert_eq!(read(&la, la.loss_csv(kind.name())), read(&lb, lb.loss_csv(kind.name())));
    }

    // the codec resumes the same way
    cfg.vae.steps = 9;
    let resume = TrainOptions {
        resume: true,
        progress: false,
    };
    rfsep::train::train_vae(&cfg, &la, &resume).unwrap();
    rfsep::train::train_vae(&cfg, &lb, &common::quiet()).unwrap();
    assert_eq!(std::fs::read(la.checkpoint("vae")).unwrap(), std::fs::read(lb.checkpoint("vae")).unwrap());
}

#[test]
fn resuming_under_a_different_config_is_refused() {
    let mut cfg = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let layout = common::prepare_codec(&cfg, dir.path());
    train_vfield(ModelKind::Flow, &cfg, &layout, &common::quiet(), None).unwrap();
    cfg.flow.lr *= 2.0;
    let resume = TrainOptions {
        resume: true,
        progress: false,
    };
    let err = train_vfield(ModelKind::Flow, &cfg, &layout, &resume, None).unwrap_err();
    assert!(matches!(err, rfsep::Error::Config(_)), "{err}");
}

#[test]
fn vector_fields_require_the_codec() {
    let cfg = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let layout = Layout::new(dir.path());
    rfsep::dataset::gen_dataset(&cfg, &layout.data()).unwrap();
    for kind in [ModelKind::Diffusion, ModelKind::Flow] {
        let err = train_vfield(kind, &cfg, &layout, &common::quiet(), None).unwrap_err();
        assert!(matches!(err, rfsep::Error::MissingPrerequisite(_)), "{err}");
    }
    let empty = tempfile::tempdir().unwrap();
    let err = rfsep::train::train_vae(&cfg, &Layout::new(empty.path()), &common::quiet()).unwrap_err();
    assert!(matches!(err, rfsep::Error::MissingPrerequisite(_)));
}

#[test]
fn network_input_carries_the_mixture_latent_verbatim() {
    let mut cfg = common::tiny();
    cfg.flow.steps = 20;
    cfg.diffusion.steps = 20;
    let dir = tempfile::tempdir().unwrap();
    let layout = common::prepare_codec(&cfg, dir.path());
    for kind in [ModelKind::Flow, ModelKind::Diffusion] {
        let mut seen = 0;
        let mut obs = |o: &StepObservation| {
            let block = channel_slice(&o.data.net_input, 4, 8).unwrap();
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&block), bits(o.zm));
            seen += 1;
        };
        train_vfield(kind, &cfg, &layout, &common::quiet(), Some(&mut obs)).unwrap();
        assert_eq!(seen, 20);
    }
}
