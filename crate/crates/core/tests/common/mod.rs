#![allow(dead_code)]

use std::path::Path;

use rfsep::config::{ExperimentConfig, Preset};
use rfsep::dataset::gen_dataset;
use rfsep::layout::Layout;
use rfsep::train::{train_classifier, train_vae, train_vfield, ModelKind, TrainOptions};

pub fn tiny() -> ExperimentConfig {
    ExperimentConfig::preset(Preset::Tiny)
}

pub fn quiet() -> TrainOptions {
    TrainOptions::default()
}

/// Dataset plus trained codec and classifier.
pub fn prepare_codec(cfg: &ExperimentConfig, root: &Path) -> Layout {
    let layout = Layout::new(root);
    gen_dataset(cfg, &layout.data()).unwrap();
    train_vae(cfg, &layout, &quiet()).unwrap();
    train_classifier(cfg, &layout, &quiet()).unwrap();
    layout
}

/// Everything, including flow and diffusion networks.
pub fn prepare_all(cfg: &ExperimentConfig, root: &Path) -> Layout {
    let layout = prepare_codec(cfg, root);
    train_vfield(ModelKind::Flow, cfg, &layout, &quiet(), None).unwrap();
    train_vfield(ModelKind::Diffusion, cfg, &layout, &quiet(), None).unwrap();
    layout
}

pub fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let dst = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &dst);
        } else {
            std::fs::copy(e.path(), dst).unwrap();
        }
    }
}
