//! Shared setup for the examples: `<example> [run-dir] [preset]`.
//!
//! Missing prerequisites are produced on the fly, so every example runs on
//! its own. The default `tiny` preset finishes in seconds but its models are
//! barely trained; pass `acceptance` for output worth listening to.
#![allow(dead_code)]

use std::path::PathBuf;

use rfsep::config::{ExperimentConfig, Preset};
use rfsep::dataset::{gen_dataset, MANIFEST_FILE};
use rfsep::layout::Layout;
use rfsep::train::{train_classifier, train_vae, train_vfield, ModelKind, TrainOptions};

pub fn setup() -> anyhow::Result<(ExperimentConfig, Layout)> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "rfsep-example".into()));
    let preset: Preset = args.next().as_deref().unwrap_or("tiny").parse()?;
    Ok((ExperimentConfig::preset(preset), Layout::new(dir)))
}

pub fn opts() -> TrainOptions {
    TrainOptions {
        resume: false,
        progress: true,
    }
}

pub fn ensure_data(cfg: &ExperimentConfig, layout: &Layout) -> anyhow::Result<()> {
    if !layout.data().join(MANIFEST_FILE).exists() {
        gen_dataset(cfg, &layout.data())?;
    }
    Ok(())
}

pub fn ensure_codec(cfg: &ExperimentConfig, layout: &Layout) -> anyhow::Result<()> {
    ensure_data(cfg, layout)?;
    if !layout.checkpoint("vae").exists() {
        train_vae(cfg, layout, &opts())?;
    }
    if !layout.checkpoint("classifier").exists() {
        train_classifier(cfg, layout, &opts())?;
    }
    Ok(())
}

pub fn ensure_model(cfg: &ExperimentConfig, layout: &Layout, kind: ModelKind) -> anyhow::Result<()> {
    ensure_codec(cfg, layout)?;
    if !layout.checkpoint(kind.name()).exists() {
        train_vfield(kind, cfg, layout, &opts(), None)?;
    }
    Ok(())
}
