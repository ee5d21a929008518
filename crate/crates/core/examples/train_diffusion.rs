//! Train the noise-prediction baseline on the same network and latents.

mod common;

use rfsep::train::{read_losses, train_vfield, ModelKind};

fn main() -> anyhow::Result<()> {
    let (cfg, layout) = common::setup()?;
    common::ensure_codec(&cfg, &layout)?;
    train_vfield(ModelKind::Diffusion, &cfg, &layout, &common::opts(), None)?;
    let rows = read_losses(&layout.loss_csv("diffusion"))?;
    let tail = &rows[rows.len().saturating_sub(50)..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    println!("diffusion loss over the last {} steps: {mean:.4}", tail.len());
    Ok(())
}
