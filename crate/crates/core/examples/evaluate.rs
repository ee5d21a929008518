//! Score flow estimates on the test split against the unprocessed mixtures.

mod common;

use rfsep::dataset::Split;
use rfsep::pipeline::{evaluate, Generator};
use rfsep::train::ModelKind;

fn main() -> anyhow::Result<()> {
    let (cfg, layout) = common::setup()?;
    common::ensure_model(&cfg, &layout, ModelKind::Flow)?;
    let report = evaluate(&cfg, &layout, Split::Test, Generator::Flow, cfg.sampler.steps)?;
    println!("{} items at N = {}", report.items, report.steps);
    for r in &report.rows {
        println!(
            "{:<12} frechet {:>9.3}  median LSD {:>6.2}  consistency {:.3}  SI-SDR {:>7.2} dB",
            r.system, r.frechet, r.lsd.median, r.consistency.mean, r.si_sdr.mean
        );
    }
    println!("report and estimates under {}", layout.eval_dir().display());
    Ok(())
}
