//! Quality and sampler time against the number of steps, flow vs diffusion.

mod common;

use rfsep::dataset::Split;
use rfsep::pipeline::bench_steps;
use rfsep::train::ModelKind;

fn main() -> anyhow::Result<()> {
    let (cfg, layout) = common::setup()?;
    common::ensure_model(&cfg, &layout, ModelKind::Flow)?;
    common::ensure_model(&cfg, &layout, ModelKind::Diffusion)?;
    let report = bench_steps(&cfg, &layout, Split::Test)?;
    println!("{:<10} {:>5} {:>12} {:>10}", "model", "N", "s/item", "frechet");
    for r in report.rows.iter().filter(|r| r.steps > 0) {
        println!("{:<10} {:>5} {:>12.5} {:>10.3}", r.model, r.steps, r.sampler_seconds_per_item, r.frechet);
    }
    println!(
        "flow time = {:.2e}·N + {:.2e} s (r2 {:.4})",
        report.flow_time_slope, report.flow_time_intercept, report.flow_time_r2
    );
    Ok(())
}
