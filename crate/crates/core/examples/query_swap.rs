//! Separate each test mixture twice, once per source's query, and check the
//! classifier agrees with the query each time.

mod common;

use rfsep::dataset::Split;
use rfsep::pipeline::{query_swap, EvalSet, Generator, Sampler};
use rfsep::train::ModelKind;

fn main() -> anyhow::Result<()> {
    let (cfg, layout) = common::setup()?;
    common::ensure_model(&cfg, &layout, ModelKind::Flow)?;
    let set = EvalSet::load(&cfg, &layout, Split::Test)?;
    let sampler = Sampler::load(&cfg, &layout, Generator::Flow)?;
    let r = query_swap(&set, &sampler, cfg.sampler.steps, 50)?;
    println!(
        "{} mixtures: both estimates follow their query in {:.1}%, single estimates in {:.1}%",
        r.items,
        100.0 * r.both_match,
        100.0 * r.per_estimate
    );
    Ok(())
}
