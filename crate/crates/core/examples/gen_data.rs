//! Synthesize a dataset of mixtures and print a summary of its manifest.

mod common;

use rfsep::dataset::{gen_dataset, Split};

fn main() -> anyhow::Result<()> {
    let (cfg, layout) = common::setup()?;
    let ds = gen_dataset(&cfg, &layout.data())?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let recs = ds.split(split);
        let snrs: Vec<f64> = recs.iter().map(|r| r.snr_db).collect();
        let lo = snrs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = snrs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        println!("{:<5} {:>4} mixtures, SNR {lo:.1}..{hi:.1} dB", split.name(), recs.len());
    }
    if let Some(r) = ds.records.first() {
        println!("first: \"{}\" in {} noise at {:.1} dB -> {}", r.query_text, r.noise_class, r.snr_db, r.mixture_path);
    }
    Ok(())
}
