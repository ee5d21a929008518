mod common;

use std::collections::HashSet;

use rfsep::dataset::{gen_dataset, Dataset, Split, MANIFEST_FILE};
use rfsep_dsp::snr_db;

#[test]
fn manifest_is_byte_identical_across_runs() {
    let cfg = common::tiny();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_dataset(&cfg, a.path()).unwrap();
    gen_dataset(&cfg, b.path()).unwrap();
    let read = |d: &std::path::Path, p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read(a.path(), MANIFEST_FILE), read(b.path(), MANIFEST_FILE));
    let ds = Dataset::load(a.path()).unwrap();
    for r in ds.records.iter().take(5) {
        assert_eq!(read(a.path(), &r.mixture_path), read(b.path(), &r.mixture_path));
    }
}

#[test]
fn records_pair_distinct_classes_and_stored_snr_matches() {
    let cfg = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_dataset(&cfg, dir.path()).unwrap();
    let reloaded = Dataset::load(dir.path()).unwrap();
    assert_eq!(reloaded.records, ds.records);
    assert_eq!(ds.records.len(), 6 * cfg.dataset.mixtures_per_class);
    for r in &ds.records {
        assert_ne!(r.target_class, r.noise_class);
        assert_eq!(r.query_text, r.target_class);
        assert!((-15.0..15.0).contains(&r.snr_db));
        // independent re-measurement from the 16-bit files
        let tri = ds.read(r).unwrap();
        let measured = snr_db(tri.target.samples(), tri.noise.samples());
        assert!((measured - r.snr_db).abs() < 0.01, "{}: {measured} vs {}", r.mixture_path, r.snr_db);
        assert!(tri.mixture.peak() <= 1.0);
    }
}

#[test]
fn splits_are_disjoint_in_source_seeds() {
    let cfg = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let ds = gen_dataset(&cfg, dir.path()).unwrap();
    let seeds = |s: Split| -> HashSet<u64> { ds.split(s).iter().flat_map(|r| [r.target_seed, r.noise_seed]).collect() };
    let (tr, va, te) = (seeds(Split::Train), seeds(Split::Val), seeds(Split::Test));
    assert!(!te.is_empty() && !va.is_empty());
    assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
}

#[test]
fn errors_for_bad_inputs() {
    let mut cfg = common::tiny();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, b"x").unwrap();
    assert!(gen_dataset(&cfg, &file.join("sub")).is_err());
    cfg.dataset.classes.truncate(1);
    assert!(gen_dataset(&cfg, dir.path()).is_err());
    assert!(matches!(
        Dataset::load(&dir.path().join("nothing")),
        Err(rfsep::Error::MissingPrerequisite(_))
    ));
}
