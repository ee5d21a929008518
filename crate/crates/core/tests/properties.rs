//! Invariants checked over generated inputs.

use std::path::Path;

use proptest::prelude::*;
use rfsep::checkpoint::Checkpoint;
use rfsep::codec::LatentStats;
use rfsep::condition::{channel_concat, channel_slice, normalize_query};
use rfsep::config::{ExperimentConfig, Preset};
use rfsep::flow::{euler_integrate, interpolate, target_vector};
use rfsep_tensor::{Tensor, Tensor64};

fn tensor64(shape: [usize; 4], seed: u64) -> Tensor64 {
    Tensor64::randn(shape, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolation_hits_both_endpoints(seed in any::<u64>(), sigma in 1e-6f64..0.5) {
        let z0 = tensor64([2, 3, 4, 5], seed);
        let z1 = tensor64([2, 3, 4, 5], seed.wrapping_add(1));
        let at0 = interpolate(&z0, &z1, 0.0, sigma).unwrap();
        prop_assert!(at0.max_abs_diff(&z0) < 1e-12);
        let at1 = interpolate(&z0, &z1, 1.0, sigma).unwrap();
        let expect = z0.zip_with(&z1, |a, b| sigma * a + b).unwrap();
        prop_assert!(at1.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn interpolation_moves_along_the_target_vector(seed in any::<u64>(), t in 0.0f64..1.0, dt in 0.0f64..1.0) {
        let sigma = 1e-5;
        let z0 = tensor64([1, 4, 3, 3], seed);
        let z1 = tensor64([1, 4, 3, 3], seed ^ 0xabc);
        let s = t + dt * (1.0 - t);
        let a = interpolate(&z0, &z1, t, sigma).unwrap();
        let b = interpolate(&z0, &z1, s, sigma).unwrap();
        let v = target_vector(&z0, &z1, sigma).unwrap();
        let predicted = a.zip_with(&v, |x, y| x + (s - t) * y).unwrap();
        prop_assert!(b.max_abs_diff(&predicted) < 1e-12);
    }

    #[test]
    fn euler_under_a_constant_field_lands_on_z0_plus_v(seed in any::<u64>(), n in 1usize..60) {
        let z0 = tensor64([2, 4, 3, 2], seed);
        let zm = tensor64([2, 4, 3, 2], seed ^ 1);
        let v = tensor64([2, 4, 3, 2], seed ^ 2);
        let field = |_: &Tensor64, _: &[f64], _: &[usize]| Ok(v.clone());
        let out = euler_integrate(field, &z0, &zm, &[0, 1], n).unwrap();
        let expect = z0.zip_with(&v, |a, b| a + b).unwrap();
        prop_assert!(out.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn channel_concat_then_slice_recovers_both_halves(seed in any::<u64>(), c1 in 1usize..6, c2 in 1usize..6) {
        let a = Tensor::randn([2, c1, 3, 4], seed).unwrap();
        let b = Tensor::randn([2, c2, 3, 4], seed ^ 7).unwrap();
        let x = channel_concat(&a, &b).unwrap();
        prop_assert_eq!(channel_slice(&x, 0, c1).unwrap(), a);
        prop_assert_eq!(channel_slice(&x, c1, c1 + c2).unwrap(), b);
    }

    #[test]
    fn latent_standardization_inverts(seed in any::<u64>(), shift in -5.0f32..5.0, scale in 0.1f32..10.0) {
        let z = Tensor::randn([6, 4, 5, 3], seed).unwrap().map(|v| v * scale + shift);
        let stats = LatentStats::fit(&z).unwrap();
        let s = stats.standardize(&z).unwrap();
        let back = stats.destandardize(&s).unwrap();
        prop_assert!(back.max_abs_diff(&z) <= 1e-5 * (scale + shift.abs()) as f64);
        for ch in 0..4 {
            let vals: Vec<f64> = (0..6)
                .flat_map(|i| s.data()[(i * 4 + ch) * 15..(i * 4 + ch + 1) * 15].to_vec())
                .map(f64::from)
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            prop_assert!(m.abs() < 1e-4);
        }
    }

    #[test]
    fn query_normalization_is_idempotent(text in "[ A-Za-z0-9_.,!?'-]{0,40}") {
        match normalize_query(&text) {
            Ok(once) => {
                prop_assert_eq!(normalize_query(&once).unwrap(), once.clone());
                prop_assert!(!once.chars().any(|c| c.is_ascii_uppercase()));
                prop_assert!(!once.contains("  "));
            }
            Err(_) => prop_assert!(text.chars().all(|c| !c.is_ascii_alphanumeric() && c != '_')),
        }
    }

    #[test]
    fn checkpoints_round_trip_bitwise(seed in any::<u64>(), dims in prop::collection::vec(1usize..5, 1..4), step in any::<u32>()) {
        let mut ck = Checkpoint::new(serde_json::json!({ "step": step, "kind": "flow" }));
        let t = Tensor::randn(dims.clone(), seed).unwrap();
        ck.push("a.weight", t.clone());
        ck.push("b", Tensor::full([3], f32::MIN_POSITIVE));
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        prop_assert_eq!(back.get("a.weight").unwrap(), &t);
        prop_assert_eq!(back.meta_u64("step"), Some(step as u64));
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_checkpoints_are_rejected(seed in any::<u64>(), cut in 1usize..64) {
        let mut ck = Checkpoint::new(serde_json::json!({ "kind": "vae" }));
        ck.push("w", Tensor::randn([4, 4], seed).unwrap());
        let bytes = ck.to_bytes().unwrap();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - cut], Path::new("mem")).is_err());
    }

    #[test]
    fn config_json_round_trips(seed in any::<u64>(), steps in 1usize..100_000, lr in 1e-6f64..1e-2) {
        let mut cfg = ExperimentConfig::preset(Preset::Desk);
        cfg.seed = seed;
        cfg.flow.steps = steps;
        cfg.flow.lr = lr;
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }
}
