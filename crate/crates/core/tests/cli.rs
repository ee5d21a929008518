//! Exit codes and basic command plumbing of the binary.

use std::process::Command;

fn rfsep(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_rfsep")).args(args).output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn selftest_passes() {
    let (code, out, _) = rfsep(&["selftest"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(rfsep(&["--preset", "huge", "show-config"]).0, 2);
    assert_eq!(rfsep(&["no-such-command"]).0, 2);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"seed\": 1}").unwrap();
    assert_eq!(rfsep(&["--config", bad.to_str().unwrap(), "gen-data", "--out", out]).0, 2);
    let (code, _, err) = rfsep(&["--preset", "tiny", "--out", out, "separate", "--mixture", "x.wav", "--query", "trumpet"]);
    assert_eq!(code, 2, "{err}");
    assert!(err.contains("trumpet"));
    assert_eq!(rfsep(&["--preset", "tiny", "--out", out, "evaluate", "--split", "dev"]).0, 2);
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (code, _, err) = rfsep(&["--preset", "tiny", "--out", out, "train-flow"]);
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("missing prerequisite"));
    assert_eq!(rfsep(&["--preset", "tiny", "--out", out, "bench-steps"]).0, 1);
}

#[test]
fn seed_flag_overrides_the_config() {
    let (code, out, _) = rfsep(&["--preset", "tiny", "--seed", "77", "show-config"]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["seed"], 77);
}

#[test]
fn gen_data_then_separate_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for cmd in ["gen-data", "train-vae", "train-flow"] {
        let (code, _, err) = rfsep(&["--preset", "tiny", "-q", "--out", out, cmd]);
        assert_eq!(code, 0, "{cmd}: {err}");
    }
    let ds = rfsep::dataset::Dataset::load(&dir.path().join("data")).unwrap();
    let rec = &ds.records[0];
    let mix = dir.path().join("data").join(&rec.mixture_path);
    let target = dir.path().join("data").join(&rec.target_path);
    let est = dir.path().join("est.wav");
    let args = [
        "--preset", "tiny", "-q", "--out", out, "separate", "--mixture", mix.to_str().unwrap(), "--query",
        &rec.query_text, "--reference", target.to_str().unwrap(), "--output", est.to_str().unwrap(), "--dump",
    ];
    let (code, _, err) = rfsep(&args);
    assert_eq!(code, 0, "{err}");
    let first = std::fs::read(&est).unwrap();
    assert!(dir.path().join("est.mel.png").exists());
    assert!(dir.path().join("est.intermediates.fspk").exists());
    assert_eq!(rfsep(&args).0, 0);
    assert_eq!(std::fs::read(&est).unwrap(), first);
    let w = rfsep_dsp::wav_read(&est).unwrap();
    assert_eq!(w.len(), 16000);
}
