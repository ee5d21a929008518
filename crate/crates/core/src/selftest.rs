//! Quick internal consistency checks run by the `selftest` command.

use nalgebra::DMatrix;
use rfsep_dsp::{mix_at_snr, snr_db, synth_source, SourceClass, SourceSpec, StftPlan};
use rfsep_tensor::{finite_diff_grad, relative_error, GradTape, SeededRng, Tape64, Tensor, Tensor64, Var};

use crate::checkpoint::Checkpoint;
use crate::flow::{euler_integrate, interpolate, target_vector};
use crate::metrics::{frechet_distance, EmbedStats};
use crate::vfield::VField;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, r: std::result::Result<String, String>) -> Check {
    match r {
        Ok(detail) => Check { name, passed: true, detail },
        Err(detail) => Check { name, passed: false, detail },
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn interpolation() -> std::result::Result<String, String> {
    let mut rng = SeededRng::new(1);
    let sigma = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let z0 = Tensor64::randn_from([6], &mut rng);
        let z1 = Tensor64::randn_from([6], &mut rng);
        let t = rng.uniform_f64();
        let zt = interpolate(&z0, &z1, t, sigma).map_err(|e| e.to_string())?;
        let v = target_vector(&z0, &z1, sigma).map_err(|e| e.to_string())?;
        // z_t = z0 + t·v
        for i in 0..6 {
            worst = worst.max((zt.data()[i] - (z0.data()[i] + t * v.data()[i])).abs());
        }
    }
    ensure(worst <= 1e-12, || format!("z_t deviates from z0 + t·v by {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn frechet() -> std::result::Result<String, String> {
    let s = |m: f64, v: f64| EmbedStats::from_moments(vec![m], DMatrix::from_element(1, 1, v), 2).map_err(|e| e.to_string());
    let a = frechet_distance(&s(0.0, 1.0)?, &s(1.0, 1.0)?).map_err(|e| e.to_string())?;
    let b = frechet_distance(&s(0.0, 1.0)?, &s(0.0, 4.0)?).map_err(|e| e.to_string())?;
    ensure((a - 1.0).abs() < 1e-8 && (b - 1.0).abs() < 1e-8, || format!("got {a}, {b}, expected 1, 1"))?;
    Ok("1-D closed forms".into())
}

fn euler() -> std::result::Result<String, String> {
    let v = Tensor::randn([1, 4, 2, 2], 3).map_err(|e| e.to_string())?;
    let z0 = Tensor::randn([1, 4, 2, 2], 4).map_err(|e| e.to_string())?;
    let zm = Tensor::zeros([1, 4, 2, 2]);
    for n in [1, 7, 100] {
        let field = |_: &Tensor, _: &[f64], _: &[usize]| Ok(v.clone());
        let out = euler_integrate(field, &z0, &zm, &[0], n).map_err(|e| e.to_string())?;
        let want: Vec<f32> = z0.data().iter().zip(v.data()).map(|(a, b)| a + b).collect();
        let err = out.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
        ensure(err <= 1e-5, || format!("N={n}: off by {err:e}"))?;
    }
    Ok("N = 1, 7, 100".into())
}

fn gradients() -> std::result::Result<String, String> {
    let build = |t: &mut Tape64, v: &[Var]| -> rfsep_tensor::Result<Var> {
        let c = t.conv2d(v[0], v[1], None, 1, 1)?;
        let s = t.silu(c)?;
        let q = t.mul(s, s)?;
        t.sum(q)
    };
    let x = Tensor64::randn([1, 2, 5, 4], 7).map_err(|e| e.to_string())?;
    let k = Tensor64::randn([3, 2, 3, 3], 8).map_err(|e| e.to_string())?;
    let mut tape = GradTape::new();
    let (xv, kv) = (tape.param(x.clone()), tape.param(k.clone()));
    let loss = build(&mut tape, &[xv, kv]).map_err(|e| e.to_string())?;
    let g = tape.backward(loss).map_err(|e| e.to_string())?;
    let numeric = finite_diff_grad(
        |probe| {
            let mut t = GradTape::new();
            let a = t.constant(x.clone());
            let b = t.constant(probe.clone());
            let l = build(&mut t, &[a, b])?;
            Ok(t.value(l).clone())
        },
        &k,
        1e-3,
    )
    .map_err(|e| e.to_string())?;
    let err = relative_error(g.get(kv).ok_or("no gradient")?, &numeric, 1e-8);
    ensure(err <= 1e-4, || format!("relative error {err:e}"))?;
    Ok(format!("conv→silu relative error {err:.1e}"))
}

fn dsp() -> std::result::Result<String, String> {
    let t = synth_source(&SourceSpec::draw(SourceClass::Sine, 1.0, 1)).map_err(|e| e.to_string())?;
    let n = synth_source(&SourceSpec::draw(SourceClass::NoiseLow, 1.0, 2)).map_err(|e| e.to_string())?;
    for snr in [-15.0, 0.0, 15.0] {
        let m = mix_at_snr(&t, &n, snr).map_err(|e| e.to_string())?;
        let got = snr_db(m.target.samples(), m.noise.samples());
        ensure((got - snr).abs() <= 1e-6, || format!("requested {snr} dB, got {got}"))?;
    }
    let plan = StftPlan::new(1024, 160).map_err(|e| e.to_string())?;
    ensure(plan.frames_for(16000) == 101, || format!("{} frames for 1 s", plan.frames_for(16000)))?;
    Ok("SNR and frame count".into())
}

fn checkpoint() -> std::result::Result<String, String> {
    let net = VField::new(Default::default(), 1).map_err(|e| e.to_string())?;
    let mut ck = Checkpoint::new(serde_json::json!({"kind": "selftest"}));
    ck.push_params(&net.params);
    let a = ck.to_bytes().map_err(|e| e.to_string())?;
    let b = Checkpoint::from_bytes(&a, std::path::Path::new("<memory>"))
        .and_then(|c| c.to_bytes())
        .map_err(|e| e.to_string())?;
    ensure(a == b, || "save→load→save changed bytes".into())?;
    Ok(format!("{} bytes", a.len()))
}

/// Run every check; never panics.
pub fn run() -> Vec<Check> {
    vec![
        check("interpolation identity", interpolation()),
        check("frechet closed form", frechet()),
        check("euler constant field", euler()),
        check("gradient check", gradients()),
        check("dsp contracts", dsp()),
        check("checkpoint round trip", checkpoint()),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }
}
