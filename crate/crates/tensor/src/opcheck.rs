//! Finite-difference check of every differentiable op.
//!
//! Runs in f64 so the oracle's own rounding stays far below the tolerance;
//! the op code is the same generic code the f32 training path uses.

use crate::error::Result;
use crate::gradcheck::{finite_diff_grad, relative_error};
use crate::tape::{GradTape, Tape64, Var};
use crate::tensor::Tensor64;

type Build = dyn Fn(&mut Tape64, &[Var]) -> Result<Var>;
type Prepare = dyn Fn(Tensor64) -> Tensor64;

/// Worst relative gradient error of one op over its instances.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: &'static str,
    pub instances: u64,
    pub worst: f64,
}

struct OpCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    prepare: Box<Prepare>,
    build: Box<Build>,
}

fn case(name: &'static str, shapes: &[&[usize]], build: impl Fn(&mut Tape64, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        prepare: Box::new(|t| t),
        build: Box::new(build),
    }
}

/// Inputs pushed at least `margin` away from a kink at `at`, so it never lies inside the ±h stencil.
fn kinked(
    name: &'static str,
    shapes: &[&[usize]],
    at: f64,
    margin: f64,
    build: impl Fn(&mut Tape64, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        prepare: Box::new(move |t| t.map(|v| if v >= at { v + margin } else { v - margin })),
        ..case(name, shapes, build)
    }
}

fn cases() -> Vec<OpCase> {
    vec![
        case("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
        case("sub", &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1])),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
        case("mse", &[&[2, 5], &[2, 5]], |t, v| t.mse(v[0], v[1])),
        case("scale", &[&[7]], |t, v| t.scale(v[0], -1.7)),
        case("add_scalar", &[&[7]], |t, v| t.add_scalar(v[0], 0.3)),
        case("exp", &[&[2, 3]], |t, v| t.exp(v[0])),
        kinked("relu", &[&[4, 4]], 0.0, 0.05, |t, v| t.relu(v[0])),
        case("silu", &[&[4, 4]], |t, v| t.silu(v[0])),
        kinked("clamp_min", &[&[4, 4]], -0.5, 0.05, |t, v| t.clamp_min(v[0], -0.5)),
        case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], [3, 4])),
        case("sum", &[&[3, 5]], |t, v| {
            let sq = t.mul(v[0], v[0])?;
            t.sum(sq)
        }),
        case("mean", &[&[3, 5]], |t, v| {
            let e = t.exp(v[0])?;
            t.mean(e)
        }),
        case("mean_axis", &[&[2, 3, 4, 5]], |t, v| t.mean_axis(v[0], 2)),
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        case("linear", &[&[5, 4], &[3, 4], &[3]], |t, v| t.linear(v[0], v[1], Some(v[2]))),
        case("gather", &[&[6, 4]], |t, v| t.gather(v[0], &[5, 0, 5, 2])),
        case("softmax", &[&[3, 6]], |t, v| t.softmax(v[0])),
        case("cross_entropy", &[&[4, 6]], |t, v| t.cross_entropy(v[0], &[0, 5, 2, 2])),
        case("conv2d (stride 1, pad 1)", &[&[2, 3, 6, 5], &[4, 3, 3, 3], &[4]], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        case("conv2d (stride 2, pad 1)", &[&[2, 2, 7, 6], &[3, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], None, 2, 1)),
        case("conv2d (1x1)", &[&[1, 4, 3, 3], &[2, 4, 1, 1], &[2]], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0)),
        case("upsample2x", &[&[2, 2, 4, 3]], |t, v| t.upsample2x(v[0], 7, 6)),
        case("pixel_shuffle", &[&[2, 8, 3, 2]], |t, v| t.pixel_shuffle(v[0], 2)),
        case("pixel_unshuffle", &[&[2, 2, 4, 6]], |t, v| t.pixel_unshuffle(v[0], 2)),
        case("group_norm", &[&[2, 3, 4, 2], &[3], &[3]], |t, v| t.group_norm(v[0], v[1], v[2], 1e-5)),
        case("film", &[&[2, 3, 4, 2], &[2, 3], &[2, 3]], |t, v| t.film(v[0], v[1], v[2])),
        case("concat", &[&[2, 3, 2, 2], &[2, 1, 2, 2]], |t, v| t.concat(&[v[0], v[1]])),
        case("slice", &[&[2, 5, 2, 3]], |t, v| t.slice(v[0], 1, 4)),
    ]
}

/// Scalar probe `Σ w ⊙ op(inputs)` with fixed random weights `w`.
fn probe(build: &Build, inputs: &[Tensor64], weights: &mut Option<Tensor64>, seed: u64) -> Result<(Tape64, Vec<Var>, Var)> {
    let mut tape = GradTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let loss = if tape.shape(out).is_empty() {
        out
    } else {
        let w = match weights {
            Some(w) => w.clone(),
            None => {
                let w = Tensor64::randn(tape.shape(out).to_vec(), seed ^ 0xABCD)?;
                *weights = Some(w.clone());
                w
            }
        };
        let wv = tape.constant(w);
        let prod = tape.mul(out, wv)?;
        tape.sum(prod)?
    };
    Ok((tape, vars, loss))
}

fn check_case(c: &OpCase, instances: u64, h: f64) -> Result<OpReport> {
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let inputs: Vec<Tensor64> = c
            .shapes
            .iter()
            .enumerate()
            .map(|(i, s)| Ok((c.prepare)(Tensor64::randn(s.clone(), inst * 31 + i as u64)?)))
            .collect::<Result<_>>()?;
        let mut weights = None;
        let (mut tape, vars, loss) = probe(&*c.build, &inputs, &mut weights, inst)?;
        let grads = tape.backward(loss)?;
        for (i, &v) in vars.iter().enumerate() {
            let analytic = grads.get_or_zeros(v, inputs[i].shape());
            let numeric = finite_diff_grad(
                |p| {
                    let mut trial = inputs.clone();
                    trial[i] = p.clone();
                    let (tape, _, loss) = probe(&*c.build, &trial, &mut weights.clone(), inst)?;
                    Ok(tape.value(loss).clone())
                },
                &inputs[i],
                h,
            )?;
            worst = worst.max(relative_error(&analytic, &numeric, 1e-8));
        }
    }
    Ok(OpReport {
        name: c.name,
        instances,
        worst,
    })
}

/// A conv → relu → conv chain, skipping draws whose pre-activations come
/// within 0.02 of the relu kink.
fn check_chain(instances: u64, h: f64) -> Result<OpReport> {
    let build = |t: &mut Tape64, v: &[Var]| -> Result<Var> {
        let a = t.conv2d(v[0], v[1], None, 1, 1)?;
        let r = t.relu(a)?;
        let b = t.conv2d(r, v[2], None, 2, 1)?;
        let sq = t.mul(b, b)?;
        t.sum(sq)
    };
    let (mut checked, mut seed, mut worst) = (0, 0u64, 0f64);
    while checked < instances {
        seed += 1;
        let x = Tensor64::randn([1, 2, 6, 6], seed)?;
        let k1 = Tensor64::randn([3, 2, 3, 3], seed + 1000)?;
        let k2 = Tensor64::randn([2, 3, 3, 3], seed + 2000)?;
        let mut pre = GradTape::<f64>::new();
        let (xv, kv) = (pre.constant(x.clone()), pre.constant(k1.clone()));
        let a = pre.conv2d(xv, kv, None, 1, 1)?;
        if pre.value(a).data().iter().any(|v| v.abs() < 0.02) {
            continue;
        }
        let inputs = [x, k1, k2];
        let mut tape = GradTape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        for i in 0..3 {
            let numeric = finite_diff_grad(
                |p| {
                    let mut trial = inputs.clone();
                    trial[i] = p.clone();
                    let mut t = GradTape::new();
                    let vs: Vec<Var> = trial.iter().map(|x| t.constant(x.clone())).collect();
                    let l = build(&mut t, &vs)?;
                    Ok(t.value(l).clone())
                },
                &inputs[i],
                h,
            )?;
            worst = worst.max(relative_error(&grads.get_or_zeros(vars[i], inputs[i].shape()), &numeric, 1e-8));
        }
        checked += 1;
    }
    Ok(OpReport {
        name: "conv2d → relu → conv2d",
        instances,
        worst,
    })
}

/// Check every op on `instances` random draws with step `h`.
pub fn check_all_ops(instances: u64, h: f64) -> Result<Vec<OpReport>> {
    let mut out = cases().iter().map(|c| check_case(c, instances, h)).collect::<Result<Vec<_>>>()?;
    out.push(check_chain(instances, h)?);
    Ok(out)
}
