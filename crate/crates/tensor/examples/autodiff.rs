//! A two-layer regression net on the tape, its gradient checked against
//! finite differences, then a few Adam steps.

use rfsep_tensor::{
    adam_step, check_all_ops, finite_diff_grad, relative_error, AdamConfig, AdamState, Tape, Tape64, Tensor, Tensor64,
};

fn loss64(x: &Tensor64, w1: &Tensor64, w2: &Tensor64, y: &Tensor64) -> rfsep_tensor::Result<(Tensor64, Tensor64)> {
    let mut tape = Tape64::new();
    let (xv, w1v, w2v, yv) = (tape.constant(x.clone()), tape.param(w1.clone()), tape.constant(w2.clone()), tape.constant(y.clone()));
    let h = tape.linear(xv, w1v, None)?;
    let h = tape.silu(h)?;
    let out = tape.linear(h, w2v, None)?;
    let l = tape.mse(out, yv)?;
    let value = tape.value(l).clone();
    let grads = tape.backward(l)?;
    Ok((value, grads.get(w1v).unwrap().clone()))
}

fn main() -> rfsep_tensor::Result<()> {
    let x = Tensor64::randn([16, 5], 1)?;
    let w1 = Tensor64::randn([8, 5], 2)?;
    let w2 = Tensor64::randn([1, 8], 3)?;
    let y = Tensor64::randn([16, 1], 4)?;
    let (_, analytic) = loss64(&x, &w1, &w2, &y)?;
    let numeric = finite_diff_grad(|w| Ok(loss64(&x, w, &w2, &y)?.0), &w1, 1e-4)?;
    println!("d loss / d w1: relative error vs finite differences {:.2e}", relative_error(&analytic, &numeric, 1e-8));

    // f32 training loop with Adam
    let xs = x.cast::<f32>();
    let ys = y.cast::<f32>();
    let mut params = vec![w1.cast::<f32>(), w2.cast::<f32>()];
    let mut state = AdamState::zeros_like(&params);
    let cfg = AdamConfig::with_lr(1e-2);
    for step in 0..=200 {
        let mut tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let (xv, yv) = (tape.constant(xs.clone()), tape.constant(ys.clone()));
        let h = tape.linear(xv, vars[0], None)?;
        let h = tape.silu(h)?;
        let out = tape.linear(h, vars[1], None)?;
        let l = tape.mse(out, yv)?;
        if step % 50 == 0 {
            println!("step {step:>3} loss {:.5}", tape.value(l).item());
        }
        let grads = tape.backward(l)?;
        let g: Vec<Tensor> = vars.iter().map(|v| grads.get(*v).unwrap().clone()).collect();
        adam_step(&mut params, &g, &mut state, &cfg)?;
    }

    let reports = check_all_ops(3, 1e-3)?;
    let worst = reports.iter().map(|r| r.worst).fold(0.0, f64::max);
    println!("{} op cases gradient-checked, worst relative error {worst:.2e}", reports.len());
    Ok(())
}
