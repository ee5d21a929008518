//! Rectified-flow arithmetic on plain tensors: the interpolation path, its
//! velocity, Euler integration and the diffusion baseline's schedule.

use rfsep::flow::{ddpm_forward, euler_integrate, interpolate, target_vector, DiffusionConfig, DiffusionSchedule};
use rfsep_tensor::Tensor64;

fn main() -> anyhow::Result<()> {
    let sigma = 1e-5;
    let z0 = Tensor64::randn([1, 4, 25, 16], 1)?;
    let z1 = Tensor64::randn([1, 4, 25, 16], 2)?;
    let v = target_vector(&z0, &z1, sigma)?;

    for t in [0.0, 0.25, 0.5, 1.0] {
        let zt = interpolate(&z0, &z1, t, sigma)?;
        println!("t = {t:<4}  |z_t - z1|max = {:.4}", zt.max_abs_diff(&z1));
    }

    // the path is a straight line, so Euler with the true velocity is exact
    for n in [1, 7, 100] {
        let field = |_: &Tensor64, _: &[f64], _: &[usize]| Ok(v.clone());
        let end = euler_integrate(field, &z0, &z0, &[0], n)?;
        let want = interpolate(&z0, &z1, 1.0, sigma)?;
        println!("Euler N = {n:<3} error {:.2e}", end.max_abs_diff(&want));
    }

    let schedule = DiffusionSchedule::new(&DiffusionConfig::default())?;
    for t in [1, 250, 500, 1000] {
        println!("diffusion t = {t:<3} alpha_bar = {:.6}", schedule.alpha_bar(t)?);
    }
    println!("DDIM 10-step subsequence: {:?}", schedule.subsequence(10)?);
    let xt = ddpm_forward(&z1, 1000, &z0, &schedule)?;
    println!("x_T vs eps max diff {:.4}", xt.max_abs_diff(&z0));
    Ok(())
}
