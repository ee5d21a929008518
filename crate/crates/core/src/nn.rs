//! Parameter initialisation and layer helpers shared by every network.

use rfsep_tensor::{Bound, ParamSet, SeededRng, Tape, Tensor, Var};

use crate::error::Result;

/// LeCun-normal weights (`std = 1/√fan_in`) and zero bias.
pub(crate) fn add_conv(ps: &mut ParamSet, name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut SeededRng) {
    let std = 1.0 / ((c_in * k * k) as f64).sqrt();
    let w = Tensor::randn_from([c_out, c_in, k, k], rng).map(|v| v * std as f32);
    ps.insert(format!("{name}.weight"), w);
    ps.insert(format!("{name}.bias"), Tensor::zeros([c_out]));
}

pub(crate) fn add_zero_conv(ps: &mut ParamSet, name: &str, c_out: usize, c_in: usize, k: usize) {
    ps.insert(format!("{name}.weight"), Tensor::zeros([c_out, c_in, k, k]));
    ps.insert(format!("{name}.bias"), Tensor::zeros([c_out]));
}

pub(crate) fn add_linear(ps: &mut ParamSet, name: &str, d_out: usize, d_in: usize, rng: &mut SeededRng) {
    let std = 1.0 / (d_in as f64).sqrt();
    let w = Tensor::randn_from([d_out, d_in], rng).map(|v| v * std as f32);
    ps.insert(format!("{name}.weight"), w);
    ps.insert(format!("{name}.bias"), Tensor::zeros([d_out]));
}

pub(crate) fn add_norm(ps: &mut ParamSet, name: &str, c: usize) {
    ps.insert(format!("{name}.gamma"), Tensor::ones([c]));
    ps.insert(format!("{name}.beta"), Tensor::zeros([c]));
}

/// 3×3 (or 1×1 when `k` is 1) convolution with "same"-style padding.
pub(crate) fn conv(tape: &mut Tape, b: &Bound, name: &str, x: Var, stride: usize) -> Result<Var> {
    let w = b.var(&format!("{name}.weight"))?;
    let k = tape.shape(w)[2];
    let bias = b.var(&format!("{name}.bias"))?;
    Ok(tape.conv2d(x, w, Some(bias), stride, k / 2)?)
}

pub(crate) fn linear(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = b.var(&format!("{name}.weight"))?;
    let bias = b.var(&format!("{name}.bias"))?;
    Ok(tape.linear(x, w, Some(bias))?)
}

pub(crate) fn norm(tape: &mut Tape, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let g = b.var(&format!("{name}.gamma"))?;
    let beta = b.var(&format!("{name}.beta"))?;
    Ok(tape.group_norm(x, g, beta, 1e-5)?)
}
