//! Rectified flow matching and the DDPM/DDIM baseline.
//!
//! All samplers take the network as a closure over the channel-concatenated
//! input `[z ⊕ zm]`, so the same code runs the trained vector field and the
//! analytic oracle fields used in tests.

use rfsep_tensor::{Element, NdTensor, SeededRng, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::condition::channel_concat;
use crate::error::{invalid, Result};

pub const DEFAULT_SIGMA_MIN: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    /// Left-endpoint Euler, `t_i = i/N`.
    #[default]
    Euler,
    /// Explicit midpoint (two network calls per step).
    Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub sigma_min: f64,
    pub num_steps: usize,
    #[serde(default)]
    pub solver: Solver,
    pub seed: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            sigma_min: DEFAULT_SIGMA_MIN,
            num_steps: 10,
            solver: Solver::Euler,
            seed: 0,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma_min)?;
        if self.num_steps == 0 {
            return Err(invalid("flow sampler needs at least one step"));
        }
        Ok(())
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sigma) {
        return Err(invalid(format!("sigma_min must lie in [0, 1), got {sigma}")));
    }
    Ok(())
}

fn check_same<T: Element>(op: &str, a: &NdTensor<T>, b: &NdTensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("{op}: shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// `z_t = (1 − (1−σ)t)·z0 + t·z1`.
pub fn interpolate<T: Element>(z0: &NdTensor<T>, z1: &NdTensor<T>, t: f64, sigma: f64) -> Result<NdTensor<T>> {
    check_same("interpolate", z0, z1)?;
    check_sigma(sigma)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(invalid(format!("interpolate: t = {t} outside [0, 1]")));
    }
    let a = 1.0 - (1.0 - sigma) * t;
    Ok(z0.zip_with(z1, |x0, x1| T::of(a * x0.f64() + t * x1.f64()))?)
}

/// `v = z1 − (1−σ)·z0`, the time derivative of [`interpolate`].
pub fn target_vector<T: Element>(z0: &NdTensor<T>, z1: &NdTensor<T>, sigma: f64) -> Result<NdTensor<T>> {
    check_same("target_vector", z0, z1)?;
    check_sigma(sigma)?;
    Ok(z0.zip_with(z1, |x0, x1| T::of(x1.f64() - (1.0 - sigma) * x0.f64()))?)
}

/// Per-item interpolation of a `[N, ...]` batch with one `t` per item.
fn interpolate_batch(z0: &Tensor, z1: &Tensor, ts: &[f64], sigma: f64) -> Result<Tensor> {
    let n = z0.shape()[0];
    if ts.len() != n {
        return Err(invalid(format!("{} times for a batch of {n}", ts.len())));
    }
    let items: Vec<Tensor> = (0..n)
        .map(|i| interpolate(&z0.slice_outer(i, i + 1)?, &z1.slice_outer(i, i + 1)?, ts[i], sigma))
        .collect::<Result<_>>()?;
    let stacked = Tensor::stack(&items)?;
    Ok(stacked.reshape(z0.shape().to_vec())?)
}

/// Everything a training step fed to and expected from the network.
#[derive(Debug, Clone)]
pub struct TrainingStep {
    pub loss: Var,
    pub loss_value: f64,
    /// The exact tensor the network received: `[z_t ⊕ zm]` (or `[x_t ⊕ zm]`).
    pub net_input: Tensor,
    /// Regression target: `v` for flow matching, `ε` for diffusion.
    pub target: Tensor,
    /// Network time input per item, in `[0, 1]`.
    pub t: Vec<f64>,
}

/// Network on a tape: `(tape, [z ⊕ zm], t per item, query ids) → prediction`.
pub trait TapeNet: FnOnce(&mut Tape, Var, &[f64], &[usize]) -> Result<Var> {}
impl<F: FnOnce(&mut Tape, Var, &[f64], &[usize]) -> Result<Var>> TapeNet for F {}

fn regress(
    tape: &mut Tape,
    net: impl TapeNet,
    net_input: Tensor,
    target: Tensor,
    t: Vec<f64>,
    net_t: &[f64],
    query_ids: &[usize],
) -> Result<TrainingStep> {
    let x = tape.constant(net_input.clone());
    let pred = net(tape, x, net_t, query_ids)?;
    if tape.shape(pred) != target.shape() {
        return Err(invalid(format!(
            "network returned {:?}, target is {:?}",
            tape.shape(pred),
            target.shape()
        )));
    }
    let y = tape.constant(target.clone());
    let loss = tape.mse(pred, y)?;
    Ok(TrainingStep {
        loss_value: tape.value(loss).item() as f64,
        loss,
        net_input,
        target,
        t,
    })
}

/// Flow-matching loss at given noise `z0` and times `ts`.
pub fn rfm_loss_at(
    tape: &mut Tape,
    net: impl TapeNet,
    z0: &Tensor,
    z1: &Tensor,
    zm: &Tensor,
    query_ids: &[usize],
    ts: &[f64],
    sigma: f64,
) -> Result<TrainingStep> {
    check_same("rfm", z0, z1)?;
    let zt = interpolate_batch(z0, z1, ts, sigma)?;
    let v = target_vector(z0, z1, sigma)?;
    let input = channel_concat(&zt, zm)?;
    regress(tape, net, input, v, ts.to_vec(), ts, query_ids)
}

/// One flow-matching step: `t ~ U[0,1]` per item, `z0 ~ N(0, I)`, loss
/// `mean ‖μ([z_t ⊕ zm], t, E) − v‖²`. Call `tape.backward(step.loss)` for gradients.
pub fn rfm_training_step(
    tape: &mut Tape,
    net: impl TapeNet,
    z1: &Tensor,
    zm: &Tensor,
    query_ids: &[usize],
    sigma: f64,
    rng: &mut SeededRng,
) -> Result<TrainingStep> {
    if z1.rank() != 4 {
        return Err(invalid(format!("rfm expects [N,C,H,W] latents, got {:?}", z1.shape())));
    }
    let ts: Vec<f64> = (0..z1.shape()[0]).map(|_| rng.uniform_f64()).collect();
    let z0 = Tensor::randn_from(z1.shape().to_vec(), rng);
    rfm_loss_at(tape, net, &z0, z1, zm, query_ids, &ts, sigma)
}

/// Inference network: `([z ⊕ zm], t per item, query ids) → prediction`.
/// Generic over the element type so oracle checks can integrate in f64.
pub trait Field<T: Element = f32>: FnMut(&NdTensor<T>, &[f64], &[usize]) -> Result<NdTensor<T>> {}
impl<T: Element, F: FnMut(&NdTensor<T>, &[f64], &[usize]) -> Result<NdTensor<T>>> Field<T> for F {}

fn call<T: Element>(net: &mut impl Field<T>, z: &NdTensor<T>, zm: &NdTensor<T>, t: f64, ids: &[usize]) -> Result<NdTensor<T>> {
    let n = z.shape()[0];
    let out = net(&channel_concat(z, zm)?, &vec![t; n], ids)?;
    check_same("field output", &out, z)?;
    Ok(out)
}

fn axpy<T: Element>(z: &NdTensor<T>, h: f64, v: &NdTensor<T>) -> Result<NdTensor<T>> {
    Ok(z.zip_with(v, |a, b| T::of(a.f64() + h * b.f64()))?)
}

/// Integrate `dz/dt = μ([z ⊕ zm], t)` from `z0` over `[0, 1]` in `n` steps.
pub fn integrate<T: Element>(
    mut net: impl Field<T>,
    z0: &NdTensor<T>,
    zm: &NdTensor<T>,
    query_ids: &[usize],
    n: usize,
    solver: Solver,
) -> Result<NdTensor<T>> {
    if n == 0 {
        return Err(invalid("flow sampler needs at least one step"));
    }
    if z0.rank() != 4 || z0.shape()[0] != query_ids.len() {
        return Err(invalid(format!("{:?} latents for {} queries", z0.shape(), query_ids.len())));
    }
    let h = 1.0 / n as f64;
    let mut z = z0.clone();
    for i in 0..n {
        let t = i as f64 * h;
        let v = match solver {
            Solver::Euler => call(&mut net, &z, zm, t, query_ids)?,
            Solver::Midpoint => {
                let k1 = call(&mut net, &z, zm, t, query_ids)?;
                let mid = axpy(&z, 0.5 * h, &k1)?;
                call(&mut net, &mid, zm, t + 0.5 * h, query_ids)?
            }
        };
        z = axpy(&z, h, &v)?;
    }
    Ok(z)
}

/// Euler integration from `z0`.
pub fn euler_integrate<T: Element>(net: impl Field<T>, z0: &NdTensor<T>, zm: &NdTensor<T>, query_ids: &[usize], n: usize) -> Result<NdTensor<T>> {
    integrate(net, z0, zm, query_ids, n, Solver::Euler)
}

/// Noise `z0 ~ N(0, I)` drawn from `seed` in the shape of `zm`.
pub fn initial_noise(zm: &Tensor, seed: u64) -> Result<Tensor> {
    Ok(Tensor::randn(zm.shape().to_vec(), seed)?)
}

/// `ẑ1` from `z0 ~ N(0, I)` (seeded) by `n` Euler steps.
pub fn euler_sample(net: impl Field, zm: &Tensor, query_ids: &[usize], n: usize, seed: u64) -> Result<Tensor> {
    euler_integrate(net, &initial_noise(zm, seed)?, zm, query_ids, n)
}

/// Flow sampling with the configured solver.
pub fn flow_sample(net: impl Field, zm: &Tensor, query_ids: &[usize], cfg: &FlowConfig) -> Result<Tensor> {
    cfg.validate()?;
    integrate(net, &initial_noise(zm, cfg.seed)?, zm, query_ids, cfg.num_steps, cfg.solver)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Linear-β DDPM schedule with `ᾱ_t = Π_{s≤t} (1 − β_s)` and `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    alpha_bar: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn new(cfg: &DiffusionConfig) -> Result<Self> {
        let t = cfg.steps;
        if t == 0 || !(cfg.beta_start > 0.0 && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0) {
            return Err(invalid(format!("invalid diffusion schedule {cfg:?}")));
        }
        let mut alpha_bar = Vec::with_capacity(t + 1);
        alpha_bar.push(1.0);
        let mut acc = 1.0;
        for s in 1..=t {
            let beta = if t == 1 {
                cfg.beta_start
            } else {
                cfg.beta_start + (cfg.beta_end - cfg.beta_start) * (s - 1) as f64 / (t - 1) as f64
            };
            acc *= 1.0 - beta;
            alpha_bar.push(acc);
        }
        Ok(Self { alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    /// `ᾱ_t` for `t ∈ [0, T]`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| invalid(format!("diffusion step {t} outside [0, {}]", self.steps())))
    }

    /// Network time input for step `t`.
    pub fn time_input(&self, t: usize) -> f64 {
        t as f64 / self.steps() as f64
    }

    /// DDIM subsequence `τ_i = ⌊i·T/N⌋`, `i = 1..N`.
    pub fn subsequence(&self, n: usize) -> Result<Vec<usize>> {
        let t = self.steps();
        if n == 0 || n > t {
            return Err(invalid(format!("DDIM needs 1 ≤ N ≤ {t}, got {n}")));
        }
        Ok((1..=n).map(|i| i * t / n).collect())
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε` for `1 ≤ t ≤ T`.
pub fn ddpm_forward<T: Element>(x0: &NdTensor<T>, t: usize, eps: &NdTensor<T>, schedule: &DiffusionSchedule) -> Result<NdTensor<T>> {
    check_same("ddpm_forward", x0, eps)?;
    if t == 0 || t > schedule.steps() {
        return Err(invalid(format!("diffusion step {t} outside [1, {}]", schedule.steps())));
    }
    ddpm_forward_ab(x0, schedule.alpha_bar(t)?, eps)
}

/// Forward noising at an explicit `ᾱ`.
pub fn ddpm_forward_ab<T: Element>(x0: &NdTensor<T>, alpha_bar: f64, eps: &NdTensor<T>) -> Result<NdTensor<T>> {
    check_same("ddpm_forward", x0, eps)?;
    let (a, b) = (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt());
    Ok(x0.zip_with(eps, |x, e| T::of(a * x.f64() + b * e.f64()))?)
}

/// Diffusion loss at given steps and noise.
pub fn ddpm_loss_at(
    tape: &mut Tape,
    net: impl TapeNet,
    x0: &Tensor,
    eps: &Tensor,
    zm: &Tensor,
    query_ids: &[usize],
    steps: &[usize],
    schedule: &DiffusionSchedule,
) -> Result<TrainingStep> {
    check_same("ddpm", x0, eps)?;
    let n = x0.shape()[0];
    if steps.len() != n {
        return Err(invalid(format!("{} steps for a batch of {n}", steps.len())));
    }
    let items: Vec<Tensor> = (0..n)
        .map(|i| ddpm_forward(&x0.slice_outer(i, i + 1)?, steps[i], &eps.slice_outer(i, i + 1)?, schedule))
        .collect::<Result<_>>()?;
    let xt = Tensor::stack(&items)?.reshape(x0.shape().to_vec())?;
    let input = channel_concat(&xt, zm)?;
    let t: Vec<f64> = steps.iter().map(|&s| schedule.time_input(s)).collect();
    regress(tape, net, input, eps.clone(), t.clone(), &t, query_ids)
}

/// One ε-prediction step: `t ~ U{1..T}`, `ε ~ N(0, I)`, loss `mean ‖ε̂ − ε‖²`.
pub fn ddpm_training_step(
    tape: &mut Tape,
    net: impl TapeNet,
    x0: &Tensor,
    zm: &Tensor,
    query_ids: &[usize],
    schedule: &DiffusionSchedule,
    rng: &mut SeededRng,
) -> Result<TrainingStep> {
    if x0.rank() != 4 {
        return Err(invalid(format!("ddpm expects [N,C,H,W] latents, got {:?}", x0.shape())));
    }
    let steps: Vec<usize> = (0..x0.shape()[0]).map(|_| 1 + rng.below(schedule.steps())).collect();
    let eps = Tensor::randn_from(x0.shape().to_vec(), rng);
    ddpm_loss_at(tape, net, x0, &eps, zm, query_ids, &steps, schedule)
}

/// Deterministic DDIM (η = 0) from `x_T` over the subsequence of `n` steps.
pub fn ddim_integrate(
    mut net: impl Field,
    x_t: &Tensor,
    zm: &Tensor,
    query_ids: &[usize],
    n: usize,
    schedule: &DiffusionSchedule,
) -> Result<Tensor> {
    let taus = schedule.subsequence(n)?;
    if x_t.rank() != 4 || x_t.shape()[0] != query_ids.len() {
        return Err(invalid(format!("{:?} latents for {} queries", x_t.shape(), query_ids.len())));
    }
    let mut x = x_t.clone();
    for i in (0..n).rev() {
        let t = taus[i];
        let prev = if i == 0 { 0 } else { taus[i - 1] };
        let (ab, ab_prev) = (schedule.alpha_bar(t)?, schedule.alpha_bar(prev)?);
        let eps = call(&mut net, &x, zm, schedule.time_input(t), query_ids)?;
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        x = x.zip_with(&eps, |xv, ev| {
            let x0 = (xv as f64 - sb * ev as f64) / sa;
            (pa * x0 + pb * ev as f64) as f32
        })?;
    }
    Ok(x)
}

/// DDIM from `x_T ~ N(0, I)` drawn from `seed`.
pub fn ddim_sample(net: impl Field, zm: &Tensor, query_ids: &[usize], n: usize, seed: u64, schedule: &DiffusionSchedule) -> Result<Tensor> {
    ddim_integrate(net, &initial_noise(zm, seed)?, zm, query_ids, n, schedule)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rfsep_tensor::Tensor64;

    fn s64(v: f64) -> Tensor64 {
        Tensor64::new([1], vec![v]).unwrap()
    }

    #[test]
    fn interpolation_scalar_values() {
        let z = interpolate(&s64(2.0), &s64(4.0), 0.5, 1e-5).unwrap();
        assert!((z.item() - 3.00001).abs() < 1e-12);
        let v = target_vector(&s64(2.0), &s64(4.0), 1e-5).unwrap();
        assert!((v.item() - 2.00002).abs() < 1e-12);
        assert_eq!(interpolate(&s64(2.0), &s64(4.0), 0.0, 1e-5).unwrap().item(), 2.0);
        assert_eq!(interpolate(&s64(0.0), &s64(4.0), 1.0, 1e-5).unwrap().item(), 4.0);
    }

    #[test]
    fn interpolation_rejects_bad_arguments() {
        assert!(interpolate(&s64(0.0), &s64(1.0), 1.1, 1e-5).is_err());
        assert!(interpolate(&s64(0.0), &s64(1.0), -0.1, 1e-5).is_err());
        assert!(interpolate(&s64(0.0), &Tensor64::zeros([2]), 0.5, 1e-5).is_err());
        assert!(target_vector(&s64(0.0), &Tensor64::zeros([2]), 1e-5).is_err());
        assert!(target_vector(&s64(0.0), &s64(0.0), 1.0).is_err());
    }

    #[test]
    fn zero_net_loss_is_mean_v_squared() {
        let z1 = Tensor::randn([3, 4, 5, 4], 1).unwrap();
        let zm = Tensor::randn([3, 4, 5, 4], 2).unwrap();
        let mut rng = SeededRng::new(7);
        let mut tape = Tape::new();
        let step = rfm_training_step(
            &mut tape,
            |t: &mut Tape, x: Var, _: &[f64], _: &[usize]| {
                let s = t.shape(x).to_vec();
                Ok(t.constant(Tensor::zeros([s[0], 4, s[2], s[3]])))
            },
            &z1,
            &zm,
            &[0, 1, 2],
            1e-5,
            &mut rng,
        )
        .unwrap();
        // Recompute v from the same stream, independently of the step's own target.
        let mut rng = SeededRng::new(7);
        for _ in 0..3 {
            rng.uniform_f64();
        }
        let z0 = Tensor::randn_from([3, 4, 5, 4], &mut rng);
        let by_hand: f64 = z0
            .data()
            .iter()
            .zip(z1.data())
            .map(|(&a, &b)| (b as f64 - (1.0 - 1e-5) * a as f64).powi(2))
            .sum::<f64>()
            / z0.numel() as f64;
        assert!((step.loss_value - by_hand).abs() < 1e-5 * by_hand);
    }

    #[test]
    fn oracle_net_has_zero_loss() {
        let z1 = Tensor::randn([2, 4, 3, 3], 1).unwrap();
        let zm = Tensor::zeros([2, 4, 3, 3]);
        let z0 = Tensor::randn([2, 4, 3, 3], 5).unwrap();
        let v = target_vector(&z0, &z1, 1e-5).unwrap();
        let mut tape = Tape::new();
        let step = rfm_loss_at(
            &mut tape,
            |t: &mut Tape, _: Var, _: &[f64], _: &[usize]| Ok(t.constant(v.clone())),
            &z0,
            &z1,
            &zm,
            &[0, 0],
            &[0.2, 0.8],
            1e-5,
        )
        .unwrap();
        assert_eq!(step.loss_value, 0.0);
    }

    #[test]
    fn single_euler_step() {
        let zm = Tensor::randn([1, 4, 2, 2], 3).unwrap();
        let z0 = Tensor::randn([1, 4, 2, 2], 4).unwrap();
        let net = |x: &Tensor, t: &[f64], _: &[usize]| -> Result<Tensor> {
            assert_eq!(t, &[0.0]);
            Ok(crate::condition::channel_slice(x, 0, 4)?.map(|v| v.sin()))
        };
        let out = euler_integrate(net, &z0, &zm, &[0], 1).unwrap();
        let expect = z0.map(|v| v + v.sin());
        assert!(out.max_abs_diff(&expect) < 1e-6);
        assert!(euler_integrate(net, &z0, &zm, &[0], 0).is_err());
    }

    #[test]
    fn midpoint_is_second_order_on_linear_field() {
        // dz/dt = z has solution z0·e; midpoint error shrinks ~4× per halving.
        let zm = Tensor::zeros([1, 1, 1, 1]);
        let z0 = Tensor::ones([1, 1, 1, 1]);
        let f = |x: &Tensor, _: &[f64], _: &[usize]| crate::condition::channel_slice(x, 0, 1);
        let err = |n| (integrate(f, &z0, &zm, &[0], n, Solver::Midpoint).unwrap().item() as f64 - 1f64.exp()).abs();
        let ratio = err(8) / err(16);
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
        let e_err = (euler_integrate(f, &z0, &zm, &[0], 16).unwrap().item() as f64 - 1f64.exp()).abs();
        assert!(err(16) < e_err);
    }

    #[test]
    fn schedule_properties() {
        let s = DiffusionSchedule::new(&DiffusionConfig::default()).unwrap();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!((s.alpha_bar(1).unwrap() - (1.0 - 1e-4)).abs() < 1e-15);
        for t in 1..=1000 {
            assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        }
        assert!(s.alpha_bar(1001).is_err());
        assert_eq!(s.subsequence(1000).unwrap(), (1..=1000).collect::<Vec<_>>());
        assert_eq!(s.subsequence(4).unwrap(), vec![250, 500, 750, 1000]);
        assert!(s.subsequence(0).is_err() && s.subsequence(1001).is_err());
    }

    #[test]
    fn ddpm_forward_values() {
        let one = s64(1.0);
        assert!((ddpm_forward_ab(&one, 0.25, &one).unwrap().item() - 1.366_025_403_784_438_6).abs() < 1e-12);
        assert_eq!(ddpm_forward_ab(&s64(0.7), 1.0, &s64(3.0)).unwrap().item(), 0.7);
        let s = DiffusionSchedule::new(&DiffusionConfig::default()).unwrap();
        assert!(ddpm_forward(&one, 0, &one, &s).is_err());
        assert!(ddpm_forward(&one, 1001, &one, &s).is_err());
    }

    #[test]
    fn zero_net_diffusion_loss_is_chi_square_mean() {
        let s = DiffusionSchedule::new(&DiffusionConfig::default()).unwrap();
        let x0 = Tensor::randn([4, 4, 25, 16], 1).unwrap();
        let zm = Tensor::zeros([4, 4, 25, 16]);
        let mut tape = Tape::new();
        let step = ddpm_training_step(
            &mut tape,
            |t: &mut Tape, x: Var, ts: &[f64], _: &[usize]| {
                assert!(ts.iter().all(|&t| t > 0.0 && t <= 1.0));
                let s = t.shape(x).to_vec();
                Ok(t.constant(Tensor::zeros([s[0], 4, s[2], s[3]])))
            },
            &x0,
            &zm,
            &[0; 4],
            &s,
            &mut SeededRng::new(3),
        )
        .unwrap();
        assert!((step.loss_value - 1.0).abs() < 0.05, "{}", step.loss_value);
    }

    /// Exact `E[ε | x_t]` for `x0 ~ N(μ, s²)` element-wise.
    fn gaussian_eps(x: f64, ab: f64, mu: f64, s: f64) -> f64 {
        (1.0 - ab).sqrt() * (x - ab.sqrt() * mu) / (ab * s * s + 1.0 - ab)
    }

    #[test]
    fn ddim_with_exact_eps_returns_posterior_mean() {
        let (mu, s) = (0.7, 0.5);
        let sched = DiffusionSchedule::new(&DiffusionConfig::default()).unwrap();
        let zm = Tensor::zeros([1, 1, 4, 4]);
        for n in [10, 50] {
            let mut last_input = None;
            let mut last_ab = 0.0;
            let net = |x: &Tensor, t: &[f64], _: &[usize]| -> Result<Tensor> {
                let step = (t[0] * 1000.0).round() as usize;
                let ab = sched.alpha_bar(step)?;
                let z = crate::condition::channel_slice(x, 0, 1)?;
                last_input = Some(z.clone());
                last_ab = ab;
                Ok(z.map(|v| gaussian_eps(v as f64, ab, mu, s) as f32))
            };
            let out = ddim_sample(net, &zm, &[0], n, 11, &sched).unwrap();
            // Posterior mean of x0 given the last state the sampler visited.
            let x = last_input.unwrap();
            for (o, xv) in out.data().iter().zip(x.data()) {
                let xv = *xv as f64;
                let post = mu + last_ab.sqrt() * s * s * (xv - last_ab.sqrt() * mu) / (last_ab * s * s + 1.0 - last_ab);
                assert!((*o as f64 - post).abs() < 1e-3, "N={n}: {o} vs {post}");
            }
        }
    }

    #[test]
    fn fine_ddim_follows_the_gaussian_probability_flow() {
        // For Gaussian data the deterministic flow maps x_T to μ + s·(x_T − √ᾱ_T μ)/√(ᾱ_T s² + 1 − ᾱ_T).
        let (mu, s) = (0.7, 0.5);
        let sched = DiffusionSchedule::new(&DiffusionConfig::default()).unwrap();
        let zm = Tensor::zeros([1, 1, 4, 4]);
        let net = |x: &Tensor, t: &[f64], _: &[usize]| -> Result<Tensor> {
            let ab = sched.alpha_bar((t[0] * 1000.0).round() as usize)?;
            Ok(crate::condition::channel_slice(x, 0, 1)?.map(|v| gaussian_eps(v as f64, ab, mu, s) as f32))
        };
        let xt = Tensor::randn([1, 1, 4, 4], 2).unwrap();
        let out = ddim_integrate(net, &xt, &zm, &[0], 1000, &sched).unwrap();
        let ab_t = sched.alpha_bar(1000).unwrap();
        for (o, x) in out.data().iter().zip(xt.data()) {
            let exact = mu + s * (*x as f64 - ab_t.sqrt() * mu) / (ab_t * s * s + 1.0 - ab_t).sqrt();
            assert!((*o as f64 - exact).abs() < 1e-2, "{o} vs {exact}");
        }
    }
}
