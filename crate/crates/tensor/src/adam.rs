use crate::error::{invalid, Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(cfg.lr >= 0.0) || !cfg.lr.is_finite() {
        return Err(invalid("adam_step", format!("learning rate must be >= 0, got {}", cfg.lr)));
    }
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(invalid(
            "adam_step",
            format!(
                "{} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        for other in [g, &state.m[i], &state.v[i]] {
            if p.shape() != other.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: other.shape().to_vec(),
                });
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gv = gv as f64;
            let mj = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * gv;
            let vj = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * gv * gv;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = cfg.lr * (mj / bc1) / ((vj / bc2).sqrt() + cfg.eps);
            *pv = (*pv as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Rescale `grads` so their joint L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut params = vec![Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = params.clone();
        let mut state = AdamState::zeros_like(&params);
        adam_step(&mut params, &[Tensor::zeros([3])], &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut params = vec![Tensor::new([2], vec![1.0, 2.0]).unwrap()];
        let before = params.clone();
        let mut state = AdamState::zeros_like(&params);
        let g = vec![Tensor::new([2], vec![0.3, -4.0]).unwrap()];
        adam_step(&mut params, &g, &mut state, &AdamConfig::with_lr(0.0)).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        // m̂ = g and v̂ = g² after one step, so the update is lr·g/(|g|+ε).
        for g in [0.37f32, -5.0, 1e-2] {
            let mut params = vec![Tensor::scalar(1.0)];
            let mut state = AdamState::zeros_like(&params);
            let cfg = AdamConfig::with_lr(0.01);
            adam_step(&mut params, &[Tensor::scalar(g)], &mut state, &cfg).unwrap();
            let delta = params[0].item() - 1.0;
            assert!((delta + 0.01 * g.signum()).abs() < 1e-6, "g={g} delta={delta}");
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let mut params = vec![Tensor::zeros([2])];
        let mut state = AdamState::zeros_like(&params);
        let bad = vec![Tensor::zeros([3])];
        assert!(adam_step(&mut params, &bad, &mut state, &AdamConfig::default()).is_err());
        let g = vec![Tensor::zeros([2])];
        assert!(adam_step(&mut params, &g, &mut state, &AdamConfig::with_lr(-1.0)).is_err());
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Tensor::new([2], vec![3.0, 4.0]).unwrap()];
        let n = clip_grad_norm(&mut g, 1.0);
        assert!((n - 5.0).abs() < 1e-12);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-6);
    }
}
