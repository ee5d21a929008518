//! Adam with a global gradient-norm cap over a [`ParamSet`].

use rfsep_tensor::{adam_step, clip_grad_norm, AdamConfig, AdamState, ParamSet, Tensor};

use crate::error::Result;

#[derive(Debug, Clone)]
pub struct Optimizer {
    pub cfg: AdamConfig,
    pub state: AdamState,
    /// Global-norm cap; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Optimizer {
    pub fn new(params: &ParamSet, lr: f64, clip: Option<f64>) -> Self {
        Self {
            cfg: AdamConfig::with_lr(lr),
            state: AdamState::zeros_like(params.tensors()),
            clip,
        }
    }

    /// Clip, then update in place. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamSet, mut grads: Vec<Tensor>) -> Result<f64> {
        let norm = match self.clip {
            Some(max) => clip_grad_norm(&mut grads, max),
            None => grads
                .iter()
                .flat_map(|g| g.data())
                .map(|&v| (v as f64).powi(2))
                .sum::<f64>()
                .sqrt(),
        };
        adam_step(params.tensors_mut(), &grads, &mut self.state, &self.cfg)?;
        Ok(norm)
    }
}
