//! Minimal n-dimensional arrays with reverse-mode autodiff.
//!
//! The op set is deliberately closed: it covers exactly what the codec,
//! vector-field network and query classifier need (convolutions, linear
//! layers, single-group normalization, FiLM, channel concat/slice and the
//! usual losses).

pub mod adam;
mod element;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod opcheck;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use element::Element;
pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_grad, relative_error};
pub use kernels::{conv2d, matmul};
pub use opcheck::{check_all_ops, OpReport};
pub use params::{Bound, ParamSet};
pub use rng::SeededRng;
pub use tape::{GradTape, Gradients, Tape, Tape64, Var};
pub use tensor::{NdTensor, Tensor, Tensor64};
