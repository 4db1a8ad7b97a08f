//! Small dense-tensor engine with reverse-mode differentiation, sized for
//! multilayer perceptrons unrolled through short sampling chains.

mod error;
mod gradcheck;
mod kernels;
mod network;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{finite_difference_check, GradCheckConfig, GradCheckReport};
pub use network::{apply_network, Activation, Mlp};
pub use kernels::sigmoid;
pub use optim::{masked_adam_step, AdamConfig, AdamState};
pub use params::{Gradients, ParameterStore};
pub use tape::{ParamMode, Tape, Var};
pub use tensor::Tensor;
