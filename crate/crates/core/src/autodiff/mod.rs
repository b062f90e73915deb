//! Tensor operations with reverse-mode automatic differentiation.

mod gradcheck;
mod optim;
mod params;
mod tape;

pub use gradcheck::{
    check_against, finite_diff_check, relative_error, CheckReport, GradCheckConfig,
};
pub use optim::{adam_step, adam_update, Adam};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{
    avgpool1d_output_len, conv1d_output_len, matvec, sigmoid, Activation, Gradients, Padding, Tape,
    Var,
};
