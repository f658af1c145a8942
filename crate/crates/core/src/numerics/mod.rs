//! Dense arrays, the operation tape, parameters and optimisation.

mod array;
mod gradcheck;
mod layers;
mod optim;
mod params;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use layers::{BatchNorm, Linear, Mode};
pub use optim::{Adam, AdamConfig};
pub use params::{Params, BN_MOMENTUM};
pub use tape::{sigmoid, softplus, Activation, CustomOp, Gradients, StatUpdate, Tape, Var, BN_EPS};

