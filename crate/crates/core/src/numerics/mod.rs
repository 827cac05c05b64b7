//! Dense `f64` arrays with reverse-mode differentiation.

pub mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{check_gradients, check_param_gradients, relative_error, GradCheckReport};
pub use params::{Init, Param, ParamId, ParamStore};
pub use tape::{KernelCorrelation, Tape, Var};

pub(crate) use tape::softmax_in_place;
