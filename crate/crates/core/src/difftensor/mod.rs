//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.

mod array;
pub mod checkpoint;
pub(crate) mod gemm;
mod optim;
mod params;
pub mod spectral;
mod tape;

pub use array::Array;
pub use optim::Adam;
pub use params::{Bound, Param, ParamId, ParamSet};
pub use spectral::SpectralPlan;
pub use tape::{Grads, Tape, Var};
