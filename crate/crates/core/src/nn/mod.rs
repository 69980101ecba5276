//! Minimal differentiable network engine used by every learned component.

mod adam;
pub mod loss;
mod net;
mod real;
mod tensor;

pub use adam::Adam;
pub use net::{BnMode, Grads, Layer, Network, Trace};
pub use real::{Dual, Real};
pub use tensor::{argmax, Tensor};
