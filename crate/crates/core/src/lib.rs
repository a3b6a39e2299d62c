pub mod bench;
pub mod codec;
pub mod error;
pub mod gradcheck;
pub mod igt;
pub mod ivt;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{IvtError, Result};
pub use tensor::{Graph, ParamStore, Tensor, Var};
