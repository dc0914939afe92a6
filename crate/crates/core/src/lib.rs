pub mod distill;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
