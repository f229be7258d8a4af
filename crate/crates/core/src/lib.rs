pub mod data;
pub mod error;
pub mod flow_score;
pub mod generation;
pub mod metrics;
pub mod model;
pub mod projection;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Real, Tensor, Var};
