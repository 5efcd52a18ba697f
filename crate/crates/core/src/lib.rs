pub mod attention;
pub mod error;
pub mod metrics;
pub mod model;
pub mod params;
pub mod recurrent;
pub mod specgen;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
