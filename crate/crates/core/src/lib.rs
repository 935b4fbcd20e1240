pub mod error;
pub mod evalbench;
pub mod graph;
pub mod layers;
pub mod model;
pub mod sampler;
pub mod tensor;
pub mod timeenc;
pub mod trainer;

pub use error::{Error, Result};
