pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod supervision;
pub mod tensor;

pub use error::{Error, Result};
