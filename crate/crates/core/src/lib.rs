pub mod checkpoint;
pub mod data;
pub mod error;
pub mod glff;
pub mod guided_filter;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;
pub mod verify;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::{Module, Parameter, Tensor};
