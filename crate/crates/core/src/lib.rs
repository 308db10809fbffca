pub mod autodiff;
pub mod bilstm;
pub mod data;
pub mod error;
pub mod heads;
pub mod model;
pub mod slstm;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
