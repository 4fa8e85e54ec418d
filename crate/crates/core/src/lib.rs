pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod lora;
pub mod metrics;
pub mod params;
pub mod prompting;
pub mod ssm;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
