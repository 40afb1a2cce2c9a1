pub mod autodiff;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod expansion;
pub mod harness;
pub mod models;
pub mod optim;
pub mod scalar;

pub use error::{Error, ErrorCategory, Result};
pub use models::{Model, ModelConfig, ModelKind};
pub use scalar::Scalar;

pub type Model64 = models::Model<f64>;
pub type Model32 = models::Model<f32>;
