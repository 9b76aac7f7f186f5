pub mod augment;
pub mod autodiff;
pub mod data;
pub mod engine;
pub mod error;
pub mod image;
pub mod losses;
pub mod model;
pub mod params;
pub mod perturb;
pub mod report;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ChangeNet32 = model::ChangeNet<f32>;
pub type ChangeNet64 = model::ChangeNet<f64>;
