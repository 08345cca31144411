//! Dropout regularization laboratory: fully-connected networks generic over
//! the float type, dropout masks, the loss family with its explicit dropout
//! penalties, gradients and Hessian-vector products, training loops,
//! condensation and flatness metrics, and the one-dimensional ReLU theory
//! checks.

pub mod autodiff;
pub mod data;
pub mod dropout;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optimize;
pub mod scalar;
pub mod theory;

pub use error::{LabError, Result};
pub use scalar::Scalar;

pub type ParamSet64 = nn::ParamSet<f64>;
pub type ParamSet32 = nn::ParamSet<f32>;
pub type Dataset64 = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type DropoutMask64 = dropout::DropoutMask<f64>;
pub type DropoutMask32 = dropout::DropoutMask<f32>;
