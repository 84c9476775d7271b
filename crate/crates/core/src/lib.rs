pub mod clddm;
pub mod container;
pub mod data;
pub mod error;
pub mod evalsuite;
pub mod gradsuite;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod stencoder;
pub mod tensorcore;
pub mod triplet;
pub mod windows;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use scalar::Scalar;
pub use tensorcore::{Graph, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
