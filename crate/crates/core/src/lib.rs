//! Orthogonal capsule networks: a small reverse-mode autodiff engine,
//! entmax, Householder-parameterized orthogonal maps, attention routing with
//! similarity pruning, and a trainer.

pub mod capsule;
pub mod checkpoint;
pub mod data;
pub mod entmax;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod ortho;
pub mod params;
pub mod routing;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Graph, Tensor, Var};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Capsules64 = capsule::CapsuleTensor<f64>;
pub type Capsules32 = capsule::CapsuleTensor<f32>;
