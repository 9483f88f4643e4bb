//! SLCA-UNet: residual dense encoders, stacked-convolution skips and
//! layered/channel attention for multi-modal volumetric tumor segmentation.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the two concrete instantiations.

pub mod blocks;
pub mod data;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod metrics;
pub mod network;
pub mod scalar;
pub mod tensor;
pub mod tensorcore;
pub mod train;

pub use data::{LabelVolume, MultiModalVolume};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use network::{Network, NetworkConfig};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Network32 = Network<f32>;
pub type Network64 = Network<f64>;
