//! Channel-wise recurrent convolution (CRC) layers, Recurrent modules and the
//! RecNet image classifiers built from them.
//!
//! Everything runs on the CPU in `f32` or `f64` through the [`Real`] trait.
//! Training uses `f32`; gradient and equivalence checks use `f64`.

pub mod accounting;
pub mod checkpoint;
pub mod crc;
pub mod data;
pub mod error;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rec;
pub mod state;
pub mod tensor;
pub mod train;
pub mod verify;

pub use crc::{Connectivity, CrcLayer, CrcSpec, CrcVariant};
pub use error::{Error, Result};
pub use model::{RecNetConfig, RecNetModel};
pub use rec::{RecMode, RecModule, TransitionBlock};
pub use state::{Module, Visitor};
pub use tensor::{ConvKernel, Dims4, Param, Real, Tensor4};
