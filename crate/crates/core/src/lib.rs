//! Core library for drwkv: tensors, autodiff, the bidirectional WKV kernel,
//! the denoising backbone, and the DDPM pipeline around it.

pub mod backbone;
pub mod block;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod params;
pub mod reference;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod wkv;

pub use error::{Error, Result};
