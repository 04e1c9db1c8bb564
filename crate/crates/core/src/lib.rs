//! Relevance-guided feature prompting for text grounding in images.
//!
//! The crate is `no_std` + `alloc`; the `std` feature (default) only enables
//! runtime SIMD dispatch in the matrix kernels. File formats, the command
//! line and plotting live in the companion `dap` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod params;
pub mod prompting;
pub mod relevance;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{DapError, Result};
pub use tensor::Tensor;
