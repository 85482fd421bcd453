//! A self-contained CPU engine for sparse-mask single-image super-resolution:
//! learnable spatial and channel masks via Gumbel softmax, masked dense
//! convolution for training, four-branch sparse convolution with kernel
//! splitting for inference, and mask-driven FLOP and latency accounting.

pub mod autodiff;
pub mod container;
pub mod dataset;
pub mod conv;
pub mod error;
pub mod gemm;
pub mod io;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod profiler;
pub mod resize;
pub mod rng;
pub mod sparse;
pub mod tensor;
pub mod toygen;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
