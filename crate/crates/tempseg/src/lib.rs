//! Desk-scale toolkit for temporally consistent video semantic segmentation:
//! a small reverse-mode tensor kernel, ConvLSTM cells in three convolution
//! variants, SSNet/VSSNet/mini-ESP architectures, a frame-to-frame
//! inconsistency loss, the mIoU/Acc/Cons/ConsW metrics, a procedural
//! moving-shapes video generator, and a deterministic training loop.

pub mod error;
pub mod scalar;
pub mod tensor;
pub mod kernels;
pub mod tape;
pub mod gradcheck;
pub mod suite;
pub mod losses;
pub mod convlstm;
pub mod metrics;
pub mod netpbm;
pub mod models;
pub mod datagen;
pub mod checkpoint;
pub mod training;
pub mod recipes;

pub use error::{Error, Result};

/// Default scalar type for all learnable math.
pub type Tensor = tensor::TensorBase<f64>;
pub type DualTensor = tensor::DualTensorBase<f64>;
pub type Tape = tape::TapeBase<f64>;
