//! Desk-scale semantic segmentation under a byte budget.
//!
//! The crate trains a tiny encoder-decoder network on synthetic waste scenes
//! with imbalance-aware losses, then compresses it with magnitude pruning and
//! post-training affine quantization while keeping exact size accounting.
//!
//! | Module | Contents |
//! |---|---|
//! | [`tensor`] | dense tensors, conv/softmax kernels, the `CSGT` file format |
//! | [`data`] | synthetic scene generator, augmentations, PPM/PGM codecs |
//! | [`model`] | [`model::TinySegNet`], Adam/SGD training, size and FLOP accounting |
//! | [`checkpoint`] | the `CSGC` checkpoint container |
//! | [`losses`] | cross-entropy, focal, class-balanced focal, Dice, Lovász-softmax, Focal-Lovász |
//! | [`metrics`] | confusion matrix, per-class IoU, mIoU |
//! | [`prune`] | unstructured and structured pruning masks |
//! | [`quant`] | affine uint8 quantization and an integer matmul kernel |
//! | [`pipeline`] | config-driven experiment runner and report tables |

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod prune;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
