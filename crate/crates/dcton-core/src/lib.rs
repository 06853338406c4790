//! Desk-scale virtual try-on with disentangled cycle-consistent training.
//!
//! The pipeline warps a garment onto a person image with a thin-plate
//! spline predicted by a spatial transformer, separates clothes / skin /
//! untouched content with dedicated pyramid encoders, and trains the
//! whole generator with a two-pass cycle objective plus adversarial and
//! perceptual terms, all on CPU with a hand-rolled reverse-mode tape.
//!
//! Modules mirror the pipeline stages: [`geometry`] (TPS + homography
//! regularizer), [`data`] (synthetic paper-doll corpus and loaders),
//! [`nets`] (mask prediction, spatial transformer, encoders, decoder,
//! discriminators), [`losses`], [`train`], [`metrics`] and [`infer`].

pub mod data;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod infer;
mod kernels;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod tensor;
pub mod tfile;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Dtype, Scalar, Tensor};
