//! TV-regularized 3D lesion segmentation.
//!
//! Losses with analytic gradients, a small encoder-decoder network with
//! hand-written backpropagation, synthetic lesion data, training and
//! sliding-window inference, morphological post-processing and evaluation.

pub mod engine;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod postproc;
pub mod storage;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{BinaryMask, LabelMap, Real, Shape3, Volume};
