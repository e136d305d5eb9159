//! Point-regression crowd counting and localization.
//!
//! The pipeline: a convolutional [`backbone`] extracts a feature pyramid at
//! strides 4/8/16, the multi-scale attentive [`decoder`] fuses it down to a
//! stride-2 feature map, and a two-branch head predicts per-anchor point
//! offsets and confidence logits. Training matches proposals to annotated
//! points with the Hungarian algorithm ([`matching`]); evaluation reports
//! counting MAE/RMSE and localization precision/recall/F1 ([`metrics`]).
//!
//! Everything runs on a small reverse-mode autodiff tape ([`tensor`]) over
//! `ndarray`, generic over `f32`/`f64` so gradient checks can run in double
//! precision while training stays fast.

pub mod backbone;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod error;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};

// Shared third-party types that appear in public signatures.
pub use ndarray;
pub use rand_chacha::ChaCha8Rng;
