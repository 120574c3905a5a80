#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

//! Continual class forgetting for a small transformer classifier.
//!
//! Each forgetting task freezes the model, attaches low-rank adapters to the
//! feed-forward layers, trains them on a bounded forgetting loss plus a
//! rehearsal loss with a group-sparsity penalty, and merges them back.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod lora;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
mod par;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use par::is_parallel;
