//! Semi-supervised learning of short-clip classifiers on synthetic sequences.
//!
//! A student network is trained from a few labeled videos and many unlabeled
//! ones. An EMA teacher supplies fused pseudo-labels, a memory bank of its
//! embeddings feeds a prototype-scored contrastive loss, and long clips at
//! coarser strides supply temporal alignment targets for the short clip.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acl;
pub mod autodiff;
pub mod backbone;
pub mod bank;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod gmm;
pub mod mtl;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
