//! Saliency-guided masking augmentation for contrastive self-supervised
//! learning with small convolutional encoders.

pub mod augment;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod saliency;
pub mod ssl;

pub use error::{Error, Result};
