//! View construction: standard augmentation followed by saliency-guided
//! masking of the branches selected by a [`BranchPolicy`].

mod standard;
mod views;

pub use standard::{apply_params, grayscale, sample_params, standard_augment, AugmentConfig, AugmentParams};
pub use views::{build_views, build_views_batch, input_domain, AppliedMask, BranchPolicy, MaskMode, ViewBundle, ViewConfig};
