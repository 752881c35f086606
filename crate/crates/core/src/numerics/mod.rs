//! Tensors, random streams, filtering kernels and the SMT1 file format.

mod filter;
mod image;
mod rng;
pub mod smt1;
mod tensor;

pub use filter::{filter2d, filter_separable, gaussian_blur, gaussian_kernel_1d, gaussian_kernel_2d, highpass, round_to_odd};
pub use image::{center_crop_square, crop, resize_bilinear};
pub use rng::Rng;
pub use smt1::{read_tensor, write_tensor, Smt1, Smt1Payload};
pub use tensor::Tensor;
