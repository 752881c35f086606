//! Convolutional encoder, reverse-mode gradients, optimizer and checkpoints.

mod checkpoint;
mod net;
mod optim;
mod real;

pub use checkpoint::{load_checkpoint, save_checkpoint, TrainState};
pub use net::{normalize_backward, Architecture, ConvNet, Forward, Mode, OutputGrad, Param, BN_EPS, BN_MOMENTUM};
pub use optim::{momentum_update, LrSchedule, Sgd};
pub use real::Real;

use crate::error::Result;
use crate::numerics::{Rng, Tensor};

/// The query encoder f_θ.
pub type Encoder = ConvNet<f32>;

/// Stacks `B` images (`H×W×C` each) into the flat NHWC batch the networks take.
pub fn batch_of(images: &[&Tensor]) -> Result<(Vec<f32>, [usize; 4])> {
    let first = images.first().ok_or_else(|| crate::Error::invalid("empty image batch"))?;
    let (h, w, c) = first.hwc()?;
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(crate::Error::Shape(format!("{:?} vs {:?}", img.shape(), first.shape())));
        }
        data.extend_from_slice(img.data());
    }
    Ok((data, [images.len(), h, w, c]))
}

/// Freshly initialized encoder with the default architecture.
pub fn new_encoder(rng: &mut Rng) -> Result<Encoder> {
    ConvNet::new(Architecture::encoder(), rng)
}

/// Hex SHA-256 over every parameter and buffer (names, shapes and bits).
pub fn checksum(net: &ConvNet<f32>) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in net.params().iter().chain(net.buffers()) {
        h.update(p.name.as_bytes());
        for e in &p.shape {
            h.update((*e as u64).to_le_bytes());
        }
        for v in &p.data {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
