//! The frozen localization network and its supervised training.

use std::path::Path;

use log::info;

use super::{aggregate_activations, scda_threshold, GridGeometry, SaliencyGrid};
use crate::data::{shuffled_batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{batch_of, checksum, load_checkpoint, Architecture, ConvNet, LrSchedule, Mode, OutputGrad, Sgd};
use crate::numerics::{Rng, Tensor};

/// A frozen classifier backbone; its last feature map before pooling is `S`.
#[derive(Debug, Clone)]
pub struct LocalizationNet {
    net: ConvNet<f32>,
    coeff: f64,
}

impl LocalizationNet {
    /// Wraps a trained network. Every block is used; the map before pooling is `S`.
    pub fn new(net: ConvNet<f32>, coeff: f64) -> Result<Self> {
        if !(coeff >= 0.0) {
            return Err(Error::invalid(format!("saliency coefficient must be ≥ 0, got {coeff}")));
        }
        Ok(Self { net, coeff })
    }

    /// Loads a checkpoint directory written by `save_checkpoint`.
    pub fn load(dir: &Path, coeff: f64) -> Result<Self> {
        Self::new(load_checkpoint(dir)?.0, coeff)
    }

    pub fn net(&self) -> &ConvNet<f32> {
        &self.net
    }

    pub fn coeff(&self) -> f64 {
        self.coeff
    }

    pub fn frozen(&self) -> bool {
        true
    }

    pub fn checksum(&self) -> String {
        checksum(&self.net)
    }

    /// Output grid side for a square input of side `side`.
    pub fn grid_side(&self, side: usize) -> usize {
        Architecture::side_after(side, self.net.arch().channels.len())
    }

    /// The activation tensor `S` (`U×V×D`) for one `H×W×3` image.
    pub fn activations(&self, image: &Tensor) -> Result<Tensor> {
        let mut maps = self.activations_batch(std::slice::from_ref(image))?;
        Ok(maps.pop().unwrap())
    }

    pub fn activations_batch(&self, images: &[Tensor]) -> Result<Vec<Tensor>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let refs: Vec<&Tensor> = images.iter().collect();
        let (x, shape) = batch_of(&refs)?;
        let depth = self.net.arch().channels.len();
        let (map, [b, u, v, d]) = self.net.feature_map(&x, shape, depth)?;
        Ok((0..b).map(|i| Tensor::new(vec![u, v, d], map[i * u * v * d..(i + 1) * u * v * d].to_vec()).unwrap()).collect())
    }

    /// `M = f(X)`: forward, channel sum, threshold, patch geometry.
    pub fn compute_saliency(&self, image: &Tensor) -> Result<SaliencyGrid> {
        let mut grids = self.compute_saliency_batch(std::slice::from_ref(image))?;
        Ok(grids.pop().unwrap())
    }

    /// Batched [`compute_saliency`](Self::compute_saliency); images are independent in eval mode.
    pub fn compute_saliency_batch(&self, images: &[Tensor]) -> Result<Vec<SaliencyGrid>> {
        if let Some(first) = images.first() {
            let (h, w, _) = first.hwc()?;
            let stride = 1usize << self.depth();
            if h % stride != 0 || w % stride != 0 {
                return Err(Error::Config(format!(
                    "a {h}×{w} image does not split into patches of the {}-block localization grid",
                    self.depth()
                )));
            }
        }
        let maps = self.activations_batch(images)?;
        maps.iter()
            .zip(images)
            .map(|(s, img)| {
                let (h, w, _) = img.hwc()?;
                let a = aggregate_activations(s)?;
                let g = GridGeometry::for_image(h, w, a.rows, a.cols)?;
                Ok(scda_threshold(&a, self.coeff)?.with_patch(g.patch_h, g.patch_w))
            })
            .collect()
    }

    fn depth(&self) -> usize {
        self.net.arch().channels.len()
    }
}

/// Settings for the supervised localization classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LocTrainConfig {
    /// Output grid side; decides how many stride-2 blocks the backbone keeps.
    pub grid: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for LocTrainConfig {
    fn default() -> Self {
        Self { grid: 8, epochs: 8, batch: 64, lr: 0.05, momentum: 0.9, weight_decay: 5e-4, seed: 0 }
    }
}

/// Block widths of the default encoder truncated to reach a `grid` output at `side`.
pub fn loc_architecture(side: usize, grid: usize, classes: usize) -> Result<Architecture> {
    let full = Architecture::encoder();
    let depth = (1..=full.channels.len())
        .find(|&d| Architecture::side_after(side, d) == grid && side % grid == 0 && side == grid << d)
        .ok_or_else(|| Error::Config(format!("a side-{side} image cannot reach a {grid}×{grid} grid with stride-2 blocks")))?;
    Ok(Architecture { in_channels: 3, channels: full.channels[..depth].to_vec(), head: vec![classes], normalize: false })
}

fn mirror(img: &Tensor) -> Tensor {
    let (h, w, c) = img.hwc().unwrap();
    Tensor::from_fn(&[h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), i / c % w, i % c);
        img.data()[(y * w + (w - 1 - x)) * c + ch]
    })
}

/// Softmax cross-entropy on logits; returns the mean loss and its gradient.
pub(crate) fn cross_entropy(logits: &[f32], labels: &[usize], classes: usize) -> (f64, Vec<f32>) {
    let b = labels.len();
    let mut grad = vec![0.0f32; logits.len()];
    let mut loss = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
        loss += z.ln() + m - row[y] as f64;
        for k in 0..classes {
            let p = (row[k] as f64 - m).exp() / z;
            grad[i * classes + k] = ((p - if k == y { 1.0 } else { 0.0 }) / b as f64) as f32;
        }
    }
    (loss / b as f64, grad)
}

/// Trains a truncated encoder as a supervised classifier on `train` and freezes it.
pub fn train_localization_net(train: &Dataset, cfg: &LocTrainConfig, coeff: f64) -> Result<LocalizationNet> {
    let labels = train.labels().ok_or_else(|| Error::invalid("localization training needs labels"))?;
    let side = train.side().ok_or_else(|| Error::invalid("empty training set"))?;
    let arch = loc_architecture(side, cfg.grid, train.class_count)?;
    let rng = Rng::with_stream(cfg.seed, 0x10c);
    let mut net = ConvNet::<f32>::new(arch, &mut rng.fork(0))?;
    let mut opt = Sgd::new(&net, cfg.momentum, cfg.weight_decay);
    let batch = cfg.batch.min(train.len());
    let steps = train.len() / batch;
    let schedule = LrSchedule::new(cfg.lr, steps, 0, cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut erng = rng.fork(1 + epoch as u64);
        let mut total = 0.0;
        for idx in shuffled_batches(train.len(), batch, &mut erng)? {
            let imgs: Vec<Tensor> = idx
                .iter()
                .map(|&i| {
                    let p = &train.records[i].pixels;
                    if erng.bernoulli(0.5) {
                        mirror(p)
                    } else {
                        p.clone()
                    }
                })
                .collect();
            let refs: Vec<&Tensor> = imgs.iter().collect();
            let (x, shape) = batch_of(&refs)?;
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let fwd = net.forward(&x, shape, Mode::Train)?;
            let (loss, g) = cross_entropy(&fwd.raw, &ys, train.class_count);
            let grads = net.backward(&fwd, OutputGrad::Raw(&g))?;
            net.absorb_batch_stats(&fwd);
            opt.step(&mut net, &grads, schedule.lr_at(step))?;
            step += 1;
            total += loss;
        }
        info!("localization epoch {epoch}: loss {:.4}", total / steps as f64);
    }
    LocalizationNet::new(net, coeff)
}
