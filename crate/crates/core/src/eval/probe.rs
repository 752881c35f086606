//! Linear classifier on frozen backbone features.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::masking::StrategyConfig;
use crate::model::{batch_of, checksum, Encoder, Real};
use crate::numerics::{highpass, Rng, Tensor};
use crate::saliency::cross_entropy;

/// Probe training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub momentum: f64,
    /// Epochs after which the learning rate is multiplied by 0.1.
    pub decay_epochs: Vec<usize>,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self::new(30, 3.0, 0)
    }
}

impl ProbeConfig {
    /// Decay points at 60% and 80% of training.
    pub fn new(epochs: usize, lr: f64, seed: u64) -> Self {
        Self { epochs, lr, batch: 256, momentum: 0.9, decay_epochs: vec![epochs * 3 / 5, epochs * 4 / 5], seed }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.1f64.powi(self.decay_epochs.iter().filter(|&&e| epoch >= e).count() as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub top1: f64,
    pub per_class: Vec<f64>,
    pub epochs: usize,
    /// Encoder checksum, identical before and after probing.
    pub checksum: String,
}

/// Row-major feature matrix with labels.
#[derive(Debug, Clone)]
pub struct Features {
    pub dim: usize,
    pub values: Vec<f32>,
    pub labels: Vec<usize>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Flattened pixels as features (the identity extractor).
    pub fn identity(ds: &Dataset) -> Result<Self> {
        let labels = ds.labels().ok_or_else(|| Error::invalid("probing needs labels"))?;
        let dim = ds.records.first().map_or(0, |r| r.pixels.len());
        let values = ds.records.iter().flat_map(|r| r.pixels.data().iter().copied()).collect();
        Ok(Self { dim, values, labels })
    }

    /// Pooled backbone features in eval mode, high-passed first when `domain` is given.
    pub fn from_encoder(enc: &Encoder, ds: &Dataset, domain: Option<&StrategyConfig>) -> Result<Self> {
        let labels = ds.labels().ok_or_else(|| Error::invalid("probing needs labels"))?;
        let dim = enc.arch().feature_dim();
        let mut values = Vec::with_capacity(ds.len() * dim);
        for chunk in ds.records.chunks(256) {
            let imgs: Vec<Tensor> = chunk
                .iter()
                .map(|r| match domain {
                    Some(c) => highpass(&r.pixels, c.hp_size, c.hp_var),
                    None => Ok(r.pixels.clone()),
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = imgs.iter().collect();
            let (x, shape) = batch_of(&refs)?;
            values.extend(enc.pooled_features(&x, shape)?);
        }
        Ok(Self { dim, values, labels })
    }
}

/// Per-dimension mean and std of the training features.
fn standardizer(f: &Features) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (f.len().max(1) as f64, f.dim);
    let mut mean = vec![0.0; d];
    for row in f.values.chunks_exact(d) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64 / n);
    }
    let mut var = vec![0.0; d];
    for row in f.values.chunks_exact(d) {
        var.iter_mut().zip(row).zip(&mean).for_each(|((s, &v), m)| *s += (v as f64 - m).powi(2) / n);
    }
    (mean, var.into_iter().map(|v| v.sqrt().max(1e-6)).collect())
}

fn normalized(f: &Features, mean: &[f64], std: &[f64]) -> Vec<f32> {
    let scale = 1.0 / (f.dim as f64).sqrt();
    f.values
        .chunks_exact(f.dim)
        .flat_map(|row| row.iter().zip(mean).zip(std).map(move |((&v, m), s)| ((v as f64 - m) / s * scale) as f32))
        .collect()
}

/// Trains a softmax linear classifier on `train` and scores it on `test`.
/// Features are standardized with training statistics and scaled by `1/√dim`.
pub fn train_probe(train: &Features, test: &Features, classes: usize, cfg: &ProbeConfig) -> Result<(f64, Vec<f64>)> {
    if train.dim != test.dim || train.dim == 0 {
        return Err(Error::Shape(format!("train features {}-d, test features {}-d", train.dim, test.dim)));
    }
    if let Some(&bad) = train.labels.iter().chain(&test.labels).find(|&&y| y >= classes) {
        return Err(Error::invalid(format!("label {bad} outside {classes} classes")));
    }
    let d = train.dim;
    let (mean, std) = standardizer(train);
    let xtr = normalized(train, &mean, &std);
    let xte = normalized(test, &mean, &std);
    let mut rng = Rng::with_stream(cfg.seed, 0x9be);
    let bound = 1.0 / (d as f32).sqrt();
    let mut w: Vec<f32> = (0..d * classes).map(|_| rng.uniform(-bound, bound)).collect();
    let mut b = vec![0.0f32; classes];
    let (mut vw, mut vb) = (vec![0.0f32; w.len()], vec![0.0f32; classes]);
    let logits = |x: &[f32], w: &[f32], b: &[f32], n: usize| -> Vec<f32> {
        let mut out = vec![0.0f32; n * classes];
        for i in 0..n {
            out[i * classes..(i + 1) * classes].copy_from_slice(b);
        }
        f32::gemm(n, d, classes, 1.0, x, d as isize, 1, w, classes as isize, 1, 1.0, &mut out, classes as isize, 1);
        out
    };
    let batch = cfg.batch.min(train.len()).max(1);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch) as f32;
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.shuffle(&mut order);
        for idx in order.chunks(batch) {
            let x: Vec<f32> = idx.iter().flat_map(|&i| xtr[i * d..(i + 1) * d].iter().copied()).collect();
            let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let z = logits(&x, &w, &b, idx.len());
            let (_, g) = cross_entropy(&z, &y, classes);
            let mut gw = vec![0.0f32; w.len()];
            f32::gemm(d, idx.len(), classes, 1.0, &x, 1, d as isize, &g, classes as isize, 1, 0.0, &mut gw, classes as isize, 1);
            let mut gb = vec![0.0f32; classes];
            for row in g.chunks_exact(classes) {
                gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
            }
            let mu = cfg.momentum as f32;
            for ((p, v), gi) in w.iter_mut().zip(&mut vw).zip(&gw) {
                *v = mu * *v + gi;
                *p -= lr * *v;
            }
            for ((p, v), gi) in b.iter_mut().zip(&mut vb).zip(&gb) {
                *v = mu * *v + gi;
                *p -= lr * *v;
            }
        }
    }
    let z = logits(&xte, &w, &b, test.len());
    let mut correct = vec![0usize; classes];
    let mut count = vec![0usize; classes];
    for (row, &y) in z.chunks_exact(classes).zip(&test.labels) {
        let pred = row.iter().enumerate().fold(0, |best, (k, &v)| if v > row[best] { k } else { best });
        count[y] += 1;
        correct[y] += (pred == y) as usize;
    }
    let total: usize = count.iter().sum();
    let top1 = correct.iter().sum::<usize>() as f64 / total.max(1) as f64;
    let per_class = correct.iter().zip(&count).map(|(&c, &n)| if n == 0 { f64::NAN } else { c as f64 / n as f64 }).collect();
    Ok((top1, per_class))
}

/// Probes a frozen encoder: features from `train` fit the classifier, `test` scores it.
/// `domain` selects high-pass inputs for encoders trained on high-passed views.
pub fn linear_probe(
    enc: &Encoder,
    train: &Dataset,
    test: &Dataset,
    domain: Option<&StrategyConfig>,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let before = checksum(enc);
    let ftr = Features::from_encoder(enc, train, domain)?;
    let fte = Features::from_encoder(enc, test, domain)?;
    let classes = train.class_count.max(test.class_count);
    let (top1, per_class) = train_probe(&ftr, &fte, classes, cfg)?;
    let after = checksum(enc);
    if after != before {
        return Err(Error::FrozenViolation { before, after });
    }
    Ok(ProbeResult { top1, per_class, epochs: cfg.epochs, checksum: after })
}
