//! Spread of embeddings across augmented views of the same image.

use crate::augment::{build_views_batch, ViewConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{batch_of, Encoder, Mode};
use crate::numerics::{Rng, Tensor};
use crate::saliency::LocalizationNet;

/// How views are produced for a variance measurement.
#[derive(Debug, Clone, PartialEq)]
pub enum ViewSpec {
    /// Every view is the raw image.
    Identity,
    /// The query view of [`build_views_batch`] under this configuration.
    Views(ViewConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceReport {
    pub augmentation: String,
    pub k: usize,
    pub variance: f64,
}

pub const VARIANCE_HEADER: &str = "augmentation,K,variance";

impl VarianceReport {
    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.augmentation, self.k, self.variance)
    }
}

/// Writes `augmentation,K,variance` rows.
pub fn variance_csv(reports: &[VarianceReport]) -> String {
    let mut s = format!("{VARIANCE_HEADER}\n");
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Mean over dimensions of the unbiased sample variance of `k` rows of width `d`.
pub fn view_variance(rows: &[f32], k: usize, d: usize) -> f64 {
    let mut total = 0.0;
    for j in 0..d {
        let col = || rows.chunks_exact(d).take(k).map(|r| r[j] as f64);
        let mean = col().sum::<f64>() / k as f64;
        total += col().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    }
    total / d as f64
}

/// Encodes `k` views of every image in eval mode and averages [`view_variance`] over images.
/// View `j` of all images comes from `rng.fork(j)`.
pub fn embedding_variance(
    enc: &Encoder,
    ds: &Dataset,
    k: usize,
    spec: &ViewSpec,
    loc: Option<&LocalizationNet>,
    rng: &Rng,
    tag: &str,
) -> Result<VarianceReport> {
    if k < 2 {
        return Err(Error::invalid(format!("variance needs at least 2 views, got {k}")));
    }
    if ds.is_empty() {
        return Err(Error::invalid("variance of an empty dataset"));
    }
    let d = enc.arch().out_dim();
    let n = ds.len();
    let mut emb = vec![0.0f32; n * k * d];
    let items: Vec<(&Tensor, &str)> = ds.records.iter().map(|r| (&r.pixels, r.id.as_str())).collect();
    for j in 0..k {
        let views: Vec<Tensor> = match spec {
            ViewSpec::Identity => ds.records.iter().map(|r| r.pixels.clone()).collect(),
            ViewSpec::Views(cfg) => {
                let cfg = ViewConfig { hardneg: false, ..cfg.clone() };
                build_views_batch(&items, loc, &cfg, &rng.fork(j as u64))?.into_iter().map(|v| v.query).collect()
            }
        };
        for (c, chunk) in views.chunks(256).enumerate() {
            let refs: Vec<&Tensor> = chunk.iter().collect();
            let (x, shape) = batch_of(&refs)?;
            let out = enc.forward(&x, shape, Mode::Eval)?.output;
            for (b, row) in out.chunks_exact(d).enumerate() {
                let i = c * 256 + b;
                emb[(i * k + j) * d..(i * k + j + 1) * d].copy_from_slice(row);
            }
        }
    }
    let variance = emb.chunks_exact(k * d).map(|rows| view_variance(rows, k, d)).sum::<f64>() / n as f64;
    Ok(VarianceReport { augmentation: tag.to_string(), k, variance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SynthSpec};
    use crate::model::new_encoder;

    #[test]
    fn two_point_sample_variance() {
        let a = 0.3f32;
        let rows = [a, -a, -a, a];
        assert!((view_variance(&rows, 2, 2) - 2.0 * (a as f64).powi(2)).abs() < 1e-7);
    }

    #[test]
    fn gaussian_estimate_is_unbiased() {
        let (k, d, sigma) = (64, 4, 0.7f32);
        let mut r = Rng::new(5);
        let mut total = 0.0;
        for _ in 0..1000 {
            let rows: Vec<f32> = (0..k * d).map(|_| 2.0 + sigma * r.normal()).collect();
            total += view_variance(&rows, k, d);
        }
        let got = total / 1000.0;
        let want = (sigma as f64).powi(2);
        assert!((got / want - 1.0).abs() < 0.05, "{got} vs {want}");
    }

    #[test]
    fn identity_views_have_zero_variance() {
        let ds = generate(&SynthSpec { count: 6, side: 32, classes: 3, seed: 1, id_prefix: "v".into() });
        let enc = new_encoder(&mut Rng::new(1)).unwrap();
        let r = embedding_variance(&enc, &ds, 3, &ViewSpec::Identity, None, &Rng::new(2), "identity").unwrap();
        assert_eq!(r.variance, 0.0);
        assert!(embedding_variance(&enc, &ds, 1, &ViewSpec::Identity, None, &Rng::new(2), "x").is_err());
    }

    #[test]
    fn csv_layout() {
        let r = VarianceReport { augmentation: "standard".into(), k: 8, variance: 0.25 };
        assert_eq!(variance_csv(&[r]), "augmentation,K,variance\nstandard,8,0.25\n");
    }
}
