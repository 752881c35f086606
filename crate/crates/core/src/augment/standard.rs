//! Crop, flip, color jitter and grayscale.

use crate::error::{Error, Result};
use crate::numerics::{crop, resize_bilinear, Rng, Tensor};

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Ranges of the standard view augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    /// Brightness, contrast and saturation factors are each drawn from this range.
    pub jitter: (f64, f64),
    pub gray_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { scale: (0.2, 1.0), ratio: (0.75, 4.0 / 3.0), flip_p: 0.5, jitter_p: 0.8, jitter: (0.6, 1.4), gray_p: 0.2 }
    }
}

/// Concrete parameters of one augmentation draw.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// `(top, left, h, w)` in source pixels.
    pub crop: (usize, usize, usize, usize),
    pub flip: bool,
    /// `(brightness, contrast, saturation)` when jitter fires.
    pub jitter: Option<(f32, f32, f32)>,
    pub gray: bool,
}

impl AugmentParams {
    /// No-op parameters for an `h×w` source.
    pub fn identity(h: usize, w: usize) -> Self {
        Self { crop: (0, 0, h, w), flip: false, jitter: None, gray: false }
    }
}

/// Draws crop (area fraction and aspect ratio), flip, jitter and grayscale.
pub fn sample_params(h: usize, w: usize, cfg: &AugmentConfig, rng: &mut Rng) -> AugmentParams {
    let area = (h * w) as f64;
    let mut crop_box = None;
    for _ in 0..10 {
        let target = area * rng.uniform(cfg.scale.0 as f32, cfg.scale.1 as f32) as f64;
        let aspect = rng.uniform(cfg.ratio.0 as f32, cfg.ratio.1 as f32) as f64;
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.below(h - ch + 1);
            let left = rng.below(w - cw + 1);
            crop_box = Some((top, left, ch, cw));
            break;
        }
    }
    let crop = crop_box.unwrap_or_else(|| {
        let s = h.min(w);
        ((h - s) / 2, (w - s) / 2, s, s)
    });
    let flip = rng.bernoulli(cfg.flip_p as f32);
    let jitter = rng.bernoulli(cfg.jitter_p as f32).then(|| {
        let (lo, hi) = (cfg.jitter.0 as f32, cfg.jitter.1 as f32);
        (rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi))
    });
    let gray = rng.bernoulli(cfg.gray_p as f32);
    AugmentParams { crop, flip, jitter, gray }
}

fn luma(px: &[f32]) -> f32 {
    LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]
}

/// Replaces every pixel by its luma in all three channels.
pub fn grayscale(image: &mut Tensor) {
    for px in image.data_mut().chunks_exact_mut(3) {
        let l = luma(px);
        px.iter_mut().for_each(|v| *v = l);
    }
}

fn jitter(image: &mut Tensor, (b, c, s): (f32, f32, f32)) {
    let data = image.data_mut();
    if b != 1.0 {
        data.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
    }
    if c != 1.0 {
        let n = data.len() / 3;
        let mean = (data.chunks_exact(3).map(|px| luma(px) as f64).sum::<f64>() / n as f64) as f32;
        data.iter_mut().for_each(|v| *v = ((*v - mean) * c + mean).clamp(0.0, 1.0));
    }
    if s != 1.0 {
        for px in data.chunks_exact_mut(3) {
            let l = luma(px);
            px.iter_mut().for_each(|v| *v = ((*v - l) * s + l).clamp(0.0, 1.0));
        }
    }
}

/// Applies `params` and resizes to `side × side`.
pub fn apply_params(image: &Tensor, params: &AugmentParams, side: usize) -> Result<Tensor> {
    let (_, _, c) = image.hwc()?;
    if c != 3 {
        return Err(Error::Shape(format!("augmentation expects RGB images, got {c} channels")));
    }
    let (top, left, ch, cw) = params.crop;
    let cropped = crop(image, top, left, ch, cw)?;
    let mut out = resize_bilinear(&cropped, side, side)?;
    if params.flip {
        let src = out.clone();
        let s = side;
        for y in 0..s {
            for x in 0..s {
                let (d, o) = ((y * s + x) * 3, (y * s + s - 1 - x) * 3);
                out.data_mut()[d..d + 3].copy_from_slice(&src.data()[o..o + 3]);
            }
        }
    }
    if let Some(f) = params.jitter {
        jitter(&mut out, f);
    }
    if params.gray {
        grayscale(&mut out);
    }
    if out.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        out = out.map(|v| v.clamp(0.0, 1.0));
    }
    Ok(out)
}

/// One random view of a square image, resized to `side`.
pub fn standard_augment(image: &Tensor, side: usize, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor> {
    let (h, w, _) = image.hwc()?;
    if h != w {
        return Err(Error::invalid(format!("augmentation expects a square image, got {h}×{w}")));
    }
    let params = sample_params(h, w, cfg, rng);
    apply_params(image, &params, side)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> Tensor {
        let mut r = Rng::new(seed);
        Tensor::from_fn(&[32, 32, 3], |_| r.next_f32())
    }

    #[test]
    fn deterministic_under_fixed_stream() {
        let img = image(1);
        let cfg = AugmentConfig::default();
        let a = standard_augment(&img, 32, &cfg, &mut Rng::with_stream(4, 4)).unwrap();
        let b = standard_augment(&img, 32, &cfg, &mut Rng::with_stream(4, 4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_op_parameters_are_identity() {
        let img = image(2);
        let mut p = AugmentParams::identity(32, 32);
        assert_eq!(apply_params(&img, &p, 32).unwrap(), img);
        p.jitter = Some((1.0, 1.0, 1.0));
        assert_eq!(apply_params(&img, &p, 32).unwrap(), img);
    }

    #[test]
    fn grayscale_is_luma() {
        let img = image(3);
        let mut p = AugmentParams::identity(32, 32);
        p.gray = true;
        let out = apply_params(&img, &p, 32).unwrap();
        for (o, i) in out.data().chunks(3).zip(img.data().chunks(3)) {
            let want = 0.299 * i[0] as f64 + 0.587 * i[1] as f64 + 0.114 * i[2] as f64;
            assert!(o.iter().all(|&v| (v as f64 - want).abs() < 1e-6));
        }
    }

    #[test]
    fn flip_mirrors_columns() {
        let img = image(4);
        let mut p = AugmentParams::identity(32, 32);
        p.flip = true;
        let out = apply_params(&img, &p, 32).unwrap();
        assert_eq!(out.at(&[5, 0, 1]), img.at(&[5, 31, 1]));
    }

    #[test]
    fn crops_respect_ranges() {
        let cfg = AugmentConfig::default();
        let mut r = Rng::new(5);
        for _ in 0..2000 {
            let p = sample_params(64, 64, &cfg, &mut r);
            let (t, l, h, w) = p.crop;
            assert!(t + h <= 64 && l + w <= 64);
            let frac = (h * w) as f64 / 4096.0;
            assert!(frac > 0.15 && frac <= 1.0, "{frac}");
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let cfg = AugmentConfig { jitter_p: 1.0, jitter: (0.2, 3.0), ..Default::default() };
        let mut r = Rng::new(6);
        for s in 0..20 {
            let out = standard_augment(&image(s), 32, &cfg, &mut r).unwrap();
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
