//! Image filtering with replicate (edge-clamp) padding.

use super::Tensor;
use crate::error::{Error, Result};

fn check_kernel_size(size: usize) -> Result<()> {
    if size == 0 || size % 2 == 0 {
        return Err(Error::invalid(format!("kernel size must be odd and positive, got {size}")));
    }
    Ok(())
}

/// Normalized 1-D Gaussian weights, the separable factor of [`gaussian_kernel_2d`].
pub fn gaussian_kernel_1d(size: usize, variance: f64) -> Result<Vec<f32>> {
    check_kernel_size(size)?;
    if !(variance > 0.0) {
        return Err(Error::invalid(format!("variance must be positive, got {variance}")));
    }
    let r = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * variance)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| (v / s) as f32).collect())
}

/// `size × size` Gaussian with entries ∝ exp(−(dx²+dy²)/(2·variance)), summing to 1.
pub fn gaussian_kernel_2d(size: usize, variance: f64) -> Result<Tensor> {
    check_kernel_size(size)?;
    if !(variance > 0.0) {
        return Err(Error::invalid(format!("variance must be positive, got {variance}")));
    }
    let r = (size / 2) as f64;
    let mut w = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - r, x as f64 - r);
            w.push((-(dx * dx + dy * dy) / (2.0 * variance)).exp());
        }
    }
    let s: f64 = w.iter().sum();
    Tensor::new(vec![size, size], w.into_iter().map(|v| (v / s) as f32).collect())
}

fn check_geometry(h: usize, w: usize, k: usize) -> Result<()> {
    check_kernel_size(k)?;
    if k > 2 * h.min(w) + 1 {
        return Err(Error::invalid(format!("kernel of size {k} too large for a {h}×{w} image")));
    }
    Ok(())
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Per-channel 2-D convolution of an `H×W×C` image with a square odd kernel.
pub fn filter2d(image: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (h, w, c) = image.hwc()?;
    let k = match kernel.shape() {
        [a, b] if a == b => *a,
        s => return Err(Error::Shape(format!("kernel must be square, got {s:?}"))),
    };
    check_geometry(h, w, k)?;
    let r = (k / 2) as isize;
    let src = image.data();
    let kd = kernel.data();
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * c;
            for i in 0..k {
                let sy = clamp_idx(y as isize - (i as isize - r), h);
                for j in 0..k {
                    let sx = clamp_idx(x as isize - (j as isize - r), w);
                    let wt = kd[i * k + j];
                    let s = (sy * w + sx) * c;
                    for ch in 0..c {
                        out[o + ch] += wt * src[s + ch];
                    }
                }
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Convolution with the outer product `taps ⊗ taps`, done as two 1-D passes.
pub fn filter_separable(image: &Tensor, taps: &[f32]) -> Result<Tensor> {
    let (h, w, c) = image.hwc()?;
    let k = taps.len();
    check_geometry(h, w, k)?;
    let r = (k / 2) as isize;
    let src = image.data();
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * c;
            for (j, &t) in taps.iter().enumerate() {
                let sx = clamp_idx(x as isize - (j as isize - r), w);
                let s = (y * w + sx) * c;
                for ch in 0..c {
                    tmp[o + ch] += t * src[s + ch];
                }
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for y in 0..h {
        for (i, &t) in taps.iter().enumerate() {
            let sy = clamp_idx(y as isize - (i as isize - r), h);
            let row_out = y * w * c;
            let row_in = sy * w * c;
            for v in 0..w * c {
                out[row_out + v] += t * tmp[row_in + v];
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

pub fn gaussian_blur(image: &Tensor, size: usize, variance: f64) -> Result<Tensor> {
    filter_separable(image, &gaussian_kernel_1d(size, variance)?)
}

/// Identity minus Gaussian blur, per channel.
pub fn highpass(image: &Tensor, size: usize, variance: f64) -> Result<Tensor> {
    let low = gaussian_blur(image, size, variance)?;
    image.sub(&low)
}

/// Nearest odd integer to `x` (ties go up), at least 1.
pub fn round_to_odd(x: f64) -> usize {
    let lower = (((x - 1.0) / 2.0).floor() * 2.0 + 1.0).max(1.0);
    let upper = lower + 2.0;
    let pick = if x - lower < upper - x { lower } else { upper };
    pick.max(1.0) as usize
}
