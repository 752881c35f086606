use super::Tensor;
use crate::error::{Error, Result};

/// Rectangular crop `[top, top+h) × [left, left+w)` of an `H×W×C` image.
pub fn crop(image: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    let (ih, iw, c) = image.hwc()?;
    if top + h > ih || left + w > iw || h == 0 || w == 0 {
        return Err(Error::invalid(format!("crop {h}×{w} at ({top},{left}) outside {ih}×{iw}")));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for y in top..top + h {
        let row = (y * iw + left) * c;
        out.extend_from_slice(&src[row..row + w * c]);
    }
    Tensor::new(vec![h, w, c], out)
}

/// Largest centered square crop.
pub fn center_crop_square(image: &Tensor) -> Result<Tensor> {
    let (h, w, _) = image.hwc()?;
    let s = h.min(w);
    crop(image, (h - s) / 2, (w - s) / 2, s, s)
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = image.hwc()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let src = image.data();
    let axis = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f32) {
        let pos = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (pos - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, w, out_w)).collect();
    let mut out = vec![0.0f32; out_h * out_w * c];
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, h, out_h);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let o = (y * out_w + x) * c;
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[o + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}
