//! Binary P6 PPM images (maxval 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

/// Decodes a P6 image into an `H×W×3` tensor of raw byte values scaled to `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut pos = 0;
    if header_token(bytes, &mut pos) != Some(b"P6") {
        return Err("not a binary P6 PPM".into());
    }
    let mut num = |what: &str| -> std::result::Result<usize, String> {
        let tok = header_token(bytes, &mut pos).ok_or_else(|| format!("missing {what}"))?;
        std::str::from_utf8(tok).ok().and_then(|s| s.parse().ok()).ok_or_else(|| format!("bad {what}"))
    };
    let w = num("width")?;
    let h = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (only 255)"));
    }
    if w == 0 || h == 0 {
        return Err("empty image".into());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("raster truncated: need {need} bytes, have {}", bytes.len().saturating_sub(pos)))?;
    Tensor::new(vec![h, w, 3], raster.iter().map(|&b| b as f32 / 255.0).collect()).map_err(|e| e.to_string())
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes).map_err(|msg| Error::Load { path: path.to_path_buf(), msg })
}

/// Quantizes `[0, 1]` values to bytes (round to nearest, clamped).
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = image.hwc()?;
    if c != 3 && c != 1 {
        return Err(Error::Shape(format!("PPM needs 1 or 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for px in image.data().chunks_exact(c) {
        if c == 3 {
            out.extend(px.iter().map(|&v| to_u8(v)));
        } else {
            out.extend([to_u8(px[0]); 3]);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let bytes = encode_ppm(image)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
