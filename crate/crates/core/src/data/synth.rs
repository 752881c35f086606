//! Procedural "object on clutter" images.
//!
//! Each image shows one foreground shape whose outline determines the class,
//! drawn in one of six saturated hues at a random position and scale over a
//! cluttered, nearly gray background (gradient, faint blobs, pixel noise).
//! Color is uninformative and shared across many images, so representations
//! have to encode shape, and the object occupies a compact region that a
//! saliency map can localize.

use super::{Dataset, ImageRecord, Split};
use crate::numerics::{Rng, Tensor};

pub const SHAPES: usize = 10;

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub count: usize,
    pub side: usize,
    /// At most [`SHAPES`].
    pub classes: usize,
    pub seed: u64,
    pub id_prefix: String,
}

/// Membership test in object coordinates `(u, v) ∈ [-1, 1]²`.
fn inside(class: usize, u: f32, v: f32) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match class {
        0 => u * u + v * v <= 0.85,
        1 => au.max(av) <= 0.75,
        2 => (-0.8..=0.8).contains(&v) && au <= 0.55 * (v + 0.8),
        3 => {
            let r = u * u + v * v;
            (0.3..=0.95).contains(&r)
        }
        4 => (au <= 0.28 && av <= 0.95) || (av <= 0.28 && au <= 0.95),
        5 => {
            let (p, q) = ((u + v) * 0.7071, (u - v) * 0.7071);
            (p.abs() <= 0.25 && q.abs() <= 0.95) || (q.abs() <= 0.25 && p.abs() <= 0.95)
        }
        6 => au <= 0.9 && ((v - 0.45).abs() <= 0.2 || (v + 0.45).abs() <= 0.2),
        7 => au + av <= 0.95,
        8 => ((-0.85..=-0.35).contains(&u) && av <= 0.9) || ((0.4..=0.9).contains(&v) && au <= 0.85),
        _ => {
            let m = au.max(av);
            (0.5..=0.9).contains(&m)
        }
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.fract() * 6.0).max(0.0);
    let i = h6.floor() as usize % 6;
    let f = h6 - h6.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// One image of the given class.
pub fn render(class: usize, side: usize, rng: &mut Rng) -> Tensor {
    let s = side as f32;
    // background: gradient between two nearly gray tones
    let bg_a = hsv(rng.next_f32(), rng.uniform(0.0, 0.15), rng.uniform(0.3, 0.7));
    let bg_b = hsv(rng.next_f32(), rng.uniform(0.0, 0.15), rng.uniform(0.3, 0.7));
    let angle = rng.uniform(0.0, std::f32::consts::TAU);
    let (ga, gb) = (angle.cos(), angle.sin());
    struct Blob {
        cx: f32,
        cy: f32,
        r: f32,
        color: [f32; 3],
    }
    let blobs: Vec<Blob> = (0..rng.below(4) + 2)
        .map(|_| Blob {
            cx: rng.uniform(0.0, s),
            cy: rng.uniform(0.0, s),
            r: rng.uniform(0.08, 0.25) * s,
            color: hsv(rng.next_f32(), rng.uniform(0.0, 0.15), rng.uniform(0.25, 0.75)),
        })
        .collect();

    // foreground placement
    let scale = rng.uniform(0.28, 0.42) * s;
    let sx = scale * rng.uniform(0.85, 1.15);
    let sy = scale * rng.uniform(0.85, 1.15);
    let cx = rng.uniform(sx, s - sx);
    let cy = rng.uniform(sy, s - sy);
    let fg = hsv(rng.below(6) as f32 / 6.0, 0.85, 0.9);
    let shade = rng.uniform(-0.25, 0.25);

    let sub = 2usize;
    let mut data = vec![0.0f32; side * side * 3];
    for y in 0..side {
        for x in 0..side {
            let mut acc = [0.0f32; 3];
            for sy_i in 0..sub {
                for sx_i in 0..sub {
                    let px = x as f32 + (sx_i as f32 + 0.5) / sub as f32;
                    let py = y as f32 + (sy_i as f32 + 0.5) / sub as f32;
                    let t = ((px / s - 0.5) * ga + (py / s - 0.5) * gb + 0.5).clamp(0.0, 1.0);
                    let mut c = [0.0f32; 3];
                    for k in 0..3 {
                        c[k] = bg_a[k] * (1.0 - t) + bg_b[k] * t;
                    }
                    for b in &blobs {
                        let d2 = ((px - b.cx).powi(2) + (py - b.cy).powi(2)) / (b.r * b.r);
                        if d2 < 1.0 {
                            let wgt = 0.6 * (1.0 - d2);
                            for k in 0..3 {
                                c[k] = c[k] * (1.0 - wgt) + b.color[k] * wgt;
                            }
                        }
                    }
                    let u = (px - cx) / sx;
                    let v = (py - cy) / sy;
                    if inside(class, u, v) {
                        let light = 1.0 + shade * u;
                        for k in 0..3 {
                            c[k] = fg[k] * light;
                        }
                    }
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            let o = (y * side + x) * 3;
            for k in 0..3 {
                let noise = rng.normal() * 0.03;
                data[o + k] = (acc[k] / (sub * sub) as f32 + noise).clamp(0.0, 1.0);
            }
        }
    }
    // quantize so the in-memory dataset equals its on-disk u8 form
    for v in &mut data {
        *v = super::ppm::to_u8(*v) as f32 / 255.0;
    }
    Tensor::new(vec![side, side, 3], data).expect("shape matches buffer")
}

/// Balanced labeled dataset; image `i` has class `i mod classes` and its own
/// random stream, so prefixes of larger datasets agree with smaller ones.
pub fn generate(spec: &SynthSpec) -> Dataset {
    assert!(spec.classes >= 1 && spec.classes <= SHAPES, "1..={SHAPES} classes supported");
    let root = Rng::new(spec.seed);
    let records = (0..spec.count)
        .map(|i| {
            let class = i % spec.classes;
            let mut r = root.fork(i as u64);
            ImageRecord {
                pixels: render(class, spec.side, &mut r),
                label: Some(class),
                id: format!("{}{:06}", spec.id_prefix, i),
            }
        })
        .collect();
    Dataset { records, class_count: spec.classes, split: Split::Train }
}

/// Train and validation splits drawn from disjoint streams.
pub fn generate_splits(train: usize, val: usize, side: usize, classes: usize, seed: u64) -> (Dataset, Dataset) {
    let tr = generate(&SynthSpec { count: train, side, classes, seed, id_prefix: "train".into() });
    let mut va = generate(&SynthSpec { count: val, side, classes, seed: seed ^ 0x7661_6c5f_7370_6c74, id_prefix: "val".into() });
    va.split = Split::Val;
    (tr, va)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_shape_is_distinct_and_nonempty() {
        let grid = 41;
        let masks: Vec<Vec<bool>> = (0..SHAPES)
            .map(|c| {
                (0..grid * grid)
                    .map(|i| {
                        let u = (i % grid) as f32 / 20.0 - 1.0;
                        let v = (i / grid) as f32 / 20.0 - 1.0;
                        inside(c, u, v)
                    })
                    .collect()
            })
            .collect();
        for (i, m) in masks.iter().enumerate() {
            let area = m.iter().filter(|&&b| b).count();
            assert!(area > grid * grid / 10, "shape {i} area {area}");
            for other in &masks[i + 1..] {
                let diff = m.iter().zip(other).filter(|(a, b)| a != b).count();
                assert!(diff > grid * grid / 20);
            }
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = generate(&SynthSpec { count: 20, side: 32, classes: 10, seed: 1, id_prefix: "x".into() });
        let b = generate(&SynthSpec { count: 20, side: 32, classes: 10, seed: 1, id_prefix: "x".into() });
        assert_eq!(a, b);
        a.validate().unwrap();
        assert_eq!(a.records[13].label, Some(3));
    }
}
