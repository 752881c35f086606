//! Filling masked patches.

use super::{MaskPlan, PlanKind, Strategy, StrategyConfig};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_blur, highpass, Rng, Tensor};

use super::round_half_up;

fn check_geometry(image: &Tensor, plan: &MaskPlan) -> Result<(usize, usize, usize)> {
    let (h, w, c) = image.hwc()?;
    if h != plan.geometry.image_h() || w != plan.geometry.image_w() {
        return Err(Error::Shape(format!(
            "{h}×{w} image does not match a {}×{} grid of {}×{} patches",
            plan.geometry.rows, plan.geometry.cols, plan.geometry.patch_h, plan.geometry.patch_w
        )));
    }
    Ok((h, w, c))
}

/// Masked pixel positions (`y·W + x`) in patch-index order, row-major within a patch.
fn masked_pixels(plan: &MaskPlan) -> impl Iterator<Item = usize> + '_ {
    let g = plan.geometry;
    let w = g.image_w();
    plan.indices.iter().flat_map(move |&i| {
        let (r, c) = (i / g.cols, i % g.cols);
        (r * g.patch_h..(r + 1) * g.patch_h).flat_map(move |y| (c * g.patch_w..(c + 1) * g.patch_w).map(move |x| y * w + x))
    })
}

/// Masked patches take the scalar mean of every pixel and channel of `image`.
pub fn apply_mean_fill(image: &Tensor, plan: &MaskPlan) -> Result<Tensor> {
    let (_, _, c) = check_geometry(image, plan)?;
    let mean = image.mean();
    let mut out = image.clone();
    let data = out.data_mut();
    for p in masked_pixels(plan) {
        data[p * c..(p + 1) * c].iter_mut().for_each(|v| *v = mean);
    }
    Ok(out)
}

/// Masked patches are cut from a Gaussian blur of the whole image.
pub fn apply_strong_blur(image: &Tensor, plan: &MaskPlan, cfg: &StrategyConfig) -> Result<Tensor> {
    let (_, _, c) = check_geometry(image, plan)?;
    let mut out = image.clone();
    if plan.is_empty() {
        return Ok(out);
    }
    let blurred = gaussian_blur(image, cfg.blur_size, cfg.blur_var)?;
    let data = out.data_mut();
    for p in masked_pixels(plan) {
        data[p * c..(p + 1) * c].copy_from_slice(&blurred.data()[p * c..(p + 1) * c]);
    }
    Ok(out)
}

fn zero_and_noise(data: &mut [f32], plan: &MaskPlan, c: usize, channels: std::ops::Range<usize>, std: f64, rng: &mut Rng) {
    let std = std as f32;
    for p in masked_pixels(plan) {
        for ch in channels.clone() {
            data[p * c + ch] = if std > 0.0 { std * rng.normal() } else { 0.0 };
        }
    }
}

/// High-pass the image, zero masked patches, then add `N(0, noise_std²)` there.
pub fn apply_highpass_strategy(image: &Tensor, plan: &MaskPlan, cfg: &StrategyConfig, rng: &mut Rng) -> Result<Tensor> {
    let (_, _, c) = check_geometry(image, plan)?;
    let mut out = highpass(image, cfg.hp_size, cfg.hp_var)?;
    zero_and_noise(out.data_mut(), plan, c, 0..c, cfg.noise_std, rng);
    Ok(out)
}

/// High-pass masking with an independent plan per RGB channel.
pub fn apply_channelwise(image: &Tensor, plans: &[MaskPlan; 3], cfg: &StrategyConfig, rng: &mut Rng) -> Result<Tensor> {
    if cfg.strategy != Strategy::Highpass {
        return Err(Error::Unsupported(format!("channel-wise masking requires the highpass strategy, not {}", cfg.strategy)));
    }
    let mut c = 0;
    for p in plans {
        c = check_geometry(image, p)?.2;
    }
    if c != 3 {
        return Err(Error::Shape(format!("channel-wise masking needs 3 channels, got {c}")));
    }
    let mut out = highpass(image, cfg.hp_size, cfg.hp_var)?;
    for (ch, plan) in plans.iter().enumerate() {
        zero_and_noise(out.data_mut(), plan, c, ch..ch + 1, cfg.noise_std, rng);
    }
    Ok(out)
}

/// Side and top-left offset of the centered focal square.
pub fn focal_square(side: usize, frac: f64) -> (usize, usize) {
    let s = round_half_up(frac * side as f64).min(side);
    (s, (side - s) / 2)
}

/// Focal masking on an image already in the high-pass domain. Positive views
/// keep the centered `focal_outer` square and replace the rest with noise;
/// hard negatives replace the centered `focal_inner` square.
pub fn apply_focal(image: &Tensor, kind: PlanKind, cfg: &StrategyConfig, rng: &mut Rng) -> Result<Tensor> {
    if cfg.strategy != Strategy::Highpass {
        return Err(Error::Unsupported(format!("focal masking requires the highpass strategy, not {}", cfg.strategy)));
    }
    let (h, w, c) = image.hwc()?;
    if h != w {
        return Err(Error::invalid(format!("focal masking needs a square image, got {h}×{w}")));
    }
    let (frac, replace_inside) = match kind {
        PlanKind::Positive => (cfg.focal_outer, false),
        PlanKind::HardNegative => (cfg.focal_inner, true),
        other => return Err(Error::invalid(format!("focal masking has no {} form", other.as_str()))),
    };
    let (s, o) = focal_square(h, frac);
    let std = cfg.noise_std as f32;
    let mut out = image.clone();
    let data = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let inside = (o..o + s).contains(&y) && (o..o + s).contains(&x);
            if inside == replace_inside {
                for v in &mut data[(y * w + x) * c..(y * w + x + 1) * c] {
                    *v = std * rng.normal();
                }
            }
        }
    }
    Ok(out)
}

/// Dispatches a spatial plan to the configured strategy.
pub fn apply_plan(image: &Tensor, plan: &MaskPlan, cfg: &StrategyConfig, rng: &mut Rng) -> Result<Tensor> {
    match cfg.strategy {
        Strategy::Highpass => apply_highpass_strategy(image, plan, cfg, rng),
        Strategy::Blur => apply_strong_blur(image, plan, cfg),
        Strategy::Meanfill => apply_mean_fill(image, plan),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::render;
    use crate::masking::{sample_positive_plan, tests::grid_with};
    use crate::numerics::filter2d;
    use crate::numerics::gaussian_kernel_2d;

    fn random_image(side: usize, seed: u64) -> Tensor {
        let mut r = Rng::new(seed);
        Tensor::from_fn(&[side, side, 3], |_| r.next_f32())
    }

    fn plan(indices: Vec<usize>, rows: usize, patch: usize) -> MaskPlan {
        let g = grid_with(rows, rows, &[], patch);
        MaskPlan::from_indices(PlanKind::Random, 0.0, indices, &g).unwrap()
    }

    fn cfg(s: Strategy) -> StrategyConfig {
        StrategyConfig::for_side(s, 32)
    }

    #[test]
    fn constant_image_is_fixed_by_meanfill_and_blur() {
        let img = Tensor::full(&[32, 32, 3], 0.37);
        let p = plan((0..64).step_by(3).collect(), 8, 4);
        assert_eq!(apply_mean_fill(&img, &p).unwrap(), img);
        let b = apply_strong_blur(&img, &p, &cfg(Strategy::Blur)).unwrap();
        assert!(b.data().iter().all(|&v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn empty_plan_is_identity() {
        let img = random_image(32, 1);
        let p = plan(vec![], 8, 4);
        assert_eq!(apply_mean_fill(&img, &p).unwrap(), img);
        assert_eq!(apply_strong_blur(&img, &p, &cfg(Strategy::Blur)).unwrap(), img);
        let mut c = cfg(Strategy::Highpass);
        c.noise_std = 0.0;
        let hp = apply_highpass_strategy(&img, &p, &c, &mut Rng::new(1)).unwrap();
        assert_eq!(hp, highpass(&img, c.hp_size, c.hp_var).unwrap());
    }

    #[test]
    fn meanfill_of_two_halves() {
        let img = Tensor::from_fn(&[2, 4, 1], |i| if i % 4 < 2 { 0.0 } else { 1.0 });
        let g = grid_with(1, 2, &[], 2);
        let p = MaskPlan::from_indices(PlanKind::Random, 0.5, vec![0], &g).unwrap();
        let out = apply_mean_fill(&img, &p).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5, 1.0, 1.0, 0.5, 0.5, 1.0, 1.0]);
    }

    #[test]
    fn full_blur_plan_equals_dense_filter() {
        let img = random_image(32, 2);
        let c = cfg(Strategy::Blur);
        let out = apply_strong_blur(&img, &plan((0..64).collect(), 8, 4), &c).unwrap();
        let want = filter2d(&img, &gaussian_kernel_2d(c.blur_size, c.blur_var).unwrap()).unwrap();
        for (a, b) in out.data().iter().zip(want.data()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn unmasked_pixels_are_untouched() {
        let img = random_image(32, 3);
        let p = plan(vec![0, 9, 27, 63], 8, 4);
        let mask = p.pixel_mask();
        for out in [apply_mean_fill(&img, &p).unwrap(), apply_strong_blur(&img, &p, &cfg(Strategy::Blur)).unwrap()] {
            for (i, &m) in mask.iter().enumerate() {
                if !m {
                    assert_eq!(out.data()[i * 3..i * 3 + 3], img.data()[i * 3..i * 3 + 3]);
                }
            }
        }
    }

    #[test]
    fn highpass_of_constant_leaves_pure_noise() {
        let img = Tensor::full(&[224, 224, 3], 0.6);
        let g = grid_with(7, 7, &[], 32);
        let p = MaskPlan::from_indices(PlanKind::Random, 0.0, (0..10).collect(), &g).unwrap();
        let c = StrategyConfig::for_side(Strategy::Highpass, 224);
        let out = apply_highpass_strategy(&img, &p, &c, &mut Rng::new(4)).unwrap();
        let mask = p.pixel_mask();
        let mut noise = Vec::new();
        for (i, &m) in mask.iter().enumerate() {
            let px = &out.data()[i * 3..i * 3 + 3];
            if m {
                noise.extend(px.iter().map(|&v| v as f64));
            } else {
                assert!(px.iter().all(|v| v.abs() < 1e-6));
            }
        }
        assert!(noise.len() >= 10_000);
        let mean = noise.iter().sum::<f64>() / noise.len() as f64;
        let sd = (noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (noise.len() - 1) as f64).sqrt();
        assert!((sd - 0.05).abs() <= 0.05 * 0.05, "{sd}");
    }

    #[test]
    fn channelwise_rules() {
        let img = random_image(32, 5);
        let mut c = cfg(Strategy::Highpass);
        c.noise_std = 0.0;
        let p = plan(vec![1, 5, 40], 8, 4);
        let same = apply_channelwise(&img, &[p.clone(), p.clone(), p.clone()], &c, &mut Rng::new(1)).unwrap();
        assert_eq!(same, apply_highpass_strategy(&img, &p, &c, &mut Rng::new(1)).unwrap());
        let none = plan(vec![], 8, 4);
        let first_only = apply_channelwise(&img, &[p.clone(), none.clone(), none], &c, &mut Rng::new(1)).unwrap();
        let hp = highpass(&img, c.hp_size, c.hp_var).unwrap();
        for i in 0..32 * 32 {
            assert_eq!(first_only.data()[i * 3 + 1], hp.data()[i * 3 + 1]);
            assert_eq!(first_only.data()[i * 3 + 2], hp.data()[i * 3 + 2]);
        }
        for s in [Strategy::Blur, Strategy::Meanfill] {
            let e = apply_channelwise(&img, &[p.clone(), p.clone(), p.clone()], &cfg(s), &mut Rng::new(1));
            assert!(matches!(e, Err(Error::Unsupported(_))));
        }
    }

    #[test]
    fn channelwise_masked_fractions() {
        let img = random_image(32, 6);
        let mut c = cfg(Strategy::Highpass);
        c.noise_std = 0.0;
        let hp = highpass(&img, c.hp_size, c.hp_var).unwrap();
        assert!(hp.data().iter().all(|&v| v != 0.0));
        let g = grid_with(8, 8, &(0..24).collect::<Vec<_>>(), 4);
        let mut r = Rng::new(7);
        let trials = 3000;
        let mut frac = [0.0f64; 3];
        for _ in 0..trials {
            let plans = [0, 1, 2].map(|_| sample_positive_plan(&g, &mut r, c.alpha_range).unwrap());
            let out = apply_channelwise(&img, &plans, &c, &mut r).unwrap();
            for (ch, f) in frac.iter_mut().enumerate() {
                let zeros = (0..32 * 32).filter(|i| out.data()[i * 3 + ch] == 0.0).count();
                *f += zeros as f64 / (32.0 * 32.0) / trials as f64;
            }
        }
        // E[(round(α·24) + round(α·40)) / 64] for α ~ U(0.05, 0.25)
        let steps = 100_000;
        let expected = (0..steps)
            .map(|k| {
                let a = 0.05 + 0.2 * (k as f64 + 0.5) / steps as f64;
                (round_half_up(a * 24.0) + round_half_up(a * 40.0)) as f64 / 64.0
            })
            .sum::<f64>()
            / steps as f64;
        for f in frac {
            assert!((f - expected).abs() < 0.01, "{f} vs {expected}");
        }
    }

    #[test]
    fn focal_geometry() {
        assert_eq!(focal_square(224, 200.0 / 224.0).0, 200);
        assert_eq!(focal_square(224, 130.0 / 224.0).0, 130);
        assert_eq!(focal_square(32, 200.0 / 224.0).0, 29);
        assert_eq!(focal_square(32, 130.0 / 224.0).0, 19);
    }

    #[test]
    fn focal_rules() {
        let img = random_image(32, 8);
        let mut c = cfg(Strategy::Highpass);
        c.focal_outer = 1.0;
        assert_eq!(apply_focal(&img, PlanKind::Positive, &c, &mut Rng::new(1)).unwrap(), img);
        let c = cfg(Strategy::Highpass);
        let neg = apply_focal(&img, PlanKind::HardNegative, &c, &mut Rng::new(1)).unwrap();
        let (s, o) = focal_square(32, c.focal_inner);
        assert_eq!(neg.data()[0..3], img.data()[0..3]);
        let centre = ((o + s / 2) * 32 + o + s / 2) * 3;
        assert_ne!(neg.data()[centre], img.data()[centre]);
        let rect = Tensor::zeros(&[32, 16, 3]);
        assert!(matches!(apply_focal(&rect, PlanKind::Positive, &c, &mut Rng::new(1)), Err(Error::InvalidArgument(_))));
        assert!(apply_focal(&img, PlanKind::Positive, &cfg(Strategy::Blur), &mut Rng::new(1)).is_err());
    }

    #[test]
    fn fills_reduce_border_energy_against_zero_fill() {
        let img = render(3, 32, &mut Rng::new(9));
        let p = plan(vec![9, 18, 27, 36, 45, 12, 50], 8, 4);
        let zero = {
            let mut z = img.clone();
            for (i, m) in p.pixel_mask().into_iter().enumerate() {
                if m {
                    z.data_mut()[i * 3..i * 3 + 3].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            z
        };
        let energy = |t: &Tensor| -> f64 {
            let m = p.pixel_mask();
            let (mut s, mut n) = (0.0, 0usize);
            for y in 0..32 {
                for x in 0..32 {
                    for (yy, xx) in [(y, x + 1), (y + 1, x)] {
                        if yy < 32 && xx < 32 && m[y * 32 + x] != m[yy * 32 + xx] {
                            for ch in 0..3 {
                                s += (t.data()[(y * 32 + x) * 3 + ch] - t.data()[(yy * 32 + xx) * 3 + ch]).abs() as f64;
                                n += 1;
                            }
                        }
                    }
                }
            }
            s / n as f64
        };
        let z = energy(&zero);
        assert!(energy(&apply_mean_fill(&img, &p).unwrap()) < z);
        assert!(energy(&apply_strong_blur(&img, &p, &cfg(Strategy::Blur)).unwrap()) < z);
    }

    #[test]
    fn same_stream_same_bits() {
        let img = random_image(32, 10);
        let p = plan(vec![3, 4, 5], 8, 4);
        let c = cfg(Strategy::Highpass);
        let a = apply_highpass_strategy(&img, &p, &c, &mut Rng::with_stream(1, 2)).unwrap();
        let b = apply_highpass_strategy(&img, &p, &c, &mut Rng::with_stream(1, 2)).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
