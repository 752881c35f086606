//! Activation-map localization.
//!
//! A frozen convolutional classifier maps an image to a feature tensor
//! `S ∈ R^{U×V×D}` taken just before its global average pool. Summing over
//! channels gives the activation map `A`; a cell is foreground when
//! `A(u,v) ≥ mean(A) − coeff·std(A)` (population std). The binary `U×V` map
//! partitions the image into patches of `H/U × W/V` pixels.

mod localization;

pub(crate) use localization::cross_entropy;
pub use localization::{loc_architecture, train_localization_net, LocTrainConfig, LocalizationNet};

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{read_tensor, Tensor};

pub const DEFAULT_COEFF: f64 = 0.6;

/// Channel-summed activations with their mean and population std.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major `U×V`, accumulated in f64.
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl ActivationMap {
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols || values.is_empty() {
            return Err(Error::Shape(format!("{} values for a {rows}×{cols} map", values.len())));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self { rows, cols, values, mean, std: var.sqrt() })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.rows, self.cols], self.values.iter().map(|&v| v as f32).collect()).unwrap()
    }
}

/// `A(u,v) = Σ_d S(u,v,d)`.
pub fn aggregate_activations(s: &Tensor) -> Result<ActivationMap> {
    let (u, v, d) = s.hwc()?;
    if d == 0 || u == 0 || v == 0 {
        return Err(Error::Shape(format!("activation tensor {:?} has an empty axis", s.shape())));
    }
    let values = s.data().chunks_exact(d).map(|cell| cell.iter().map(|&x| x as f64).sum()).collect();
    ActivationMap::from_values(u, v, values)
}

/// Grid geometry shared by saliency maps and mask plans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GridGeometry {
    pub rows: usize,
    pub cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl GridGeometry {
    pub fn n(&self) -> usize {
        self.rows * self.cols
    }

    /// Geometry of a `rows × cols` grid over an `h × w` image.
    pub fn for_image(h: usize, w: usize, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || h % rows != 0 || w % cols != 0 {
            return Err(Error::Config(format!("a {h}×{w} image cannot be split into a {rows}×{cols} grid")));
        }
        Ok(Self { rows, cols, patch_h: h / rows, patch_w: w / cols })
    }

    pub fn image_h(&self) -> usize {
        self.rows * self.patch_h
    }

    pub fn image_w(&self) -> usize {
        self.cols * self.patch_w
    }
}

/// Binary foreground map `M` over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyGrid {
    /// `U×V`, entries in {0, 1}.
    pub mask: Tensor,
    pub geometry: GridGeometry,
    /// Foreground fraction γ = Σ M / N.
    pub gamma: f64,
}

impl SaliencyGrid {
    pub fn from_mask(mask: Tensor, patch_h: usize, patch_w: usize) -> Result<Self> {
        let (rows, cols) = match mask.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::Shape(format!("saliency mask must be U×V, got {s:?}"))),
        };
        if rows * cols == 0 {
            return Err(Error::Shape("empty saliency mask".into()));
        }
        if let Some(bad) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!("saliency mask entry {bad} is not binary")));
        }
        let fg = mask.data().iter().filter(|&&v| v == 1.0).count();
        let geometry = GridGeometry { rows, cols, patch_h, patch_w };
        Ok(Self { gamma: fg as f64 / (rows * cols) as f64, mask, geometry })
    }

    /// Every patch foreground (γ = 1).
    pub fn all_foreground(geometry: GridGeometry) -> Self {
        Self { mask: Tensor::full(&[geometry.rows, geometry.cols], 1.0), geometry, gamma: 1.0 }
    }

    pub fn n(&self) -> usize {
        self.geometry.n()
    }

    pub fn with_patch(mut self, patch_h: usize, patch_w: usize) -> Self {
        self.geometry.patch_h = patch_h;
        self.geometry.patch_w = patch_w;
        self
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count()
    }

    pub fn foreground_indices(&self) -> Vec<usize> {
        self.mask.data().iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect()
    }

    pub fn background_indices(&self) -> Vec<usize> {
        self.mask.data().iter().enumerate().filter(|(_, &v)| v != 1.0).map(|(i, _)| i).collect()
    }

    pub fn is_foreground(&self, index: usize) -> bool {
        self.mask.data()[index] == 1.0
    }

    /// γ ∈ {0, 1}: no foreground/background split exists.
    pub fn is_degenerate(&self) -> bool {
        let fg = self.foreground_count();
        fg == 0 || fg == self.n()
    }
}

/// `M(u,v) = 1` iff `A(u,v) ≥ mean − coeff·std`. Patch size is left at 1×1;
/// callers attach the image geometry with [`SaliencyGrid::with_patch`].
pub fn scda_threshold(a: &ActivationMap, coeff: f64) -> Result<SaliencyGrid> {
    if !(coeff >= 0.0) {
        return Err(Error::invalid(format!("saliency coefficient must be ≥ 0, got {coeff}")));
    }
    let threshold = a.mean - coeff * a.std;
    let mask: Vec<f32> = a.values.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect();
    SaliencyGrid::from_mask(Tensor::new(vec![a.rows, a.cols], mask)?, 1, 1)
}

/// Saliency from a precomputed activation tensor `S` stored as SMT1.
pub fn saliency_from_activations(path: &Path, coeff: f64, patch_h: usize, patch_w: usize) -> Result<SaliencyGrid> {
    let s = read_tensor(path)?;
    Ok(scda_threshold(&aggregate_activations(&s)?, coeff)?.with_patch(patch_h, patch_w))
}

/// A precomputed binary `U×V` grid stored as SMT1 (f32 or u8 payload).
pub fn load_saliency(path: &Path, patch_h: usize, patch_w: usize) -> Result<SaliencyGrid> {
    let t = read_tensor(path)?;
    SaliencyGrid::from_mask(t, patch_h, patch_w).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{write_tensor, Rng, Smt1};
    use proptest::prelude::*;

    fn map(values: &[f64], rows: usize, cols: usize) -> ActivationMap {
        ActivationMap::from_values(rows, cols, values.to_vec()).unwrap()
    }

    #[test]
    fn zeros_aggregate_to_zero() {
        let a = aggregate_activations(&Tensor::zeros(&[3, 4, 5])).unwrap();
        assert!(a.values.iter().all(|&v| v == 0.0));
        assert_eq!((a.mean, a.std), (0.0, 0.0));
    }

    #[test]
    fn single_cell_is_channel_sum() {
        let s = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.5]).unwrap();
        let a = aggregate_activations(&s).unwrap();
        assert_eq!(a.values, vec![6.5]);
        assert_eq!(a.std, 0.0);
    }

    #[test]
    fn hand_computed_statistics() {
        let s = Tensor::new(vec![2, 2, 2], vec![0.5, 0.5, 1.0, 1.0, 2.0, 1.0, 4.0, 6.0]).unwrap();
        let a = aggregate_activations(&s).unwrap();
        assert_eq!(a.values, vec![1.0, 2.0, 3.0, 10.0]);
        assert_eq!(a.mean, 4.0);
        assert!((a.std - 12.5f64.sqrt()).abs() < 1e-12);
        let g = scda_threshold(&a, 0.6).unwrap();
        assert_eq!(g.mask.data(), &[0.0, 1.0, 1.0, 1.0]);
        assert_eq!(g.gamma, 0.75);
    }

    #[test]
    fn constant_map_is_all_foreground() {
        let g = scda_threshold(&map(&[3.0; 6], 2, 3), 0.6).unwrap();
        assert_eq!(g.gamma, 1.0);
    }

    #[test]
    fn zero_coeff_is_mean_threshold() {
        let g = scda_threshold(&map(&[1.0, 2.0, 3.0, 10.0], 2, 2), 0.0).unwrap();
        assert_eq!(g.mask.data(), &[0.0, 0.0, 0.0, 1.0]);
        assert!(scda_threshold(&map(&[1.0], 1, 1), -0.1).is_err());
    }

    #[test]
    fn stored_statistics_match_recomputation() {
        let mut r = Rng::new(3);
        let s = Tensor::from_fn(&[5, 7, 9], |_| r.normal());
        let a = aggregate_activations(&s).unwrap();
        let again = ActivationMap::from_values(5, 7, a.to_tensor().data().iter().map(|&v| v as f64).collect()).unwrap();
        assert!((a.mean - again.mean).abs() < 1e-6);
        assert!((a.std - again.std).abs() < 1e-6);
    }

    #[test]
    fn grid_files() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("g.smt1");
        write_tensor(&p, &Tensor::full(&[2, 2], 1.0)).unwrap();
        assert_eq!(load_saliency(&p, 4, 4).unwrap().gamma, 1.0);
        write_tensor(&p, &Tensor::zeros(&[2, 2])).unwrap();
        assert_eq!(load_saliency(&p, 4, 4).unwrap().gamma, 0.0);
        Smt1::from_u8(vec![2, 2], vec![1, 1, 0, 1]).write(&p).unwrap();
        let g = load_saliency(&p, 4, 4).unwrap();
        assert_eq!(g.gamma, 0.75);
        assert_eq!(g.geometry.patch_h, 4);
        write_tensor(&p, &Tensor::new(vec![1, 2], vec![1.0, 0.5]).unwrap()).unwrap();
        assert!(matches!(load_saliency(&p, 4, 4), Err(Error::Format { .. })));
    }

    #[test]
    fn activations_from_file_equal_two_step_composition() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("s.smt1");
        let mut r = Rng::new(8);
        let s = Tensor::from_fn(&[8, 8, 16], |_| r.next_f32());
        write_tensor(&p, &s).unwrap();
        let from_file = saliency_from_activations(&p, 0.6, 4, 4).unwrap();
        let direct = scda_threshold(&aggregate_activations(&s).unwrap(), 0.6).unwrap().with_patch(4, 4);
        assert_eq!(from_file, direct);
    }

    proptest! {
        #[test]
        fn larger_coeff_never_removes_foreground(seed in any::<u64>(), c1 in 0.0f64..2.0, dc in 0.0f64..2.0) {
            let mut r = Rng::new(seed);
            let s = Tensor::from_fn(&[6, 6, 4], |_| r.normal());
            let a = aggregate_activations(&s).unwrap();
            let lo = scda_threshold(&a, c1).unwrap();
            let hi = scda_threshold(&a, c1 + dc).unwrap();
            for (x, y) in lo.mask.data().iter().zip(hi.mask.data()) {
                prop_assert!(*y >= *x);
            }
            prop_assert!((0.0..=1.0).contains(&lo.gamma));
        }

        #[test]
        fn positive_rescaling_keeps_mask(seed in any::<u64>(), k in 0u32..6) {
            // powers of two keep every f32/f64 operation exact
            let c = (1u32 << k) as f32;
            let mut r = Rng::new(seed);
            let s = Tensor::from_fn(&[5, 6, 3], |_| r.next_f32());
            let scaled = s.map(|v| v * c);
            let a = scda_threshold(&aggregate_activations(&s).unwrap(), 0.6).unwrap();
            let b = scda_threshold(&aggregate_activations(&scaled).unwrap(), 0.6).unwrap();
            prop_assert_eq!(a.mask, b.mask);
        }
    }
}
