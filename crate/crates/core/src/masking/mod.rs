//! Patch masking: which grid cells to mask, and how to fill them.
//!
//! Plans are sampled against a [`SaliencyGrid`]. A positive plan spends one
//! ratio α on both the foreground and the background group, a hard-negative
//! plan masks foreground only, and the random and salient-only plans serve as
//! ablation baselines. Budgets use `floor(x + 0.5)`.

mod apply;
mod config;

pub use apply::{
    apply_channelwise, apply_focal, apply_highpass_strategy, apply_mean_fill, apply_plan, apply_strong_blur, focal_square,
};
pub use config::{Strategy, StrategyConfig};

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::saliency::{GridGeometry, SaliencyGrid};

/// `floor(x + 0.5)` for non-negative budgets.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanKind {
    Positive,
    HardNegative,
    Random,
    SalientOnly,
}

impl PlanKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PlanKind::Positive => "positive",
            PlanKind::HardNegative => "hard_negative",
            PlanKind::Random => "random",
            PlanKind::SalientOnly => "salient_only",
        }
    }
}

/// Which patches of a grid get masked.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub kind: PlanKind,
    /// The sampled α (or β for hard negatives).
    pub ratio: f64,
    /// Sorted, distinct, row-major grid positions.
    pub indices: Vec<usize>,
    pub geometry: GridGeometry,
    pub foreground_masked: usize,
    pub background_masked: usize,
    /// A budget exceeded its group and was cut to the group size.
    pub clamped: bool,
    /// The grid had no foreground/background split; patches came from the whole grid.
    pub fallback: bool,
}

/// One line of the plan log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub kind: PlanKind,
    pub ratio: f64,
    pub indices: Vec<usize>,
}

impl MaskPlan {
    /// Builds a plan from explicit indices, counting them against `grid`.
    pub fn from_indices(kind: PlanKind, ratio: f64, mut indices: Vec<usize>, grid: &SaliencyGrid) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&bad) = indices.iter().find(|&&i| i >= grid.n()) {
            return Err(Error::invalid(format!("patch index {bad} outside a grid of {}", grid.n())));
        }
        let fg = indices.iter().filter(|&&i| grid.is_foreground(i)).count();
        Ok(Self {
            kind,
            ratio,
            foreground_masked: fg,
            background_masked: indices.len() - fg,
            indices,
            geometry: grid.geometry,
            clamped: false,
            fallback: false,
        })
    }

    pub fn empty(kind: PlanKind, grid: &SaliencyGrid) -> Self {
        Self::from_indices(kind, 0.0, Vec::new(), grid).unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn record(&self) -> PlanRecord {
        PlanRecord { kind: self.kind, ratio: self.ratio, indices: self.indices.clone() }
    }

    /// The plan as one JSON object (no trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&self.record()).expect("plan records always serialize")
    }

    /// Per-pixel membership, `H×W` row-major.
    pub fn pixel_mask(&self) -> Vec<bool> {
        let g = self.geometry;
        let (h, w) = (g.image_h(), g.image_w());
        let mut m = vec![false; h * w];
        for &i in &self.indices {
            let (r, c) = (i / g.cols, i % g.cols);
            for y in r * g.patch_h..(r + 1) * g.patch_h {
                m[y * w + c * g.patch_w..y * w + (c + 1) * g.patch_w].iter_mut().for_each(|v| *v = true);
            }
        }
        m
    }
}

fn sample_ratio(rng: &mut Rng, range: (f64, f64)) -> Result<f64> {
    let (lo, hi) = range;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::invalid(format!("ratio range [{lo}, {hi}] must satisfy 0 ≤ lo ≤ hi ≤ 1")));
    }
    Ok(rng.uniform(lo as f32, hi as f32) as f64)
}

/// Draws `want` members of `group` (clamped to its size).
fn draw(group: &[usize], want: usize, rng: &mut Rng, clamped: &mut bool) -> Vec<usize> {
    let k = if want > group.len() {
        debug!("masking budget {want} exceeds group of {}; clamped", group.len());
        *clamped = true;
        group.len()
    } else {
        want
    };
    rng.sample_without_replacement(group.len(), k).expect("k never exceeds the group").into_iter().map(|i| group[i]).collect()
}

fn finish(kind: PlanKind, ratio: f64, indices: Vec<usize>, grid: &SaliencyGrid, clamped: bool, fallback: bool) -> MaskPlan {
    let mut plan = MaskPlan::from_indices(kind, ratio, indices, grid).expect("sampled indices are in range");
    plan.clamped = clamped;
    plan.fallback = fallback;
    plan
}

fn uniform_plan(kind: PlanKind, grid: &SaliencyGrid, alpha: f64, rng: &mut Rng, fallback: bool) -> MaskPlan {
    let all: Vec<usize> = (0..grid.n()).collect();
    let mut clamped = false;
    let idx = draw(&all, round_half_up(alpha * grid.n() as f64), rng, &mut clamped);
    finish(kind, alpha, idx, grid, clamped, fallback)
}

/// Saliency-constrained positive plan: `round(α·γ·N)` foreground and
/// `round(α·(1−γ)·N)` background patches for one `α ~ U(alpha_range)`.
pub fn sample_positive_plan(grid: &SaliencyGrid, rng: &mut Rng, alpha_range: (f64, f64)) -> Result<MaskPlan> {
    let alpha = sample_ratio(rng, alpha_range)?;
    if grid.is_degenerate() {
        debug!("degenerate saliency grid (γ = {}); sampling over all patches", grid.gamma);
        return Ok(uniform_plan(PlanKind::Positive, grid, alpha, rng, true));
    }
    let (fg, bg) = (grid.foreground_indices(), grid.background_indices());
    let mut clamped = false;
    let mut idx = draw(&fg, round_half_up(alpha * fg.len() as f64), rng, &mut clamped);
    idx.extend(draw(&bg, round_half_up(alpha * bg.len() as f64), rng, &mut clamped));
    Ok(finish(PlanKind::Positive, alpha, idx, grid, clamped, false))
}

/// Foreground-only plan of `round(β·γ·N)` patches for `β ~ U(beta_range)`.
pub fn sample_hard_negative_plan(grid: &SaliencyGrid, rng: &mut Rng, beta_range: (f64, f64)) -> Result<MaskPlan> {
    let beta = sample_ratio(rng, beta_range)?;
    let fg = grid.foreground_indices();
    if fg.is_empty() {
        return Err(Error::HardNegativeUnavailable);
    }
    let mut clamped = false;
    let idx = draw(&fg, round_half_up(beta * fg.len() as f64), rng, &mut clamped);
    Ok(finish(PlanKind::HardNegative, beta, idx, grid, clamped, false))
}

/// `round(α·N)` patches uniformly over the grid, ignoring saliency.
pub fn sample_random_plan(grid: &SaliencyGrid, rng: &mut Rng, alpha_range: (f64, f64)) -> Result<MaskPlan> {
    let alpha = sample_ratio(rng, alpha_range)?;
    Ok(uniform_plan(PlanKind::Random, grid, alpha, rng, false))
}

/// `round(α·N)` patches from the foreground only, clamped to its size.
pub fn sample_salient_only_plan(grid: &SaliencyGrid, rng: &mut Rng, alpha_range: (f64, f64)) -> Result<MaskPlan> {
    let alpha = sample_ratio(rng, alpha_range)?;
    let fg = grid.foreground_indices();
    if fg.is_empty() {
        debug!("no foreground patches; salient-only plan sampled over all patches");
        return Ok(uniform_plan(PlanKind::SalientOnly, grid, alpha, rng, true));
    }
    let mut clamped = false;
    let idx = draw(&fg, round_half_up(alpha * grid.n() as f64), rng, &mut clamped);
    Ok(finish(PlanKind::SalientOnly, alpha, idx, grid, clamped, false))
}
