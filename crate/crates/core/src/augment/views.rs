use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::{standard_augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::masking::{
    apply_channelwise, apply_focal, apply_plan, sample_hard_negative_plan, sample_positive_plan, sample_random_plan,
    sample_salient_only_plan, MaskPlan, PlanKind, Strategy, StrategyConfig,
};
use crate::numerics::{highpass, Rng, Tensor};
use crate::saliency::{LocalizationNet, SaliencyGrid};

/// Which branch receives the positive masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BranchPolicy {
    Query,
    Key,
    Both,
    None,
}

impl BranchPolicy {
    pub fn masks_query(&self) -> bool {
        matches!(self, BranchPolicy::Query | BranchPolicy::Both)
    }

    pub fn masks_key(&self) -> bool {
        matches!(self, BranchPolicy::Key | BranchPolicy::Both)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            BranchPolicy::Query => "query",
            BranchPolicy::Key => "key",
            BranchPolicy::Both => "both",
            BranchPolicy::None => "none",
        }
    }
}

impl fmt::Display for BranchPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BranchPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(BranchPolicy::Query),
            "key" => Ok(BranchPolicy::Key),
            "both" => Ok(BranchPolicy::Both),
            "none" => Ok(BranchPolicy::None),
            _ => Err(Error::Config(format!("unknown branch `{s}` (expected query, key, both or none)"))),
        }
    }
}

/// How positive plans pick their patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskMode {
    Saliency,
    Random,
    SalientOnly,
}

impl MaskMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskMode::Saliency => "saliency",
            MaskMode::Random => "random",
            MaskMode::SalientOnly => "salient_only",
        }
    }

    fn sample(&self, grid: &SaliencyGrid, rng: &mut Rng, alpha: (f64, f64)) -> Result<MaskPlan> {
        match self {
            MaskMode::Saliency => sample_positive_plan(grid, rng, alpha),
            MaskMode::Random => sample_random_plan(grid, rng, alpha),
            MaskMode::SalientOnly => sample_salient_only_plan(grid, rng, alpha),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "saliency" => Ok(MaskMode::Saliency),
            "random" => Ok(MaskMode::Random),
            "salient_only" | "salient-only" => Ok(MaskMode::SalientOnly),
            _ => Err(Error::Config(format!("unknown mask mode `{s}` (expected saliency, random or salient_only)"))),
        }
    }
}

/// Everything [`build_views`] needs besides the image and the localization net.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewConfig {
    pub side: usize,
    pub augment: AugmentConfig,
    pub masking: StrategyConfig,
    pub policy: BranchPolicy,
    pub mode: MaskMode,
    pub hardneg: bool,
}

impl ViewConfig {
    pub fn new(side: usize, strategy: Strategy, policy: BranchPolicy, mode: MaskMode, hardneg: bool) -> Self {
        Self { side, augment: AugmentConfig::default(), masking: StrategyConfig::for_side(strategy, side), policy, mode, hardneg }
    }

    fn needs_key_grid(&self) -> bool {
        self.policy.masks_key() || self.hardneg
    }
}

/// How one view was masked.
#[derive(Debug, Clone, PartialEq)]
pub enum AppliedMask {
    Spatial(MaskPlan),
    Channelwise(Box<[MaskPlan; 3]>),
    Focal(PlanKind),
}

impl AppliedMask {
    /// The spatial plan, or the first channel's plan.
    pub fn plan(&self) -> Option<&MaskPlan> {
        match self {
            AppliedMask::Spatial(p) => Some(p),
            AppliedMask::Channelwise(ps) => Some(&ps[0]),
            AppliedMask::Focal(_) => None,
        }
    }

    pub fn fallback(&self) -> bool {
        match self {
            AppliedMask::Spatial(p) => p.fallback,
            AppliedMask::Channelwise(ps) => ps.iter().any(|p| p.fallback),
            AppliedMask::Focal(_) => false,
        }
    }
}

/// Query view, positive key view and optional hard-negative key view of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBundle {
    pub source: String,
    pub query: Tensor,
    pub key_pos: Tensor,
    pub key_hard_neg: Option<Tensor>,
    pub query_mask: Option<AppliedMask>,
    pub key_mask: Option<AppliedMask>,
    pub hard_neg_mask: Option<AppliedMask>,
    /// Foreground fraction of the key view's grid, when one was computed.
    pub key_gamma: Option<f64>,
}

/// The encoder input domain: the high-pass image under the highpass strategy, else unchanged.
pub fn input_domain(view: &Tensor, cfg: &StrategyConfig) -> Result<Tensor> {
    match cfg.strategy {
        Strategy::Highpass => highpass(view, cfg.hp_size, cfg.hp_var),
        _ => Ok(view.clone()),
    }
}

enum Variant {
    Spatial,
    Channelwise,
    Focal,
}

fn pick_variant(cfg: &StrategyConfig, rng: &mut Rng) -> Variant {
    if cfg.strategy != Strategy::Highpass {
        return Variant::Spatial;
    }
    let u = rng.next_f32() as f64;
    if u < cfg.channelwise_p {
        Variant::Channelwise
    } else if u < cfg.channelwise_p + cfg.focal_p {
        Variant::Focal
    } else {
        Variant::Spatial
    }
}

/// Masks one view. `sample` draws a spatial plan; under highpass the
/// channel-wise and focal variants may replace it.
fn mask_view(
    view: &Tensor,
    cfg: &StrategyConfig,
    kind: PlanKind,
    rng: &mut Rng,
    mut sample: impl FnMut(&mut Rng) -> Result<MaskPlan>,
) -> Result<(Tensor, AppliedMask)> {
    match pick_variant(cfg, rng) {
        Variant::Spatial => {
            let plan = sample(rng)?;
            Ok((apply_plan(view, &plan, cfg, rng)?, AppliedMask::Spatial(plan)))
        }
        Variant::Channelwise => {
            let plans = [sample(rng)?, sample(rng)?, sample(rng)?];
            Ok((apply_channelwise(view, &plans, cfg, rng)?, AppliedMask::Channelwise(Box::new(plans))))
        }
        Variant::Focal => {
            let hp = input_domain(view, cfg)?;
            Ok((apply_focal(&hp, kind, cfg, rng)?, AppliedMask::Focal(kind)))
        }
    }
}

struct Pending {
    query: Tensor,
    key: Tensor,
    rng: Rng,
}

/// Builds views for a batch. Image `i` draws from `rng.fork(i)`, so results do
/// not depend on batch composition. Saliency is computed on each augmented
/// view in one batched pass per branch.
pub fn build_views_batch(
    images: &[(&Tensor, &str)],
    loc: Option<&LocalizationNet>,
    cfg: &ViewConfig,
    rng: &Rng,
) -> Result<Vec<ViewBundle>> {
    cfg.masking.validate()?;
    let pending: Vec<Pending> = images
        .par_iter()
        .enumerate()
        .map(|(i, (img, _))| {
            let r = rng.fork(i as u64);
            let query = standard_augment(img, cfg.side, &cfg.augment, &mut r.fork(0))?;
            let key = standard_augment(img, cfg.side, &cfg.augment, &mut r.fork(1))?;
            Ok(Pending { query, key, rng: r.fork(2) })
        })
        .collect::<Result<_>>()?;
    let grids = |views: Vec<Tensor>, needed: bool| -> Result<Option<Vec<SaliencyGrid>>> {
        if !needed || views.is_empty() {
            return Ok(None);
        }
        let loc = loc.ok_or_else(|| Error::Config("masking needs a localization network".into()))?;
        loc.compute_saliency_batch(&views).map(Some)
    };
    let query_grids = grids(pending.iter().map(|p| p.query.clone()).collect(), cfg.policy.masks_query())?;
    let key_grids = grids(pending.iter().map(|p| p.key.clone()).collect(), cfg.needs_key_grid())?;

    let m = &cfg.masking;
    pending
        .into_par_iter()
        .enumerate()
        .map(|(i, p)| {
            let (query, query_mask) = match &query_grids {
                Some(g) => {
                    let (v, a) = mask_view(&p.query, m, PlanKind::Positive, &mut p.rng.fork(0), |r| {
                        cfg.mode.sample(&g[i], r, m.alpha_range)
                    })?;
                    (v, Some(a))
                }
                None => (input_domain(&p.query, m)?, None),
            };
            let key_grid = key_grids.as_ref().map(|g| &g[i]);
            let (key_pos, key_mask) = match key_grid.filter(|_| cfg.policy.masks_key()) {
                Some(g) => {
                    let (v, a) =
                        mask_view(&p.key, m, PlanKind::Positive, &mut p.rng.fork(1), |r| cfg.mode.sample(g, r, m.alpha_range))?;
                    (v, Some(a))
                }
                None => (input_domain(&p.key, m)?, None),
            };
            let (key_hard_neg, hard_neg_mask) = match key_grid.filter(|_| cfg.hardneg) {
                Some(g) if g.foreground_count() > 0 => {
                    let (v, a) = mask_view(&p.key, m, PlanKind::HardNegative, &mut p.rng.fork(2), |r| {
                        sample_hard_negative_plan(g, r, m.beta_range)
                    })?;
                    (Some(v), Some(a))
                }
                _ => (None, None),
            };
            Ok(ViewBundle {
                source: images[i].1.to_string(),
                query,
                key_pos,
                key_hard_neg,
                query_mask,
                key_mask,
                hard_neg_mask,
                key_gamma: key_grid.map(|g| g.gamma),
            })
        })
        .collect()
}

/// Views of a single image.
pub fn build_views(image: &Tensor, id: &str, loc: Option<&LocalizationNet>, cfg: &ViewConfig, rng: &Rng) -> Result<ViewBundle> {
    Ok(build_views_batch(&[(image, id)], loc, cfg, rng)?.pop().unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::apply_mean_fill;
    use crate::model::ConvNet;
    use crate::saliency::loc_architecture;

    fn loc() -> LocalizationNet {
        LocalizationNet::new(ConvNet::new(loc_architecture(32, 8, 4).unwrap(), &mut Rng::new(1)).unwrap(), 0.6).unwrap()
    }

    fn image(seed: u64) -> Tensor {
        let mut r = Rng::new(seed);
        Tensor::from_fn(&[32, 32, 3], |_| r.next_f32())
    }

    fn plain_views(img: &Tensor, cfg: &ViewConfig, rng: &Rng) -> (Tensor, Tensor) {
        let r = rng.fork(0);
        (
            standard_augment(img, cfg.side, &cfg.augment, &mut r.fork(0)).unwrap(),
            standard_augment(img, cfg.side, &cfg.augment, &mut r.fork(1)).unwrap(),
        )
    }

    #[test]
    fn no_policy_gives_two_plain_views() {
        let img = image(1);
        let cfg = ViewConfig::new(32, Strategy::Meanfill, BranchPolicy::None, MaskMode::Saliency, false);
        let rng = Rng::new(7);
        let b = build_views(&img, "a", None, &cfg, &rng).unwrap();
        let (q, k) = plain_views(&img, &cfg, &rng);
        assert_eq!((b.query, b.key_pos), (q, k));
        assert!(b.key_hard_neg.is_none() && b.query_mask.is_none());
    }

    #[test]
    fn query_policy_leaves_key_unmasked() {
        let img = image(2);
        let net = loc();
        let cfg = ViewConfig::new(32, Strategy::Blur, BranchPolicy::Query, MaskMode::Saliency, false);
        let rng = Rng::new(8);
        let b = build_views(&img, "a", Some(&net), &cfg, &rng).unwrap();
        let (q, k) = plain_views(&img, &cfg, &rng);
        assert_eq!(b.key_pos, k);
        assert!(b.key_mask.is_none());
        let plan = b.query_mask.unwrap().plan().unwrap().clone();
        assert!(!plan.is_empty());
        let mask = plan.pixel_mask();
        for (i, m) in mask.iter().enumerate() {
            if !m {
                assert_eq!(b.query.data()[i * 3..i * 3 + 3], q.data()[i * 3..i * 3 + 3]);
            }
        }
    }

    #[test]
    fn both_policy_uses_independent_plans() {
        let net = loc();
        let cfg = ViewConfig::new(32, Strategy::Meanfill, BranchPolicy::Both, MaskMode::Random, false);
        let img = image(3);
        let mut collisions = 0;
        for s in 0..100 {
            let b = build_views(&img, "a", Some(&net), &cfg, &Rng::new(s)).unwrap();
            if b.query_mask.unwrap().plan().unwrap().indices == b.key_mask.unwrap().plan().unwrap().indices {
                collisions += 1;
            }
        }
        assert_eq!(collisions, 0);
    }

    #[test]
    fn hard_negative_differs_only_in_foreground() {
        let net = loc();
        let cfg = ViewConfig::new(32, Strategy::Meanfill, BranchPolicy::Query, MaskMode::Saliency, true);
        for s in 0..10 {
            let img = image(10 + s);
            let rng = Rng::new(s);
            let b = build_views(&img, "a", Some(&net), &cfg, &rng).unwrap();
            let neg = b.key_hard_neg.expect("saliency grids always have foreground");
            let plan = b.hard_neg_mask.unwrap().plan().unwrap().clone();
            let grid = net.compute_saliency(&b.key_pos).unwrap();
            assert!(plan.indices.iter().all(|&i| grid.is_foreground(i)));
            assert_eq!(neg, apply_mean_fill(&b.key_pos, &plan).unwrap());
        }
    }

    #[test]
    fn highpass_views_are_zero_mean() {
        let net = loc();
        let cfg = ViewConfig::new(32, Strategy::Highpass, BranchPolicy::Query, MaskMode::Saliency, true);
        for s in 0..20 {
            let b = build_views(&image(30 + s), "a", Some(&net), &cfg, &Rng::new(s)).unwrap();
            for v in [&b.query, &b.key_pos] {
                for ch in 0..3 {
                    let m = v.data().iter().skip(ch).step_by(3).map(|&x| x as f64).sum::<f64>() / 1024.0;
                    assert!(m.abs() < 0.02, "{m}");
                }
            }
        }
    }

    #[test]
    fn batching_does_not_change_views() {
        let net = loc();
        let cfg = ViewConfig::new(32, Strategy::Highpass, BranchPolicy::Both, MaskMode::Saliency, true);
        let imgs: Vec<Tensor> = (0..4).map(image).collect();
        let pairs: Vec<(&Tensor, &str)> = imgs.iter().map(|t| (t, "x")).collect();
        let rng = Rng::new(5);
        let batch = build_views_batch(&pairs, Some(&net), &cfg, &rng).unwrap();
        let single = build_views(&imgs[0], "x", Some(&net), &cfg, &rng).unwrap();
        assert_eq!(batch[0], single);
    }

    #[test]
    fn masking_without_localization_is_config_error() {
        let cfg = ViewConfig::new(32, Strategy::Meanfill, BranchPolicy::Query, MaskMode::Saliency, false);
        assert!(matches!(build_views(&image(1), "a", None, &cfg, &Rng::new(1)), Err(Error::Config(_))));
    }

    #[test]
    fn policy_names() {
        for p in [BranchPolicy::Query, BranchPolicy::Key, BranchPolicy::Both, BranchPolicy::None] {
            assert_eq!(p.as_str().parse::<BranchPolicy>().unwrap(), p);
        }
        for m in [MaskMode::Saliency, MaskMode::Random, MaskMode::SalientOnly] {
            assert_eq!(m.as_str().parse::<MaskMode>().unwrap(), m);
        }
    }
}
