use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::round_to_odd;

/// How masked patches are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// High-pass the whole view, zero the masked patches, add noise there.
    Highpass,
    /// Copy masked patches from a strongly blurred version of the view.
    Blur,
    /// Fill masked patches with the scalar mean of the view.
    Meanfill,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Highpass, Strategy::Blur, Strategy::Meanfill];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Highpass => "highpass",
            Strategy::Blur => "blur",
            Strategy::Meanfill => "meanfill",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highpass" => Ok(Strategy::Highpass),
            "blur" => Ok(Strategy::Blur),
            "meanfill" => Ok(Strategy::Meanfill),
            _ => Err(Error::Config(format!("unknown strategy `{s}` (expected highpass, blur or meanfill)"))),
        }
    }
}

/// Filling parameters and sampling ranges for one strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub blur_size: usize,
    pub blur_var: f64,
    pub hp_size: usize,
    pub hp_var: f64,
    /// Std of the Gaussian noise used by high-pass and focal filling.
    pub noise_std: f64,
    pub focal_outer: f64,
    pub focal_inner: f64,
    /// Probability of the channel-wise variant per view (high-pass only).
    pub channelwise_p: f64,
    /// Probability of the focal variant per view (high-pass only).
    pub focal_p: f64,
    pub alpha_range: (f64, f64),
    pub beta_range: (f64, f64),
}

pub const REFERENCE_SIDE: f64 = 224.0;
/// High-pass kernel used for views smaller than half of [`REFERENCE_SIDE`].
pub const HP_SMALL_SIZE: usize = 15;
pub const HP_SMALL_VAR: f64 = 16.0;

impl StrategyConfig {
    /// Defaults for `side`-pixel views: kernels defined at side 224 and
    /// scaled linearly in size and quadratically in variance. Views smaller
    /// than half the reference side use the fixed high-pass kernel
    /// [`HP_SMALL_SIZE`]/[`HP_SMALL_VAR`], narrowed to the image if needed.
    pub fn for_side(strategy: Strategy, side: usize) -> Self {
        let s = side as f64 / REFERENCE_SIDE;
        let (hp_size, hp_var) = if s < 0.5 {
            (HP_SMALL_SIZE.min((side.max(2) - 1) | 1), HP_SMALL_VAR)
        } else {
            (round_to_odd(13.0 * s), 4.0 * s * s)
        };
        Self {
            strategy,
            blur_size: round_to_odd(31.0 * s),
            blur_var: 10.0 * s * s,
            hp_size,
            hp_var,
            noise_std: 0.05,
            focal_outer: 200.0 / 224.0,
            focal_inner: 130.0 / 224.0,
            channelwise_p: 0.25,
            focal_p: 0.25,
            alpha_range: (0.05, 0.25),
            beta_range: (0.4, 0.7),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let odd = |name: &str, k: usize| {
            if k == 0 || k % 2 == 0 {
                Err(Error::Config(format!("{name} must be odd and positive, got {k}")))
            } else {
                Ok(())
            }
        };
        odd("blur_size", self.blur_size)?;
        odd("hp_size", self.hp_size)?;
        for (name, v) in [("blur_var", self.blur_var), ("hp_var", self.hp_var)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("noise_std must be ≥ 0, got {}", self.noise_std)));
        }
        if !(0.0 < self.focal_inner && self.focal_inner < self.focal_outer && self.focal_outer <= 1.0) {
            return Err(Error::Config(format!(
                "focal_inner ({}) and focal_outer ({}) must satisfy 0 < focal_inner < focal_outer ≤ 1",
                self.focal_inner, self.focal_outer
            )));
        }
        for (name, p) in [("channelwise_p", self.channelwise_p), ("focal_p", self.focal_p)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.channelwise_p + self.focal_p > 1.0 {
            return Err(Error::Config(format!("channelwise_p ({}) + focal_p ({}) exceeds 1", self.channelwise_p, self.focal_p)));
        }
        for (lo_name, hi_name, (lo, hi)) in
            [("alpha_min", "alpha_max", self.alpha_range), ("beta_min", "beta_max", self.beta_range)]
        {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return Err(Error::Config(format!(
                    "{lo_name} ({lo}) and {hi_name} ({hi}) must satisfy 0 ≤ {lo_name} ≤ {hi_name} ≤ 1"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_side_defaults() {
        let c = StrategyConfig::for_side(Strategy::Blur, 224);
        assert_eq!((c.blur_size, c.blur_var), (31, 10.0));
        assert_eq!((c.hp_size, c.hp_var), (13, 4.0));
        c.validate().unwrap();
    }

    #[test]
    fn small_side_scaling() {
        let c = StrategyConfig::for_side(Strategy::Highpass, 32);
        assert_eq!(c.blur_size, 5);
        assert!((c.blur_var - 10.0 / 49.0).abs() < 1e-12);
        assert_eq!((c.hp_size, c.hp_var), (HP_SMALL_SIZE, HP_SMALL_VAR));
        assert_eq!(StrategyConfig::for_side(Strategy::Highpass, 8).hp_size, 7);
        assert_eq!(StrategyConfig::for_side(Strategy::Highpass, 112).hp_size, 7);
    }

    #[test]
    fn validation_names_both_keys() {
        let mut c = StrategyConfig::for_side(Strategy::Meanfill, 32);
        c.alpha_range = (0.3, 0.2);
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("alpha_min") && msg.contains("alpha_max"));
        let mut c = StrategyConfig::for_side(Strategy::Meanfill, 32);
        c.focal_inner = 0.95;
        assert!(c.validate().is_err());
        let mut c = StrategyConfig::for_side(Strategy::Meanfill, 32);
        c.blur_size = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("zero".parse::<Strategy>().is_err());
    }
}
