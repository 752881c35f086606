//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment; blank lines are ignored.
//! Every key has a default, so an empty file is a valid configuration.
//! Keys marked `auto` are resolved from other keys by [`Config::resolved`].

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::{BranchPolicy, MaskMode, ViewConfig};
use crate::error::{Error, Result};
use crate::masking::{Strategy, StrategyConfig};
use crate::ssl::LossParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Framework {
    Moco,
    Simclr,
}

impl Framework {
    pub fn as_str(&self) -> &'static str {
        match self {
            Framework::Moco => "moco",
            Framework::Simclr => "simclr",
        }
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moco" => Ok(Framework::Moco),
            "simclr" => Ok(Framework::Simclr),
            _ => Err(Error::Config(format!("unknown framework `{s}` (expected moco or simclr)"))),
        }
    }
}

/// Where the localization network comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LocNetSource {
    TrainSupervised,
    Checkpoint(PathBuf),
}

impl fmt::Display for LocNetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LocNetSource::TrainSupervised => f.write_str("train-supervised"),
            LocNetSource::Checkpoint(p) => write!(f, "{}", p.display()),
        }
    }
}

/// Every setting of a pretraining run plus its evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub framework: Framework,
    pub strategy: Strategy,
    pub mask_mode: MaskMode,
    pub branch: BranchPolicy,
    pub hardneg: bool,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub rho: f64,
    pub tau: f64,
    pub literal_eq2: bool,
    pub saliency_coeff: f64,
    pub grid: usize,
    pub channelwise_p: f64,
    pub focal_p: f64,
    pub noise_std: f64,
    pub blur_size: Option<usize>,
    pub blur_var: Option<f64>,
    pub hp_size: Option<usize>,
    pub hp_var: Option<f64>,
    pub focal_outer: f64,
    pub focal_inner: f64,
    pub queue: usize,
    pub moco_m: f64,
    pub batch: usize,
    pub lr: Option<f64>,
    pub epochs: usize,
    pub warmup: usize,
    pub wd: f64,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub loc_net: LocNetSource,
    pub loc_epochs: usize,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub side: usize,
    pub checkpoint_every: usize,
    pub variance_k: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            framework: Framework::Moco,
            strategy: Strategy::Highpass,
            mask_mode: MaskMode::Saliency,
            branch: BranchPolicy::Query,
            hardneg: true,
            alpha_min: 0.05,
            alpha_max: 0.25,
            beta_min: 0.4,
            beta_max: 0.7,
            rho: 1.0,
            tau: 0.2,
            literal_eq2: false,
            saliency_coeff: 0.6,
            grid: 8,
            channelwise_p: 0.25,
            focal_p: 0.25,
            noise_std: 0.05,
            blur_size: None,
            blur_var: None,
            hp_size: None,
            hp_var: None,
            focal_outer: 0.8929,
            focal_inner: 0.5804,
            queue: 4096,
            moco_m: 0.99,
            batch: 128,
            lr: None,
            epochs: 20,
            warmup: 2,
            wd: 1e-4,
            seed: 0,
            dataset: None,
            loc_net: LocNetSource::TrainSupervised,
            loc_epochs: 8,
            probe_epochs: 30,
            probe_lr: 3.0,
            side: 32,
            checkpoint_every: 10,
            variance_k: 8,
        }
    }
}

/// Recognized keys in file order.
pub const KEYS: &[&str] = &[
    "framework",
    "strategy",
    "mask_mode",
    "branch",
    "hardneg",
    "alpha_min",
    "alpha_max",
    "beta_min",
    "beta_max",
    "rho",
    "tau",
    "literal_eq2",
    "saliency_coeff",
    "grid",
    "channelwise_p",
    "focal_p",
    "noise_std",
    "blur_size",
    "blur_var",
    "hp_size",
    "hp_var",
    "focal_outer",
    "focal_inner",
    "queue",
    "moco_m",
    "batch",
    "lr",
    "epochs",
    "warmup",
    "wd",
    "seed",
    "dataset",
    "loc_net",
    "loc_epochs",
    "probe_epochs",
    "probe_lr",
    "side",
    "checkpoint_every",
    "variance_k",
];

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected on/off or true/false, got `{v}`")),
    }
}

fn parse_num<T: FromStr>(v: &str, what: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("expected {what}, got `{v}`"))
}

fn parse_auto<T: FromStr>(v: &str, what: &str) -> std::result::Result<Option<T>, String> {
    if v == "auto" {
        Ok(None)
    } else {
        parse_num(v, what).map(Some)
    }
}

fn show<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), |x| x.to_string())
}

impl Config {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let real = "a number";
        let int = "a non-negative integer";
        match key {
            "framework" => self.framework = v.parse().map_err(|e: Error| e.to_string())?,
            "strategy" => self.strategy = v.parse().map_err(|e: Error| e.to_string())?,
            "mask_mode" => self.mask_mode = v.parse().map_err(|e: Error| e.to_string())?,
            "branch" => self.branch = v.parse().map_err(|e: Error| e.to_string())?,
            "hardneg" => self.hardneg = parse_bool(v)?,
            "alpha_min" => self.alpha_min = parse_num(v, real)?,
            "alpha_max" => self.alpha_max = parse_num(v, real)?,
            "beta_min" => self.beta_min = parse_num(v, real)?,
            "beta_max" => self.beta_max = parse_num(v, real)?,
            "rho" => self.rho = parse_num(v, real)?,
            "tau" => self.tau = parse_num(v, real)?,
            "literal_eq2" => self.literal_eq2 = parse_bool(v)?,
            "saliency_coeff" => self.saliency_coeff = parse_num(v, real)?,
            "grid" => self.grid = parse_num(v, int)?,
            "channelwise_p" => self.channelwise_p = parse_num(v, real)?,
            "focal_p" => self.focal_p = parse_num(v, real)?,
            "noise_std" => self.noise_std = parse_num(v, real)?,
            "blur_size" => self.blur_size = parse_auto(v, int)?,
            "blur_var" => self.blur_var = parse_auto(v, real)?,
            "hp_size" => self.hp_size = parse_auto(v, int)?,
            "hp_var" => self.hp_var = parse_auto(v, real)?,
            "focal_outer" => self.focal_outer = parse_num(v, real)?,
            "focal_inner" => self.focal_inner = parse_num(v, real)?,
            "queue" => self.queue = parse_num(v, int)?,
            "moco_m" => self.moco_m = parse_num(v, real)?,
            "batch" => self.batch = parse_num(v, int)?,
            "lr" => self.lr = parse_auto(v, real)?,
            "epochs" => self.epochs = parse_num(v, int)?,
            "warmup" => self.warmup = parse_num(v, int)?,
            "wd" => self.wd = parse_num(v, real)?,
            "seed" => self.seed = parse_num(v, int)?,
            "dataset" => self.dataset = (!v.is_empty()).then(|| PathBuf::from(v)),
            "loc_net" => {
                self.loc_net = if v == "train-supervised" {
                    LocNetSource::TrainSupervised
                } else {
                    LocNetSource::Checkpoint(PathBuf::from(v))
                }
            }
            "loc_epochs" => self.loc_epochs = parse_num(v, int)?,
            "probe_epochs" => self.probe_epochs = parse_num(v, int)?,
            "probe_lr" => self.probe_lr = parse_num(v, real)?,
            "side" => self.side = parse_num(v, int)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(v, int)?,
            "variance_k" => self.variance_k = parse_num(v, int)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "framework" => self.framework.to_string(),
            "strategy" => self.strategy.to_string(),
            "mask_mode" => self.mask_mode.to_string(),
            "branch" => self.branch.to_string(),
            "hardneg" => if self.hardneg { "on" } else { "off" }.into(),
            "alpha_min" => self.alpha_min.to_string(),
            "alpha_max" => self.alpha_max.to_string(),
            "beta_min" => self.beta_min.to_string(),
            "beta_max" => self.beta_max.to_string(),
            "rho" => self.rho.to_string(),
            "tau" => self.tau.to_string(),
            "literal_eq2" => self.literal_eq2.to_string(),
            "saliency_coeff" => self.saliency_coeff.to_string(),
            "grid" => self.grid.to_string(),
            "channelwise_p" => self.channelwise_p.to_string(),
            "focal_p" => self.focal_p.to_string(),
            "noise_std" => self.noise_std.to_string(),
            "blur_size" => show(&self.blur_size),
            "blur_var" => show(&self.blur_var),
            "hp_size" => show(&self.hp_size),
            "hp_var" => show(&self.hp_var),
            "focal_outer" => self.focal_outer.to_string(),
            "focal_inner" => self.focal_inner.to_string(),
            "queue" => self.queue.to_string(),
            "moco_m" => self.moco_m.to_string(),
            "batch" => self.batch.to_string(),
            "lr" => show(&self.lr),
            "epochs" => self.epochs.to_string(),
            "warmup" => self.warmup.to_string(),
            "wd" => self.wd.to_string(),
            "seed" => self.seed.to_string(),
            "dataset" => self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "loc_net" => self.loc_net.to_string(),
            "loc_epochs" => self.loc_epochs.to_string(),
            "probe_epochs" => self.probe_epochs.to_string(),
            "probe_lr" => self.probe_lr.to_string(),
            "side" => self.side.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "variance_k" => self.variance_k.to_string(),
            _ => unreachable!("{key} is not a config key"),
        }
    }

    /// Parses config text; errors carry the offending line number.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(text, Config::default())
    }

    /// Defaults for ablation cells: a fixed positive ratio of 0.15.
    pub fn ablation_base() -> Self {
        Self { alpha_min: 0.15, alpha_max: 0.15, ..Self::default() }
    }

    /// Like [`Config::parse`], with unset keys taken from `base`.
    pub fn parse_over(text: &str, base: Config) -> Result<Self> {
        let mut cfg = base;
        let mut lines: HashMap<&str, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) =
                line.split_once('=').ok_or_else(|| Error::Config(format!("line {n}: expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            let key = KEYS
                .iter()
                .copied()
                .find(|&known| known == k)
                .ok_or_else(|| Error::Config(format!("line {n}: unknown key `{k}`")))?;
            if let Some(prev) = lines.insert(key, n) {
                return Err(Error::Config(format!("line {n}: `{k}` already set on line {prev}")));
            }
            cfg.set(key, v).map_err(|e| Error::Config(format!("line {n}: {k}: {e}")))?;
        }
        cfg.validate().map_err(|(keys, msg)| match keys.iter().filter_map(|k| lines.get(k)).max() {
            Some(n) => Error::Config(format!("line {n}: {msg}")),
            None => Error::Config(msg),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_over(path, Config::default())
    }

    pub fn load_over(path: &Path, base: Config) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_over(&text, base).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })
    }

    /// Checks ranges; on failure returns the keys involved and a message.
    fn validate(&self) -> std::result::Result<(), (Vec<&'static str>, String)> {
        let unit = |k: &'static str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err((vec![k], format!("{k} = {v} must lie in [0, 1]")))
            }
        };
        let pair = |lo_k: &'static str, lo: f64, hi_k: &'static str, hi: f64| {
            if lo <= hi {
                Ok(())
            } else {
                Err((vec![lo_k, hi_k], format!("{lo_k} ({lo}) must not exceed {hi_k} ({hi})")))
            }
        };
        let positive = |k: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((vec![k], format!("{k} = {v} must be positive")))
            }
        };
        let at_least_one =
            |k: &'static str, v: usize| if v >= 1 { Ok(()) } else { Err((vec![k], format!("{k} must be at least 1"))) };
        for (k, v) in [
            ("alpha_min", self.alpha_min),
            ("alpha_max", self.alpha_max),
            ("beta_min", self.beta_min),
            ("beta_max", self.beta_max),
            ("channelwise_p", self.channelwise_p),
            ("focal_p", self.focal_p),
            ("moco_m", self.moco_m),
        ] {
            unit(k, v)?;
        }
        pair("alpha_min", self.alpha_min, "alpha_max", self.alpha_max)?;
        pair("beta_min", self.beta_min, "beta_max", self.beta_max)?;
        if self.channelwise_p + self.focal_p > 1.0 {
            return Err((vec!["channelwise_p", "focal_p"], "channelwise_p + focal_p must not exceed 1".into()));
        }
        if !(0.0 < self.focal_inner && self.focal_inner < self.focal_outer && self.focal_outer <= 1.0) {
            return Err((
                vec!["focal_inner", "focal_outer"],
                format!("need 0 < focal_inner ({}) < focal_outer ({}) ≤ 1", self.focal_inner, self.focal_outer),
            ));
        }
        positive("tau", self.tau)?;
        if !self.rho.is_finite() {
            return Err((vec!["rho"], "rho must be finite".into()));
        }
        if !(self.saliency_coeff >= 0.0) {
            return Err((vec!["saliency_coeff"], "saliency_coeff must be ≥ 0".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err((vec!["noise_std"], "noise_std must be ≥ 0".into()));
        }
        if !(self.wd >= 0.0) {
            return Err((vec!["wd"], "wd must be ≥ 0".into()));
        }
        positive("probe_lr", self.probe_lr)?;
        if let Some(lr) = self.lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err((vec!["lr"], format!("lr = {lr} must be ≥ 0")));
            }
        }
        for (k, v) in [("blur_size", self.blur_size), ("hp_size", self.hp_size)] {
            if let Some(s) = v {
                if s % 2 == 0 {
                    return Err((vec![k], format!("{k} = {s} must be odd")));
                }
            }
        }
        for (k, v) in [("blur_var", self.blur_var), ("hp_var", self.hp_var)] {
            if let Some(x) = v {
                positive(k, x)?;
            }
        }
        at_least_one("batch", self.batch)?;
        at_least_one("grid", self.grid)?;
        at_least_one("checkpoint_every", self.checkpoint_every)?;
        at_least_one("queue", self.queue)?;
        if self.variance_k < 2 {
            return Err((vec!["variance_k"], "variance_k must be at least 2".into()));
        }
        if self.side == 0 || self.side % self.grid != 0 || !(self.side / self.grid).is_power_of_two() || self.side == self.grid {
            return Err((
                vec!["side", "grid"],
                format!("side ({}) must be the grid ({}) times a power of two ≥ 2", self.side, self.grid),
            ));
        }
        if self.framework == Framework::Moco && self.batch > self.queue {
            return Err((vec!["batch", "queue"], format!("batch ({}) must not exceed queue ({})", self.batch, self.queue)));
        }
        if self.framework == Framework::Simclr && self.batch < 2 {
            return Err((vec!["batch", "framework"], "simclr needs batch ≥ 2".into()));
        }
        Ok(())
    }

    /// Base learning rate, with `auto` resolved per framework.
    pub fn base_lr(&self) -> f64 {
        self.lr.unwrap_or(match self.framework {
            Framework::Moco => 0.015,
            Framework::Simclr => 0.06,
        })
    }

    pub fn strategy_config(&self) -> StrategyConfig {
        let mut s = StrategyConfig::for_side(self.strategy, self.side);
        s.blur_size = self.blur_size.unwrap_or(s.blur_size);
        s.blur_var = self.blur_var.unwrap_or(s.blur_var);
        s.hp_size = self.hp_size.unwrap_or(s.hp_size);
        s.hp_var = self.hp_var.unwrap_or(s.hp_var);
        s.noise_std = self.noise_std;
        s.focal_outer = self.focal_outer;
        s.focal_inner = self.focal_inner;
        s.channelwise_p = self.channelwise_p;
        s.focal_p = self.focal_p;
        s.alpha_range = (self.alpha_min, self.alpha_max);
        s.beta_range = (self.beta_min, self.beta_max);
        s
    }

    pub fn view_config(&self) -> ViewConfig {
        let mut v = ViewConfig::new(self.side, self.strategy, self.branch, self.mask_mode, self.hardneg);
        v.masking = self.strategy_config();
        v
    }

    pub fn loss_params(&self) -> LossParams {
        LossParams { tau: self.tau, rho: self.rho, literal: self.literal_eq2 }
    }

    /// A copy with every `auto` key replaced by its effective value.
    pub fn resolved(&self) -> Self {
        let s = self.strategy_config();
        Self {
            blur_size: Some(s.blur_size),
            blur_var: Some(s.blur_var),
            hp_size: Some(s.hp_size),
            hp_var: Some(s.hp_var),
            lr: Some(self.base_lr()),
            ..self.clone()
        }
    }

    /// Serializes every key, one per line, in [`KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k));
        }
        s
    }

    /// Writes the resolved configuration to `<dir>/resolved.cfg`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved.cfg");
        std::fs::write(&path, self.resolved().to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_default() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
        assert_eq!(Config::parse("# nothing\n\n   \n").unwrap(), Config::default());
    }

    #[test]
    fn values_and_comments() {
        let c = Config::parse("strategy = blur  # fill\nhardneg = off\nlr = 0.1\nblur_size = 7\nframework = simclr\n").unwrap();
        assert_eq!(c.strategy, Strategy::Blur);
        assert!(!c.hardneg);
        assert_eq!(c.lr, Some(0.1));
        assert_eq!(c.strategy_config().blur_size, 7);
        assert_eq!(c.framework, Framework::Simclr);
    }

    #[test]
    fn range_error_names_both_keys_and_line() {
        let e = Config::parse("alpha_min = 0.3\nalpha_max = 0.2\n").unwrap_err().to_string();
        assert!(e.contains("alpha_min") && e.contains("alpha_max") && e.contains("line 2"), "{e}");
    }

    #[test]
    fn unknown_key_and_type_errors_carry_line_numbers() {
        let e = Config::parse("\nfoo = 1\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("foo"), "{e}");
        let e = Config::parse("epochs = many\n").unwrap_err().to_string();
        assert!(e.contains("line 1") && e.contains("epochs"), "{e}");
        let e = Config::parse("seed = 1\nseed = 2\n").unwrap_err().to_string();
        assert!(e.contains("line 2"), "{e}");
        assert!(Config::parse("grid 8\n").is_err());
    }

    #[test]
    fn resolved_round_trip() {
        let c = Config::parse("strategy = highpass\nseed = 42\ndataset = /tmp/x\nloc_net = /tmp/loc\n").unwrap();
        let r = c.resolved();
        assert_eq!(Config::parse(&r.to_text()).unwrap(), r);
        assert_eq!(Config::parse(&c.to_text()).unwrap(), c);
        assert_eq!(r.lr, Some(0.015));
        assert_eq!(r.hp_size, Some(15));
    }

    #[test]
    fn geometry_validation() {
        assert!(Config::parse("grid = 7\n").is_err());
        assert!(Config::parse("grid = 4\n").is_ok());
        assert!(Config::parse("side = 64\ngrid = 8\n").is_ok());
    }
}
