//! Pretrain-and-probe runs over a grid of configurations and seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};

use super::probe::{linear_probe, ProbeConfig, ProbeResult};
use super::variance::{embedding_variance, ViewSpec};
use crate::augment::BranchPolicy;
use crate::config::{Config, LocNetSource};
use crate::data::{load_dataset, Dataset, Split};
use crate::error::{Error, Result};
use crate::masking::{Strategy, StrategyConfig};
use crate::numerics::Rng;
use crate::saliency::{train_localization_net, LocTrainConfig, LocalizationNet};
use crate::ssl::{pretrain, PretrainOptions, PretrainOutcome};

pub const REPORT_HEADER: &str = "name,seed,top1,variance,loss_final";
pub const SUMMARY_HEADER: &str = "name,mean_top1,std_top1,cells,failed";

/// Whether any view of `cfg` is masked or a hard negative is drawn.
pub fn needs_localization(cfg: &Config) -> bool {
    cfg.branch != BranchPolicy::None || cfg.hardneg
}

/// The localization network a run of `cfg` uses, if it needs one.
pub fn localization_for(cfg: &Config, train: &Dataset) -> Result<Option<LocalizationNet>> {
    if !needs_localization(cfg) {
        return Ok(None);
    }
    let net = match &cfg.loc_net {
        LocNetSource::Checkpoint(dir) => LocalizationNet::load(dir, cfg.saliency_coeff)?,
        LocNetSource::TrainSupervised => {
            let lc = LocTrainConfig { grid: cfg.grid, epochs: cfg.loc_epochs, ..LocTrainConfig::default() };
            train_localization_net(train, &lc, cfg.saliency_coeff)?
        }
    };
    let g = net.grid_side(cfg.side);
    if g != cfg.grid {
        return Err(Error::Config(format!("localization network gives a {g}×{g} grid, grid = {} requested", cfg.grid)));
    }
    Ok(Some(net))
}

/// Loads `<dataset>/train` and `<dataset>/val` at the configured side.
pub fn load_splits(cfg: &Config) -> Result<(Dataset, Dataset)> {
    let root = cfg.dataset.as_ref().ok_or_else(|| Error::Config("`dataset` is not set".into()))?;
    split_dirs(root, cfg.side)
}

pub fn split_dirs(root: &Path, side: usize) -> Result<(Dataset, Dataset)> {
    let train = load_dataset(&root.join("train"), Some(side), None)?;
    let mut val = load_dataset(&root.join("val"), Some(side), Some(train.class_count))?;
    val.split = Split::Val;
    Ok((train, val))
}

/// Input transform the probe applies for encoders trained on high-passed views.
pub fn probe_domain(cfg: &Config) -> Option<StrategyConfig> {
    (cfg.strategy == Strategy::Highpass).then(|| cfg.strategy_config())
}

pub fn probe(cfg: &Config, enc: &crate::model::Encoder, train: &Dataset, val: &Dataset) -> Result<ProbeResult> {
    linear_probe(enc, train, val, probe_domain(cfg).as_ref(), &ProbeConfig::new(cfg.probe_epochs, cfg.probe_lr, cfg.seed))
}

/// What a cell keeps besides its scores.
#[derive(Debug, Clone, Default)]
pub struct CellOptions {
    /// Each cell writes to `<out_dir>/<name>/seed_<seed>`.
    pub out_dir: Option<PathBuf>,
    pub snapshot_epochs: Vec<usize>,
    /// Validation images used for the variance column.
    pub variance_images: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub name: String,
    pub seed: u64,
    pub top1: f64,
    pub variance: f64,
    pub loss_final: f64,
    pub error: Option<String>,
}

impl Cell {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }

    pub fn csv_row(&self) -> String {
        if self.failed() {
            return format!("{},{},failed,failed,failed", self.name, self.seed);
        }
        format!("{},{},{},{},{}", self.name, self.seed, self.top1, self.variance, self.loss_final)
    }
}

/// Pretrains `cfg`, probes the final encoder and measures its view variance
/// under the query augmentation it was trained with.
pub fn run_cell(
    name: &str,
    cfg: &Config,
    train: &Dataset,
    val: &Dataset,
    loc: Option<&LocalizationNet>,
    opts: &CellOptions,
) -> Result<(Cell, PretrainOutcome)> {
    let out_dir = opts.out_dir.as_ref().map(|d| d.join(name).join(format!("seed_{}", cfg.seed)));
    if let Some(d) = &out_dir {
        cfg.write_resolved(d)?;
    }
    let outcome = pretrain(cfg, train, loc, &PretrainOptions { out_dir, snapshot_epochs: opts.snapshot_epochs.clone() })?;
    let probe = probe(cfg, &outcome.encoder, train, val)?;
    let subset = val.truncated(opts.variance_images.max(1));
    let spec = ViewSpec::Views(cfg.view_config());
    let var = embedding_variance(&outcome.encoder, &subset, cfg.variance_k, &spec, loc, &Rng::new(cfg.seed).fork(3), name)?;
    let cell = Cell {
        name: name.to_string(),
        seed: cfg.seed,
        top1: probe.top1,
        variance: var.variance,
        loss_final: outcome.final_loss(),
        error: None,
    };
    info!("{name} seed {}: top1 {:.4} variance {:.5} loss {:.4}", cfg.seed, cell.top1, cell.variance, cell.loss_final);
    Ok((cell, outcome))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub mean_top1: f64,
    pub std_top1: f64,
    pub cells: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationReport {
    pub cells: Vec<Cell>,
}

impl AblationReport {
    /// One row per (config, seed) in run order.
    pub fn csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for c in &self.cells {
            let _ = writeln!(s, "{}", c.csv_row());
        }
        s
    }

    /// Mean ± sample std of top-1 per name over its successful cells, best first.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut names: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !names.contains(&c.name.as_str()) {
                names.push(&c.name);
            }
        }
        let mut rows: Vec<SummaryRow> = names
            .into_iter()
            .map(|name| {
                let all: Vec<&Cell> = self.cells.iter().filter(|c| c.name == name).collect();
                let ok: Vec<f64> = all.iter().filter(|c| !c.failed()).map(|c| c.top1).collect();
                let (mean, std) = mean_std(&ok);
                SummaryRow {
                    name: name.to_string(),
                    mean_top1: mean,
                    std_top1: std,
                    cells: all.len(),
                    failed: all.len() - ok.len(),
                }
            })
            .collect();
        rows.sort_by(|a, b| {
            b.mean_top1.partial_cmp(&a.mean_top1).unwrap_or_else(|| a.mean_top1.is_nan().cmp(&b.mean_top1.is_nan()))
        });
        rows
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for r in self.summary() {
            let _ = writeln!(s, "{},{},{},{},{}", r.name, r.mean_top1, r.std_top1, r.cells, r.failed);
        }
        s
    }

    pub fn mean_top1(&self, name: &str) -> f64 {
        let v: Vec<f64> = self.cells.iter().filter(|c| c.name == name && !c.failed()).map(|c| c.top1).collect();
        mean_std(&v).0
    }
}

/// Mean and sample standard deviation; `NaN` mean when empty, zero spread for one value.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    (mean, (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

fn loc_key(cfg: &Config) -> (String, usize, u64, usize, usize) {
    (cfg.loc_net.to_string(), cfg.grid, cfg.saliency_coeff.to_bits(), cfg.loc_epochs, cfg.side)
}

/// Runs every (config, seed) cell in order. A cell that errors is recorded
/// as failed and the rest still run. `on_cell` sees each finished cell and,
/// when it succeeded, its pretraining outcome.
pub fn ablation_report(
    configs: &[(String, Config)],
    seeds: &[u64],
    train: &Dataset,
    val: &Dataset,
    opts: &CellOptions,
    mut on_cell: impl FnMut(&Cell, Option<&PretrainOutcome>),
) -> AblationReport {
    let mut locs: Vec<((String, usize, u64, usize, usize), std::result::Result<Option<LocalizationNet>, String>)> = Vec::new();
    let mut report = AblationReport::default();
    for (name, base) in configs {
        for &seed in seeds {
            let cfg = Config { seed, ..base.clone() };
            let key = loc_key(&cfg);
            let loc = if needs_localization(&cfg) {
                let pos = match locs.iter().position(|(k, _)| *k == key) {
                    Some(p) => p,
                    None => {
                        locs.push((key, localization_for(&cfg, train).map_err(|e| e.to_string())));
                        locs.len() - 1
                    }
                };
                locs[pos].1.clone()
            } else {
                Ok(None)
            };
            let result = loc.map_err(Error::State).and_then(|loc| run_cell(name, &cfg, train, val, loc.as_ref(), opts));
            match result {
                Ok((cell, outcome)) => {
                    on_cell(&cell, Some(&outcome));
                    report.cells.push(cell);
                }
                Err(e) => {
                    warn!("{name} seed {seed} failed: {e}");
                    let cell = Cell {
                        name: name.clone(),
                        seed,
                        top1: f64::NAN,
                        variance: f64::NAN,
                        loss_final: f64::NAN,
                        error: Some(e.to_string()),
                    };
                    on_cell(&cell, None);
                    report.cells.push(cell);
                }
            }
        }
    }
    report
}
