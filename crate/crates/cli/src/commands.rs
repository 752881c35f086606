//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use log::{info, warn};
use salmask::augment::BranchPolicy;
use salmask::config::{Config, LocNetSource};
use salmask::data::synth::generate_splits;
use salmask::data::{load_dataset, ppm, write_dataset, Dataset};
use salmask::eval::{self, ablation_report, embedding_variance, variance_csv, CellOptions, ViewSpec};
use salmask::masking::{
    apply_plan, sample_hard_negative_plan, sample_positive_plan, sample_random_plan, sample_salient_only_plan, MaskPlan,
    Strategy, StrategyConfig,
};
use salmask::model::{load_checkpoint, save_checkpoint, ConvNet, TrainState};
use salmask::numerics::{center_crop_square, resize_bilinear, Rng, Smt1, Tensor};
use salmask::saliency::{loc_architecture, saliency_from_activations, LocalizationNet, SaliencyGrid};
use salmask::ssl::{self, PretrainOptions};
use salmask::{Error, Result};

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// `<dataset>/train` when present, the dataset root otherwise.
fn load_train(cfg: &Config) -> Result<Dataset> {
    let root = cfg.dataset.as_ref().ok_or_else(|| Error::Config("`dataset` is not set".into()))?;
    let dir = if root.join("train").is_dir() { root.join("train") } else { root.clone() };
    load_dataset(&dir, Some(cfg.side), None)
}

/// The config passed with `--config`, or the `resolved.cfg` beside the checkpoint.
fn config_for(checkpoint: &Path, config: Option<&Path>) -> Result<Config> {
    match config {
        Some(p) => Config::load(p),
        None => {
            let p = checkpoint.parent().map(|d| d.join("resolved.cfg")).filter(|p| p.exists());
            let p = p.ok_or_else(|| Error::Config("no --config given and no resolved.cfg beside the checkpoint".into()))?;
            Config::load(&p)
        }
    }
}

fn read_image(path: &Path, side: usize) -> Result<Tensor> {
    let img = ppm::read_ppm(path)?;
    let sq = center_crop_square(&img)?;
    if sq.shape()[0] == side {
        Ok(sq)
    } else {
        resize_bilinear(&sq, side, side)
    }
}

fn image_loc_net(loc_net: Option<&Path>, side: usize, grid: usize, coeff: f64, seed: u64) -> Result<LocalizationNet> {
    let net = match loc_net {
        Some(dir) => LocalizationNet::load(dir, coeff)?,
        None => {
            warn!("no --loc-net given; using an untrained localization network seeded from --seed");
            LocalizationNet::new(ConvNet::new(loc_architecture(side, grid, 10)?, &mut Rng::new(seed).fork(0x10c))?, coeff)?
        }
    };
    let g = net.grid_side(side);
    if g != grid {
        return Err(Error::Config(format!("localization network gives a {g}×{g} grid at side {side}, --grid is {grid}")));
    }
    Ok(net)
}

/// Grid cells scaled up to `patch` pixels, foreground white.
fn grid_image(grid: &SaliencyGrid, patch: usize) -> Result<Tensor> {
    let (rows, cols) = (grid.geometry.rows, grid.geometry.cols);
    let (h, w) = (rows * patch, cols * patch);
    Ok(Tensor::from_fn(&[h, w, 3], |i| {
        let (y, x) = (i / 3 / w, i / 3 % w);
        if grid.is_foreground((y / patch) * cols + x / patch) {
            1.0
        } else {
            0.0
        }
    }))
}

/// Foreground at full brightness, background dimmed, masked patches tinted red.
fn overlay(image: &Tensor, grid: &SaliencyGrid, plan: &MaskPlan) -> Result<Tensor> {
    let (h, w, _) = image.hwc()?;
    let g = &grid.geometry;
    let masked = plan.pixel_mask();
    let src = image.data();
    Ok(Tensor::from_fn(&[h, w, 3], |i| {
        let p = i / 3;
        let (y, x, ch) = (p / w, p % w, i % 3);
        let cell = (y / g.patch_h) * g.cols + x / g.patch_w;
        let v = if grid.is_foreground(cell) { src[i] } else { 0.35 * src[i] };
        if masked[p] {
            0.5 * v + if ch == 0 { 0.5 } else { 0.0 }
        } else {
            v
        }
    }))
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = Config::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.write_resolved(&a.out)?;
    info!("resolved config:\n{}", cfg.resolved().to_text());
    let train = load_train(&cfg)?;
    let loc = eval::localization_for(&cfg, &train)?;
    if let (Some(net), LocNetSource::TrainSupervised) = (&loc, &cfg.loc_net) {
        let state = TrainState { step: 0, epoch: cfg.loc_epochs, lr: 0.0, seed: 0 };
        save_checkpoint(net.net(), &state, &a.out.join("loc_net"))?;
    }
    let outcome =
        ssl::pretrain(&cfg, &train, loc.as_ref(), &PretrainOptions { out_dir: Some(a.out.clone()), ..Default::default() })?;
    println!("final loss {:.6}; checkpoint {}", outcome.final_loss(), a.out.join("checkpoint").display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the `resolved.cfg` beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

pub fn linear_probe(a: ProbeArgs) -> Result<()> {
    let mut cfg = config_for(&a.checkpoint, a.config.as_deref())?;
    cfg.probe_epochs = a.epochs.unwrap_or(cfg.probe_epochs);
    cfg.probe_lr = a.lr.unwrap_or(cfg.probe_lr);
    let (enc, _) = load_checkpoint(&a.checkpoint)?;
    let (train, val) = eval::load_splits(&cfg)?;
    let r = eval::probe(&cfg, &enc, &train, &val)?;
    create_dir(&a.out)?;
    let json = serde_json::json!({
        "top1": r.top1,
        "per_class": r.per_class,
        "epochs": r.epochs,
        "checksum": r.checksum,
    });
    write_file(&a.out.join("probe.json"), format!("{json}\n"))?;
    println!("top1 {:.4}", r.top1);
    Ok(())
}

#[derive(Args, Debug)]
pub struct SaliencyArgs {
    /// Image to localize; ignored when `--activations` is given.
    #[arg(long, required_unless_present = "activations")]
    pub image: Option<PathBuf>,
    /// Precomputed `U×V×D` activation tensor (SMT1).
    #[arg(long)]
    pub activations: Option<PathBuf>,
    #[arg(long)]
    pub loc_net: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub side: usize,
    #[arg(long, default_value_t = 8)]
    pub grid: usize,
    #[arg(long, default_value_t = 0.6)]
    pub coeff: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn saliency(a: SaliencyArgs) -> Result<()> {
    let (grid, patch) = match (&a.activations, &a.image) {
        (Some(path), _) => (saliency_from_activations(path, a.coeff, 1, 1)?, 1),
        (None, Some(image)) => {
            let img = read_image(image, a.side)?;
            let loc = image_loc_net(a.loc_net.as_deref(), a.side, a.grid, a.coeff, a.seed)?;
            let g = loc.compute_saliency(&img)?;
            let p = g.geometry.patch_h;
            (g, p)
        }
        (None, None) => return Err(Error::Config("either --image or --activations is required".into())),
    };
    create_dir(&a.out)?;
    Smt1::from_tensor(&grid.mask).write(&a.out.join("saliency.smt1"))?;
    ppm::write_ppm(&a.out.join("saliency.ppm"), &grid_image(&grid, patch)?)?;
    println!("foreground {} of {} cells (gamma {:.4})", grid.foreground_count(), grid.n(), grid.gamma);
    Ok(())
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum PreviewMode {
    Positive,
    Hardneg,
    Random,
    #[value(alias = "salient_only")]
    SalientOnly,
}

#[derive(Args, Debug)]
pub struct PreviewArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// highpass, blur or meanfill.
    #[arg(long)]
    pub strategy: String,
    #[arg(long, value_enum, default_value_t = PreviewMode::Positive)]
    pub mode: PreviewMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub loc_net: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    pub side: usize,
    #[arg(long, default_value_t = 8)]
    pub grid: usize,
    #[arg(long, default_value_t = 0.6)]
    pub coeff: f64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn mask_preview(a: PreviewArgs) -> Result<()> {
    let strategy: Strategy = a.strategy.parse()?;
    let cfg = StrategyConfig::for_side(strategy, a.side);
    let img = read_image(&a.image, a.side)?;
    let loc = image_loc_net(a.loc_net.as_deref(), a.side, a.grid, a.coeff, a.seed)?;
    let grid = loc.compute_saliency(&img)?;
    let rng = Rng::new(a.seed);
    let r = &mut rng.fork(1);
    let plan = match a.mode {
        PreviewMode::Positive => sample_positive_plan(&grid, r, cfg.alpha_range)?,
        PreviewMode::Hardneg => sample_hard_negative_plan(&grid, r, cfg.beta_range)?,
        PreviewMode::Random => sample_random_plan(&grid, r, cfg.alpha_range)?,
        PreviewMode::SalientOnly => sample_salient_only_plan(&grid, r, cfg.alpha_range)?,
    };
    let masked = apply_plan(&img, &plan, &cfg, &mut rng.fork(2))?;
    let shown = match strategy {
        Strategy::Highpass => masked.map(|v| (v + 0.5).clamp(0.0, 1.0)),
        _ => masked,
    };
    create_dir(&a.out)?;
    ppm::write_ppm(&a.out.join("masked.ppm"), &shown)?;
    ppm::write_ppm(&a.out.join("overlay.ppm"), &overlay(&img, &grid, &plan)?)?;
    write_file(&a.out.join("plan.jsonl"), format!("{}\n", plan.to_json_line()))?;
    println!(
        "{} patches masked ({} foreground, {} background)",
        plan.indices.len(),
        plan.foreground_masked,
        plan.background_masked
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct VarianceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the `resolved.cfg` beside the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Localization network for the masked rows; defaults to `loc_net/` beside the checkpoint.
    #[arg(long)]
    pub loc_net: Option<PathBuf>,
    /// Views per image; defaults to the config's `variance_k`.
    #[arg(long)]
    pub k: Option<usize>,
    /// Validation images measured.
    #[arg(long, default_value_t = 256)]
    pub images: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn variance_report(a: VarianceArgs) -> Result<()> {
    let cfg = config_for(&a.checkpoint, a.config.as_deref())?;
    let (enc, _) = load_checkpoint(&a.checkpoint)?;
    let (train, val) = eval::load_splits(&cfg)?;
    let beside = a.checkpoint.parent().map(|d| d.join("loc_net")).filter(|d| d.is_dir());
    let loc = match a.loc_net.or(beside) {
        Some(dir) => LocalizationNet::load(&dir, cfg.saliency_coeff)?,
        None => {
            eval::localization_for(&Config { hardneg: true, ..cfg.clone() }, &train)?.expect("hard negatives need localization")
        }
    };
    let k = a.k.unwrap_or(cfg.variance_k);
    let subset = val.truncated(a.images);
    let rng = Rng::new(cfg.seed).fork(3);
    let view = |strategy: Strategy, branch: BranchPolicy| {
        ViewSpec::Views(Config { strategy, branch, hardneg: false, ..cfg.clone() }.view_config())
    };
    let mut rows = vec![
        ("identity".to_string(), ViewSpec::Identity),
        ("standard".to_string(), view(Strategy::Meanfill, BranchPolicy::None)),
        ("standard+highpass".to_string(), view(Strategy::Highpass, BranchPolicy::None)),
    ];
    for s in Strategy::ALL {
        rows.push((format!("standard+mask:{s}"), view(s, BranchPolicy::Query)));
    }
    let mut reports = Vec::new();
    for (tag, spec) in &rows {
        let r = embedding_variance(&enc, &subset, k, spec, Some(&loc), &rng, tag)?;
        println!("{tag}: {:.6}", r.variance);
        reports.push(r);
    }
    create_dir(&a.out)?;
    write_file(&a.out.join("variance.csv"), variance_csv(&reports))
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Comma-separated config files; each is named after its file stem.
    #[arg(long, value_delimiter = ',', required = true)]
    pub configs: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Validation images used for the variance column.
    #[arg(long, default_value_t = 256)]
    pub variance_images: usize,
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let mut configs: Vec<(String, Config)> = Vec::new();
    for path in &a.configs {
        let cfg = Config::load_over(path, Config::ablation_base())?;
        let stem = path.file_stem().map_or_else(|| "config".into(), |s| s.to_string_lossy().into_owned());
        let mut name = stem.clone();
        let mut n = 2;
        while configs.iter().any(|(existing, _)| *existing == name) {
            name = format!("{stem}_{n}");
            n += 1;
        }
        configs.push((name, cfg));
    }
    let first = &configs[0].1;
    if configs.iter().any(|(_, c)| c.dataset != first.dataset || c.side != first.side) {
        return Err(Error::Config("all ablation configs must share `dataset` and `side`".into()));
    }
    let (train, val) = eval::load_splits(first)?;
    create_dir(&a.out)?;
    let opts = CellOptions { out_dir: Some(a.out.clone()), snapshot_epochs: Vec::new(), variance_images: a.variance_images };
    let report = ablation_report(&configs, &a.seeds, &train, &val, &opts, |cell, _| match &cell.error {
        None => info!("cell {} seed {}: top1 {:.4}", cell.name, cell.seed, cell.top1),
        Some(e) => warn!("cell {} seed {} failed: {e}", cell.name, cell.seed),
    });
    write_file(&a.out.join("report.csv"), report.csv())?;
    write_file(&a.out.join("summary.csv"), report.summary_csv())?;
    for r in report.summary() {
        println!("{}: {:.4} ± {:.4} ({} cells, {} failed)", r.name, r.mean_top1, r.std_top1, r.cells, r.failed);
    }
    let failed = report.cells.iter().filter(|c| c.failed()).count();
    if failed > 0 {
        return Err(Error::State(format!("{failed} of {} cells failed", report.cells.len())));
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub train: usize,
    #[arg(long, default_value_t = 1000)]
    pub val: usize,
    #[arg(long, default_value_t = 32)]
    pub side: usize,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the first N train images as PPM files under `preview/`.
    #[arg(long, default_value_t = 0)]
    pub ppm: usize,
}

pub fn synth_data(a: SynthArgs) -> Result<()> {
    if a.classes == 0 || a.classes > salmask::data::synth::SHAPES {
        return Err(Error::InvalidArgument(format!("--classes must be in 1..={}", salmask::data::synth::SHAPES)));
    }
    let (train, val) = generate_splits(a.train, a.val, a.side, a.classes, a.seed);
    write_dataset(&train, &a.out.join("train"))?;
    write_dataset(&val, &a.out.join("val"))?;
    if a.ppm > 0 {
        let dir = a.out.join("preview");
        create_dir(&dir)?;
        for r in train.records.iter().take(a.ppm) {
            ppm::write_ppm(&dir.join(format!("{}.ppm", r.id)), &r.pixels)?;
        }
    }
    println!("{} train and {} val images in {}", train.len(), val.len(), a.out.display());
    Ok(())
}
