use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;

use super::loss::{info_nce_hardneg, nt_xent_hardneg, LossBatch, LossParams};
use super::queue::NegativeQueue;
use crate::augment::{build_views_batch, ViewBundle};
use crate::config::{Config, Framework};
use crate::data::{shuffled_batches, Dataset};
use crate::error::{Error, Result};
use crate::model::{
    batch_of, momentum_update, new_encoder, save_checkpoint, Encoder, LrSchedule, Mode, OutputGrad, Sgd, TrainState,
};
use crate::numerics::{Rng, Tensor};
use crate::saliency::LocalizationNet;

pub const METRICS_HEADER: &str = "epoch,step,loss,lr,pos_logit,hardneg_logit,hardneg_avail_frac";

/// Per-step training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub loss: f64,
    pub lr: f64,
    pub pos_logit: f64,
    /// NaN when no hard negative was available.
    pub hardneg_logit: f64,
    pub hardneg_avail_frac: f64,
}

/// Mean of the step records of one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Global step count at the end of the epoch.
    pub step: usize,
    pub loss: f64,
    /// Learning rate of the last step.
    pub lr: f64,
    pub pos_logit: f64,
    pub hardneg_logit: f64,
    pub hardneg_avail_frac: f64,
}

impl EpochMetrics {
    fn from_steps(epoch: usize, step: usize, steps: &[StepMetrics]) -> Self {
        let n = steps.len().max(1) as f64;
        let hard: Vec<f64> = steps.iter().map(|s| s.hardneg_logit).filter(|v| v.is_finite()).collect();
        Self {
            epoch,
            step,
            loss: steps.iter().map(|s| s.loss).sum::<f64>() / n,
            lr: steps.last().map_or(0.0, |s| s.lr),
            pos_logit: steps.iter().map(|s| s.pos_logit).sum::<f64>() / n,
            hardneg_logit: if hard.is_empty() { f64::NAN } else { hard.iter().sum::<f64>() / hard.len() as f64 },
            hardneg_avail_frac: steps.iter().map(|s| s.hardneg_avail_frac).sum::<f64>() / n,
        }
    }

    pub fn csv_row(&self) -> String {
        let h = if self.hardneg_logit.is_finite() { format!("{:.6}", self.hardneg_logit) } else { "nan".into() };
        format!(
            "{},{},{:.6},{:.8},{:.6},{},{:.6}",
            self.epoch, self.step, self.loss, self.lr, self.pos_logit, h, self.hardneg_avail_frac
        )
    }
}

fn stack(views: &[&Tensor]) -> Result<(Vec<f32>, [usize; 4])> {
    batch_of(views)
}

/// Key encoder and negative queue of the queue-based framework.
#[derive(Debug, Clone)]
pub struct MocoState {
    pub key_encoder: Encoder,
    pub queue: NegativeQueue,
    pub momentum: f64,
}

impl MocoState {
    pub fn new(encoder: &Encoder, queue: usize, momentum: f64) -> Self {
        Self { key_encoder: encoder.clone(), queue: NegativeQueue::new(queue, encoder.arch().out_dim()), momentum }
    }
}

/// One queue-based step: query through `enc`, keys and hard negatives through
/// the key encoder without gradient, SGD, momentum update, enqueue keys.
pub fn train_step_moco(
    enc: &mut Encoder,
    state: &mut MocoState,
    views: &[ViewBundle],
    opt: &mut Sgd,
    params: LossParams,
    lr: f64,
) -> Result<StepMetrics> {
    let b = views.len();
    let d = enc.arch().out_dim();
    let (xq, sq) = stack(&views.iter().map(|v| &v.query).collect::<Vec<_>>())?;
    let (xk, sk) = stack(&views.iter().map(|v| &v.key_pos).collect::<Vec<_>>())?;
    let fq = enc.forward(&xq, sq, Mode::Train)?;
    let fk = state.key_encoder.forward(&xk, sk, Mode::Train)?;
    state.key_encoder.absorb_batch_stats(&fk);

    let avail: Vec<bool> = views.iter().map(|v| v.key_hard_neg.is_some()).collect();
    let hard_views: Vec<&Tensor> = views.iter().filter_map(|v| v.key_hard_neg.as_ref()).collect();
    let k_hard = if hard_views.is_empty() {
        None
    } else {
        let (xh, sh) = stack(&hard_views)?;
        let fh = state.key_encoder.forward(&xh, sh, Mode::Train)?;
        let mut full = vec![0.0f32; b * d];
        let mut rows = fh.output.chunks_exact(d);
        for (i, _) in avail.iter().enumerate().filter(|(_, a)| **a) {
            full[i * d..(i + 1) * d].copy_from_slice(rows.next().unwrap());
        }
        Some(full)
    };
    let negatives = state.queue.view();
    let out = info_nce_hardneg(&LossBatch {
        dim: d,
        q: &fq.output,
        k_pos: &fk.output,
        k_hard: k_hard.as_deref(),
        hard_available: &avail,
        negatives: &negatives,
        params,
    })?;
    let grads = enc.backward(&fq, OutputGrad::Output(&out.d_q))?;
    opt.step(enc, &grads, lr)?;
    enc.absorb_batch_stats(&fq);
    momentum_update(&mut state.key_encoder, enc, state.momentum)?;
    state.queue.push(&fk.output)?;
    Ok(StepMetrics {
        loss: out.loss as f64,
        lr,
        pos_logit: out.pos_logit,
        hardneg_logit: out.hard_logit,
        hardneg_avail_frac: out.hard_count as f64 / b as f64,
    })
}

/// One in-batch step: both views and the available hard negatives go through
/// `enc` in one pass and all receive gradients.
pub fn train_step_simclr(
    enc: &mut Encoder,
    views: &[ViewBundle],
    opt: &mut Sgd,
    params: LossParams,
    lr: f64,
) -> Result<StepMetrics> {
    let b = views.len();
    if b < 2 {
        return Err(Error::invalid(format!("the in-batch framework needs at least 2 images per batch, got {b}")));
    }
    let d = enc.arch().out_dim();
    let avail: Vec<bool> = views.iter().map(|v| v.key_hard_neg.is_some()).collect();
    let mut all: Vec<&Tensor> = views.iter().map(|v| &v.query).collect();
    all.extend(views.iter().map(|v| &v.key_pos));
    all.extend(views.iter().filter_map(|v| v.key_hard_neg.as_ref()));
    let h = all.len() - 2 * b;
    let (x, s) = stack(&all)?;
    let f = enc.forward(&x, s, Mode::Train)?;
    let (za, rest) = f.output.split_at(b * d);
    let (zb, zh) = rest.split_at(b * d);
    let mut hard_full = vec![0.0f32; b * d];
    let mut slot = vec![usize::MAX; b];
    for (k, i) in (0..b).filter(|&i| avail[i]).enumerate() {
        hard_full[i * d..(i + 1) * d].copy_from_slice(&zh[k * d..(k + 1) * d]);
        slot[i] = k;
    }
    let hard = (h > 0).then_some((hard_full.as_slice(), avail.as_slice()));
    let out = nt_xent_hardneg(d, za, zb, hard, params)?;
    let mut g = Vec::with_capacity(f.output.len());
    g.extend_from_slice(&out.d_a);
    g.extend_from_slice(&out.d_b);
    if h > 0 {
        let mut gh = vec![0.0f32; h * d];
        for i in 0..b {
            if avail[i] {
                gh[slot[i] * d..(slot[i] + 1) * d].copy_from_slice(&out.d_hard[i * d..(i + 1) * d]);
            }
        }
        g.extend_from_slice(&gh);
    }
    let grads = enc.backward(&f, OutputGrad::Output(&g))?;
    opt.step(enc, &grads, lr)?;
    enc.absorb_batch_stats(&f);
    Ok(StepMetrics {
        loss: out.loss as f64,
        lr,
        pos_logit: out.pos_logit,
        hardneg_logit: out.hard_logit,
        hardneg_avail_frac: out.hard_count as f64 / (2 * b) as f64,
    })
}

/// Where and what to keep while pretraining.
#[derive(Debug, Clone, Default)]
pub struct PretrainOptions {
    /// Checkpoints (every `checkpoint_every` epochs and at the end) and `metrics.csv` go here.
    pub out_dir: Option<PathBuf>,
    /// Epochs after which an in-memory copy of the encoder is kept.
    pub snapshot_epochs: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub encoder: Encoder,
    pub metrics: Vec<EpochMetrics>,
    pub snapshots: Vec<(usize, Encoder)>,
    /// Views whose saliency grid had no foreground/background split.
    pub fallback_views: usize,
}

impl PretrainOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{METRICS_HEADER}\n");
        for m in &self.metrics {
            let _ = writeln!(s, "{}", m.csv_row());
        }
        s
    }

    pub fn final_loss(&self) -> f64 {
        self.metrics.last().map_or(f64::NAN, |m| m.loss)
    }
}

/// Directory of the checkpoint written after `epoch`.
pub fn epoch_checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join("checkpoints").join(format!("epoch_{epoch:04}"))
}

/// Runs contrastive pretraining on `train` with warmup and cosine decay.
/// Everything random derives from `cfg.seed`.
pub fn pretrain(cfg: &Config, train: &Dataset, loc: Option<&LocalizationNet>, opts: &PretrainOptions) -> Result<PretrainOutcome> {
    if train.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let root = Rng::new(cfg.seed);
    let mut enc = new_encoder(&mut root.fork(1))?;
    let mut opt = Sgd::new(&enc, 0.9, cfg.wd);
    let mut moco = (cfg.framework == Framework::Moco).then(|| MocoState::new(&enc, cfg.queue, cfg.moco_m));
    let view_cfg = cfg.view_config();
    let params = cfg.loss_params();
    let batch = cfg.batch.min(train.len());
    let steps_per_epoch = train.len() / batch;
    let schedule = LrSchedule::new(cfg.base_lr(), steps_per_epoch, cfg.warmup, cfg.epochs);
    let save = |enc: &Encoder, step: usize, epoch: usize, lr: f64, dir: PathBuf| -> Result<()> {
        save_checkpoint(enc, &TrainState { step, epoch, lr, seed: cfg.seed }, &dir)
    };

    let mut metrics = Vec::new();
    let mut snapshots = Vec::new();
    let mut fallback_views = 0;
    let mut step = 0;
    if opts.snapshot_epochs.contains(&0) {
        snapshots.push((0, enc.clone()));
    }
    for epoch in 0..cfg.epochs {
        let mut epoch_rng = root.fork(1000 + epoch as u64);
        let mut records = Vec::with_capacity(steps_per_epoch);
        for idx in shuffled_batches(train.len(), batch, &mut epoch_rng)? {
            let items: Vec<(&Tensor, &str)> =
                idx.iter().map(|&i| (&train.records[i].pixels, train.records[i].id.as_str())).collect();
            let views = build_views_batch(&items, loc, &view_cfg, &root.fork(2).fork(step as u64))?;
            fallback_views += views
                .iter()
                .flat_map(|v| [&v.query_mask, &v.key_mask, &v.hard_neg_mask])
                .filter(|m| m.as_ref().is_some_and(|m| m.fallback()))
                .count();
            let lr = schedule.lr_at(step);
            let rec = match moco.as_mut() {
                Some(state) => train_step_moco(&mut enc, state, &views, &mut opt, params, lr)?,
                None => train_step_simclr(&mut enc, &views, &mut opt, params, lr)?,
            };
            records.push(rec);
            step += 1;
        }
        let m = EpochMetrics::from_steps(epoch, step, &records);
        info!(
            "epoch {epoch}: loss {:.4} lr {:.5} pos {:.3} hard {:.3} avail {:.2}",
            m.loss, m.lr, m.pos_logit, m.hardneg_logit, m.hardneg_avail_frac
        );
        metrics.push(m);
        let done = epoch + 1;
        if opts.snapshot_epochs.contains(&done) {
            snapshots.push((done, enc.clone()));
        }
        if let Some(out) = &opts.out_dir {
            if done % cfg.checkpoint_every == 0 && done != cfg.epochs {
                save(&enc, step, done, m.lr, epoch_checkpoint_dir(out, done))?;
            }
        }
    }
    let outcome = PretrainOutcome { encoder: enc, metrics, snapshots, fallback_views };
    if let Some(out) = &opts.out_dir {
        let lr = outcome.metrics.last().map_or(0.0, |m| m.lr);
        save(&outcome.encoder, step, cfg.epochs, lr, epoch_checkpoint_dir(out, cfg.epochs))?;
        save(&outcome.encoder, step, cfg.epochs, lr, out.join("checkpoint"))?;
        let path = out.join("metrics.csv");
        std::fs::write(&path, outcome.metrics_csv()).map_err(|e| Error::io(&path, e))?;
    }
    if fallback_views > 0 {
        info!("{fallback_views} views fell back to unconstrained patch sampling");
    }
    Ok(outcome)
}
