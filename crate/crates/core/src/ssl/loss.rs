//! Contrastive loss with an optional per-anchor hard-negative term.
//!
//! For one anchor with positive logit `s⁺ = q·k⁺/τ`, negative logits
//! `sₙ = q·n/τ` and hard logit `s⁻ = ρ·q·k⁻/τ`,
//!
//! ```text
//! loss = −s⁺ + log( Σₙ exp(sₙ) + [hard]·exp(s⁻) + [conventional]·exp(s⁺) )
//! ```
//!
//! The conventional form keeps the positive in the denominator; the literal
//! form drops it.

use crate::error::{Error, Result};
use crate::model::Real;

/// Hyperparameters of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub tau: f64,
    pub rho: f64,
    /// Drop the positive from the denominator.
    pub literal: bool,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { tau: 0.2, rho: 1.0, literal: false }
    }
}

impl LossParams {
    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {}", self.tau)));
        }
        if !self.rho.is_finite() {
            return Err(Error::invalid(format!("rho must be finite, got {}", self.rho)));
        }
        Ok(())
    }
}

/// Loss of one anchor from its logits, with gradients w.r.t. each logit.
#[derive(Debug, Clone)]
pub struct RowLoss<T> {
    pub loss: T,
    pub d_pos: T,
    pub d_neg: Vec<T>,
    pub d_hard: Option<T>,
}

pub fn row_loss<T: Real>(pos: T, neg: &[T], hard: Option<T>, literal: bool) -> Result<RowLoss<T>> {
    if neg.is_empty() && hard.is_none() && literal {
        return Err(Error::invalid("the denominator has no terms: no negatives, no hard negative, literal form"));
    }
    let mut m = neg.iter().copied().fold(T::neg_infinity(), T::max);
    if let Some(h) = hard {
        m = m.max(h);
    }
    if !literal {
        m = m.max(pos);
    }
    let e_neg: Vec<T> = neg.iter().map(|&s| (s - m).exp()).collect();
    let e_hard = hard.map(|h| (h - m).exp());
    let e_pos = if literal { T::zero() } else { (pos - m).exp() };
    let z = e_neg.iter().copied().sum::<T>() + e_hard.unwrap_or(T::zero()) + e_pos;
    let loss = z.ln() + m - pos;
    Ok(RowLoss {
        loss,
        d_pos: e_pos / z - T::one(),
        d_neg: e_neg.into_iter().map(|e| e / z).collect(),
        d_hard: e_hard.map(|e| e / z),
    })
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

/// Embeddings for a batch that shares one negative set (queue form).
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a, T> {
    pub dim: usize,
    /// `B × dim`.
    pub q: &'a [T],
    /// `B × dim`.
    pub k_pos: &'a [T],
    /// `B × dim` rows, used where `hard_available` is true.
    pub k_hard: Option<&'a [T]>,
    pub hard_available: &'a [bool],
    /// `K × dim`, shared by every anchor.
    pub negatives: &'a [T],
    pub params: LossParams,
}

/// Mean loss and gradients w.r.t. every embedding input.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: T,
    pub d_q: Vec<T>,
    pub d_k_pos: Vec<T>,
    pub d_k_hard: Vec<T>,
    pub d_negatives: Vec<T>,
    /// Mean of `s⁺` over anchors.
    pub pos_logit: f64,
    /// Mean of `s⁻` over anchors with a hard negative (NaN if none).
    pub hard_logit: f64,
    pub hard_count: usize,
}

/// Queue-form objective: every anchor sees the same negatives.
pub fn info_nce_hardneg<T: Real>(batch: &LossBatch<'_, T>) -> Result<LossOutput<T>> {
    batch.params.validate()?;
    let d = batch.dim;
    if d == 0 || batch.q.len() % d != 0 || batch.q.len() != batch.k_pos.len() {
        return Err(Error::Shape(format!("query {} and key {} values for dim {d}", batch.q.len(), batch.k_pos.len())));
    }
    let b = batch.q.len() / d;
    if b == 0 || batch.negatives.len() % d != 0 {
        return Err(Error::Shape("empty batch or ragged negatives".into()));
    }
    let hard = match batch.k_hard {
        Some(h) if h.len() != b * d || batch.hard_available.len() != b => {
            return Err(Error::Shape("hard negatives must have one row and one flag per anchor".into()))
        }
        h => h,
    };
    let k = batch.negatives.len() / d;
    let inv_tau = T::of(1.0 / batch.params.tau);
    let rho = T::of(batch.params.rho);
    let inv_b = T::of(1.0 / b as f64);

    // all anchor-negative logits in one product
    let mut neg_logits = vec![T::zero(); b * k];
    if k > 0 {
        T::gemm(
            b,
            d,
            k,
            inv_tau,
            batch.q,
            d as isize,
            1,
            batch.negatives,
            1,
            d as isize,
            T::zero(),
            &mut neg_logits,
            k as isize,
            1,
        );
    }

    let mut out = LossOutput {
        loss: T::zero(),
        d_q: vec![T::zero(); b * d],
        d_k_pos: vec![T::zero(); b * d],
        d_k_hard: vec![T::zero(); if hard.is_some() { b * d } else { 0 }],
        d_negatives: vec![T::zero(); k * d],
        pos_logit: 0.0,
        hard_logit: 0.0,
        hard_count: 0,
    };
    let mut d_neg_logits = vec![T::zero(); b * k];
    for i in 0..b {
        let qi = &batch.q[i * d..(i + 1) * d];
        let kp = &batch.k_pos[i * d..(i + 1) * d];
        let pos = dot(qi, kp) * inv_tau;
        let hard_row = hard.filter(|_| batch.hard_available[i]).map(|h| &h[i * d..(i + 1) * d]);
        let hard_logit = hard_row.map(|h| rho * dot(qi, h) * inv_tau);
        let r = row_loss(pos, &neg_logits[i * k..(i + 1) * k], hard_logit, batch.params.literal)?;
        out.loss += r.loss * inv_b;
        out.pos_logit += pos.to_f64().unwrap();
        let gp = r.d_pos * inv_b * inv_tau;
        for j in 0..d {
            out.d_q[i * d + j] += gp * kp[j];
            out.d_k_pos[i * d + j] = gp * qi[j];
        }
        if let (Some(h), Some(gh), Some(s)) = (hard_row, r.d_hard, hard_logit) {
            out.hard_logit += s.to_f64().unwrap();
            out.hard_count += 1;
            let g = gh * inv_b * inv_tau * rho;
            for j in 0..d {
                out.d_q[i * d + j] += g * h[j];
                out.d_k_hard[i * d + j] = g * qi[j];
            }
        }
        for (dst, &g) in d_neg_logits[i * k..(i + 1) * k].iter_mut().zip(&r.d_neg) {
            *dst = g * inv_b * inv_tau;
        }
    }
    if k > 0 {
        // d_q += dL · N ; d_N = dLᵀ · Q
        T::gemm(
            b,
            k,
            d,
            T::one(),
            &d_neg_logits,
            k as isize,
            1,
            batch.negatives,
            d as isize,
            1,
            T::one(),
            &mut out.d_q,
            d as isize,
            1,
        );
        T::gemm(
            k,
            b,
            d,
            T::one(),
            &d_neg_logits,
            1,
            k as isize,
            batch.q,
            d as isize,
            1,
            T::zero(),
            &mut out.d_negatives,
            d as isize,
            1,
        );
    }
    out.pos_logit /= b as f64;
    out.hard_logit = if out.hard_count > 0 { out.hard_logit / out.hard_count as f64 } else { f64::NAN };
    Ok(out)
}

/// Gradients of the in-batch objective.
#[derive(Debug, Clone)]
pub struct PairLossOutput<T> {
    pub loss: T,
    pub d_a: Vec<T>,
    pub d_b: Vec<T>,
    pub d_hard: Vec<T>,
    pub pos_logit: f64,
    pub hard_logit: f64,
    pub hard_count: usize,
}

/// In-batch objective over two views `a`, `b` (`B × dim` each). Every one of
/// the `2B` embeddings is an anchor whose positive is its partner view and
/// whose negatives are the other `2B − 2` embeddings; the image's hard
/// negative joins both of its anchors. Averaged over the `2B` anchors.
pub fn nt_xent_hardneg<T: Real>(
    dim: usize,
    a: &[T],
    b: &[T],
    hard: Option<(&[T], &[bool])>,
    params: LossParams,
) -> Result<PairLossOutput<T>> {
    params.validate()?;
    let d = dim;
    if d == 0 || a.len() % d != 0 || a.len() != b.len() {
        return Err(Error::Shape(format!("views with {} and {} values for dim {d}", a.len(), b.len())));
    }
    let n = a.len() / d;
    if n < 2 {
        return Err(Error::invalid(format!("the in-batch objective needs at least 2 images, got {n}")));
    }
    if let Some((h, f)) = hard {
        if h.len() != n * d || f.len() != n {
            return Err(Error::Shape("hard negatives must have one row and one flag per image".into()));
        }
    }
    let m = 2 * n;
    let mut z = Vec::with_capacity(m * d);
    z.extend_from_slice(a);
    z.extend_from_slice(b);
    let inv_tau = T::of(1.0 / params.tau);
    let rho = T::of(params.rho);
    let scale = T::of(1.0 / m as f64);
    let mut sim = vec![T::zero(); m * m];
    T::gemm(m, d, m, inv_tau, &z, d as isize, 1, &z, 1, d as isize, T::zero(), &mut sim, m as isize, 1);

    let mut d_sim = vec![T::zero(); m * m];
    let mut d_z = vec![T::zero(); m * d];
    let mut d_hard = vec![T::zero(); if hard.is_some() { n * d } else { 0 }];
    let (mut loss, mut pos_sum, mut hard_sum, mut hard_count) = (T::zero(), 0.0, 0.0, 0usize);
    let mut neg = Vec::with_capacity(m - 2);
    for r in 0..m {
        let img = r % n;
        let p = if r < n { r + n } else { r - n };
        neg.clear();
        neg.extend((0..m).filter(|&c| c != r && c != p).map(|c| sim[r * m + c]));
        let zr = &z[r * d..(r + 1) * d];
        let hard_row = hard.filter(|(_, f)| f[img]).map(|(h, _)| &h[img * d..(img + 1) * d]);
        let hard_logit = hard_row.map(|h| rho * dot(zr, h) * inv_tau);
        let res = row_loss(sim[r * m + p], &neg, hard_logit, params.literal)?;
        loss += res.loss * scale;
        pos_sum += sim[r * m + p].to_f64().unwrap();
        d_sim[r * m + p] = res.d_pos * scale;
        for (c, g) in (0..m).filter(|&c| c != r && c != p).zip(&res.d_neg) {
            d_sim[r * m + c] = *g * scale;
        }
        if let (Some(h), Some(gh), Some(s)) = (hard_row, res.d_hard, hard_logit) {
            hard_sum += s.to_f64().unwrap();
            hard_count += 1;
            let g = gh * scale * inv_tau * rho;
            for j in 0..d {
                d_z[r * d + j] += g * h[j];
                d_hard[img * d + j] += g * zr[j];
            }
        }
    }
    // sim = Z Zᵀ / τ, so dZ = (dS + dSᵀ) Z / τ
    let mut sym = d_sim.clone();
    for r in 0..m {
        for c in 0..m {
            sym[r * m + c] += d_sim[c * m + r];
        }
    }
    T::gemm(m, m, d, inv_tau, &sym, m as isize, 1, &z, d as isize, 1, T::one(), &mut d_z, d as isize, 1);
    let d_b = d_z.split_off(n * d);
    Ok(PairLossOutput {
        loss,
        d_a: d_z,
        d_b,
        d_hard,
        pos_logit: pos_sum / m as f64,
        hard_logit: if hard_count > 0 { hard_sum / hard_count as f64 } else { f64::NAN },
        hard_count,
    })
}
