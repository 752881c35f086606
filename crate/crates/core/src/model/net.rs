//! Convolutional network with hand-written reverse mode.
//!
//! Layout is NHWC throughout. Each block is a 3×3 stride-2 convolution
//! (padding 1, no bias) followed by per-channel batch normalization and ReLU.
//! After the last block the feature map is average pooled and passed through
//! a stack of affine layers (ReLU between them, none after the last one),
//! optionally followed by L2 normalization.

use super::real::{matmul, matmul_at, matmul_bt, Real};
use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    /// Output width of each affine layer of the head.
    pub head: Vec<usize>,
    pub normalize: bool,
}

impl Architecture {
    /// 4 blocks 32→64→128→256, projection head 256→256→128, unit-norm output.
    pub fn encoder() -> Self {
        Self { in_channels: 3, channels: vec![32, 64, 128, 256], head: vec![256, 128], normalize: true }
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&self.in_channels)
    }

    pub fn out_dim(&self) -> usize {
        *self.head.last().unwrap_or(&self.feature_dim())
    }

    /// Spatial side after `depth` blocks for an input of side `side`.
    pub fn side_after(side: usize, depth: usize) -> usize {
        (0..depth).fold(side, |s, _| (s - 1) / 2 + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels.is_empty() || self.channels.contains(&0) || self.head.contains(&0) {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Param<T> {
    fn new(name: String, shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { name, shape, data }
    }
}

/// Parameters (trainable) and buffers (batch-norm running statistics).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet<T> {
    arch: Architecture,
    params: Vec<Param<T>>,
    buffers: Vec<Param<T>>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    h: usize,
    w: usize,
    cin: usize,
    ho: usize,
    wo: usize,
    cout: usize,
    cols: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    out: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
}

#[derive(Debug, Clone)]
struct HeadCache<T> {
    input: Vec<T>,
    out: Vec<T>,
    fan_in: usize,
    fan_out: usize,
    relu: bool,
}

/// Result of a forward pass together with everything `backward` needs.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub batch: usize,
    pub mode: Mode,
    /// Head output before normalization, `batch × out_dim`.
    pub raw: Vec<T>,
    /// Network output: `raw` L2-normalized per row when the architecture normalizes.
    pub output: Vec<T>,
    /// Pooled backbone features, `batch × feature_dim`.
    pub pooled: Vec<T>,
    norms: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    heads: Vec<HeadCache<T>>,
}

impl<T: Real> Forward<T> {
    /// ReLU on/off pattern of every unit, used to detect kinks in finite differences.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut p: Vec<bool> = Vec::new();
        for b in &self.blocks {
            p.extend(b.out.iter().map(|v| *v > T::zero()));
        }
        for h in self.heads.iter().filter(|h| h.relu) {
            p.extend(h.out.iter().map(|v| *v > T::zero()));
        }
        p
    }
}

/// Which tensor the incoming gradient refers to.
#[derive(Debug, Clone, Copy)]
pub enum OutputGrad<'a, T> {
    /// Gradient w.r.t. `Forward::output`.
    Output(&'a [T]),
    /// Gradient w.r.t. `Forward::raw` (skips the normalization).
    Raw(&'a [T]),
}

fn im2col<T: Real>(x: &[T], b: usize, h: usize, w: usize, c: usize, ho: usize, wo: usize) -> Vec<T> {
    let kc = 9 * c;
    let mut cols = vec![T::zero(); b * ho * wo * kc];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * kc;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let dst = row + (ky * 3 + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], b: usize, h: usize, w: usize, c: usize, ho: usize, wo: usize) -> Vec<T> {
    let kc = 9 * c;
    let mut x = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * kc;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((bi * h + iy as usize) * w + ix as usize) * c;
                        let src = row + (ky * 3 + kx) * c;
                        for ch in 0..c {
                            x[dst + ch] += cols[src + ch];
                        }
                    }
                }
            }
        }
    }
    x
}

impl<T: Real> ConvNet<T> {
    pub fn new(arch: Architecture, rng: &mut Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut cin = arch.in_channels;
        for (i, &cout) in arch.channels.iter().enumerate() {
            let fan_in = 9 * cin;
            let std = (2.0 / fan_in as f64).sqrt();
            let w = (0..fan_in * cout).map(|_| T::of(rng.normal() as f64 * std)).collect();
            params.push(Param::new(format!("block{i}.conv.weight"), vec![fan_in, cout], w));
            params.push(Param::new(format!("block{i}.bn.gamma"), vec![cout], vec![T::one(); cout]));
            params.push(Param::new(format!("block{i}.bn.beta"), vec![cout], vec![T::zero(); cout]));
            buffers.push(Param::new(format!("block{i}.bn.running_mean"), vec![cout], vec![T::zero(); cout]));
            buffers.push(Param::new(format!("block{i}.bn.running_var"), vec![cout], vec![T::one(); cout]));
            cin = cout;
        }
        let mut fan_in = cin;
        for (j, &fan_out) in arch.head.iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut draw = || T::of(rng.uniform(-1.0, 1.0) as f64 * bound);
            let w = (0..fan_in * fan_out).map(|_| draw()).collect();
            let b = (0..fan_out).map(|_| draw()).collect();
            params.push(Param::new(format!("head{j}.weight"), vec![fan_in, fan_out], w));
            params.push(Param::new(format!("head{j}.bias"), vec![fan_out], b));
            fan_in = fan_out;
        }
        Ok(Self { arch, params, buffers })
    }

    /// Reassembles a network from named tensors (checkpoint loading).
    pub fn from_parts(arch: Architecture, params: Vec<Param<T>>, buffers: Vec<Param<T>>) -> Result<Self> {
        let template = ConvNet::<T>::new(arch.clone(), &mut Rng::new(0))?;
        let check = |have: &[Param<T>], want: &[Param<T>]| -> Result<()> {
            if have.len() != want.len() {
                return Err(Error::State(format!("expected {} tensors, found {}", want.len(), have.len())));
            }
            for (a, b) in have.iter().zip(want) {
                if a.name != b.name || a.shape != b.shape {
                    return Err(Error::State(format!(
                        "tensor {} {:?} does not match expected {} {:?}",
                        a.name, a.shape, b.name, b.shape
                    )));
                }
            }
            Ok(())
        };
        check(&params, &template.params)?;
        check(&buffers, &template.buffers)?;
        Ok(Self { arch, params, buffers })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Param<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Param<T>] {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ConvNet<U> {
        let conv = |ps: &[Param<T>]| {
            ps.iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::of(v.to_f64().unwrap())).collect(),
                })
                .collect()
        };
        ConvNet { arch: self.arch.clone(), params: conv(&self.params), buffers: conv(&self.buffers) }
    }

    fn check_input(&self, x: &[T], shape: [usize; 4]) -> Result<()> {
        let [b, h, w, c] = shape;
        if c != self.arch.in_channels || b * h * w * c != x.len() || b == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {:?} with {} values does not fit a {}-channel network",
                shape,
                x.len(),
                self.arch.in_channels
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite network input".into()));
        }
        Ok(())
    }

    fn block_forward(&self, i: usize, x: &[T], b: usize, h: usize, w: usize, cin: usize, mode: Mode) -> BlockCache<T> {
        let cout = self.arch.channels[i];
        let (ho, wo) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
        let cols = im2col(x, b, h, w, cin, ho, wo);
        let m = b * ho * wo;
        let weight = &self.params[3 * i].data;
        let gamma = &self.params[3 * i + 1].data;
        let beta = &self.params[3 * i + 2].data;
        let mut pre = vec![T::zero(); m * cout];
        matmul(m, 9 * cin, cout, &cols, weight, &mut pre, false);

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); cout];
                let mut sq = vec![T::zero(); cout];
                for row in pre.chunks_exact(cout) {
                    for c in 0..cout {
                        mean[c] += row[c];
                    }
                }
                let inv_m = T::one() / T::of(m as f64);
                mean.iter_mut().for_each(|v| *v *= inv_m);
                for row in pre.chunks_exact(cout) {
                    for c in 0..cout {
                        let d = row[c] - mean[c];
                        sq[c] += d * d;
                    }
                }
                sq.iter_mut().for_each(|v| *v *= inv_m);
                (mean, sq)
            }
            Mode::Eval => (self.buffers[2 * i].data.clone(), self.buffers[2 * i + 1].data.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(BN_EPS)).sqrt()).collect();
        let mut xhat = pre;
        let mut out = vec![T::zero(); m * cout];
        for (xr, or) in xhat.chunks_exact_mut(cout).zip(out.chunks_exact_mut(cout)) {
            for c in 0..cout {
                let n = (xr[c] - mean[c]) * inv_std[c];
                xr[c] = n;
                let y = gamma[c] * n + beta[c];
                or[c] = if y > T::zero() { y } else { T::zero() };
            }
        }
        BlockCache { h, w, cin, ho, wo, cout, cols, xhat, inv_std, out, batch_mean: mean, batch_var: var }
    }

    /// Runs the first `depth` blocks in eval mode; returns the map and its `[b, h, w, c]` shape.
    pub fn feature_map(&self, x: &[T], shape: [usize; 4], depth: usize) -> Result<(Vec<T>, [usize; 4])> {
        self.check_input(x, shape)?;
        if depth == 0 || depth > self.arch.channels.len() {
            return Err(Error::invalid(format!("feature depth {depth} outside 1..={}", self.arch.channels.len())));
        }
        let [b, mut h, mut w, mut c] = shape;
        let mut cur = x.to_vec();
        for i in 0..depth {
            let bc = self.block_forward(i, &cur, b, h, w, c, Mode::Eval);
            (h, w, c) = (bc.ho, bc.wo, bc.cout);
            cur = bc.out;
        }
        Ok((cur, [b, h, w, c]))
    }

    /// Global-average-pooled backbone features in eval mode, `b × feature_dim`.
    pub fn pooled_features(&self, x: &[T], shape: [usize; 4]) -> Result<Vec<T>> {
        let depth = self.arch.channels.len();
        let (map, [b, h, w, c]) = self.feature_map(x, shape, depth)?;
        Ok(pool(&map, b, h * w, c))
    }

    pub fn forward(&self, x: &[T], shape: [usize; 4], mode: Mode) -> Result<Forward<T>> {
        self.check_input(x, shape)?;
        let [b, mut h, mut w, mut c] = shape;
        let mut blocks = Vec::with_capacity(self.arch.channels.len());
        for i in 0..self.arch.channels.len() {
            let bc = {
                let input = blocks.last().map(|p: &BlockCache<T>| &p.out[..]).unwrap_or(x);
                self.block_forward(i, input, b, h, w, c, mode)
            };
            (h, w, c) = (bc.ho, bc.wo, bc.cout);
            blocks.push(bc);
        }
        let pooled = pool(&blocks.last().unwrap().out, b, h * w, c);

        let nb = self.arch.channels.len();
        let mut heads: Vec<HeadCache<T>> = Vec::with_capacity(self.arch.head.len());
        let mut fan_in = c;
        for (j, &fan_out) in self.arch.head.iter().enumerate() {
            let input = heads.last().map(|p| p.out.clone()).unwrap_or_else(|| pooled.clone());
            let weight = &self.params[3 * nb + 2 * j].data;
            let bias = &self.params[3 * nb + 2 * j + 1].data;
            let mut out = vec![T::zero(); b * fan_out];
            for row in out.chunks_exact_mut(fan_out) {
                row.copy_from_slice(bias);
            }
            matmul(b, fan_in, fan_out, &input, weight, &mut out, true);
            let relu = j + 1 < self.arch.head.len();
            if relu {
                out.iter_mut().for_each(|v| {
                    if *v < T::zero() {
                        *v = T::zero()
                    }
                });
            }
            heads.push(HeadCache { input, out, fan_in, fan_out, relu });
            fan_in = fan_out;
        }
        let raw = heads.last().map(|h| h.out.clone()).unwrap_or_else(|| pooled.clone());
        let d = fan_in;
        let (output, norms) = if self.arch.normalize {
            let mut output = raw.clone();
            let mut norms = Vec::with_capacity(b);
            for row in output.chunks_exact_mut(d) {
                let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt().max(T::of(NORM_EPS));
                row.iter_mut().for_each(|v| *v = *v / n);
                norms.push(n);
            }
            (output, norms)
        } else {
            (raw.clone(), Vec::new())
        };
        Ok(Forward { batch: b, mode, raw, output, pooled, norms, blocks, heads })
    }

    /// Folds the batch statistics of a training-mode forward into the running averages.
    pub fn absorb_batch_stats(&mut self, fwd: &Forward<T>) {
        if fwd.mode != Mode::Train {
            return;
        }
        let mom = T::of(BN_MOMENTUM);
        for (i, bc) in fwd.blocks.iter().enumerate() {
            for (r, &v) in self.buffers[2 * i].data.iter_mut().zip(&bc.batch_mean) {
                *r = mom * *r + (T::one() - mom) * v;
            }
            for (r, &v) in self.buffers[2 * i + 1].data.iter_mut().zip(&bc.batch_var) {
                *r = mom * *r + (T::one() - mom) * v;
            }
        }
    }

    /// Reverse pass. Returns gradients aligned with [`ConvNet::params`].
    pub fn backward(&self, fwd: &Forward<T>, grad: OutputGrad<'_, T>) -> Result<Vec<Vec<T>>> {
        let b = fwd.batch;
        let d = self.arch.out_dim();
        let mut grads: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::zero(); p.data.len()]).collect();

        let mut g = match grad {
            OutputGrad::Raw(g) => {
                check_len(g.len(), b * d)?;
                g.to_vec()
            }
            OutputGrad::Output(g) => {
                check_len(g.len(), b * d)?;
                if self.arch.normalize {
                    normalize_backward(&fwd.output, &fwd.norms, g, d)
                } else {
                    g.to_vec()
                }
            }
        };
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite output gradient".into()));
        }

        let nb = self.arch.channels.len();
        for (j, hc) in fwd.heads.iter().enumerate().rev() {
            if hc.relu {
                for (gv, ov) in g.iter_mut().zip(&hc.out) {
                    if *ov <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            let (wi, bi) = (3 * nb + 2 * j, 3 * nb + 2 * j + 1);
            matmul_at(hc.fan_in, b, hc.fan_out, &hc.input, &g, &mut grads[wi], false);
            for row in g.chunks_exact(hc.fan_out) {
                for (acc, v) in grads[bi].iter_mut().zip(row) {
                    *acc += *v;
                }
            }
            let mut gin = vec![T::zero(); b * hc.fan_in];
            matmul_bt(b, hc.fan_out, hc.fan_in, &g, &self.params[wi].data, &mut gin, false);
            g = gin;
        }

        // g is now d(pooled), b × c.
        let last = fwd.blocks.last().unwrap();
        let s = last.ho * last.wo;
        let c = last.cout;
        let inv_s = T::one() / T::of(s as f64);
        let mut gmap = vec![T::zero(); b * s * c];
        for bi in 0..b {
            for si in 0..s {
                for ch in 0..c {
                    gmap[(bi * s + si) * c + ch] = g[bi * c + ch] * inv_s;
                }
            }
        }

        for (i, bc) in fwd.blocks.iter().enumerate().rev() {
            let cout = bc.cout;
            let m = gmap.len() / cout;
            let gamma = &self.params[3 * i + 1].data;
            // through ReLU
            for (gv, ov) in gmap.iter_mut().zip(&bc.out) {
                if *ov <= T::zero() {
                    *gv = T::zero();
                }
            }
            let mut dgamma = vec![T::zero(); cout];
            let mut dbeta = vec![T::zero(); cout];
            for (gr, xr) in gmap.chunks_exact(cout).zip(bc.xhat.chunks_exact(cout)) {
                for ch in 0..cout {
                    dgamma[ch] += gr[ch] * xr[ch];
                    dbeta[ch] += gr[ch];
                }
            }
            let mut dpre = gmap;
            match fwd.mode {
                Mode::Train => {
                    let mf = T::of(m as f64);
                    for (gr, xr) in dpre.chunks_exact_mut(cout).zip(bc.xhat.chunks_exact(cout)) {
                        for ch in 0..cout {
                            // dxhat = dy·γ; Σdxhat = γ·dβ; Σ dxhat·xhat = γ·dγ
                            let dxhat = gr[ch] * gamma[ch];
                            gr[ch] = bc.inv_std[ch] / mf * (mf * dxhat - gamma[ch] * dbeta[ch] - xr[ch] * gamma[ch] * dgamma[ch]);
                        }
                    }
                }
                Mode::Eval => {
                    for gr in dpre.chunks_exact_mut(cout) {
                        for ch in 0..cout {
                            gr[ch] = gr[ch] * gamma[ch] * bc.inv_std[ch];
                        }
                    }
                }
            }
            grads[3 * i + 1] = dgamma;
            grads[3 * i + 2] = dbeta;
            let kc = 9 * bc.cin;
            matmul_at(kc, m, cout, &bc.cols, &dpre, &mut grads[3 * i], false);
            if i > 0 {
                let mut dcols = vec![T::zero(); m * kc];
                matmul_bt(m, cout, kc, &dpre, &self.params[3 * i].data, &mut dcols, false);
                gmap = col2im(&dcols, b, bc.h, bc.w, bc.cin, bc.ho, bc.wo);
            } else {
                gmap = Vec::new();
            }
        }
        Ok(grads)
    }
}

fn check_len(have: usize, want: usize) -> Result<()> {
    if have != want {
        return Err(Error::Shape(format!("output gradient has {have} values, expected {want}")));
    }
    Ok(())
}

fn pool<T: Real>(map: &[T], b: usize, s: usize, c: usize) -> Vec<T> {
    let inv = T::one() / T::of(s as f64);
    let mut out = vec![T::zero(); b * c];
    for bi in 0..b {
        for si in 0..s {
            let row = &map[(bi * s + si) * c..(bi * s + si + 1) * c];
            for ch in 0..c {
                out[bi * c + ch] += row[ch];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// d/dx of x/‖x‖ applied to `g`: (g − y·(y·g)) / ‖x‖, row-wise.
pub fn normalize_backward<T: Real>(y: &[T], norms: &[T], g: &[T], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); g.len()];
    for (((yr, gr), or), &n) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(out.chunks_exact_mut(d)).zip(norms) {
        let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
        for k in 0..d {
            or[k] = (gr[k] - yr[k] * dot) / n;
        }
    }
    out
}
