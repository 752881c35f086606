//! SGD with momentum, warmup + cosine schedule, and the EMA twin update.

use std::f64::consts::PI;

use super::net::ConvNet;
use super::real::Real;
use crate::error::{Error, Result};

/// Linear ramp 0→base over the warmup, then cosine decay to 0 at the end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(base: f64, steps_per_epoch: usize, warmup_epochs: usize, total_epochs: usize) -> Self {
        Self {
            base,
            warmup_steps: steps_per_epoch * warmup_epochs.min(total_epochs),
            total_steps: steps_per_epoch * total_epochs,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.base * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        self.base * 0.5 * (1.0 + (PI * t).cos())
    }
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub step: usize,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(net: &ConvNet<f32>, momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, step: 0, velocity: net.params().iter().map(|p| vec![0.0; p.data.len()]).collect() }
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    /// `v ← μ·v + g + wd·p; p ← p − lr·v`. Nothing is modified when the update
    /// would produce a non-finite value.
    pub fn step(&mut self, net: &mut ConvNet<f32>, grads: &[Vec<f32>], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::State(format!("{} gradient tensors for {} parameters", grads.len(), self.velocity.len())));
        }
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        let mut new_v = self.velocity.clone();
        for ((v, g), p) in new_v.iter_mut().zip(grads).zip(net.params()) {
            if v.len() != g.len() {
                return Err(Error::State(format!("gradient shape mismatch for {}", p.name)));
            }
            for ((vi, gi), pi) in v.iter_mut().zip(g).zip(&p.data) {
                *vi = mu * *vi + *gi + wd * *pi;
            }
            let finite = v.iter().zip(&p.data).all(|(vi, pi)| (*pi - lr * *vi).is_finite());
            if !finite {
                return Err(Error::Numeric(format!("non-finite update for {}; step aborted", p.name)));
            }
        }
        for (v, p) in new_v.iter().zip(net.params_mut()) {
            for (pi, vi) in p.data.iter_mut().zip(v) {
                *pi -= lr * *vi;
            }
        }
        self.velocity = new_v;
        self.step += 1;
        Ok(())
    }
}

/// `p_twin ← m·p_twin + (1−m)·p_online`, parameters only.
pub fn momentum_update<T: Real>(twin: &mut ConvNet<T>, online: &ConvNet<T>, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("momentum {m} outside [0, 1]")));
    }
    if twin.arch() != online.arch() {
        return Err(Error::State("momentum twin architecture differs from online network".into()));
    }
    let (m, one_m) = (T::of(m), T::of(1.0 - m));
    for (pt, po) in twin.params_mut().iter_mut().zip(online.params()) {
        if pt.shape != po.shape {
            return Err(Error::State(format!("shape mismatch for {}", pt.name)));
        }
        for (a, b) in pt.data.iter_mut().zip(&po.data) {
            *a = m * *a + one_m * *b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Architecture;
    use crate::numerics::Rng;

    fn tiny() -> ConvNet<f32> {
        let arch = Architecture { in_channels: 3, channels: vec![4, 4], head: vec![8, 4], normalize: true };
        ConvNet::new(arch, &mut Rng::new(1)).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule::new(0.1, 10, 2, 20);
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(20) - 0.1).abs() < 1e-15);
        assert_eq!(s.lr_at(200), 0.0);
        assert!(s.lr_at(199) > 0.0);
    }

    #[test]
    fn schedule_steps_are_bounded() {
        let s = LrSchedule::new(0.3, 7, 3, 11);
        let after = (s.total_steps - s.warmup_steps) as f64;
        let bound = 0.3 * PI / (2.0 * after) + 0.3 / s.warmup_steps as f64 + 1e-12;
        for t in 0..s.total_steps {
            assert!((s.lr_at(t + 1) - s.lr_at(t)).abs() <= bound);
        }
        for t in s.warmup_steps..s.total_steps {
            assert!(s.lr_at(t + 1) <= s.lr_at(t));
        }
    }

    #[test]
    fn zero_gradient_zero_decay_is_noop() {
        let mut net = tiny();
        let before = net.clone();
        let mut opt = Sgd::new(&net, 0.9, 0.0);
        let grads: Vec<Vec<f32>> = net.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        opt.step(&mut net, &grads, 0.1).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn single_step_arithmetic() {
        let mut net = tiny();
        let before = net.clone();
        let mut opt = Sgd::new(&net, 0.9, 0.0);
        let grads: Vec<Vec<f32>> = net.params().iter().map(|p| vec![1.0; p.data.len()]).collect();
        opt.step(&mut net, &grads, 0.1).unwrap();
        for (a, b) in net.params().iter().zip(before.params()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!(((y - x) - 0.1).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn non_finite_update_aborts() {
        let mut net = tiny();
        let before = net.clone();
        let mut opt = Sgd::new(&net, 0.9, 0.0);
        let mut grads: Vec<Vec<f32>> = net.params().iter().map(|p| vec![0.0; p.data.len()]).collect();
        grads[2][0] = f32::INFINITY;
        assert!(matches!(opt.step(&mut net, &grads, 0.1), Err(Error::Numeric(_))));
        assert_eq!(net, before);
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn momentum_endpoints() {
        let online = tiny();
        let mut twin = ConvNet::<f32>::new(online.arch().clone(), &mut Rng::new(9)).unwrap();
        let orig = twin.clone();
        momentum_update(&mut twin, &online, 1.0).unwrap();
        assert_eq!(twin, orig);
        momentum_update(&mut twin, &online, 0.0).unwrap();
        assert_eq!(twin.params(), online.params());
        assert!(momentum_update(&mut twin, &online, 1.5).is_err());
    }

    #[test]
    fn momentum_midpoint() {
        let mut online = tiny();
        let mut twin = online.clone();
        online.params_mut().iter_mut().for_each(|p| p.data.iter_mut().for_each(|v| *v = 2.0));
        twin.params_mut().iter_mut().for_each(|p| p.data.iter_mut().for_each(|v| *v = 0.0));
        momentum_update(&mut twin, &online, 0.5).unwrap();
        assert!(twin.params().iter().all(|p| p.data.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn momentum_rejects_other_architectures() {
        let online = tiny();
        let arch = Architecture { in_channels: 3, channels: vec![4], head: vec![4], normalize: true };
        let mut twin = ConvNet::<f32>::new(arch, &mut Rng::new(0)).unwrap();
        assert!(matches!(momentum_update(&mut twin, &online, 0.5), Err(Error::State(_))));
    }
}
