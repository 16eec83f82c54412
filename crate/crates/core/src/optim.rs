//! Adaptive-moment optimizer with decoupled weight decay, cosine learning
//! rate schedule and parameter EMA.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamId, Params, Real};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("parameter layouts differ")]
    LayoutMismatch,
    #[error("decay {0} outside [0, 1]")]
    Decay(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW state for one parameter buffer. Entries whose trainable flag is
/// off are never written.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    cfg: AdamWConfig,
    m: Vec<F>,
    v: Vec<F>,
    step: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(params: &Params<F>, cfg: AdamWConfig) -> Self {
        let n = params.data().len();
        Self { cfg, m: vec![F::zero(); n], v: vec![F::zero(); n], step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut Params<F>, grads: &Params<F>, lr: f64) -> Result<(), OptimError> {
        if params.layout() != grads.layout() || params.data().len() != self.m.len() {
            return Err(OptimError::LayoutMismatch);
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = F::num(1.0 - b1.powi(t));
        let bc2 = F::num(1.0 - b2.powi(t));
        let (b1f, b2f) = (F::num(b1), F::num(b2));
        let (one_b1, one_b2) = (F::num(1.0 - b1), F::num(1.0 - b2));
        let lr_f = F::num(lr);
        let eps = F::num(self.cfg.eps);
        let wd = F::num(self.cfg.weight_decay);
        let layout = params.layout().clone();
        for (i, e) in layout.entries().iter().enumerate() {
            if !params.is_trainable(ParamId(i)) {
                continue;
            }
            let range = e.offset..e.offset + e.len;
            let decay = e.decays() && self.cfg.weight_decay != 0.0;
            let g = &grads.data()[range.clone()];
            let m = &mut self.m[range.clone()];
            let v = &mut self.v[range.clone()];
            let p = &mut params.data_mut()[range];
            for j in 0..p.len() {
                m[j] = b1f * m[j] + one_b1 * g[j];
                v[j] = b2f * v[j] + one_b2 * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut upd = mhat / (vhat.sqrt() + eps);
                if decay {
                    upd += wd * p[j];
                }
                p[j] -= lr_f * upd;
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `peak` to 0 over `total` steps, after an optional
/// linear warmup. Steps past `total` stay at 0.
pub fn cosine_lr(step: usize, total: usize, peak: f64, warmup: usize) -> f64 {
    if step >= total {
        return 0.0;
    }
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup) as f64;
    let t = (step - warmup) as f64;
    0.5 * peak * (1.0 + (std::f64::consts::PI * t / span).cos())
}

/// `ema ← m·ema + (1−m)·θ`, computed as `ema + (1−m)(θ − ema)` so that equal
/// inputs stay bit-identical. `m = 0` copies, `m = 1` is a no-op.
pub fn ema_update<F: Real>(ema: &mut Params<F>, current: &Params<F>, decay: f64) -> Result<(), OptimError> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(OptimError::Decay(decay));
    }
    if ema.layout() != current.layout() {
        return Err(OptimError::LayoutMismatch);
    }
    if decay == 1.0 {
        return Ok(());
    }
    if decay == 0.0 {
        ema.data_mut().copy_from_slice(current.data());
        return Ok(());
    }
    let w = F::num(1.0 - decay);
    for (e, &c) in ema.data_mut().iter_mut().zip(current.data()) {
        *e += w * (c - *e);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::LayoutBuilder;

    fn single(v: f64) -> Params<f64> {
        let mut lb = LayoutBuilder::new();
        lb.weight("x", &[1]);
        let mut p = Params::zeros(lb.finish());
        p.data_mut()[0] = v;
        p
    }

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 100, 5e-4, 0), 5e-4);
        assert!((cosine_lr(50, 100, 5e-4, 0) - 2.5e-4).abs() < 1e-18);
        assert_eq!(cosine_lr(100, 100, 5e-4, 0), 0.0);
        assert_eq!(cosine_lr(150, 100, 5e-4, 0), 0.0);
        assert!((cosine_lr(4, 100, 1.0, 5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ema_closed_form() {
        let mut ema = single(0.0);
        let cur = single(1.0);
        ema_update(&mut ema, &cur, 0.9).unwrap();
        assert!((ema.data()[0] - 0.1).abs() < 1e-15);
        ema_update(&mut ema, &cur, 0.9).unwrap();
        assert!((ema.data()[0] - 0.19).abs() < 1e-15);

        let mut e = single(3.0);
        ema_update(&mut e, &cur, 1.0).unwrap();
        assert_eq!(e.data()[0], 3.0);
        ema_update(&mut e, &cur, 0.0).unwrap();
        assert_eq!(e.data()[0], 1.0);
        assert_eq!(ema_update(&mut e, &cur, 1.5), Err(OptimError::Decay(1.5)));
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = single(1.0);
        let mut g = p.zeros_like();
        g.data_mut()[0] = 0.3;
        let mut opt = AdamW::new(&p, AdamWConfig::default());
        opt.step(&mut p, &g, 0.01).unwrap();
        assert!((p.data()[0] - (1.0 - 0.01 * 0.3 / (0.3 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn frozen_entries_untouched_and_zero_lr_is_exact() {
        let mut lb = LayoutBuilder::new();
        let a = lb.weight("a", &[2, 2]);
        let b = lb.weight("b", &[2]);
        let mut p = Params::<f32>::zeros(lb.finish());
        p.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = i as f32 * 0.37);
        p.set_trainable(b, false);
        let before = p.clone();
        let mut g = p.zeros_like();
        g.fill(1.0);
        let cfg = AdamWConfig { weight_decay: 0.04, ..Default::default() };
        let mut opt = AdamW::new(&p, cfg);
        opt.step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, before);
        opt.step(&mut p, &g, 0.1).unwrap();
        assert!(p.entry_bits_eq(&before, b));
        assert!(!p.entry_bits_eq(&before, a));
    }
}
