use std::collections::BTreeMap;

use crate::error::{NumericsError, Result};
use crate::param::ParamStore;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// `θ ← θ − lr·(g + λθ)`
    Sgd,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::AdamW, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

impl OptimizerConfig {
    pub fn sgd() -> Self {
        Self { kind: OptimizerKind::Sgd, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
struct Moments<T: Real> {
    m: Vec<T>,
    v: Vec<T>,
}

/// First-order optimizer over a [`ParamStore`]. Updates run in lexicographic
/// parameter order and zero every gradient afterwards.
#[derive(Debug, Clone)]
pub struct Optimizer<T: Real = f64> {
    config: OptimizerConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        self.step_with(store, |_| lr)
    }

    /// Like [`step`](Self::step) with a learning rate chosen per parameter.
    /// Nothing is modified if any gradient holds a NaN.
    pub fn step_with(&mut self, store: &mut ParamStore<T>, lr_for: impl Fn(&str) -> f64) -> Result<()> {
        if let Some(p) = store.iter().find(|p| p.grad.data().iter().any(|g| g.is_nan())) {
            return Err(NumericsError::NanGradient(p.name.clone()));
        }
        self.step += 1;
        let c = self.config;
        let wd = T::from_f64(c.weight_decay);
        for p in store.iter_mut() {
            let lr = T::from_f64(lr_for(&p.name));
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *w = *w - lr * (g + wd * *w);
                    }
                }
                OptimizerKind::AdamW => {
                    let n = p.value.len();
                    let mom = self
                        .moments
                        .entry(p.name.clone())
                        .or_insert_with(|| Moments { m: vec![T::zero(); n], v: vec![T::zero(); n] });
                    let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
                    let bc1 = T::one() - T::from_f64(c.beta1.powi(self.step as i32));
                    let bc2 = T::one() - T::from_f64(c.beta2.powi(self.step as i32));
                    let eps = T::from_f64(c.eps);
                    let one = T::one();
                    for (((w, &g), m), v) in
                        p.value.data_mut().iter_mut().zip(p.grad.data()).zip(mom.m.iter_mut()).zip(mom.v.iter_mut())
                    {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *w = *w - lr * (mhat / (vhat.sqrt() + eps) + wd * *w);
                    }
                }
            }
            p.grad.fill(T::zero());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(vec![w])).unwrap();
        s.get_mut("w").unwrap().grad = Tensor::vector(vec![g]);
        s
    }

    #[test]
    fn sgd_single_step() {
        let mut s = scalar_store(1.0, 1.0);
        Optimizer::new(OptimizerConfig::sgd()).step(&mut s, 0.1).unwrap();
        assert_eq!(s.value("w").unwrap().data(), &[0.9]);
        assert_eq!(s.get("w").unwrap().grad.data(), &[0.0]);
    }

    #[test]
    fn zero_grad_applies_only_weight_decay() {
        for kind in [OptimizerKind::Sgd, OptimizerKind::AdamW] {
            let cfg = OptimizerConfig { kind, weight_decay: 0.5, ..OptimizerConfig::default() };
            let mut s = scalar_store(2.0, 0.0);
            Optimizer::new(cfg).step(&mut s, 0.1).unwrap();
            assert!((s.value("w").unwrap().item() - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);

            let cfg = OptimizerConfig { kind, ..OptimizerConfig::default() };
            let mut s = scalar_store(2.0, 0.0);
            Optimizer::new(cfg).step(&mut s, 0.1).unwrap();
            assert_eq!(s.value("w").unwrap().item(), 2.0);
        }
    }

    #[test]
    fn adamw_two_steps_match_hand_trace() {
        // Hand simulation with g = 0.5 constant, lr = 0.01, wd = 0.1, w0 = 1.
        let (b1, b2, eps, lr, wd, g) = (0.9f64, 0.999f64, 1e-8, 0.01, 0.1, 0.5);
        let mut w = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            w -= lr * (mhat / (vhat.sqrt() + eps) + wd * w);
        }
        // For constant g the bias-corrected ratio is ~1, so each step moves by
        // ~lr(1 + wd·w): 1 → 0.989 → 0.978011.
        assert!((w - 0.978011).abs() < 1e-6);

        let cfg = OptimizerConfig { weight_decay: wd, ..OptimizerConfig::default() };
        let mut opt = Optimizer::new(cfg);
        let mut s = scalar_store(1.0, g);
        opt.step(&mut s, lr).unwrap();
        s.get_mut("w").unwrap().grad = Tensor::vector(vec![g]);
        opt.step(&mut s, lr).unwrap();
        assert_eq!(s.value("w").unwrap().item(), w);
    }

    #[test]
    fn nan_gradient_aborts_with_name() {
        let mut s = scalar_store(1.0, f64::NAN);
        s.insert("a", Tensor::vector(vec![1.0])).unwrap();
        s.get_mut("a").unwrap().grad = Tensor::vector(vec![1.0]);
        let err = Optimizer::new(OptimizerConfig::sgd()).step(&mut s, 0.1).unwrap_err();
        assert_eq!(err, NumericsError::NanGradient("w".into()));
        // nothing was touched
        assert_eq!(s.value("a").unwrap().item(), 1.0);
    }
}
