//! Optimisers and learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

/// Adaptive-moment optimiser with bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            for (((pv, gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Gradient descent with classical momentum.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored metric
/// (higher is better) has not improved for `patience` consecutive epochs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub patience: usize,
    pub factor: f64,
    best: Option<f64>,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(patience: usize, factor: f64) -> Self {
        Self {
            patience,
            factor,
            best: None,
            stale: 0,
        }
    }

    /// Records one epoch's metric. Returns the factor to apply to the
    /// learning rate (1.0 when unchanged) and whether the metric improved.
    pub fn observe(&mut self, metric: f64) -> (f64, bool) {
        match self.best {
            Some(b) if metric <= b => {
                self.stale += 1;
                if self.stale >= self.patience {
                    self.stale = 0;
                    (self.factor, false)
                } else {
                    (1.0, false)
                }
            }
            _ => {
                self.best = Some(metric);
                self.stale = 0;
                (1.0, true)
            }
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

/// `base * (1 - step/total)^power`, clamped at zero past the end.
pub fn poly_decay(base: f64, step: usize, total: usize, power: f64) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).min(1.0);
    base * (1.0 - t).powf(power)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_grad(p: &ParamStore) -> BTreeMap<String, Tensor> {
        // f(x) = (x - 3)^2
        let x = p.get("x").unwrap().item_scalar();
        BTreeMap::from([("x".to_string(), Tensor::scalar(2.0 * (x - 3.0)))])
    }

    #[test]
    fn adam_and_sgd_descend_a_quadratic() {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(0.0));
        let mut adam = Adam::new(0.1, 0.9, 0.99);
        for _ in 0..500 {
            let g = quadratic_grad(&p);
            adam.update(&mut p, &g);
        }
        assert!((p.get("x").unwrap().item_scalar() - 3.0).abs() < 1e-2);

        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(0.0));
        let mut sgd = Sgd::new(0.05, 0.9);
        for _ in 0..500 {
            let g = quadratic_grad(&p);
            sgd.update(&mut p, &g);
        }
        assert!((p.get("x").unwrap().item_scalar() - 3.0).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // With bias correction the very first step is lr * sign(g).
        let mut p = ParamStore::new();
        p.insert("x", Tensor::scalar(1.0));
        let mut adam = Adam::new(3e-4, 0.9, 0.99);
        adam.update(&mut p, &BTreeMap::from([("x".to_string(), Tensor::scalar(5.0))]));
        assert!((p.get("x").unwrap().item_scalar() - (1.0 - 3e-4)).abs() < 1e-10);
    }

    #[test]
    fn plateau_decays_after_patience() {
        let mut s = PlateauSchedule::new(3, 0.1);
        assert_eq!(s.observe(0.5), (1.0, true));
        assert_eq!(s.observe(0.5), (1.0, false));
        assert_eq!(s.observe(0.4), (1.0, false));
        assert_eq!(s.observe(0.5), (0.1, false));
        assert_eq!(s.observe(0.6), (1.0, true));
    }

    #[test]
    fn poly_decay_endpoints() {
        assert_eq!(poly_decay(3e-4, 0, 100, 0.9), 3e-4);
        assert_eq!(poly_decay(3e-4, 100, 100, 0.9), 0.0);
        let mid = poly_decay(1.0, 50, 100, 0.9);
        assert!((mid - 0.5f64.powf(0.9)).abs() < 1e-15);
    }
}
