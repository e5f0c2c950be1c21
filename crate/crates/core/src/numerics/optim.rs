use serde::{Deserialize, Serialize};

use super::graph::{Gradients, ParamId};
use super::params::ParamStore;
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction.
///
/// Moments are allocated lazily. A parameter that receives no gradient in a
/// step is left untouched, moments included; its bias correction uses its
/// own update count, so skipping steps does not distort later updates.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Option<Vec<F>>>,
    v: Vec<Option<Vec<F>>>,
    steps: Vec<u64>,
    lr_scale: Vec<f64>,
}

impl<F: Float> Adam<F> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
            steps: Vec::new(),
            lr_scale: Vec::new(),
        }
    }

    /// Number of completed steps.
    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn reset(&mut self) {
        let scale = std::mem::take(&mut self.lr_scale);
        *self = Adam::new(self.config);
        self.lr_scale = scale;
    }

    /// Multiplies the learning rate of one parameter.
    pub fn set_lr_scale(&mut self, id: ParamId, scale: f64) {
        if self.lr_scale.len() <= id.0 {
            self.lr_scale.resize(id.0 + 1, 1.0);
        }
        self.lr_scale[id.0] = scale;
    }

    fn ensure(&mut self, n: usize) {
        if self.m.len() < n {
            self.m.resize(n, None);
            self.v.resize(n, None);
            self.steps.resize(n, 0);
        }
    }

    /// Applies one update in place. All gradients are checked for finiteness
    /// before any parameter is touched.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) -> Result<()> {
        for (id, g) in &grads.params {
            if !g.all_finite() {
                return Err(Error::NonFiniteGradient(params.name(*id).to_string()));
            }
            if g.shape() != params.get(*id).shape() {
                return Err(Error::Shape(format!(
                    "adam: gradient {:?} does not match parameter `{}` {:?}",
                    g.shape(),
                    params.name(*id),
                    params.get(*id).shape()
                )));
            }
        }
        self.ensure(params.len());
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (id, g) in &grads.params {
            let i = id.0;
            self.steps[i] += 1;
            let k = self.steps[i] as i32;
            let scale = self.lr_scale.get(i).copied().unwrap_or(1.0);
            let c1 = 1.0 - beta1.powi(k);
            let c2 = 1.0 - beta2.powi(k);
            let step_size = F::from_f64(lr * scale / c1);
            let (b1, b2) = (F::from_f64(beta1), F::from_f64(beta2));
            let (one_b1, one_b2) = (F::from_f64(1.0 - beta1), F::from_f64(1.0 - beta2));
            let inv_c2 = F::from_f64(1.0 / c2);
            let e = F::from_f64(eps);
            let n = g.numel();
            let m = self.m[i].get_or_insert_with(|| vec![F::zero(); n]);
            let v = self.v[i].get_or_insert_with(|| vec![F::zero(); n]);
            let p = params.get_mut(*id).data_mut();
            for (((pj, mj), vj), &gj) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *mj = b1 * *mj + one_b1 * gj;
                *vj = b2 * *vj + one_b2 * gj * gj;
                *pj -= step_size * *mj / ((*vj * inv_c2).sqrt() + e);
            }
        }
        Ok(())
    }

    /// Moment tensors for one parameter, if it has been updated.
    pub fn moments(&self, id: ParamId) -> Option<(Tensor<F>, Tensor<F>)> {
        let m = self.m.get(id.0)?.as_ref()?;
        let v = self.v.get(id.0)?.as_ref()?;
        Some((
            Tensor::new([m.len()], m.clone()).ok()?,
            Tensor::new([v.len()], v.clone()).ok()?,
        ))
    }
}

/// Linear warm-up followed by stepwise exponential decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup: u64,
    pub start_factor: f64,
    /// Iterations per decay step; `0` disables decay.
    pub step_size: u64,
    pub gamma: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base: 1e-4,
            warmup: 2,
            start_factor: 0.5,
            step_size: 1,
            gamma: 0.98,
        }
    }
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            warmup: 0,
            start_factor: 1.0,
            step_size: 0,
            gamma: 1.0,
        }
    }

    /// Rate for a 0-based iteration. Decay counts iterations from the end
    /// of warm-up, so the rate is continuous there.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        if iteration < self.warmup {
            let frac = iteration as f64 / self.warmup as f64;
            return self.base * (self.start_factor + (1.0 - self.start_factor) * frac);
        }
        if self.step_size == 0 {
            return self.base;
        }
        let k = (iteration - self.warmup) / self.step_size;
        self.base * self.gamma.powi(k as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new([vals.len()], vals.to_vec()).unwrap()).unwrap();
        (s, id)
    }

    fn grads(id: ParamId, g: &[f64]) -> Gradients<f64> {
        let mut out = Gradients::empty();
        out.params.insert(id, Tensor::new([g.len()], g.to_vec()).unwrap());
        out
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut s, id) = store(&[1.0, 1.0, 1.0]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s, &grads(id, &[0.3, -2.0, 5e-3]), 0.01).unwrap();
        let want = [0.99, 1.01, 0.99];
        for (p, w) in s.get(id).data().iter().zip(want) {
            assert!((p - w).abs() < 1e-7, "{p} vs {w}");
        }
        assert_eq!(adam.t(), 1);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let (mut s, id) = store(&[0.5, -1.5]);
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            adam.step(&mut s, &grads(id, &[0.0, 0.0]), 0.1).unwrap();
        }
        assert_eq!(s.get(id).data(), &[0.5, -1.5]);
    }

    #[test]
    fn matches_scalar_reference() {
        // Hand-rolled Adam on one scalar with g = 1, lr = 0.1.
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.1f64);
        let (mut x, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
        let mut traj = Vec::new();
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            traj.push(x);
        }
        let (mut s, id) = store(&[2.0]);
        let mut adam = Adam::new(AdamConfig::default());
        for want in traj {
            adam.step(&mut s, &grads(id, &[1.0]), lr).unwrap();
            assert!((s.get(id).data()[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let (mut s, id) = store(&[0.0]);
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut s, &grads(id, &[f64::NAN]), 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(s.get(id).data(), &[0.0]);
    }

    #[test]
    fn params_without_gradient_are_untouched() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a", Tensor::filled([2], 1.0)).unwrap();
        let b = s.add("b", Tensor::filled([2], 1.0)).unwrap();
        let mut g = Gradients::empty();
        g.params.insert(a, Tensor::filled([2], 1.0));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut s, &g, 0.1).unwrap();
        assert_ne!(s.get(a).data(), &[1.0, 1.0]);
        assert_eq!(s.get(b).data(), &[1.0, 1.0]);
        assert!(adam.moments(b).is_none());
    }

    #[test]
    fn warmup_starts_at_start_factor() {
        let s = LrSchedule {
            base: 1e-4,
            warmup: 2,
            start_factor: 0.5,
            step_size: 1,
            gamma: 0.98,
        };
        assert!((s.lr_at(0) - 5e-5).abs() < 1e-18);
        assert!((s.lr_at(1) - 7.5e-5).abs() < 1e-18);
        assert_eq!(s.lr_at(2), 1e-4);
    }

    #[test]
    fn exponential_decay_without_warmup() {
        let s = LrSchedule {
            base: 1e-4,
            warmup: 0,
            start_factor: 1.0,
            step_size: 1,
            gamma: 0.98,
        };
        assert!((s.lr_at(10) - 1e-4 * 0.98f64.powi(10)).abs() < 1e-18);
    }

    #[test]
    fn zero_step_size_is_constant() {
        let s = LrSchedule {
            step_size: 0,
            warmup: 0,
            ..LrSchedule::default()
        };
        assert!((0..100).all(|i| s.lr_at(i) == s.base));
    }
}
