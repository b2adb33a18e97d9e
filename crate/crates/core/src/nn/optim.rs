use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW); zero gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adam() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn adamw() -> Self {
        Self { weight_decay: 0.01, ..Self::adam() }
    }
}

/// Adam / AdamW with explicit, serializable moment state.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update for the given gradients. Frozen entries are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of_f64(c.beta1), T::of_f64(c.beta2));
        let (one_b1, one_b2) = (T::of_f64(1.0 - c.beta1), T::of_f64(1.0 - c.beta2));
        let step_size = T::of_f64(lr / bc1);
        let inv_sqrt_bc2 = T::of_f64(1.0 / bc2.sqrt());
        let eps = T::of_f64(c.eps);
        let decay = T::of_f64(1.0 - lr * c.weight_decay);
        for (id, g) in grads {
            if !store.is_trainable(*id) {
                continue;
            }
            if store.get(*id).shape() != g.shape() {
                return Err(Error::Shape(format!("gradient shape {:?} for {}", g.shape(), store.name(*id))));
            }
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let p = store.get_mut(*id);
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                if c.weight_decay != 0.0 {
                    *pv *= decay;
                }
                *pv = *pv - step_size * *mv / ((*vv).sqrt() * inv_sqrt_bc2 + eps);
            }
        }
        Ok(())
    }

    /// Moment arrays keyed `"{param}/m"` and `"{param}/v"`.
    pub fn export(&self, store: &ParamStore<T>) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (id, (m, v)) in &self.moments {
            out.push((format!("{}/m", store.name(*id)), m.clone()));
            out.push((format!("{}/v", store.name(*id)), v.clone()));
        }
        out
    }

    pub fn import(
        config: AdamConfig,
        step: u64,
        store: &ParamStore<T>,
        arrays: &BTreeMap<String, Tensor<T>>,
        prefix: &str,
    ) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for (name, id) in store.names_sorted() {
            let m = arrays.get(&format!("{prefix}{name}/m"));
            let v = arrays.get(&format!("{prefix}{name}/v"));
            match (m, v) {
                (Some(m), Some(v)) => {
                    moments.insert(id, (m.clone(), v.clone()));
                }
                (None, None) => {}
                _ => return Err(Error::Checkpoint(format!("incomplete optimizer state for {name}"))),
            }
        }
        Ok(Self { config, step, moments })
    }
}

/// Cosine decay from `initial` to `floor_factor * initial` over `total_steps` updates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub initial: f64,
    pub total_steps: u64,
    pub floor_factor: f64,
}

impl CosineSchedule {
    pub const DEFAULT_FLOOR: f64 = 0.01;

    pub fn new(initial: f64, total_steps: u64) -> Self {
        Self { initial, total_steps, floor_factor: Self::DEFAULT_FLOOR }
    }

    /// Learning rate for zero-based update index `step`; the last update lands on the floor.
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps <= 1 {
            return self.initial;
        }
        let frac = (step.min(self.total_steps - 1)) as f64 / (self.total_steps - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
        self.initial * (self.floor_factor + (1.0 - self.floor_factor) * cos)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Graph;

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule::new(1e-3, 240);
        assert_eq!(s.lr(0), 1e-3);
        assert!(s.lr(239) <= 1e-2 * 1e-3 + 1e-18);
        assert!(s.lr(120) < s.lr(60));
        assert_eq!(CosineSchedule::new(0.5, 1).lr(0), 0.5);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("x", Tensor::new(&[2], vec![3.0, -2.0]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamConfig::adam());
        for _ in 0..500 {
            let g = Graph::new();
            let x = g.param(&store, p);
            let loss = g.sum(g.square(x));
            let grads = g.backward(loss).unwrap().for_store(&store);
            opt.step(&mut store, &grads, 0.05).unwrap();
        }
        assert!(store.get(p).sq_norm() < 1e-4);
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut store = ParamStore::<f32>::new();
        let p = store.add("x", Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut opt = Adam::new(AdamConfig::adamw());
        let grads = vec![(p, Tensor::new(&[2], vec![0.3, -0.1]).unwrap())];
        opt.step(&mut store, &grads, 0.0).unwrap();
        assert_eq!(store.get(p).data(), &[1.0, 2.0]);
    }
}
