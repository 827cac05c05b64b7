use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

/// Optimizer settings shared by both training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub initial_lr: f64,
    pub momentum: f64,
    /// Epochs over which the learning rate falls by a factor of ten.
    pub decay_epochs: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            initial_lr: 0.01,
            momentum: 0.98,
            decay_epochs: 100.0,
        }
    }
}

impl OptimConfig {
    /// `lr(e) = lr₀ · 10^(−e / decay_epochs)`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.initial_lr * 10f64.powf(-(epoch as f64) / self.decay_epochs)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.decay_epochs > 0.0) {
            return Err(Error::Config(format!(
                "optimizer needs lr > 0, momentum in [0, 1) and decay_epochs > 0 (got {}, {}, {})",
                self.initial_lr, self.momentum, self.decay_epochs
            )));
        }
        Ok(())
    }
}

/// SGD with momentum: `v ← μv − lr·g`, `θ ← θ + v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.velocity.len() != store.len() {
            return Err(Error::Contract("optimizer state does not match the model".into()));
        }
        for (v, p) in self.velocity.iter_mut().zip(store.iter_mut()) {
            for ((vi, x), g) in v.iter_mut().zip(p.value.iter_mut()).zip(&p.grad) {
                *vi = self.momentum * *vi - lr * g;
                *x += *vi;
            }
        }
        Ok(())
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::Init;

    #[test]
    fn schedule_values() {
        let c = OptimConfig::default();
        assert_eq!(c.learning_rate(0), 0.01);
        assert!((c.learning_rate(100) - 0.001).abs() < 1e-12);
        assert!((c.learning_rate(200) - 0.0001).abs() < 1e-12);
        assert!((c.learning_rate(50) - 0.01 / 10f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn momentum_update_by_hand() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let id = store.add("x", vec![1, 2], Init::Zeros, &mut rng);
        store.get_mut(id).value = vec![1.0, -1.0];
        let mut sgd = Sgd::new(&store, 0.98);
        store.get_mut(id).grad = vec![2.0, 0.5];
        sgd.step(&mut store, 0.1).unwrap();
        assert_eq!(sgd.velocity()[0], vec![-0.2, -0.05]);
        assert_eq!(store.get(id).value, vec![0.8, -1.05]);
        sgd.step(&mut store, 0.1).unwrap();
        let v: Vec<f64> = vec![0.98 * -0.2 - 0.2, 0.98 * -0.05 - 0.05];
        assert_eq!(sgd.velocity()[0], v);
        assert_eq!(store.get(id).value, vec![0.8 + v[0], -1.05 + v[1]]);
    }
}
