use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::Tape;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Owns every learnable array of a model. Gradients accumulate across
/// tapes until [`ParamStore::zero_grad`] is called.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Kaiming-uniform: `U(-√(6/fan_in), √(6/fan_in))`.
    KaimingUniform { fan_in: usize },
    Uniform(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init, rng: &mut R) -> ParamId {
        let n: usize = shape.iter().product();
        let value = match init {
            Init::Zeros => vec![0.0; n],
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            Init::Uniform(b) => (0..n).map(|_| rng.gen_range(-b..b)).collect(),
        };
        self.params.push(Param {
            name: name.into(),
            shape,
            grad: vec![0.0; n],
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds the gradients of every parameter leaf on `tape` into the store.
    pub fn accumulate(&mut self, tape: &Tape) {
        for (id, g) in tape.param_grads() {
            for (acc, x) in self.params[id.0].grad.iter_mut().zip(g) {
                *acc += x;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.iter().all(|g| g.is_finite()))
    }
}
