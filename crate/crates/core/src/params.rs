//! Named parameter storage shared by every layer.
//!
//! Layers hold [`ParamId`]s into a [`ParamStore`]. Each forward pass binds the
//! whole store onto a fresh [`Graph`] and gets back a [`Bound`] view that
//! resolves ids to tape variables.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{AmnError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Put every parameter on the tape, tracked when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| g.leaf(e.tensor.clone(), trainable))
            .collect();
        Bound { vars }
    }

    /// Replace all values from another store with identical layout.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(AmnError::Contract(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(&other.entries) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(AmnError::Contract(format!(
                    "parameter layout mismatch at {}: {:?} vs {} {:?}",
                    mine.name,
                    mine.tensor.shape(),
                    theirs.name,
                    theirs.tensor.shape()
                )));
            }
            mine.tensor = theirs.tensor.clone();
        }
        Ok(())
    }
}

/// Parameters bound to one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Bind `store` as constants, substituting the given parameters with
    /// caller-owned variables (used by gradient checks).
    pub fn with_overrides(store: &ParamStore, overrides: &[(ParamId, Var)], g: &mut Graph) -> Bound {
        let mut bound = store.bind(g, false);
        for (id, v) in overrides {
            bound.vars[id.0] = *v;
        }
        bound
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient for every parameter, zeros where none reached it.
    pub fn grads(&self, g: &Graph, store: &ParamStore) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .zip(store.entries())
            .map(|(v, e)| {
                g.grad(*v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; e.tensor.len()])
            })
            .collect()
    }
}

/// Glorot/Xavier uniform init for a `[fan_out × fan_in]` matrix.
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_out: usize, fan_in: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    let data = (0..fan_out * fan_in).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![fan_out, fan_in], data).expect("consistent shape")
}

/// Normal init truncated to two standard deviations, used for ExU weights.
pub fn truncated_normal(rng: &mut ChaCha8Rng, shape: &[usize], mean: f64, std: f64) -> Tensor {
    let dist = Normal::new(mean, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = dist.sample(rng);
            if (v - mean).abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// Uniform `[-scale, scale]` init.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}
