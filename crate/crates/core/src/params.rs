//! Named parameter blocks and their binding to a [`Tape`].

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Ordered map from stable block names to dense matrices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    blocks: BTreeMap<String, Mat>,
}

pub type GradMap = BTreeMap<String, Mat>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.blocks.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.blocks
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter block `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Mat> {
        self.blocks
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter block `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.blocks.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Mat> {
        self.blocks.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.blocks.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.blocks.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn size(&self) -> usize {
        self.blocks.values().map(|m| m.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.blocks.values().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// Lazily creates tape leaves for parameter blocks, once per block.
#[derive(Default)]
pub struct Binder {
    vars: BTreeMap<String, Var>,
    frozen: bool,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binder whose blocks are recorded as constants (no gradients).
    pub fn frozen() -> Self {
        Self {
            vars: BTreeMap::new(),
            frozen: true,
        }
    }

    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let value = store.get(name)?.clone();
        let v = if self.frozen {
            tape.constant(value)
        } else {
            tape.leaf(value)
        };
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound block (zeros where the root is independent).
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> GradMap {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v, tape.shape(v))))
            .collect()
    }
}

/// `U(−a, a)` matrix.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, a: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-a..=a))
}

/// Linear-layer weight with fan-in scaled uniform initialization.
pub fn linear_init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Mat {
    uniform(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())
}
