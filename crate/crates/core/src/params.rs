//! Named parameter collections.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{DmsnError, Result};
use crate::tensor::Tensor;

/// A key-ordered map from parameter name to array. Key order is the iteration
/// order everywhere (checkpoints, EMA, checksums), so results never depend on
/// insertion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, t: Tensor) {
        self.entries.insert(key.into(), t);
    }

    pub fn get(&self, key: &str) -> Option<&Tensor> {
        self.entries.get(key)
    }

    pub fn get_mut(&mut self, key: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(key)
    }

    pub fn require(&self, key: &str) -> Result<&Tensor> {
        self.entries
            .get(key)
            .ok_or_else(|| DmsnError::Contract(format!("missing parameter {key}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Checks that `other` has exactly the same keys and shapes.
    pub fn check_compatible(&self, other: &ParamSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(DmsnError::Aggregation(format!(
                "key count differs: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((ka, ta), (kb, tb)) in self.entries.iter().zip(&other.entries) {
            if ka != kb {
                return Err(DmsnError::Aggregation(format!("key mismatch: {ka} vs {kb}")));
            }
            if ta.shape() != tb.shape() {
                return Err(DmsnError::Aggregation(format!(
                    "shape mismatch for {ka}: {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn sq_norm(&self) -> f64 {
        self.entries.values().map(Tensor::sq_norm).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().all(Tensor::is_finite)
    }

    /// Copies with every key prefixed, e.g. `branch0/` + `g2/conv1/w`.
    pub fn prefixed(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (format!("{prefix}{k}"), v.clone()))
                .collect(),
        }
    }

    /// Entries whose key starts with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.entries.extend(other.entries);
    }
}

/// How a parameter set enters a tape: as trainable leaves under a key prefix,
/// or as frozen constants.
#[derive(Debug, Clone, Copy)]
pub enum Binding<'a> {
    Trainable { set: &'a ParamSet, prefix: &'a str },
    Frozen(&'a ParamSet),
}

impl<'a> Binding<'a> {
    pub fn trainable(set: &'a ParamSet, prefix: &'a str) -> Self {
        Binding::Trainable { set, prefix }
    }

    pub fn frozen(set: &'a ParamSet) -> Self {
        Binding::Frozen(set)
    }

    pub fn set(&self) -> &'a ParamSet {
        match self {
            Binding::Trainable { set, .. } | Binding::Frozen(set) => set,
        }
    }

    pub fn bind(&self, tape: &mut Tape, key: &str) -> Var {
        match self {
            Binding::Trainable { set, prefix } => {
                let t = set.get(key).unwrap_or_else(|| panic!("missing parameter {key}"));
                tape.param(&format!("{prefix}{key}"), t)
            }
            Binding::Frozen(set) => {
                let t = set.get(key).unwrap_or_else(|| panic!("missing parameter {key}"));
                tape.constant(t.clone())
            }
        }
    }
}

/// Uniform fan-in initialisation: weights in `±gain·sqrt(3 / fan_in)`, zero bias.
pub fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = gain * (3.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

pub fn add_conv(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    gain: f64,
) {
    set.insert(
        format!("{name}/w"),
        init_uniform(rng, &[cout, cin, k, k], cin * k * k, gain),
    );
    set.insert(format!("{name}/b"), Tensor::zeros(&[cout]));
}

pub fn add_linear(set: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, fin: usize, fout: usize, gain: f64) {
    set.insert(format!("{name}/w"), init_uniform(rng, &[fout, fin], fin, gain));
    set.insert(format!("{name}/b"), Tensor::zeros(&[fout]));
}
