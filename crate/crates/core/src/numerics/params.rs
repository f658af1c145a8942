use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::array::Array;
use super::tape::StatUpdate;
use crate::error::{Error, Result};

/// Momentum used when folding batch statistics into running statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Named parameter store. Trainable arrays receive gradients and optimizer
/// updates; buffers (running statistics) are only touched by
/// [`Params::apply_stat_updates`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Params {
    trainable: BTreeMap<String, Array>,
    buffers: BTreeMap<String, Array>,
}

impl Params {
    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        let name = name.into();
        if self.trainable.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.trainable.insert(name, value);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        let name = name.into();
        if self.trainable.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    /// Weights drawn uniformly from `±1/√fan_in`.
    pub fn init_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Array::from_vec(shape, data)?)
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.trainable.get(name).or_else(|| self.buffers.get(name))
    }

    /// Mutable access to a trainable array. The shape must not change.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.trainable.get_mut(name)
    }

    pub fn trainable(&self) -> &BTreeMap<String, Array> {
        &self.trainable
    }

    pub fn buffers(&self) -> &BTreeMap<String, Array> {
        &self.buffers
    }

    pub fn len(&self) -> usize {
        self.trainable.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.trainable.values().map(Array::len).sum()
    }

    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) -> Result<()> {
        for u in updates {
            for (suffix, batch) in [("running_mean", &u.mean), ("running_var", &u.var)] {
                let key = format!("{}.{suffix}", u.prefix);
                let buf = self
                    .buffers
                    .get_mut(&key)
                    .ok_or_else(|| Error::contract(format!("missing buffer `{key}`")))?;
                if buf.len() != batch.len() {
                    return Err(Error::dim("apply_stat_updates", key));
                }
                for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
            }
        }
        Ok(())
    }
}
