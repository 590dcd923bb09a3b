//! Ordered collections of named f64 parameter leaves.
//!
//! Leaf order is fixed at construction and identical across student/teacher
//! copies, which makes EMA blending, optimizer state, and checkpoint layout
//! deterministic.

use crate::autodiff::{Tape, TensorId};
use crate::error::{Error, Result};
use ndarray::ArrayD;

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    leaves: Vec<(String, ArrayD<f64>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        assert!(
            self.leaves.iter().all(|(n, _)| *n != name),
            "duplicate parameter leaf {name}"
        );
        self.leaves.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<f64>> {
        self.leaves.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<f64>> {
        self.leaves.iter_mut().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.leaves.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.leaves.iter_mut().map(|(n, v)| (n.as_str(), v))
    }

    /// Total scalar parameter count across all leaves.
    pub fn num_params(&self) -> usize {
        self.leaves.iter().map(|(_, v)| v.len()).sum()
    }

    /// Registers every leaf on a tape, preserving order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let ids = self.leaves.iter().map(|(_, v)| tape.leaf(v.clone())).collect();
        BoundParams { ids }
    }

    /// Checks that `other` has the same leaf names and shapes, in order.
    pub fn check_tree_matches(&self, other: &ParamSet) -> Result<()> {
        if self.leaves.len() != other.leaves.len() {
            return Err(Error::Shape(format!(
                "parameter trees differ in leaf count: {} vs {}",
                self.leaves.len(),
                other.leaves.len()
            )));
        }
        for ((na, va), (nb, vb)) in self.leaves.iter().zip(other.leaves.iter()) {
            if na != nb {
                return Err(Error::Shape(format!("parameter leaf name mismatch: {na} vs {nb}")));
            }
            if va.shape() != vb.shape() {
                return Err(Error::Shape(format!(
                    "parameter leaf {na} shape mismatch: {:?} vs {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    /// FNV-1a hash over leaf names and raw f64 bit patterns. Used by tests
    /// asserting that parameters were not mutated.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, v) in &self.leaves {
            eat(name.as_bytes());
            for &x in v.iter() {
                eat(&x.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Tape handles for a bound [`ParamSet`], aligned with its leaf order.
pub struct BoundParams {
    ids: Vec<TensorId>,
}

impl BoundParams {
    pub fn id(&self, set: &ParamSet, name: &str) -> TensorId {
        let idx = set
            .leaves
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter leaf {name}"));
        self.ids[idx]
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}
