//! Named parameter arrays with a trainable/frozen flag.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::mat::Mat;
use super::tape::{Gradients, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, trainable: bool) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Param {
            shape,
            data,
            trainable,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to values. The shape is fixed.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The 2-D view used on the tape: 1-D arrays become row vectors, higher
    /// ranks fold trailing axes into columns.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => (self.shape[0], self.shape[1..].iter().product()),
        }
    }

    pub fn to_mat(&self) -> Mat {
        let (r, c) = self.matrix_shape();
        Mat::from_vec(r, c, self.data.clone())
    }
}

/// Parameter arrays keyed by name, iterated in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.entries.insert(name.into(), param);
    }

    pub fn insert_mat(&mut self, name: impl Into<String>, value: Mat, trainable: bool) {
        let (r, c) = value.shape();
        let shape = if r == 1 { vec![c] } else { vec![r, c] };
        self.entries.insert(
            name.into(),
            Param {
                shape,
                data: value.into_vec(),
                trainable,
            },
        );
    }

    /// Inserts an array drawn from N(0, std²).
    pub fn insert_normal<R: Rng>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        trainable: bool,
        rng: &mut R,
    ) {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.entries.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                data,
                trainable,
            },
        );
    }

    pub fn insert_const(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) {
        let n: usize = shape.iter().product();
        self.entries.insert(
            name.to_string(),
            Param {
                shape: shape.to_vec(),
                data: vec![value; n],
                trainable,
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param> {
        self.entries.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Param::len).sum()
    }

    pub fn numel_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(Param::len)
            .sum()
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.entries.values_mut() {
            p.trainable = trainable;
        }
    }

    /// Moves every entry of `other` into `self`, replacing duplicates.
    pub fn extend(&mut self, other: ParamStore) {
        self.entries.extend(other.entries);
    }

    /// Entries whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn trainable_only(&self) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(_, v)| v.trainable)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Errors unless both stores have the same names and shapes.
    pub fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape(format!(
                "stores hold {} and {} entries",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((na, pa), (nb, pb)) in self.entries.iter().zip(other.entries.iter()) {
            if na != nb {
                return Err(Error::Shape(format!("entry names differ: {na} vs {nb}")));
            }
            if pa.shape != pb.shape {
                return Err(Error::Shape(format!(
                    "{na}: shape {:?} vs {:?}",
                    pa.shape, pb.shape
                )));
            }
        }
        Ok(())
    }

    /// Places every entry on the tape. Only trainable entries request
    /// gradients, unless `frozen` is set, in which case none do.
    pub fn bind(&self, tape: &mut Tape, frozen: bool) -> Binding {
        let vars = self
            .entries
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.to_mat(), p.trainable && !frozen)))
            .collect();
        Binding { vars }
    }
}

/// Map from parameter names to tape leaves.
#[derive(Debug, Clone, Default)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} is not bound"),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Adds the entries of `other`; names must not collide.
    pub fn merge(&mut self, other: Binding) {
        for (name, v) in other.vars {
            let prev = self.vars.insert(name, v);
            assert!(prev.is_none(), "parameter bound twice");
        }
    }

    /// Collects gradients for every bound trainable entry into `acc`,
    /// adding to what is already there.
    pub fn accumulate(&self, grads: &mut Gradients, acc: &mut Grads, store: &ParamStore) {
        for (name, var) in &self.vars {
            let Some(p) = store.get(name) else { continue };
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.take(*var) {
                acc.add(name, g.data());
            }
        }
    }
}

/// Gradient arrays keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    entries: BTreeMap<String, Vec<f64>>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, g: &[f64]) {
        match self.entries.get_mut(name) {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => {
                self.entries.insert(name.to_string(), g.to_vec());
            }
        }
    }

    pub fn add_scaled(&mut self, other: &Grads, scale: f64) {
        for (name, g) in &other.entries {
            let scaled: Vec<f64> = g.iter().map(|v| v * scale).collect();
            self.add(name, &scaled);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.entries.values_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, g: Vec<f64>) {
        self.entries.insert(name.to_string(), g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn iteration_is_lexicographic() {
        let mut s = ParamStore::new();
        for name in ["b.w", "a.z", "a.b", "c"] {
            s.insert_const(name, &[1], 0.0, true);
        }
        let names: Vec<_> = s.names().cloned().collect();
        assert_eq!(names, ["a.b", "a.z", "b.w", "c"]);
    }

    #[test]
    fn normal_init_is_seeded() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        a.insert_normal("w", &[3, 4], 0.02, true, &mut ChaCha8Rng::seed_from_u64(7));
        b.insert_normal("w", &[3, 4], 0.02, true, &mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let mut a = ParamStore::new();
        a.insert_const("w", &[2, 2], 0.0, true);
        let mut b = ParamStore::new();
        b.insert_const("w", &[4], 0.0, true);
        assert!(a.check_same_layout(&b).is_err());
        b.insert_const("w", &[2, 2], 1.0, false);
        assert!(a.check_same_layout(&b).is_ok());
    }

    #[test]
    fn param_rejects_bad_shape() {
        assert!(Param::new(vec![2, 3], vec![0.0; 5], true).is_err());
    }
}
