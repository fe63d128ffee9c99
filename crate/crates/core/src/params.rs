//! Named parameter trees.
//!
//! Parameters live in a [`BTreeMap`] keyed by a dotted block path such as
//! `den.level0.down0.attn.qkv.w`, so iteration order (and therefore checkpoint
//! layout and optimizer traversal) is fixed. Each parameter is initialized
//! from a generator seeded by `(seed, name)`, which makes initialization
//! independent of construction order.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal(f64),
    /// Normal with standard deviation `1 / sqrt(fan_in)` where fan-in is the row count.
    FanIn,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Arc<Tensor>>,
}

/// FNV-1a, used to derive per-parameter seeds.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

pub fn init_tensor(rows: usize, cols: usize, init: Init, seed: u64, name: &str) -> Tensor {
    let std = match init {
        Init::Zeros => return Tensor::zeros(rows, cols),
        Init::Const(v) => return Tensor::new(rows, cols, vec![v; rows * cols]),
        Init::Normal(s) => s,
        Init::FanIn => 1.0 / (rows as f64).sqrt(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(name));
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut rng)).collect())
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init, seed: u64) {
        let name = name.into();
        let t = init_tensor(rows, cols, init, seed, &name);
        self.map.insert(name, Arc::new(t));
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name).map(Arc::as_ref)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Moves every entry of `other` into `self`, replacing duplicates.
    pub fn merge(&mut self, other: ParamStore) {
        self.map.extend(other.map);
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let map = self.map.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone())).collect();
        ParamStore { map }
    }
}

/// Binds parameters into a graph on first use and remembers the mapping so
/// gradients can be read back by name.
pub struct Binder<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
    trainable: Option<&'a dyn Fn(&str) -> bool>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { graph: Graph::new(), store, bound: BTreeMap::new(), trainable: None }
    }

    /// Only parameters accepted by `pred` become differentiable leaves.
    pub fn with_trainable(store: &'a ParamStore, pred: &'a dyn Fn(&str) -> bool) -> Self {
        Self { graph: Graph::new(), store, bound: BTreeMap::new(), trainable: Some(pred) }
    }

    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let t = self.store.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).clone();
        let v = match self.trainable {
            Some(pred) if !pred(name) => self.graph.constant(t),
            _ => self.graph.leaf(t),
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Backpropagates from `loss` and returns gradients keyed by parameter name.
    pub fn gradients(&self, loss: Var) -> BTreeMap<String, Tensor> {
        let mut grads = self.graph.backward(loss);
        self.bound.iter().filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamStore::new();
        a.init("x.w", 3, 4, Init::FanIn, 7);
        a.init("y.w", 2, 2, Init::Normal(0.1), 7);
        let mut b = ParamStore::new();
        b.init("y.w", 2, 2, Init::Normal(0.1), 7);
        b.init("x.w", 3, 4, Init::FanIn, 7);
        assert_eq!(a, b);
        let mut c = ParamStore::new();
        c.init("x.w", 3, 4, Init::FanIn, 8);
        assert_ne!(a.get("x.w"), c.get("x.w"));
    }

    #[test]
    fn binder_respects_trainable_set() {
        let mut s = ParamStore::new();
        s.init("a", 1, 2, Init::Const(1.0), 0);
        s.init("b", 1, 2, Init::Const(2.0), 0);
        let only_a = |n: &str| n == "a";
        let mut bind = Binder::with_trainable(&s, &only_a);
        let a = bind.param("a");
        let b = bind.param("b");
        let y = bind.graph.mul(a, b);
        let loss = bind.graph.mse(y, vec![0.0, 0.0]);
        let g = bind.gradients(loss);
        assert!(g.contains_key("a"));
        assert!(!g.contains_key("b"));
        // d/da mean((a b)^2) = a b^2 = 4
        assert_eq!(g["a"].data, vec![4.0, 4.0]);
    }
}
