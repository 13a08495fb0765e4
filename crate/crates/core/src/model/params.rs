//! Named parameter registry and graph mounting.

use crate::tensor::{Graph, Scalar, Tid};
use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct ParamTensor<F: Scalar> {
    pub value: ArrayD<F>,
    /// Running statistics and similar state are stored here but skipped by
    /// the optimizer.
    pub trainable: bool,
}

/// Insertion-ordered set of named tensors; the order is the serialization
/// and optimizer-state order.
#[derive(Clone, Debug, Default)]
pub struct Params<F: Scalar> {
    entries: IndexMap<String, ParamTensor<F>>,
}

impl<F: Scalar> Params<F> {
    pub fn new() -> Self {
        Params { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<F>, trainable: bool) {
        let prev = self.entries.insert(name.to_string(), ParamTensor { value, trainable });
        assert!(prev.is_none(), "duplicate parameter `{name}`");
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        &self.entries.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`")).value
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<F> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamTensor<F>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamTensor<F>)> {
        self.entries.iter_mut()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, t)| t.trainable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.values().filter(|t| t.trainable).map(|t| t.value.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Glorot-uniform init.
pub fn glorot<F: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> ArrayD<F> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(shape), |_| F::from_f64(rng.gen_range(-limit..limit)))
}

pub fn zeros<F: Scalar>(shape: &[usize]) -> ArrayD<F> {
    ArrayD::zeros(IxDyn(shape))
}

/// A graph with the model parameters mounted on demand.
pub struct Bound<'p, F: Scalar> {
    pub g: Graph<F>,
    params: &'p Params<F>,
    mounted: IndexMap<String, Tid>,
    trainable_mount: bool,
}

impl<'p, F: Scalar> Bound<'p, F> {
    /// `trainable_mount = false` mounts everything as constants (inference).
    pub fn new(params: &'p Params<F>, trainable_mount: bool) -> Self {
        Bound { g: Graph::new(), params, mounted: IndexMap::new(), trainable_mount }
    }

    /// Mount (or fetch the already-mounted) parameter `name`.
    pub fn p(&mut self, name: &str) -> Tid {
        if let Some(&tid) = self.mounted.get(name) {
            return tid;
        }
        let entry = self
            .params
            .iter()
            .find(|(n, _)| n.as_str() == name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .1;
        let tid = if self.trainable_mount && entry.trainable {
            self.g.param(entry.value.clone())
        } else {
            self.g.constant(entry.value.clone())
        };
        self.mounted.insert(name.to_string(), tid);
        tid
    }

    pub fn mounted(&self) -> impl Iterator<Item = (&String, Tid)> {
        self.mounted.iter().map(|(n, &t)| (n, t))
    }
}
