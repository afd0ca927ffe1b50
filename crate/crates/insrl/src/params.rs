//! Named learnable parameters, their gradients, and the SGD update.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
pub type ParamId = usize;

/// All learnable parameters, keyed by name with stable insertion order.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    items: Vec<(String, Tensor<T>)>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            items: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name '{name}'"
        );
        let id = self.items.len();
        self.items.push((name.to_string(), tensor));
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.items[id].0
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.items[id].1
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.items[id].1
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.value(self.id(name)?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.items
            .iter()
            .enumerate()
            .map(|(id, (n, t))| (id, n.as_str(), t))
    }

    /// Total number of scalar entries across all parameters.
    pub fn total_entries(&self) -> usize {
        self.items.iter().map(|(_, t)| t.numel()).sum()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-parameter gradient accumulator, parallel to a [`ParamStore`].
///
/// Slots stay `None` until a gradient flows to the parameter, so untouched
/// tables cost nothing.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    slots: Vec<Option<Vec<T>>>,
    sizes: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Gradients {
            slots: vec![None; store.len()],
            sizes: store.iter().map(|(_, _, t)| t.numel()).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.slots[id].as_deref()
    }

    /// Dense gradient for `id`, zeros if nothing flowed to it.
    pub fn dense(&self, id: ParamId) -> Vec<T> {
        match &self.slots[id] {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.sizes[id]],
        }
    }

    fn slot_mut(&mut self, id: ParamId) -> &mut Vec<T> {
        let size = self.sizes[id];
        self.slots[id].get_or_insert_with(|| vec![T::zero(); size])
    }

    pub fn add_dense(&mut self, id: ParamId, grad: &[T]) {
        let slot = self.slot_mut(id);
        debug_assert_eq!(slot.len(), grad.len());
        for (s, g) in slot.iter_mut().zip(grad) {
            *s += *g;
        }
    }

    /// Scatter-add `grad_row` into row `row` of parameter `id` (a `[V, d]` table).
    pub fn add_row(&mut self, id: ParamId, row: usize, width: usize, grad_row: &[T]) {
        let slot = self.slot_mut(id);
        let base = row * width;
        for (s, g) in slot[base..base + width].iter_mut().zip(grad_row) {
            *s += *g;
        }
    }

    /// Fold another accumulator into this one (deterministic, slot by slot).
    pub fn merge(&mut self, other: &Gradients<T>) {
        for (id, slot) in other.slots.iter().enumerate() {
            if let Some(g) = slot {
                self.add_dense(id, g);
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for slot in self.slots.iter_mut().flatten() {
            for g in slot.iter_mut() {
                *g *= factor;
            }
        }
    }

    pub fn l2_norm(&self) -> T {
        let mut acc = T::zero();
        for slot in self.slots.iter().flatten() {
            for &g in slot {
                acc += g * g;
            }
        }
        acc.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slots
            .iter()
            .flatten()
            .all(|s| s.iter().all(|g| g.is_finite()))
    }
}

/// One plain SGD step: `p -= lr * g`, with optional global-norm clipping.
pub fn sgd_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    lr: T,
    clip_norm: Option<T>,
) {
    let mut scale = T::one();
    if let Some(max_norm) = clip_norm {
        let norm = grads.l2_norm();
        if norm > max_norm {
            scale = max_norm / norm;
        }
    }
    for id in 0..store.len() {
        if let Some(g) = grads.get(id) {
            let p = store.value_mut(id).data_mut();
            for (pv, &gv) in p.iter_mut().zip(g) {
                *pv -= lr * scale * gv;
            }
        }
    }
}

/// Seeded initializers. Sampling always happens in `f64` and is cast to `T`,
/// so a given seed produces the same value stream in both precisions.
pub mod init {
    use super::*;

    pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor::from_vec(shape, data).expect("initializer shape")
    }

    pub fn gaussian<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        Tensor::from_vec(shape, data).expect("initializer shape")
    }

    pub fn xavier<T: Scalar>(
        rng: &mut ChaCha8Rng,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> Tensor<T> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        uniform(rng, shape, -bound, bound)
    }

    /// Identity with Gaussian noise on the off-diagonal entries.
    pub fn noisy_identity<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Tensor<T> {
        use rand_distr::{Distribution, Normal};
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                let v = if i == j { 1.0 } else { normal.sample(rng) };
                t.set(i, j, T::from_f64(v));
            }
        }
        t
    }
}
