//! Named parameter and buffer registry shared by models, the optimizer and
//! checkpoints.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Vec<T>,
    /// Buffers (batch-norm running statistics) are stored but not optimised.
    pub trainable: bool,
}

/// Insertion-ordered registry of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    fn insert(&mut self, name: String, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id.0);
        let grad = vec![T::zero(); value.numel()];
        self.entries.push(ParamEntry { name, value, grad, trainable });
        Ok(id)
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        self.insert(name.into(), value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.id(name).map(|id| self.entry(id))
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries().filter(|(_, e)| e.trainable)
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        self.trainable().map(|(_, e)| e.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds the parameter gradients of the last backward pass of `graph`.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) {
        for (id, g) in graph.param_grads() {
            let dst = &mut self.entries[id.0].grad;
            dst.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
        }
    }

    /// Replaces the value of an existing entry, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name:?}")))?;
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::dim(format!(
                "{name}: stored shape {:?}, given {:?}",
                entry.value.shape(),
                value.shape()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// Converts every entry to another precision (values only; gradients reset).
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(e.name.clone(), e.value.cast(), e.trainable).expect("unique names");
        }
        out
    }
}

/// Kaiming-uniform initialisation for ReLU networks: `U(-b, b)` with
/// `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Float>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| T::from_f64_lossy(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Independent seed for stream `stream` of a run seeded with `base`
/// (SplitMix64 finaliser over the pair).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Forward-pass context: the record being written, the parameters it reads
/// and the train/eval switch.
pub struct Session<'a, T: Float> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a mut ParamStore<T>,
    pub training: bool,
}

impl<'a, T: Float> Session<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, store: &'a mut ParamStore<T>, training: bool) -> Self {
        Self { graph, store, training }
    }

    /// Records parameter `id` as a differentiable leaf.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let value = self.store.value(id).clone();
        self.graph.param(id, value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add_param("a", Tensor::zeros(vec![2])).unwrap();
        assert!(s.add_buffer("a", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn buffers_do_not_count_as_trainable() {
        let mut s = ParamStore::<f32>::new();
        s.add_param("w", Tensor::zeros(vec![3, 4])).unwrap();
        s.add_buffer("running_mean", Tensor::zeros(vec![4])).unwrap();
        assert_eq!(s.count_trainable(), 12);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn kaiming_bound_and_determinism() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a: Tensor<f32> = kaiming_uniform(&[8, 4, 3, 3], 36, &mut r1);
        let b: Tensor<f32> = kaiming_uniform(&[8, 4, 3, 3], 36, &mut r2);
        assert_eq!(a, b);
        let bound = (6.0f32 / 36.0).sqrt();
        assert!(a.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn grads_accumulate_from_graph() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add_param("w", Tensor::full(vec![2], 3.0)).unwrap();
        let mut g = Graph::new();
        let mut sess = Session::new(&mut g, &mut s, true);
        let w = sess.param(id).unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        g.backward(loss).unwrap();
        s.accumulate_grads(&g);
        s.accumulate_grads(&g);
        assert_eq!(s.entry(id).grad, vec![12.0, 12.0]);
        s.zero_grad();
        assert_eq!(s.entry(id).grad, vec![0.0, 0.0]);
    }
}
