use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use ttt_omics_autodiff::{Shape, Tape, Var};

use crate::{CoreError, Result};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    shape: Shape,
    data: Arc<Vec<f64>>,
}

/// Named trainable tensors in creation order.
///
/// Storage is reference counted so many tapes can read the same values
/// while the store itself stays the single writer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, dims: &[usize], data: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        let shape = Shape::new(dims).map_err(CoreError::from)?;
        if shape.numel() != data.len() {
            return Err(CoreError::contract(
                "ParamStore::add",
                format!("{name}: {} values for shape {shape}", data.len()),
            ));
        }
        if self.by_name.contains_key(&name) {
            return Err(CoreError::contract("ParamStore::add", format!("duplicate parameter {name}")));
        }
        self.by_name.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            shape,
            data: Arc::new(data),
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    /// Uniform in `[-bound, bound]`.
    pub fn add_uniform<R: Rng>(&mut self, name: &str, dims: &[usize], bound: f64, rng: &mut R) -> Result<ParamId> {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, dims, data)
    }

    pub fn add_filled(&mut self, name: &str, dims: &[usize], value: f64) -> Result<ParamId> {
        let n: usize = dims.iter().product();
        self.add(name, dims, vec![value; n])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> Shape {
        self.entries[id.0].shape
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Vec<f64>> {
        Arc::clone(&self.entries[id.0].data)
    }

    /// Mutable access; copies the buffer first if a tape still holds it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        Arc::make_mut(&mut self.entries[id.0].data).as_mut_slice()
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}

/// Gradient buffers aligned with a [`ParamStore`]. `None` means the
/// parameter did not take part in the computation.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    data: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn empty(n: usize) -> Self {
        Grads { data: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.data[id.0].as_deref()
    }

    /// Elementwise `self += other`; a parameter present in either side is
    /// present in the result.
    pub fn accumulate(&mut self, other: &Grads) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.iter_mut().zip(b).for_each(|(x, y)| *x += y),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.data.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }
}

/// A tape plus lazily bound parameters: a parameter becomes a leaf the
/// first time it is requested, so untouched ones never get a gradient.
pub struct Session<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Session {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .tape
            .param_shared(self.store.shape(id), self.store.shared(id))
            .expect("store shapes are validated on insert");
        self.bound[id.0] = Some(v);
        v
    }

    /// Run backward from `root` and collect gradients of bound parameters.
    pub fn gradients(&mut self, root: Var) -> Result<Grads> {
        self.tape.backward(root)?;
        let data = self
            .bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v).map(<[f64]>::to_vec)))
            .collect();
        Ok(Grads { data })
    }
}
