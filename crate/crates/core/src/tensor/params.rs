use super::Tensor;
use crate::error::{Error, Result};
use crate::rng::KeyedRng;

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    tensor: Tensor,
    decay: bool,
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. `decay` marks it for decoupled weight decay.
    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        tensor.requires_grad = true;
        tensor.grad = Some(vec![0.0; tensor.numel()]);
        self.entries.push(Entry {
            name,
            tensor,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Normal(0, std) initialized weight; decayed unless it is a vector.
    pub fn insert_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut KeyedRng,
    ) -> ParamId {
        let mut t = Tensor::zeros(shape);
        for v in t.values_mut() {
            *v = rng.normal(0.0, std);
        }
        let decay = shape.len() > 1;
        self.insert(name, t, decay)
    }

    pub fn insert_filled(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.insert(name, Tensor::filled(shape, value), false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.entries[id.0].decay
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    /// Replaces the values of an existing parameter, keeping its shape.
    pub fn set_values(&mut self, id: ParamId, values: &[f64]) -> Result<()> {
        let t = self.get_mut(id);
        if t.numel() != values.len() {
            return Err(Error::Shape {
                op: "set_values",
                lhs: t.shape().to_vec(),
                rhs: vec![values.len()],
            });
        }
        t.values_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        self.get(id).grad.as_deref().expect("registered params carry a gradient")
    }

    /// Adds a gradient buffer into the stored gradients.
    pub fn accumulate(&mut self, grads: &Grads) {
        for (e, g) in self.entries.iter_mut().zip(&grads.data) {
            if let Some(g) = g {
                let dst = e.tensor.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }
}

/// Gradient buffer aligned with a [`ParamStore`]; slots are allocated lazily.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Grads {
    data: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            data: vec![None; store.len()],
        }
    }

    pub(crate) fn slot(&mut self, id: ParamId, numel: usize) -> &mut [f64] {
        if self.data.len() <= id.0 {
            self.data.resize(id.0 + 1, None);
        }
        self.data[id.0].get_or_insert_with(|| vec![0.0; numel])
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.data.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn add_assign(&mut self, other: &Grads) {
        if self.data.len() < other.data.len() {
            self.data.resize(other.data.len(), None);
        }
        for (dst, src) in self.data.iter_mut().zip(&other.data) {
            if let Some(src) = src {
                match dst {
                    Some(d) => {
                        for (a, b) in d.iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
