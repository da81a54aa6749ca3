use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Handle to one named tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Ordered table of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name,
            tensor: tensor.with_grad(),
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
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

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Overwrites every tensor from `(name, shape, data)` triples; names and
    /// shapes must match this store exactly.
    pub fn load_values(&mut self, values: &[(String, Vec<usize>, Vec<f64>)]) -> Result<()> {
        if values.len() != self.entries.len() {
            return Err(Error::Format {
                what: "parameter table",
                msg: format!("expected {} tensors, found {}", self.entries.len(), values.len()),
            });
        }
        for (entry, (name, shape, data)) in self.entries.iter_mut().zip(values) {
            if &entry.name != name || entry.tensor.shape() != shape.as_slice() {
                return Err(Error::Format {
                    what: "parameter table",
                    msg: format!(
                        "expected `{}` {:?}, found `{name}` {shape:?}",
                        entry.name,
                        entry.tensor.shape()
                    ),
                });
            }
            entry.tensor.data_mut().copy_from_slice(data);
        }
        Ok(())
    }
}
