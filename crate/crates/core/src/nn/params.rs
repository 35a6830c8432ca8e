use std::collections::{BTreeMap, HashMap};

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub frozen: bool,
}

/// Named trainable tensors plus non-trainable buffers (batch-norm running stats).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad, frozen: false });
        id
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(!self.buffers.contains_key(&name), "duplicate buffer {name}");
        self.buffers.insert(name, value);
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffer(&self, name: &str) -> &Tensor {
        self.buffers.get(name).unwrap_or_else(|| panic!("missing buffer {name}"))
    }

    pub fn buffer_mut(&mut self, name: &str) -> &mut Tensor {
        self.buffers.get_mut(name).unwrap_or_else(|| panic!("missing buffer {name}"))
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor> {
        &self.buffers
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Freezes (or unfreezes) every parameter whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.grad.sum_sq()).sum::<f64>().sqrt()
    }

    /// Copies values of every parameter and buffer under `prefix` from `other`.
    /// Returns the number of tensors copied.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<usize, String> {
        let mut n = 0;
        for p in other.params.iter().filter(|p| p.name.starts_with(prefix)) {
            let id = self.id(&p.name).ok_or_else(|| format!("unknown parameter {}", p.name))?;
            let dst = &mut self.params[id.0];
            if dst.value.shape() != p.value.shape() {
                return Err(format!("shape of {}: {:?} vs {:?}", p.name, dst.value.shape(), p.value.shape()));
            }
            dst.value = p.value.clone();
            n += 1;
        }
        for (name, b) in other.buffers.iter().filter(|(k, _)| k.starts_with(prefix)) {
            let dst = self.buffers.get_mut(name).ok_or_else(|| format!("unknown buffer {name}"))?;
            if dst.shape() != b.shape() {
                return Err(format!("shape of buffer {name}"));
            }
            *dst = b.clone();
            n += 1;
        }
        Ok(n)
    }
}
