use std::collections::BTreeMap;
use std::collections::HashMap;

use sha2::{Digest, Sha256};

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// A named tensor owned by a model.
///
/// Non-trainable parameters hold buffers such as batch-norm running
/// statistics; they are checkpointed but never receive gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::StructureMismatch {
                path: name,
                reason: "duplicate parameter name".into(),
            });
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    /// Ids of trainable parameters whose names start with `prefix`.
    pub fn trainable_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable && p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    /// Rounds every stored value to `precision`.
    pub fn round_to(&mut self, precision: Precision) {
        for p in &mut self.params {
            precision.round_slice(p.value.data_mut());
        }
    }

    /// Total number of scalar values across trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Places every parameter on the tape as a leaf. Only trainable
    /// parameters selected by `grad` receive gradients.
    pub fn bind(&self, g: &mut Graph, grad: impl Fn(&Parameter) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), p.trainable && grad(p)))
            .collect();
        Bound { vars }
    }

    /// Binds every parameter as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        self.bind(g, |_| false)
    }

    /// SHA-256 over names, shapes and raw values, in store order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Name → tensor map, used for checkpointing.
    pub fn to_named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (format!("{prefix}{}", p.name), p.value.clone()))
            .collect()
    }

    /// Overwrites values from a name → tensor map. Every parameter must be
    /// present with a matching shape.
    pub fn load_named(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for p in &mut self.params {
            let key = format!("{prefix}{}", p.name);
            let t = tensors.get(&key).ok_or_else(|| Error::StructureMismatch {
                path: key.clone(),
                reason: "missing from checkpoint".into(),
            })?;
            if t.shape() != p.value.shape() {
                return Err(Error::StructureMismatch {
                    path: key,
                    reason: format!("shape {:?} in checkpoint, model expects {:?}", t.shape(), p.value.shape()),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Wraps handles produced elsewhere (e.g. by a gradient checker) in
    /// store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    /// Extracts gradients for the given parameters.
    pub fn gradients(&self, grads: &mut Gradients, ids: &[ParamId]) -> ParamGrads {
        let mut out = ParamGrads::default();
        for &id in ids {
            if let Some(t) = grads.take(self.vars[id.0]) {
                out.insert(id, t);
            }
        }
        out
    }
}

/// Gradients keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    map: BTreeMap<ParamId, Tensor>,
}

impl ParamGrads {
    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.map.insert(id, grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}
