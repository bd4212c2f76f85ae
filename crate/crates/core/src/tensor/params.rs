use std::collections::HashMap;
use std::fmt;

use super::graph::{Graph, Var};
use super::token::TokenTensor;
use crate::error::{Error, Result};

/// Stable handle to a registry entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Coarse parameter grouping used for freezing decisions and the census.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Backbone,
    TextEncoder,
    Adapter,
    TextProjection,
    Tpcm,
    Projection,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Backbone,
        ParamGroup::TextEncoder,
        ParamGroup::Adapter,
        ParamGroup::TextProjection,
        ParamGroup::Tpcm,
        ParamGroup::Projection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::TextEncoder => "text_encoder",
            ParamGroup::Adapter => "adapters",
            ParamGroup::TextProjection => "fc_text",
            ParamGroup::Tpcm => "tpcm",
            ParamGroup::Projection => "projection",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: TokenTensor,
    pub frozen: bool,
}

/// Named parameter store. Names are unique, so every parameter appears
/// exactly once; frozen entries are bound as graph constants.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, ParamId>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        tensor: TokenTensor,
        frozen: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract("register", format!("duplicate parameter {name}")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            group,
            tensor,
            frozen,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &TokenTensor {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut TokenTensor {
        &mut self.entries[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| !self.is_frozen(id))
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }
}

/// Lazily binds registry entries into a graph: each parameter becomes at
/// most one leaf, trainable ones with gradients and frozen ones as
/// constants.
#[derive(Debug)]
pub struct Binder<'a> {
    registry: &'a ParamRegistry,
    bound: Vec<Option<Var>>,
    pub graph: Graph,
}

impl<'a> Binder<'a> {
    pub fn new(registry: &'a ParamRegistry) -> Self {
        Self {
            registry,
            bound: vec![None; registry.len()],
            graph: Graph::new(),
        }
    }

    pub fn registry(&self) -> &'a ParamRegistry {
        self.registry
    }

    pub fn get(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let entry = self.registry.entry(id);
        let t = entry.tensor.clone();
        let v = if entry.frozen {
            self.graph.constant(t)
        } else {
            self.graph.param(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of bound trainable parameters after `graph.backward`;
    /// unbound or unreached trainable entries get `None`.
    pub fn gradients(&self) -> Vec<Option<Vec<f64>>> {
        self.registry
            .ids()
            .map(|id| {
                if self.registry.is_frozen(id) {
                    return None;
                }
                self.bound[id.0].and_then(|v| self.graph.grad(v).map(<[f64]>::to_vec))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut r = ParamRegistry::new();
        r.register("w", ParamGroup::Adapter, TokenTensor::zeros(&[2]), false)
            .unwrap();
        assert!(r
            .register("w", ParamGroup::Adapter, TokenTensor::zeros(&[2]), false)
            .is_err());
    }

    #[test]
    fn frozen_params_bind_as_constants() {
        let mut r = ParamRegistry::new();
        let a = r
            .register("a", ParamGroup::Backbone, TokenTensor::full(&[2], 1.0), true)
            .unwrap();
        let b = r
            .register("b", ParamGroup::Adapter, TokenTensor::full(&[2], 2.0), false)
            .unwrap();
        let mut binder = Binder::new(&r);
        let va = binder.get(a);
        let vb = binder.get(b);
        assert_eq!(binder.get(a), va);
        let g = &mut binder.graph;
        let p = g.mul(va, vb).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        let grads = binder.gradients();
        assert!(grads[a.index()].is_none());
        assert_eq!(grads[b.index()].as_deref(), Some(&[1.0, 1.0][..]));
    }
}
