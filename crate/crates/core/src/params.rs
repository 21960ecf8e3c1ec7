//! Named parameter storage and per-pass graph binding.
//!
//! A [`ParamStore`] owns the persistent state of a model: trainable tensors
//! and non-trainable buffers (batch-norm running statistics). Each forward
//! pass builds a fresh [`Graph`] that lazily binds store entries to tape
//! leaves, so the tape stays a pure record of one pass.

use crate::autodiff::{NodeId, Phase, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    /// Registers a trainable tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.insert(name.into(), tensor, true)
    }

    /// Registers a non-trainable buffer (saved and restored, never updated
    /// by the optimizer).
    pub fn add_buffer(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.insert(name.into(), tensor, false)
    }

    fn insert(&mut self, name: String, tensor: Tensor, trainable: bool) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.entries[id.0].tensor.values_mut()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Replaces the tensor behind `name`; shape must match. Used when
    /// restoring checkpoints.
    pub fn restore(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .by_name(name)
            .ok_or_else(|| Error::format(name, "checkpoint names a parameter the model lacks"))?;
        let current = &self.entries[id.0].tensor;
        if current.shape() != tensor.shape() {
            return Err(Error::shape(format!(
                "parameter {name} has shape {:?}, checkpoint provides {:?}",
                current.shape(),
                tensor.shape()
            )));
        }
        self.entries[id.0].tensor = tensor;
        Ok(())
    }

    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }
}

/// One forward/backward pass: a tape plus the bindings from store entries to
/// tape leaves created so far.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a mut ParamStore,
    bound: Vec<Option<NodeId>>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a mut ParamStore) -> Self {
        let n = store.len();
        Graph {
            tape: Tape::new(),
            store,
            bound: vec![None; n],
        }
    }

    /// Tape leaf for a parameter, bound once per pass.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        let slot = id.0;
        if let Some(node) = self.bound[slot] {
            return node;
        }
        let entry = &self.store.entries[slot];
        let node = if entry.trainable {
            self.tape.leaf(&entry.tensor)
        } else {
            self.tape.constant(&entry.tensor)
        };
        self.bound[slot] = Some(node);
        node
    }

    /// Batch normalization against a stats buffer held in the store.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        stats: ParamId,
        phase: Phase,
    ) -> Result<NodeId> {
        let gamma_n = self.param(gamma);
        let beta_n = self.param(beta);
        let Graph { tape, store, .. } = self;
        tape.batchnorm2d(x, gamma_n, beta_n, store.values_mut(stats), phase)
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Gradients for every trainable parameter after `tape.backward`.
    /// Parameters not touched by this pass report zeros.
    pub fn gradients(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.store
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.trainable)
            .map(|(i, e)| {
                let g = match self.bound[i] {
                    Some(node) => self.tape.grad(node),
                    None => vec![0.0; e.tensor.len()],
                };
                (ParamId(i), g)
            })
            .collect()
    }
}
