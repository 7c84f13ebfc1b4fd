use crate::graph::{Graph, Var};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Participates in the graph but never updated.
    Frozen,
    /// Non-differentiable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    pub grad: Option<Tensor>,
}

/// Named, ordered collection of model tensors. Order is creation order and
/// is part of the checkpoint format.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            kind,
            grad: None,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Number of scalar weights, excluding buffers.
    pub fn num_weights(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind != ParamKind::Buffer)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn set_kind(&mut self, id: ParamId, kind: ParamKind) {
        self.entries[id.0].kind = kind;
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad = None;
        }
    }

    /// Adds the gradients of every bound trainable leaf into the store.
    pub fn accumulate(&mut self, graph: &Graph, bound: &BoundParams) {
        for (i, var) in bound.vars.iter().enumerate() {
            let Some(var) = var else { continue };
            let entry = &mut self.entries[i];
            if entry.kind != ParamKind::Trainable {
                continue;
            }
            let acc = entry
                .grad
                .get_or_insert_with(|| Tensor::zeros(entry.value.shape()));
            if let Some(g) = graph.grad(*var) {
                for (a, d) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += d;
                }
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter_map(|e| e.grad.as_ref())
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> Result<f64> {
        if !(max_norm > 0.0) {
            return Err(TensorError::InvalidArgument {
                op: "clip_grad_norm",
                reason: format!("max_norm must be positive, got {max_norm}"),
            });
        }
        let norm = self.grad_norm();
        if norm > max_norm {
            let factor = max_norm / norm;
            for g in self.entries.iter_mut().filter_map(|e| e.grad.as_mut()) {
                g.data_mut().iter_mut().for_each(|v| *v *= factor);
            }
        }
        Ok(norm)
    }
}

/// Lazily binds store entries to leaves of one graph.
#[derive(Debug)]
pub struct BoundParams {
    vars: Vec<Option<Var>>,
}

impl BoundParams {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            vars: vec![None; store.len()],
        }
    }

    /// Leaf for `id`, created on first use. Only trainable entries track
    /// gradients.
    pub fn var(&mut self, graph: &mut Graph, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let entry = store.get(id);
        let v = graph.leaf(entry.value.clone(), entry.kind == ParamKind::Trainable)?;
        self.vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.vars[id.0]
    }
}
