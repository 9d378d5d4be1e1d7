use serde::{Deserialize, Serialize};

use super::tensor::{Precision, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// What a parameter is for. The freeze policy keys off this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Embedding,
    Attention,
    Revin,
    LayerNorm,
    Memory,
    Gate,
    Expert,
    Ffn,
    Head,
}

impl ParamKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ParamKind::Embedding => "embedding",
            ParamKind::Attention => "attention",
            ParamKind::Revin => "revin",
            ParamKind::LayerNorm => "layernorm",
            ParamKind::Memory => "memory",
            ParamKind::Gate => "gate",
            ParamKind::Expert => "expert",
            ParamKind::Ffn => "ffn",
            ParamKind::Head => "head",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    /// Zero-based layer index for per-layer parameters.
    pub layer: Option<usize>,
    pub tensor: Tensor,
}

impl Param {
    pub fn trainable(&self) -> bool {
        self.tensor.requires_grad()
    }
}

/// Flat registry of named model parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, layer: Option<usize>, tensor: Tensor) -> ParamId {
        let id = ParamId(self.params.len());
        let tensor = tensor.with_requires_grad(true);
        self.params.push(Param { name: name.into(), kind, layer, tensor });
        id
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.zero_grad();
        }
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.params.iter().filter(|p| p.trainable()).map(|p| p.tensor.len()).sum()
    }

    pub fn round_to(&mut self, precision: Precision) {
        for p in &mut self.params {
            precision.round_slice(p.tensor.data_mut());
        }
    }
}
