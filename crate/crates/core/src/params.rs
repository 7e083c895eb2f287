//! Named parameter storage shared by layers, optimizer and checkpoints.

use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Householder vectors `[d, d]` or `[G, d, d]`; excluded from weight decay.
    Householder,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        !matches!(self, ParamKind::Householder)
    }

    pub fn tag(self) -> &'static str {
        match self {
            ParamKind::Weight => "weight",
            ParamKind::Bias => "bias",
            ParamKind::Householder => "householder",
        }
    }

    pub fn from_tag(s: &str) -> Option<Self> {
        match s {
            "weight" => Some(ParamKind::Weight),
            "bias" => Some(ParamKind::Bias),
            "householder" => Some(ParamKind::Householder),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar = f64> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f64> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        self.params.push(Param { name: name.into(), value, kind });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total learnable scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Creates one gradient-tracked leaf per parameter.
    pub fn bind<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        Bound { vars: self.params.iter().map(|p| graph.leaf(p.value.clone())).collect() }
    }

    /// Like [`bind`](Self::bind) but without gradient tracking.
    pub fn bind_frozen<'g>(&self, graph: &'g Graph<T>) -> Bound<'g, T> {
        Bound { vars: self.params.iter().map(|p| graph.constant(p.value.clone())).collect() }
    }
}

/// Parameters bound into one graph.
pub struct Bound<'g, T: Scalar = f64> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Scalar> Bound<'g, T> {
    /// Wraps variables already in the graph, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var<'g, T>>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g, T>] {
        &self.vars
    }
}
