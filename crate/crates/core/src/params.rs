//! Named parameter storage shared by models, heads and hypergraph layers.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::numeric::{Graph, Scalar, Tensor, Var};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// How a parameter is filled by [`ParamSet::init`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(−1/√fan_in, 1/√fan_in)`.
    FanIn(usize),
    Zeros,
    /// Identity matrix (square 2-D tensors only), else zeros.
    Identity,
}

/// Whole-set initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    /// Each tensor's declared [`Init`].
    FanInUniform,
    /// Everything zero.
    Zero,
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    inits: Vec<Init>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            inits: Vec::new(),
        }
    }

    /// Register a zero-filled tensor; call [`ParamSet::init`] to fill it.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(Tensor::zeros(shape));
        self.inits.push(init);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replace a tensor; the shape must not change.
    pub fn set(&mut self, id: ParamId, t: Tensor<T>) -> Result<()> {
        if t.shape() != self.tensors[id.0].shape() {
            return Err(config_err!(
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                t.shape()
            ));
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub(crate) fn data_mut(&mut self, id: ParamId) -> Vec<T> {
        std::mem::replace(&mut self.tensors[id.0], Tensor::zeros(&[0])).into_data()
    }

    pub(crate) fn restore(&mut self, id: ParamId, shape: &[usize], data: Vec<T>) {
        self.tensors[id.0] = Tensor::new(shape, data).expect("restored extent");
    }

    /// Fill every tensor deterministically from `rng`.
    pub fn init<R: Rng + ?Sized>(&mut self, rng: &mut R, scheme: InitScheme) {
        for (t, init) in self.tensors.iter_mut().zip(&self.inits) {
            let shape = t.shape().to_vec();
            *t = match (scheme, init) {
                (InitScheme::Zero, _) | (_, Init::Zeros) => Tensor::zeros(&shape),
                (InitScheme::FanInUniform, Init::FanIn(fan_in)) => {
                    let bound = 1.0 / (*fan_in.max(&1) as f64).sqrt();
                    Tensor::uniform(&shape, -bound, bound, rng)
                }
                (InitScheme::FanInUniform, Init::Identity) => {
                    if shape.len() == 2 && shape[0] == shape[1] {
                        Tensor::eye(shape[0])
                    } else {
                        Tensor::zeros(&shape)
                    }
                }
            };
        }
    }

    /// Largest absolute value each tensor may hold right after `init`.
    pub fn init_bound(&self, id: ParamId) -> f64 {
        match self.inits[id.0] {
            Init::FanIn(f) => 1.0 / (f.max(1) as f64).sqrt(),
            Init::Zeros => 0.0,
            Init::Identity => 1.0,
        }
    }

    /// Append every tensor of `other`, prefixing names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet<T>) {
        for ((n, t), init) in other.names.iter().zip(&other.tensors).zip(&other.inits) {
            self.names.push(format!("{prefix}{n}"));
            self.tensors.push(t.clone());
            self.inits.push(*init);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            inits: self.inits.clone(),
        }
    }

    /// Put every tensor on `g` as a tracked leaf.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.param(t.clone())).collect())
    }

    /// Put every tensor on `g` as an untracked constant.
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| g.constant(t.clone())).collect())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// Graph handles of a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
