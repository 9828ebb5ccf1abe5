use crate::error::{bail, Result};

use super::graph::{Graph, Var};
use super::real::Real;
use super::tensor::Tensor;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered set of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, t: Tensor<T>) -> Result<()> {
        if t.shape() != self.tensors[id.0].shape() {
            bail!(
                Dimension,
                "parameter {} has shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                t.shape()
            );
        }
        self.tensors[id.0] = t;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }

    /// Places every parameter on the graph; `trainable(id)` decides which
    /// ones track gradients.
    pub fn bind(&self, g: &Graph<T>, trainable: impl Fn(ParamId) -> bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| g.leaf(t.clone().with_grad(trainable(ParamId(i)))))
            .collect();
        Bound { vars }
    }

    /// Gradients for every bound parameter (zeros where none flowed).
    pub fn grads(&self, g: &Graph<T>, bound: &Bound) -> Vec<Tensor<T>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}

/// Graph handles for the parameters of one store.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles in store order, for callers that create the leaves themselves.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Adds `src` into `acc` element-wise; both sides are gradient lists of one store.
pub fn accumulate_grads<T: Real>(acc: &mut [Tensor<T>], src: &[Tensor<T>]) {
    for (a, s) in acc.iter_mut().zip(src) {
        a.data_mut().iter_mut().zip(s.data()).for_each(|(a, &b)| *a += b);
    }
}
