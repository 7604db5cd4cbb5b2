use crate::error::{dim_err, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Index of a parameter within a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in declaration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
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

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter on `tape` as a leaf. With `grad` set, the
    /// leaves track gradients.
    pub fn bind(&self, tape: &mut Tape, grad: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(grad);
                tape.leaf(t)
            })
            .collect();
        Bound { vars }
    }

    /// Overwrites every tensor's data with `values` (same layout).
    pub fn assign(&mut self, values: &[Vec<f32>]) -> Result<()> {
        if values.len() != self.tensors.len() {
            return dim_err(format!(
                "{} value buffers for {} parameters",
                values.len(),
                self.tensors.len()
            ));
        }
        for (t, v) in self.tensors.iter_mut().zip(values) {
            if v.len() != t.numel() {
                return dim_err(format!(
                    "buffer of length {} for parameter of shape {:?}",
                    v.len(),
                    t.shape()
                ));
            }
            t.data_mut().copy_from_slice(v);
        }
        Ok(())
    }

    /// Bitwise equality of every parameter.
    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bitwise_eq(b))
    }
}

/// Tape handles for every parameter of a store, in declaration order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Substitutes the handle used for one parameter.
    pub fn replace(&mut self, id: ParamId, v: Var) {
        self.vars[id.0] = v;
    }

    /// Gradient of every parameter after a backward pass; parameters the
    /// loss did not reach get zeros.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f32>> {
        self.vars
            .iter()
            .map(|&v| match tape.grad(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; tape.value(v).numel()],
            })
            .collect()
    }
}
