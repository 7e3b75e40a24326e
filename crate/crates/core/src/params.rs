//! Named parameter storage shared by all model components.

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of trainable tensors. Insertion order is the
/// serialization order and the optimizer-state order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
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

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Records every parameter as a graph leaf. `trainable` controls whether
    /// the leaves receive gradients.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    graph.param(t)
                } else {
                    graph
                        .constant(t.shape(), t.data().to_vec())
                        .expect("stored tensors have valid shapes")
                }
            })
            .collect();
        Bound { vars }
    }

    /// Adds the gradients of the last backward pass into the stored buffers.
    pub fn accumulate_grads(&mut self, graph: &Graph, bound: &Bound) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            if let Some(g) = graph.grad(v) {
                t.accumulate_grad(g);
            }
        }
    }

    /// Replaces the values of the named tensors, checking names and shapes.
    pub fn load_values(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Invalid(format!(
                "expected {} parameter tensors, found {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let i = self
                .names
                .iter()
                .position(|n| *n == name)
                .ok_or_else(|| Error::Invalid(format!("unexpected parameter {name:?}")))?;
            if t.shape() != self.tensors[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "load_parameters",
                    lhs: self.tensors[i].shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            self.tensors[i].data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Rounds every value to the nearest 32-bit float. Keeps training state
    /// identical to what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Graph handles for every parameter of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps handles created elsewhere, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Scaled normal init, `std = sqrt(2 / fan_in)`.
pub fn kaiming_tensor(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    normal_tensor(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kaiming_std_is_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = kaiming_tensor(&[20000], 50, &mut rng);
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.003, "{var}");
    }

    #[test]
    fn load_checks_shapes() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2, 2]));
        assert!(s.load_values(vec![("w".into(), Tensor::zeros(&[4]))]).is_err());
        assert!(s.load_values(vec![("x".into(), Tensor::zeros(&[2, 2]))]).is_err());
        s.load_values(vec![("w".into(), Tensor::full(&[2, 2], 3.0))]).unwrap();
        assert_eq!(s.by_name("w").unwrap().data(), &[3.0; 4]);
    }
}
