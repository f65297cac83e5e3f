use std::ops::Index;

use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(Error::Contract(format!("parameter {name:?} registered twice")));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_grad());
        Ok(ParamId(self.tensors.len() - 1))
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every parameter as a gradient-requiring leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t)).collect(),
        }
    }

    /// Pulls per-parameter gradients out of a backward pass, in store order.
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Result<Vec<Vec<f64>>> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| match grads.take(v) {
                Some(g) if g.len() == t.numel() => Ok(g),
                Some(g) => Err(Error::shape("collect_grads", &[g.len()], &[t.numel()])),
                None => Err(Error::Contract("bound parameter missing from gradients".into())),
            })
            .collect()
    }
}

/// Tape variables for a [`ParamStore`] bound on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Same binding with one parameter replaced by another variable.
    pub fn with_override(mut self, id: ParamId, var: Var) -> Self {
        self.vars[id.0] = var;
        self
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Glorot-uniform `rows × cols` matrix.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

/// Uniform `rows × cols` in `[-bound, bound)`.
pub fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("positive dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_and_collect() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let b = store.add("b", Tensor::scalar(3.0)).unwrap();
        assert!(store.add("a", Tensor::scalar(0.0)).is_err());
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let s = tape.sum(bound[a]).unwrap();
        let y = tape.scale(s, 2.0).unwrap();
        let mut g = tape.backward(y).unwrap();
        let grads = store.collect_grads(&bound, &mut g).unwrap();
        assert_eq!(grads, vec![vec![2.0, 2.0], vec![0.0]]);
        assert_eq!(store.find("b"), Some(b));
        assert_eq!(store.num_scalars(), 3);
    }

    #[test]
    fn glorot_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = glorot(&mut rng, 4, 8);
        let bound = (6.0f64 / 12.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }
}
