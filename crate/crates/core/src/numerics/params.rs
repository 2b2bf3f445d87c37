use rand::Rng as _;

use super::graph::{Graph, Var};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

/// A parameter store loaded into one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps existing graph leaves, in parameter registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform Glorot initialization for a `fan_in × fan_out` weight.
    pub fn add_glorot(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        self.add(name, Tensor::new(fan_in, fan_out, data).expect("glorot shape"))
    }

    pub fn add_filled(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamId {
        self.add(name, Tensor::filled(rows, cols, value))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Loads every parameter as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.values.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Loads every parameter as a constant (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound {
            vars: self.values.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }

    /// Gradients of every parameter after `g.backward`; missing grads are zeros.
    pub fn gradients(&self, g: &Graph, bound: &Bound) -> Vec<Tensor> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(t, v)| g.grad(*v).unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
            .collect()
    }

    /// Plain SGD: `w ← w − lr·g`.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.values.len() {
            return Err(Error::Contract(format!(
                "sgd_step got {} gradients for {} parameters",
                grads.len(),
                self.values.len()
            )));
        }
        for (w, g) in self.values.iter_mut().zip(grads) {
            if w.shape() != g.shape() {
                return Err(Error::Shape {
                    op: "sgd_step",
                    left: w.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
                *wv -= lr * gv;
            }
        }
        Ok(())
    }

    /// Replaces a parameter by name, checking its shape.
    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> Result<()> {
        let idx = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        if self.values[idx].shape() != value.shape() {
            return Err(Error::Shape {
                op: "set_by_name",
                left: self.values[idx].shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        self.values[idx] = value;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_update_rule() {
        let mut ps = ParamStore::new();
        let id = ps.add("w", Tensor::row(vec![1.0, -2.0]));
        ps.sgd_step(&[Tensor::row(vec![0.5, 1.0])], 0.1).unwrap();
        assert_eq!(ps.get(id).data(), &[0.95, -2.1]);
        assert!(ps.sgd_step(&[Tensor::row(vec![0.5])], 0.1).is_err());
    }
}
