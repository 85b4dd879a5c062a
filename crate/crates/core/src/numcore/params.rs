//! Named parameter store shared by all model components.
//!
//! Parameters live in insertion order (which fixes checkpoint layout and all
//! gradient-reduction order); gradients accumulate additively and are zeroed
//! explicitly by the caller.

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;

#[derive(Clone)]
pub struct ParamStore<F: Real> {
    names: Vec<String>,
    values: Vec<Tensor<F>>,
    grads: Vec<Tensor<F>>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, t: Tensor<F>) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        let i = self.values.len();
        self.grads.push(Tensor::zeros(&t.shape));
        self.values.push(t);
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        i
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        &self.values[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        &mut self.values[self.index[name]]
    }

    pub fn grad_of(&self, name: &str) -> &Tensor<F> {
        &self.grads[self.index[name]]
    }

    pub fn value_at(&self, i: usize) -> &Tensor<F> {
        &self.values[i]
    }

    pub fn value_at_mut(&mut self, i: usize) -> &mut Tensor<F> {
        &mut self.values[i]
    }

    pub fn grad_at(&self, i: usize) -> &Tensor<F> {
        &self.grads[i]
    }

    pub fn set(&mut self, name: &str, t: Tensor<F>) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_string()))?;
        if t.shape != self.values[i].shape {
            return Err(Error::Dimension(format!(
                "parameter {name}: shape {:?} vs expected {:?}",
                t.shape, self.values[i].shape
            )));
        }
        self.values[i] = t;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data.iter_mut().for_each(|v| *v = F::ZERO);
        }
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for (n, v) in self.names.iter().zip(&self.values) {
            out.add(n, v.cast());
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.values.iter())
    }

    /// Bind every parameter into a graph as a `requires_grad` leaf.
    pub fn bind(&self, g: &mut Graph<F>) -> Binding {
        Binding {
            vars: self
                .values
                .iter()
                .map(|t| g.input(t.clone(), true))
                .collect(),
        }
    }

    /// Accumulate gradients produced by `backward` into the store.
    pub fn accumulate_grads(&mut self, g: &Graph<F>, binding: &Binding) {
        for (i, var) in binding.vars.iter().enumerate() {
            if let Some(grad) = g.grad(*var) {
                for (s, v) in self.grads[i].data.iter_mut().zip(grad) {
                    *s = s.add(*v);
                }
            }
        }
    }
}

/// Graph variables for every store parameter, in store order.
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn var<F: Real>(&self, store: &ParamStore<F>, name: &str) -> Var {
        match store.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_accumulation_is_additive_and_explicitly_zeroed() {
        let mut store: ParamStore<f64> = ParamStore::new();
        store.add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        for _ in 0..2 {
            let mut g = Graph::new();
            let b = store.bind(&mut g);
            let w = b.var(&store, "w");
            let sq = g.mul(w, w).unwrap();
            let loss = g.sum_all(sq);
            g.backward(loss).unwrap();
            store.accumulate_grads(&g, &b);
        }
        assert_eq!(store.grad_of("w").data, vec![4.0, 8.0]);
        store.zero_grads();
        assert_eq!(store.grad_of("w").data, vec![0.0, 0.0]);
    }
}
