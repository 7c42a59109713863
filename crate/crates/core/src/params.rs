//! Flat, ordered parameter registry. Insertion order is the canonical order
//! used by the optimizer moments, EMA shadows, and checkpoint layout, so it
//! must stay stable across runs of the same config.

use crate::error::{Error, Result};
use crate::tape::{Graph, Var};
use std::collections::HashMap;

#[derive(Debug, Clone)]
pub struct PTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl PTensor {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub items: Vec<PTensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if data.len() != rows * cols {
            return Err(Error::shape("param", format!("{name}: {} for {rows}×{cols}", data.len())));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.items.len());
        self.items.push(PTensor { name, rows, cols, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&PTensor> {
        self.index
            .get(name)
            .map(|&i| &self.items[i])
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut PTensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.items[i]),
            None => Err(Error::Invalid(format!("unknown parameter {name}"))),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.items.iter().map(PTensor::numel).sum()
    }

    /// Push every tensor into the graph as a requires-grad leaf, in canonical
    /// order. One binding per graph; look vars up by name through it.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let mut vars = Vec::with_capacity(self.items.len());
        for t in &self.items {
            vars.push(g.leaf(t.data.clone(), t.rows, t.cols, true)?);
        }
        Ok(Bound { vars })
    }

    /// Like `bind`, but moves the data into the graph, leaving the set's
    /// tensors empty (names and shapes stay valid for `var` lookups). Halves
    /// peak memory for one-shot inference over large models.
    pub fn bind_taking(&mut self, g: &mut Graph) -> Result<Bound> {
        let mut vars = Vec::with_capacity(self.items.len());
        for t in &mut self.items {
            let data = std::mem::take(&mut t.data);
            vars.push(g.leaf(data, t.rows, t.cols, true)?);
        }
        Ok(Bound { vars })
    }

    pub fn var(&self, b: &Bound, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| b.vars[i])
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }
}

pub struct Bound {
    pub vars: Vec<Var>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_and_named() {
        let mut ps = ParamSet::new();
        ps.add("a", 1, 2, vec![1.0, 2.0]).unwrap();
        ps.add("b", 2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(ps.items[0].name, "a");
        assert_eq!(ps.get("b").unwrap().data, vec![3.0, 4.0]);
        assert!(ps.add("a", 1, 1, vec![0.0]).is_err());
        assert_eq!(ps.num_scalars(), 4);
    }

    #[test]
    fn bind_preserves_order_and_grads_flow() {
        let mut ps = ParamSet::new();
        ps.add("x", 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let mut g = Graph::new();
        let b = ps.bind(&mut g).unwrap();
        let x = ps.var(&b, "x").unwrap();
        let l = g.sum_all(x).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(b.vars[0]).unwrap(), &[1.0, 1.0, 1.0]);
    }
}
