//! Named parameter storage and the dense layers built on it.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named weight tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new weight; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.lookup.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Replaces every value, checking names and shapes position by position.
    pub fn load(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::contract(format!(
                "expected {} parameters, got {}",
                self.values.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.iter().enumerate() {
            if *name != self.names[i] || t.shape() != self.values[i].shape() {
                return Err(Error::contract(format!(
                    "parameter {i}: expected {} {:?}, got {name} {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    t.shape()
                )));
            }
        }
        for (slot, (_, t)) in self.values.iter_mut().zip(named) {
            *slot = t;
        }
        Ok(())
    }

    /// Puts every weight on `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> Bound<'g> {
        Bound {
            vars: self
                .values
                .iter()
                .map(|t| graph.leaf(t.clone(), trainable))
                .collect(),
        }
    }
}

/// Graph handles of a [`ParamStore`], indexed by [`ParamId`].
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    /// Wraps graph handles given in store order.
    pub fn from_vars(vars: Vec<Var<'g>>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    /// Gradients of every bound weight, in store order.
    pub fn grads(&self, store: &ParamStore) -> Result<Vec<Tensor>> {
        self.vars
            .iter()
            .zip(store.names())
            .map(|(v, name)| {
                v.grad()
                    .ok_or_else(|| Error::contract(format!("no gradient for weight {name}")))
            })
            .collect()
    }
}

/// Uniform samples in `[-bound, bound)`.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("positive shape")
}

/// Affine map over one or more input blocks whose concatenation is the
/// layer input. A one-row block broadcasts over the rows of the others.
#[derive(Clone, Debug)]
pub struct Linear {
    blocks: Vec<ParamId>,
    bias: ParamId,
    out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        inputs: &[usize],
        out: usize,
    ) -> Self {
        let fan_in: usize = inputs.iter().sum();
        let blocks = inputs
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                // each block contributes equal variance regardless of its width
                let bound = 1.0 / ((d * inputs.len()) as f64).sqrt();
                let suffix = if inputs.len() == 1 {
                    "w".to_string()
                } else {
                    format!("w{i}")
                };
                store.add(format!("{name}.{suffix}"), uniform(&[d, out], bound, rng))
            })
            .collect();
        let bias_bound = 1.0 / (fan_in as f64).sqrt();
        let bias = store.add(format!("{name}.b"), uniform(&[1, out], bias_bound, rng));
        Linear { blocks, bias, out }
    }

    pub fn out(&self) -> usize {
        self.out
    }

    pub fn weights(&self) -> &[ParamId] {
        &self.blocks
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, inputs: &[Var<'g>]) -> Result<Var<'g>> {
        if inputs.len() != self.blocks.len() {
            return Err(Error::contract(format!(
                "linear layer takes {} input blocks, got {}",
                self.blocks.len(),
                inputs.len()
            )));
        }
        // full-height blocks first so one-row blocks broadcast into them
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(inputs[i].shape()[0]));
        let mut acc: Option<Var<'g>> = None;
        for i in order {
            let y = inputs[i].matmul(&p.var(self.blocks[i]))?;
            acc = Some(match acc {
                None => y,
                Some(a) => a.add(&y)?,
            });
        }
        acc.expect("at least one block").add(&p.var(self.bias))
    }
}

/// Stack of [`Linear`] layers with ReLU between them and no activation
/// after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        inputs: &[usize],
        widths: &[usize],
    ) -> Self {
        assert!(!widths.is_empty());
        let mut layers = Vec::with_capacity(widths.len());
        layers.push(Linear::new(
            store,
            rng,
            &format!("{name}.0"),
            inputs,
            widths[0],
        ));
        for (i, w) in widths.windows(2).enumerate() {
            layers.push(Linear::new(
                store,
                rng,
                &format!("{name}.{}", i + 1),
                &[w[0]],
                w[1],
            ));
        }
        Mlp { layers }
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn last(&self) -> &Linear {
        self.layers.last().expect("non-empty")
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, inputs: &[Var<'g>]) -> Result<Var<'g>> {
        let mut x = self.layers[0].forward(p, inputs)?;
        for layer in &self.layers[1..] {
            x = layer.forward(p, &[x.relu()])?;
        }
        Ok(x)
    }
}
