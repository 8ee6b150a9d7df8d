//! Named parameter storage and per-forward binding onto a [`Graph`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Gradients, Graph, Var};
use super::tensor::{Real, Tensor};
use crate::error::{contract_err, Result};

/// Learning-rate group. Encoder-analog parameters (the stand-ins for the
/// pretrained backbone) train at the base rate; everything initialized for
/// this task trains at the new-module rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Base,
    NewModule,
}

impl ParamGroup {
    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Base => "base",
            ParamGroup::NewModule => "new",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: BTreeMap<String, ParamId>,
}

/// Standard deviation of the truncated-normal projection init.
pub const INIT_STD: f64 = 0.02;

/// Normal(0, std) truncated to ±2·std by rejection.
pub fn trunc_normal<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            break T::c(x);
        }
    })
}

pub fn normal<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(shape, |_| T::c(normal.sample(rng)))
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        id
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

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Parameters in lexicographic name order.
    pub fn sorted(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.index.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces a value by name, checking the shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .lookup(name)
            .ok_or_else(|| contract_err!("unknown parameter {name}"))?;
        let slot = &mut self.params[id.0].value;
        if slot.shape() != value.shape() {
            return Err(contract_err!(
                "parameter {name}: expected shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            ));
        }
        *slot = value;
        Ok(())
    }
}

/// Binds store parameters onto a graph lazily, so only the parameters a
/// forward pass touches become graph leaves.
pub struct Session<'g, T> {
    graph: &'g Graph<T>,
    store: &'g ParamStore<T>,
    bound: RefCell<Vec<Option<Var<'g, T>>>>,
    trainable: bool,
}

impl<'g, T: Real> Session<'g, T> {
    pub fn new(graph: &'g Graph<T>, store: &'g ParamStore<T>) -> Self {
        Self::with_grad(graph, store, true)
    }

    /// A session whose parameters never request gradients (inference).
    pub fn frozen(graph: &'g Graph<T>, store: &'g ParamStore<T>) -> Self {
        Self::with_grad(graph, store, false)
    }

    fn with_grad(graph: &'g Graph<T>, store: &'g ParamStore<T>, trainable: bool) -> Self {
        Session {
            graph,
            store,
            bound: RefCell::new(vec![None; store.len()]),
            trainable,
        }
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn store(&self) -> &'g ParamStore<T> {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'g, T> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            self.graph
                .leaf(self.store.value(id).clone(), self.trainable)
                .label(&self.store.get(id).name)
        })
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'g, T> {
        self.graph.constant(value)
    }

    /// Per-parameter gradients; `None` for parameters the pass never touched.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .borrow()
            .iter()
            .map(|v| v.and_then(|v| grads.take(v)))
            .collect()
    }
}
