//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive in execution order. Because each node
//! only references earlier nodes, replaying the record backwards is a valid
//! topological order: each node is visited once and gradient contributions
//! from fan-out are summed into the parent's accumulator.

pub mod conv;
mod ops;

use std::collections::{HashMap, HashSet};

pub use conv::ConvGeom;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Bmm(ops::BmmSpec),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Abs(Var),
    Softplus(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    BroadcastChannels(Var),
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
}

/// Differentiation tape. Single writer; build one per forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<(u64, ParamId), Var>,
    frozen: HashSet<u64>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            frozen: HashSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Var(self.values.len() - 1)
    }

    /// Leaf value; gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable parameter from `store`. Repeated requests for the same
    /// parameter return the same leaf, so shared weights accumulate every use.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&(store.uid(), id)) {
            return v;
        }
        let trainable = !self.frozen.contains(&store.uid());
        let v = self.leaf(store.value(id).clone(), trainable);
        self.params.insert((store.uid(), id), v);
        v
    }

    /// Read parameters of `store` as constants from now on: gradients still
    /// flow through them to their inputs but are not computed for the weights.
    pub fn freeze(&mut self, store: &ParamStore<T>) {
        self.frozen.insert(store.uid());
    }

    /// Parameters of `store` read during this forward pass.
    pub fn params_used(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self
            .params
            .keys()
            .filter(|(uid, _)| *uid == store.uid())
            .map(|&(_, id)| id)
            .collect();
        ids.sort();
        ids
    }

    pub(crate) fn param_var(&self, store: &ParamStore<T>, id: ParamId) -> Option<Var> {
        self.params.get(&(store.uid(), id)).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Accumulated gradient of `v` after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].as_ref().map(|g| {
            Tensor::new(self.values[v.0].shape(), g.clone()).expect("grad shape matches value")
        })
    }

    pub(crate) fn grad_slice(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Reverse sweep from a single-element `loss`, adding `d loss / d v` into
    /// the accumulator of every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        if !self.requires[loss.0] {
            return Ok(());
        }
        {
            let seed = self.grads[loss.0].get_or_insert_with(|| vec![T::zero()]);
            seed[0] = seed[0] + T::one();
        }
        for i in (0..=loss.0).rev() {
            if !self.requires[i] || self.grads[i].is_none() {
                continue;
            }
            let (lo, hi) = self.grads.split_at_mut(i);
            let g = hi[0].as_deref().expect("checked above");
            ops::backward_node(&self.ops[i], i, g, &self.values, &self.requires, lo);
        }
        Ok(())
    }

    /// Drop all gradient accumulators.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }
}
