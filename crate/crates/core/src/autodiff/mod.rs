//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! A [`Tape`] records every operation in creation order. [`Var`] is a cheap
//! copyable handle into it. `backward` walks the tape in strict reverse
//! creation order, so the recorded graph is always a DAG in topological order.
//!
//! Parameters live outside the tape in a [`ParamStore`]; `Tape::param` copies
//! their current values in as leaves and `backward_into` adds the resulting
//! gradients back onto the store. Gradients accumulate until `zero_grad`.

mod backward;
pub mod gradcheck;
mod ops;

use std::cell::RefCell;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug)]
pub(crate) enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale {
        x: usize,
        factor: f64,
    },
    Shift(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Sum {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Mean {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    /// Output element `o` is input element `argmax[o]`.
    Max {
        x: usize,
        argmax: Vec<usize>,
    },
    Reshape(usize),
    /// `out[o] = x[map[o]]`: broadcast, permute, narrow and embedding lookups.
    Gather {
        x: usize,
        map: Vec<usize>,
    },
    Concat {
        inputs: Vec<usize>,
        outer: usize,
        lens: Vec<usize>,
        inner: usize,
    },
    Softmax(usize),
    LayerNorm {
        x: usize,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub steps: usize,
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub taps: usize,
    pub dilation: usize,
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub requires_grad: bool,
}

/// Operation recorder for one forward/backward pass.
///
/// Not `Sync`: a tape belongs to one thread. Independent runs build
/// independent tapes.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_cache: RefCell<HashMap<(u64, ParamId), usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&[f64]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Leaf holding a copy of `t`; tracked when `t.requires_grad()`.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: None },
            t.requires_grad(),
        )
    }

    /// Untracked leaf.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: None },
            false,
        )
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Var<'_>> {
        Ok(self.constant(&Tensor::zeros(shape)?))
    }

    /// Leaf for a stored parameter. Repeated calls within one tape return the
    /// same node (per store instance), so a weight shared across time steps
    /// is one leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        let key = (store.key(), id);
        if let Some(&node) = self.param_cache.borrow().get(&key) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let p = store.get(id);
        let var = self.push(
            p.tensor.shape().to_vec(),
            p.tensor.data().to_vec(),
            Op::Leaf { param: Some(id) },
            p.trainable,
        );
        self.param_cache.borrow_mut().insert(key, var.id);
        var
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if nodes[id].requires_grad {
                backward::propagate(&nodes, id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs `backward` and adds parameter gradients onto `store`.
    pub fn backward_into(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        let nodes = self.nodes.borrow();
        for (node, grad) in nodes.iter().zip(&grads.grads) {
            if let (Op::Leaf { param: Some(pid) }, Some(g)) = (&node.op, grad) {
                store.tensor_mut(*pid).accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// First recorded node holding a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        let nodes = self.nodes.borrow();
        for (id, node) in nodes.iter().enumerate() {
            if let Some(pos) = node.value.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "node {id} ({}) element {pos} is {}",
                    node.op.name(),
                    node.value[pos]
                )));
            }
        }
        Ok(())
    }
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale { .. } => "scale",
            Op::Shift(..) => "shift",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Max { .. } => "max",
            Op::Reshape(..) => "reshape",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "conv1d",
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn data(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Scalar value; errors unless the variable holds exactly one element.
    pub fn item(&self) -> Result<f64> {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        if v.len() != 1 {
            return Err(Error::shape(format!(
                "item() on shape {:?}",
                nodes[self.id].shape
            )));
        }
        Ok(v[0])
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes hold consistent shapes")
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }
}
