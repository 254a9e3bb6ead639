use std::collections::HashMap;

use super::kernels::{SampleDims, Window};
use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Exp,
    Log,
    Sigmoid,
    Relu,
    Gelu,
}

/// Producing operator of a node, with whatever the backward rule needs.
#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    AddScalar {
        a: Var,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Reshape {
        a: Var,
    },
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Im2Col {
        a: Var,
        window: Window,
    },
    GridSample {
        input: Var,
        grid: Var,
        dims: SampleDims,
    },
    AvgPool {
        a: Var,
        window: Window,
    },
    GlobalAvgPool {
        a: Var,
    },
    Upsample {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    LogSoftmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Nll {
        a: Var,
        labels: Vec<u8>,
        count: usize,
    },
    KlDiv {
        log_q: Var,
        log_p: Var,
        mask: Vec<bool>,
        count: usize,
    },
    Sum {
        a: Var,
    },
    Clamp {
        a: Var,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Unary { kind, .. } => match kind {
                UnaryKind::Exp => "exp",
                UnaryKind::Log => "log",
                UnaryKind::Sigmoid => "sigmoid",
                UnaryKind::Relu => "relu",
                UnaryKind::Gelu => "gelu",
            },
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Im2Col { .. } => "im2col",
            Op::GridSample { .. } => "grid_sample",
            Op::AvgPool { .. } => "avg_pool",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Upsample { .. } => "upsample_bilinear",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Nll { .. } => "nll",
            Op::KlDiv { .. } => "kl_div",
            Op::Sum { .. } => "sum",
            Op::Clamp { .. } => "clamp",
        }
    }

    pub(crate) fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::MatMul { a, b } | Op::BatchMatMul { a, b, .. } => {
                vec![*a, *b]
            }
            Op::GridSample { input, grid, .. } => vec![*input, *grid],
            Op::LayerNorm { a, gamma, beta, .. } => vec![*a, *gamma, *beta],
            Op::KlDiv { log_q, log_p, .. } => vec![*log_q, *log_p],
            Op::Scale { a, .. }
            | Op::AddScalar { a }
            | Op::Unary { a, .. }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Im2Col { a, .. }
            | Op::AvgPool { a, .. }
            | Op::GlobalAvgPool { a }
            | Op::Upsample { a }
            | Op::Softmax { a, .. }
            | Op::LogSoftmax { a, .. }
            | Op::Nll { a, .. }
            | Op::Sum { a }
            | Op::Clamp { a, .. } => vec![*a],
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) needs_grad: bool,
    pub(crate) param: Option<ParamId>,
}

/// A single-use computation graph.
///
/// Nodes are appended in creation order, so parents always precede their
/// children and reverse creation order is a valid topological order.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    trainable: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph whose parameter leaves receive gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            trainable: true,
        }
    }

    /// A forward-only graph: parameters are bound as constants.
    pub fn inference() -> Self {
        Self {
            trainable: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.parents()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false, None)
    }

    /// Leaf that receives a gradient without being stored in a [`ParamStore`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true, None)
    }

    /// Binds a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let trainable = self.trainable;
        let v = self.push_raw(store.get(id).clone(), Op::Leaf, trainable, Some(id));
        self.bound.insert(id, v);
        v
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_raw(value, op, needs_grad, None)
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Every node is visited at most once, in reverse creation order.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Some(id) = node.param {
                out.accumulate(id, g);
                continue;
            }
            if let Op::Leaf = node.op {
                out.accumulate_var(Var(i), g);
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            out.visited += 1;
        }
        Ok(out)
    }

    pub(crate) fn accumulate(
        &self,
        grads: &mut [Option<Vec<f64>>],
        target: Var,
        op: &'static str,
        contribution: Vec<f64>,
    ) -> Result<()> {
        if !self.nodes[target.0].needs_grad {
            return Ok(());
        }
        if contribution.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure { op: op.to_string() });
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
        Ok(())
    }
}
