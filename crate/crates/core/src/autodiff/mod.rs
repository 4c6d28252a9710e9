//! Tape-based reverse-mode differentiation over dense [`Tensor`]s.
//!
//! A [`Graph`] records every operation executed on it as a node. Nodes are
//! appended in execution order, so node ids are already a topological
//! order and [`Graph::backward`] walks them in reverse exactly once.
//!
//! ```
//! use dproto::autodiff::Graph;
//! use dproto::Tensor;
//!
//! let g = Graph::new();
//! let x = g.leaf(Tensor::vector(vec![1.0, 2.0]), true);
//! let loss = g.sum(g.square(x));
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0]);
//! ```
//!
//! Graphs are single-use: build a fresh one for every forward pass.

mod gradcheck;
pub mod kernels;
mod ops;

use std::cell::{Cell, Ref, RefCell};
use std::sync::Arc;

pub use gradcheck::{gradient_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeometry;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Recorded operation with whatever context its backward pass needs.
enum Op {
    Leaf,
    /// Node that no gradient flows through.
    Detached,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    ScaleChannels {
        mask: Var,
        input: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        input: Var,
        rows: usize,
        cols: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        out_c: usize,
        /// Unfolded input; empty for pointwise convolutions.
        cols: Vec<f64>,
    },
    Relu(Var),
    Ln(Var),
    Square(Var),
    Abs(Var),
    GlobalAvgPool {
        input: Var,
        spatial: usize,
        channels: usize,
    },
    Upsample {
        input: Var,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
    Sum(Var),
    Mean(Var),
    /// Gradient is routed to the recorded flat input indices.
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    SqDist(Var, Var),
    PairwiseSqDist {
        z: Var,
        p: Var,
        dim: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
        classes: usize,
    },
    MaskedGap {
        features: Var,
        masks: Arc<Vec<f64>>,
        selection: Vec<usize>,
        spatial: usize,
        channels: usize,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single forward pass recorded for reverse-mode differentiation.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    track_kinks: bool,
    kink_hash: Cell<u64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            track_kinks: false,
            kink_hash: Cell::new(FNV_OFFSET),
        }
    }

    /// A graph that fingerprints every piecewise-linear branch decision
    /// (ReLU signs, max/min winners, |x| signs) taken during the forward.
    pub fn with_kink_tracking() -> Self {
        Graph {
            track_kinks: true,
            ..Graph::new()
        }
    }

    /// Fingerprint of branch decisions; equal fingerprints mean two forward
    /// passes lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        self.kink_hash.get()
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        self.push_node(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        })
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Borrow of a node's value. Drop it before recording further ops.
    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    fn push_node(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// Records an op result. The op context is dropped when no input
    /// requires a gradient.
    fn record(&self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.0].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Detached };
        self.push_node(Node {
            value,
            op,
            requires_grad,
        })
    }

    fn note_kinks(&self, bits: impl Iterator<Item = u64>) {
        if !self.track_kinks {
            return;
        }
        let mut h = self.kink_hash.get();
        for b in bits {
            h ^= b;
            h = h.wrapping_mul(FNV_PRIME);
        }
        // separator so that concatenated patterns hash differently
        h ^= 0xff;
        self.kink_hash.set(h.wrapping_mul(FNV_PRIME));
    }

    /// Computes d(loss)/d(leaf) for every leaf that requires a gradient.
    ///
    /// Only leaf gradients are retained; intermediate gradients are
    /// released as soon as they have been propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_node = &nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        if !loss_node.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf | Op::Detached) {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            ops::backward_node(&nodes, node, &node.value, &grad, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` if it does not require one or the loss
    /// does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a leaf, zero-filled when the loss does not depend on it.
    pub fn get_or_zero(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
