//! Reverse-mode differentiation over a small, fixed set of matrix ops.
//!
//! A [`Graph`] records nodes in creation order. Every op only references
//! earlier nodes, so the graph is acyclic by construction and the backward
//! pass is a single sweep in reverse creation order.
//!
//! ```
//! use kep_core::numerics::{Graph, Tensor2};
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor2::from_rows(&[[1.0, 2.0]]).unwrap());
//! let w = g.leaf(Tensor2::from_rows(&[[3.0], [4.0]]).unwrap());
//! let y = g.matmul(x, w);
//! assert_eq!(g.value(y).as_slice(), &[11.0]);
//!
//! let grads = g.backward(y, Tensor2::from_rows(&[[1.0]]).unwrap());
//! assert_eq!(grads.get(w).unwrap().as_slice(), &[1.0, 2.0]);
//! ```

use crate::error::Result;
use crate::numerics::tensor::{logsumexp_unchecked, norm, soft_weights, SoftSign, Tensor2, NORM_EPS};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// Elementwise sum of equal shapes, or a 1 x c row broadcast over rows.
    Add(NodeId, NodeId),
    /// Row `i` of the output is row `rows[i]` of the table.
    Gather {
        table: NodeId,
        rows: Vec<usize>,
    },
    /// Row `i` of the output is the mean of the table rows in `groups[i]`.
    MeanPool {
        table: NodeId,
        groups: Vec<Vec<usize>>,
    },
    Tanh(NodeId),
    /// Row-wise `x / ‖x‖`; keeps the input norms for the backward pass.
    L2NormalizeRows {
        input: NodeId,
        norms: Vec<f64>,
    },
    Scale(NodeId, f64),
    /// Row-wise smoothed max/min, producing an r x 1 column.
    LogSumExpRows {
        input: NodeId,
        sign: SoftSign,
        tau: f64,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor2,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor2>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor2> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Take ownership of a node's gradient; absent gradients become zeros of
    /// the given shape.
    pub fn take_or_zeros(&mut self, id: NodeId, shape: (usize, usize)) -> Tensor2 {
        self.grads[id.0]
            .take()
            .unwrap_or_else(|| Tensor2::zeros(shape.0, shape.1))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor2) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor2) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = va.clone();
        if va.shape() == vb.shape() {
            out.add_assign(vb);
        } else {
            assert!(
                vb.rows() == 1 && vb.cols() == va.cols(),
                "add: cannot broadcast {:?} onto {:?}",
                vb.shape(),
                va.shape()
            );
            for r in 0..out.rows() {
                for (o, b) in out.row_mut(r).iter_mut().zip(vb.as_slice()) {
                    *o += b;
                }
            }
        }
        self.push(Op::Add(a, b), out)
    }

    pub fn gather(&mut self, table: NodeId, rows: Vec<usize>) -> NodeId {
        let v = self.value(table).select_rows(&rows);
        self.push(Op::Gather { table, rows }, v)
    }

    /// Panics on an empty group.
    pub fn mean_pool(&mut self, table: NodeId, groups: Vec<Vec<usize>>) -> NodeId {
        let t = self.value(table);
        let mut out = Tensor2::zeros(groups.len(), t.cols());
        for (i, g) in groups.iter().enumerate() {
            assert!(!g.is_empty(), "mean_pool: empty group {i}");
            let inv = 1.0 / g.len() as f64;
            let o = out.row_mut(i);
            for &r in g {
                for (oj, tj) in o.iter_mut().zip(t.row(r)) {
                    *oj += tj * inv;
                }
            }
        }
        self.push(Op::MeanPool { table, groups }, out)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.as_mut_slice() {
            *x = x.tanh();
        }
        self.push(Op::Tanh(a), v)
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        let mut norms = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let n = norm(row);
            if n.is_nan() || n <= NORM_EPS {
                return Err(Error::DegenerateEmbedding { norm: n });
            }
            for x in row.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        Ok(self.push(Op::L2NormalizeRows { input: a, norms }, v))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scaled(s);
        self.push(Op::Scale(a, s), v)
    }

    /// Panics on zero columns or a non-positive temperature.
    pub fn logsumexp_rows(&mut self, a: NodeId, sign: SoftSign, tau: f64) -> NodeId {
        let t = self.value(a);
        assert!(t.cols() > 0 && tau > 0.0, "logsumexp_rows: empty rows or τ ≤ 0");
        let v = Tensor2::from_fn(t.rows(), 1, |r, _| {
            logsumexp_unchecked(t.row(r).iter().copied(), sign, tau)
        });
        self.push(Op::LogSumExpRows { input: a, sign, tau }, v)
    }

    /// Propagate `seed` (the gradient of some scalar with respect to
    /// `output`) back to every node that `output` depends on.
    pub fn backward(&self, output: NodeId, seed: Tensor2) -> Gradients {
        assert_eq!(seed.shape(), self.value(output).shape(), "backward seed shape");
        let mut grads: Vec<Option<Tensor2>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let da = upstream.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&upstream);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    let db = if self.value(*b).shape() == upstream.shape() {
                        upstream.clone()
                    } else {
                        upstream.column_sums()
                    };
                    accumulate(&mut grads, *b, db);
                    accumulate(&mut grads, *a, upstream);
                }
                Op::Gather { table, rows } => {
                    let (tr, tc) = self.value(*table).shape();
                    let mut dt = Tensor2::zeros(tr, tc);
                    for (i, &r) in rows.iter().enumerate() {
                        for (d, u) in dt.row_mut(r).iter_mut().zip(upstream.row(i)) {
                            *d += u;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::MeanPool { table, groups } => {
                    let (tr, tc) = self.value(*table).shape();
                    let mut dt = Tensor2::zeros(tr, tc);
                    for (i, g) in groups.iter().enumerate() {
                        let inv = 1.0 / g.len() as f64;
                        for &r in g {
                            for (d, u) in dt.row_mut(r).iter_mut().zip(upstream.row(i)) {
                                *d += u * inv;
                            }
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Tanh(a) => {
                    let mut da = upstream;
                    for (d, y) in da.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        *d *= 1.0 - y * y;
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::L2NormalizeRows { input, norms } => {
                    let y = &node.value;
                    let mut dx = upstream;
                    for (r, &n) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let proj: f64 = yr.iter().zip(dx.row(r)).map(|(a, b)| a * b).sum();
                        for (d, yv) in dx.row_mut(r).iter_mut().zip(yr) {
                            *d = (*d - yv * proj) / n;
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, upstream.scaled(*s));
                }
                Op::LogSumExpRows { input, sign, tau } => {
                    let x = self.value(*input);
                    let mut dx = Tensor2::zeros(x.rows(), x.cols());
                    for r in 0..x.rows() {
                        let w = soft_weights(x.row(r), *sign, *tau);
                        let u = upstream.get(r, 0);
                        for (d, wv) in dx.row_mut(r).iter_mut().zip(w) {
                            *d = u * wv;
                        }
                    }
                    accumulate(&mut grads, *input, dx);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], id: NodeId, g: Tensor2) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
