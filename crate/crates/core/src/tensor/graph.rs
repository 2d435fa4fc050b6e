//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter the
//! graph by name; only names registered as tracked become differentiable
//! leaves, everything else is a constant. Frozen weights therefore receive no
//! gradient at all rather than a gradient that is later discarded.

use std::collections::{BTreeMap, BTreeSet};

use super::Mat;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    Softmax {
        input: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<(usize, usize)>,
        probs: Mat,
    },
    WeightedSum {
        x: NodeId,
        weights: Mat,
    },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Which named parameters are differentiable in a graph.
#[derive(Clone, Debug, Default)]
pub enum Tracking {
    #[default]
    Nothing,
    Names(BTreeSet<String>),
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    tracking: Tracking,
    param_leaves: BTreeMap<String, NodeId>,
}

impl Graph {
    /// A graph in which no parameter is differentiable.
    pub fn inference() -> Self {
        Self::default()
    }

    pub fn tracking(names: &BTreeSet<String>) -> Self {
        Self {
            tracking: Tracking::Names(names.clone()),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input that is not a named parameter (used for
    /// input-gradient probes in tests).
    pub fn variable(&mut self, value: Mat) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Looks up a named parameter. Repeated lookups of the same name share a
    /// single leaf, so gradients from every use accumulate.
    ///
    /// Panics if the store has no such parameter; module code only asks for
    /// names it registered itself.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        if let Some(&id) = self.param_leaves.get(name) {
            return id;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not registered"))
            .clone();
        let tracked = match &self.tracking {
            Tracking::Nothing => false,
            Tracking::Names(set) => set.contains(name),
        };
        let id = self.push(value, Op::Leaf, tracked);
        self.param_leaves.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Broadcast-adds the `1 × cols` node `row` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.value(a).add_row(self.value(row));
        let ng = self.ng(a) || self.ng(row);
        self.push(v, Op::AddRow(a, row), ng)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(v, Op::Gelu(a), ng)
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked
    /// out before normalization.
    pub fn softmax(&mut self, input: NodeId, causal: bool) -> NodeId {
        let x = self.value(input);
        let mut out = Mat::zeros(x.rows(), x.cols());
        for r in 0..x.rows() {
            let limit = if causal {
                (r + 1).min(x.cols())
            } else {
                x.cols()
            };
            softmax_into(&x.row(r)[..limit], &mut out.row_mut(r)[..limit]);
        }
        let ng = self.ng(input);
        self.push(out, Op::Softmax { input }, ng)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        assert_eq!(g.shape(), (1, cols), "layer norm gamma shape");
        assert_eq!(b.shape(), (1, cols), "layer norm beta shape");
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g.get(0, c) + b.get(0, c));
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice_cols(start, len);
        let ng = self.ng(x);
        self.push(v, Op::SliceCols { x, start }, ng)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(x).slice_rows(start, len);
        let ng = self.ng(x);
        self.push(v, Op::SliceRows { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::concat_cols(&mats);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::concat_rows(&mats);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut out = Mat::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(id));
        }
        let ng = self.ng(table);
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Mean next-token cross-entropy over `(row, target id)` pairs, as a
    /// `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[(usize, usize)]) -> NodeId {
        assert!(!targets.is_empty(), "cross entropy over zero targets");
        let l = self.value(logits);
        let mut probs = Mat::zeros(l.rows(), l.cols());
        let mut total = 0.0;
        for &(row, target) in targets {
            softmax_into(l.row(row), probs.row_mut(row));
            total -= log_softmax_at(l.row(row), target);
        }
        let v = Mat::from_vec(1, 1, vec![total / targets.len() as f64]);
        let ng = self.ng(logits);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// `Σ x ⊙ weights` as a `1 × 1` node.
    pub fn weighted_sum(&mut self, x: NodeId, weights: Mat) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.shape(), weights.shape(), "weighted_sum shape mismatch");
        let s = xv
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let ng = self.ng(x);
        self.push(
            Mat::from_vec(1, 1, vec![s]),
            Op::WeightedSum { x, weights },
            ng,
        )
    }

    /// Back-propagates from a `1 × 1` node.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let params = self
            .param_leaves
            .iter()
            .filter(|(_, id)| self.nodes[id.0].needs_grad)
            .filter_map(|(name, id)| grads[id.0].clone().map(|g| (name.clone(), g)))
            .collect();
        Gradients {
            params,
            nodes: grads,
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |id: NodeId, delta: Mat| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(*b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    acc(*a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    acc(*b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.ng(*row) {
                    let mut s = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in s.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*row, s);
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = Mat::from_vec(
                    x.rows(),
                    x.cols(),
                    x.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| gv * gelu_grad(xv))
                        .collect(),
                );
                acc(*a, d);
            }
            Op::Softmax { input, .. } => {
                let y = &node.value;
                let mut d = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - dot);
                    }
                }
                acc(*input, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma);
                let (rows, cols) = xhat.shape();
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = Mat::zeros(1, cols);
                    let mut db = Mat::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let gv = g.get(r, c);
                            dg.data_mut()[c] += gv * xhat.get(r, c);
                            db.data_mut()[c] += gv;
                        }
                    }
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                if self.ng(*x) {
                    let n = cols as f64;
                    let mut dx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let dxhat: Vec<f64> =
                            (0..cols).map(|c| g.get(r, c) * gam.get(0, c)).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dxhat
                            .iter()
                            .enumerate()
                            .map(|(c, d)| d * xhat.get(r, c))
                            .sum::<f64>()
                            / n;
                        for c in 0..cols {
                            dx.set(
                                r,
                                c,
                                inv_std[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx),
                            );
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let mut d = Mat::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, d);
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let mut d = Mat::zeros(src.rows(), src.cols());
                for r in 0..g.rows() {
                    d.row_mut(start + r).copy_from_slice(g.row(r));
                }
                acc(*x, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.ng(p) {
                        acc(p, g.slice_cols(offset, w));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows();
                    if self.ng(p) {
                        acc(p, g.slice_rows(offset, h));
                    }
                    offset += h;
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut d = Mat::zeros(t.rows(), t.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (o, v) in d.row_mut(id).iter_mut().zip(g.row(i)) {
                        *o += v;
                    }
                }
                acc(*table, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let scale = g.get(0, 0) / targets.len() as f64;
                let mut d = Mat::zeros(probs.rows(), probs.cols());
                for &(row, target) in targets {
                    for (o, p) in d.row_mut(row).iter_mut().zip(probs.row(row)) {
                        *o += p * scale;
                    }
                    d.data_mut()[row * probs.cols() + target] -= scale;
                }
                acc(*logits, d);
            }
            Op::WeightedSum { x, weights } => acc(*x, weights.scale(g.get(0, 0))),
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    params: BTreeMap<String, Mat>,
    nodes: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of a tracked parameter; `None` for constants and frozen
    /// parameters.
    pub fn param(&self, name: &str) -> Option<&Mat> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Mat> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Mat> {
        self.params
    }

    pub fn node(&self, id: NodeId) -> Option<&Mat> {
        self.nodes.get(id.0).and_then(Option::as_ref)
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn log_softmax_at(x: &[f64], idx: usize) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    x[idx] - lse
}
