//! Append-only operation graph with reverse-mode differentiation.
//!
//! Nodes are pushed in evaluation order, so append order is already a
//! topological order and [`Graph::backward`] simply walks the node list in
//! reverse, accumulating vector-Jacobian products into each input.

use super::{
    cross_entropy_with_probs, gelu, gelu_grad_scalar, layer_norm_with_stats, matmul, matmul_nt,
    matmul_tn, sigmoid, softmax_rows, NormStats, Tensor,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, stats: NormStats },
    Gelu(NodeId),
    SliceCols { x: NodeId, start: usize },
    SliceRows { x: NodeId, start: usize },
    ConcatCols(Vec<NodeId>),
    GatherRows { x: NodeId, rows: Vec<usize> },
    MaskRows { x: NodeId, token: NodeId, mask: Vec<bool> },
    GroupMeanRows { x: NodeId, group: usize },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Tensor },
    BceLogits { logits: NodeId, targets: Vec<f64> },
    Sum(NodeId),
    Mean(NodeId),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every trainable leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Removes and returns the gradient for `id`, or zeros shaped like `like`.
    pub fn take_or_zeros(&mut self, id: NodeId, like: &Tensor) -> Tensor {
        self.grads
            .get_mut(id.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn add_into(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Places a tensor on the graph; it is trainable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "add")?;
        let mut v = self.value(a).clone();
        v.set_requires_grad(false);
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x += y;
        }
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let n = self.value(a).cols();
        if self.value(bias).len() != n {
            return Err(Error::Dimension(format!(
                "add_row: bias {:?} against rows of {:?}",
                self.value(bias).shape(),
                self.value(a).shape()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(a).clone();
        v.set_requires_grad(false);
        for row in v.data_mut().chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let mut v = self.value(a).clone();
        v.set_requires_grad(false);
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.set_requires_grad(false);
        v.data_mut().iter_mut().for_each(|x| *x *= c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (v, stats) =
            layer_norm_with_stats(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, stats }, &[x, gamma, beta]))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = gelu(self.value(a));
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = self.value(x);
        let (r, c) = (src.rows(), src.cols());
        if len == 0 || start + len > c {
            return Err(Error::Index(format!("columns {start}..{} of width {c}", start + len)));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let v = Tensor::matrix(r, len, out)?;
        Ok(self.push(v, Op::SliceCols { x, start }, &[x]))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let src = self.value(x);
        let (r, c) = (src.rows(), src.cols());
        if len == 0 || start + len > r {
            return Err(Error::Index(format!("rows {start}..{} of {r}", start + len)));
        }
        let v = Tensor::matrix(len, c, src.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(v, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or_else(|| Error::EmptyInput("concat_cols".into()))?;
        let r = self.value(*first).rows();
        if let Some(p) = parts.iter().find(|p| self.value(**p).rows() != r) {
            return Err(Error::Dimension(format!(
                "concat_cols: {} rows against {r}",
                self.value(*p).rows()
            )));
        }
        let width: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        let v = Tensor::matrix(r, width, out)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let src = self.value(x);
        let (r, c) = (src.rows(), src.cols());
        if rows.is_empty() {
            return Err(Error::EmptyInput("gather_rows with no rows".into()));
        }
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index(format!("row {i} of {r}")));
            }
            out.extend_from_slice(src.row(i));
        }
        let v = Tensor::matrix(rows.len(), c, out)?;
        Ok(self.push(v, Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Replaces every row `i` with `mask[i]` set by the `token` vector.
    pub fn mask_rows(&mut self, x: NodeId, token: NodeId, mask: &[bool]) -> Result<NodeId> {
        let src = self.value(x);
        let (r, c) = (src.rows(), src.cols());
        if mask.len() != r || self.value(token).len() != c {
            return Err(Error::Dimension(format!(
                "mask_rows: {} flags and token {:?} against {:?}",
                mask.len(),
                self.value(token).shape(),
                src.shape()
            )));
        }
        let tok = self.value(token).data().to_vec();
        let mut v = src.clone();
        v.set_requires_grad(false);
        for (row, &m) in v.data_mut().chunks_mut(c).zip(mask) {
            if m {
                row.copy_from_slice(&tok);
            }
        }
        Ok(self.push(v, Op::MaskRows { x, token, mask: mask.to_vec() }, &[x, token]))
    }

    /// Means of consecutive blocks of `group` rows.
    pub fn group_mean_rows(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let src = self.value(x);
        let (r, c) = (src.rows(), src.cols());
        if group == 0 || r % group != 0 {
            return Err(Error::Dimension(format!("{r} rows do not split into groups of {group}")));
        }
        let mut out = vec![0.0; (r / group) * c];
        for i in 0..r {
            let o = &mut out[(i / group) * c..(i / group + 1) * c];
            for (a, b) in o.iter_mut().zip(src.row(i)) {
                *a += b;
            }
        }
        out.iter_mut().for_each(|v| *v /= group as f64);
        let v = Tensor::matrix(r / group, c, out)?;
        Ok(self.push(v, Op::GroupMeanRows { x, group }, &[x]))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (loss, probs) = cross_entropy_with_probs(self.value(logits), targets)?;
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let loss = super::bce_with_logits(self.value(logits), targets)?;
        let op = Op::BceLogits { logits, targets: targets.to_vec() };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a), &[a])
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !(matches!(n.op, Op::Leaf) && n.requires_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let shaped = |like: &Tensor, data: Vec<f64>| {
            Tensor::new(like.shape().to_vec(), data).expect("gradient shape follows its input")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], matmul_nt(g, self.value(*b)));
                }
                if self.wants(*b) {
                    add_into(&mut grads[b.0], matmul_tn(self.value(*a), g));
                }
            }
            Op::Transpose(a) => add_into(&mut grads[a.0], g.transpose()),
            Op::Add(a, b) => {
                for x in [a, b] {
                    if self.wants(*x) {
                        add_into(&mut grads[x.0], shaped(self.value(*x), g.data().to_vec()));
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], shaped(self.value(*a), g.data().to_vec()));
                }
                if self.wants(*bias) {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    add_into(&mut grads[bias.0], shaped(self.value(*bias), db));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let d = g.data().iter().zip(bv).map(|(g, b)| g * b).collect();
                    add_into(&mut grads[a.0], shaped(self.value(*a), d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(av).map(|(g, a)| g * a).collect();
                    add_into(&mut grads[b.0], shaped(self.value(*b), d));
                }
            }
            Op::Scale(a, c) => {
                let d = g.data().iter().map(|v| v * c).collect();
                add_into(&mut grads[a.0], shaped(self.value(*a), d));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        d[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_into(&mut grads[a.0], shaped(self.value(*a), d));
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let dim = g.cols();
                let gam = self.value(*gamma).data();
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut dg = vec![0.0; dim];
                    let mut db = vec![0.0; dim];
                    for (r, gr) in g.data().chunks(dim).enumerate() {
                        let xh = &stats.xhat[r * dim..(r + 1) * dim];
                        for j in 0..dim {
                            dg[j] += gr[j] * xh[j];
                            db[j] += gr[j];
                        }
                    }
                    if self.wants(*gamma) {
                        add_into(&mut grads[gamma.0], shaped(self.value(*gamma), dg));
                    }
                    if self.wants(*beta) {
                        add_into(&mut grads[beta.0], shaped(self.value(*beta), db));
                    }
                }
                if self.wants(*x) {
                    let mut d = vec![0.0; g.len()];
                    let n = dim as f64;
                    for (r, gr) in g.data().chunks(dim).enumerate() {
                        let xh = &stats.xhat[r * dim..(r + 1) * dim];
                        let dxh: Vec<f64> = gr.iter().zip(gam).map(|(g, w)| g * w).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let inv = stats.inv_std[r];
                        for j in 0..dim {
                            d[r * dim + j] = inv / n * (n * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                    add_into(&mut grads[x.0], shaped(self.value(*x), d));
                }
            }
            Op::Gelu(a) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| g * gelu_grad_scalar(x))
                    .collect();
                add_into(&mut grads[a.0], shaped(self.value(*a), d));
            }
            Op::SliceCols { x, start } => {
                let src = self.value(*x);
                let (c, w) = (src.cols(), g.cols());
                let mut d = vec![0.0; src.len()];
                for r in 0..g.rows() {
                    d[r * c + start..r * c + start + w].copy_from_slice(g.row(r));
                }
                add_into(&mut grads[x.0], shaped(src, d));
            }
            Op::SliceRows { x, start } => {
                let src = self.value(*x);
                let c = src.cols();
                let mut d = vec![0.0; src.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g.data());
                add_into(&mut grads[x.0], shaped(src, d));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let src = self.value(*p);
                    let w = src.cols();
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(src.len());
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[off..off + w]);
                        }
                        add_into(&mut grads[p.0], shaped(src, d));
                    }
                    off += w;
                }
            }
            Op::GatherRows { x, rows } => {
                let src = self.value(*x);
                let c = src.cols();
                let mut d = vec![0.0; src.len()];
                for (k, &i) in rows.iter().enumerate() {
                    for (a, b) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                        *a += b;
                    }
                }
                add_into(&mut grads[x.0], shaped(src, d));
            }
            Op::MaskRows { x, token, mask } => {
                let c = g.cols();
                if self.wants(*x) {
                    let mut d = g.data().to_vec();
                    for (row, &m) in d.chunks_mut(c).zip(mask) {
                        if m {
                            row.iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                    add_into(&mut grads[x.0], shaped(self.value(*x), d));
                }
                if self.wants(*token) {
                    let mut d = vec![0.0; c];
                    for (row, &m) in g.data().chunks(c).zip(mask) {
                        if m {
                            d.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    }
                    add_into(&mut grads[token.0], shaped(self.value(*token), d));
                }
            }
            Op::GroupMeanRows { x, group } => {
                let src = self.value(*x);
                let c = src.cols();
                let mut d = vec![0.0; src.len()];
                for i in 0..src.rows() {
                    let gr = g.row(i / group);
                    for (a, b) in d[i * c..(i + 1) * c].iter_mut().zip(gr) {
                        *a = b / *group as f64;
                    }
                }
                add_into(&mut grads[x.0], shaped(src, d));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.data()[0] / targets.len() as f64;
                let k = probs.cols();
                let mut d = probs.data().to_vec();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * k + t] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                add_into(&mut grads[logits.0], shaped(self.value(*logits), d));
            }
            Op::BceLogits { logits, targets } => {
                let scale = g.data()[0] / targets.len() as f64;
                let d = self
                    .value(*logits)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| (sigmoid(z) - y) * scale)
                    .collect();
                add_into(&mut grads[logits.0], shaped(self.value(*logits), d));
            }
            Op::Sum(a) => {
                let src = self.value(*a);
                add_into(&mut grads[a.0], Tensor::full(src.shape(), g.data()[0]));
            }
            Op::Mean(a) => {
                let src = self.value(*a);
                add_into(&mut grads[a.0], Tensor::full(src.shape(), g.data()[0] / src.len() as f64));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap().with_grad());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn matmul_sum_gradient_is_xt_ones() {
        let mut g = Graph::new();
        let xt = Tensor::matrix(2, 3, vec![1., -2., 3., 0.5, 4., -1.]).unwrap();
        let x = g.constant(xt.clone());
        let w = g.leaf(Tensor::matrix(3, 2, vec![0.1; 6]).unwrap().with_grad());
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let oracle = matmul(&xt.transpose(), &Tensor::full(&[2, 2], 1.0)).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), oracle.data());
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]).with_grad());
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn reused_node_accumulates() {
        // loss = sum(x * x) -> 2x
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.5, -2.0]).unwrap().with_grad());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, -4.0]);
    }
}
