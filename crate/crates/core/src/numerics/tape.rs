//! Tape-based reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of a forward pass in creation order,
//! which is also a topological order: an op can only reference nodes that
//! already exist. [`Tape::backward`] walks the record once in reverse,
//! accumulating vector-Jacobian products, and adds the result into each
//! node's persistent gradient. Calling backward twice without
//! [`Tape::zero_grads`] therefore doubles the stored gradients, matching
//! a per-minibatch loop that zeroes explicitly between steps.
//!
//! One tape serves one training step; the engine is single-threaded by
//! construction (`Rc` handles, no interior synchronization).

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// A handle to one recorded value; cheap to clone.
#[derive(Clone)]
pub struct Node {
    tape: Tape,
    idx: usize,
}

struct TapeInner {
    values: Vec<Matrix>,
    grads: Vec<Matrix>,
    /// Leaf flag as declared by the caller.
    requires_grad: Vec<bool>,
    /// True if any leaf under this node requires a gradient; gates backward work.
    needs: Vec<bool>,
    ops: Vec<Op>,
}

enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    /// (n x m) + broadcast of a (1 x m) row.
    AddRow(usize, usize),
    Scale(usize, f64),
    /// Matrix scaled by a 1x1 node.
    ScaleByNode(usize, usize),
    Transpose(usize),
    Relu(usize),
    SoftmaxRows(usize),
    MeanRows(usize),
    Sum(usize),
    /// Elementwise sum of same-shape nodes.
    SumN(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    /// Population variance over all entries, as a 1x1 node.
    Variance(usize),
    /// Mean of squared differences over all entries: (pred, target).
    MeanSqError(usize, usize),
    /// Mean negative log-likelihood of rows of logits at the given labels.
    CrossEntropy(usize, Vec<usize>),
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                values: Vec::new(),
                grads: Vec::new(),
                requires_grad: Vec::new(),
                needs: Vec::new(),
                ops: Vec::new(),
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf value; `requires_grad` marks it as a parameter.
    pub fn leaf(&self, value: Matrix, requires_grad: bool) -> Node {
        let idx = {
            let mut t = self.inner.borrow_mut();
            let idx = t.values.len();
            t.grads.push(Matrix::zeros(value.rows(), value.cols()));
            t.values.push(value);
            t.requires_grad.push(requires_grad);
            t.needs.push(requires_grad);
            t.ops.push(Op::Leaf);
            idx
        };
        Node {
            tape: self.clone(),
            idx,
        }
    }

    /// A leaf that never receives a gradient (inputs, targets, frozen weights).
    pub fn constant(&self, value: Matrix) -> Node {
        self.leaf(value, false)
    }

    fn push(&self, value: Matrix, op: Op, parents: &[usize]) -> Node {
        let idx = {
            let mut t = self.inner.borrow_mut();
            let needs = parents.iter().any(|&p| t.needs[p]);
            let idx = t.values.len();
            t.grads.push(Matrix::zeros(value.rows(), value.cols()));
            t.values.push(value);
            t.requires_grad.push(false);
            t.needs.push(needs);
            t.ops.push(op);
            idx
        };
        Node {
            tape: self.clone(),
            idx,
        }
    }

    /// Elementwise sum of same-shape nodes; errors on an empty list.
    pub fn sum_nodes(&self, parts: &[Node]) -> Result<Node> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("sum_nodes over an empty list".into()))?;
        let shape = first.shape();
        let mut value = first.with_value(Matrix::clone);
        for p in &parts[1..] {
            assert!(Rc::ptr_eq(&self.inner, &p.tape.inner), "nodes must share a tape");
            if p.shape() != shape {
                return Err(Error::dimension("sum_nodes", shape, p.shape()));
            }
            p.with_value(|m| value.add_assign(m));
        }
        let idxs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        Ok(self.push(value, Op::SumN(idxs.clone()), &idxs))
    }

    /// Stacks nodes vertically.
    pub fn concat_rows(&self, parts: &[Node]) -> Result<Node> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows over an empty list".into()))?;
        let cols = first.shape().1;
        let mut mats = Vec::with_capacity(parts.len());
        for p in parts {
            assert!(Rc::ptr_eq(&self.inner, &p.tape.inner), "nodes must share a tape");
            if p.shape().1 != cols {
                return Err(Error::dimension("concat_rows", (0, cols), p.shape()));
            }
            mats.push(p.with_value(Matrix::clone));
        }
        let refs: Vec<&Matrix> = mats.iter().collect();
        let value = Matrix::stack_rows(&refs)?;
        let idxs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        Ok(self.push(value, Op::ConcatRows(idxs.clone()), &idxs))
    }

    /// Stacks nodes horizontally.
    pub fn concat_cols(&self, parts: &[Node]) -> Result<Node> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols over an empty list".into()))?;
        let rows = first.shape().0;
        let mut total_cols = 0;
        for p in parts {
            assert!(Rc::ptr_eq(&self.inner, &p.tape.inner), "nodes must share a tape");
            if p.shape().0 != rows {
                return Err(Error::dimension("concat_cols", (rows, 0), p.shape()));
            }
            total_cols += p.shape().1;
        }
        let mut value = Matrix::zeros(rows, total_cols);
        let mut offset = 0;
        for p in parts {
            p.with_value(|m| {
                for r in 0..rows {
                    for c in 0..m.cols() {
                        value.set(r, offset + c, m.get(r, c));
                    }
                }
            });
            offset += p.shape().1;
        }
        let idxs: Vec<usize> = parts.iter().map(|p| p.idx).collect();
        Ok(self.push(value, Op::ConcatCols(idxs.clone()), &idxs))
    }

    /// Propagates d(loss)/d(node) to every node that needs it.
    ///
    /// The loss must be scalar (1x1). Gradients from this pass are added to
    /// whatever the tape already holds; zero first if a fresh pass is wanted.
    pub fn backward(&self, loss: &Node) -> Result<()> {
        assert!(
            Rc::ptr_eq(&self.inner, &loss.tape.inner),
            "loss belongs to another tape"
        );
        let mut t = self.inner.borrow_mut();
        if t.values[loss.idx].shape() != (1, 1) {
            let (r, c) = t.values[loss.idx].shape();
            return Err(Error::Contract(format!(
                "backward requires a scalar (1x1) loss, got {r}x{c}"
            )));
        }

        // Per-call pass buffers keep repeated backward calls additive.
        let mut pass: Vec<Option<Matrix>> = vec![None; loss.idx + 1];
        pass[loss.idx] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.idx).rev() {
            if !t.needs[i] {
                continue;
            }
            let g = match pass[i].take() {
                Some(g) => g,
                None => continue,
            };
            t.apply_backward(i, &g, &mut pass);
            t.grads[i].add_assign(&g);
        }
        Ok(())
    }

    /// Clears every stored gradient.
    pub fn zero_grads(&self) {
        let mut t = self.inner.borrow_mut();
        for g in &mut t.grads {
            g.fill(0.0);
        }
    }
}

impl TapeInner {
    fn accumulate(pass: &mut [Option<Matrix>], idx: usize, delta: &Matrix) {
        match &mut pass[idx] {
            Some(g) => g.add_assign(delta),
            slot @ None => *slot = Some(delta.clone()),
        }
    }

    fn apply_backward(&self, i: usize, g: &Matrix, pass: &mut [Option<Matrix>]) {
        match &self.ops[i] {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.needs[*a] {
                    let da = g.matmul(&self.values[*b].transpose()).expect("shape");
                    Self::accumulate(pass, *a, &da);
                }
                if self.needs[*b] {
                    let db = self.values[*a].transpose().matmul(g).expect("shape");
                    Self::accumulate(pass, *b, &db);
                }
            }
            Op::Add(a, b) => {
                if self.needs[*a] {
                    Self::accumulate(pass, *a, g);
                }
                if self.needs[*b] {
                    Self::accumulate(pass, *b, g);
                }
            }
            Op::AddRow(a, row) => {
                if self.needs[*a] {
                    Self::accumulate(pass, *a, g);
                }
                if self.needs[*row] {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            dr.set(0, c, dr.get(0, c) + g.get(r, c));
                        }
                    }
                    Self::accumulate(pass, *row, &dr);
                }
            }
            Op::Scale(a, k) => {
                if self.needs[*a] {
                    Self::accumulate(pass, *a, &g.scale(*k));
                }
            }
            Op::ScaleByNode(a, s) => {
                let sval = self.values[*s].item();
                if self.needs[*a] {
                    Self::accumulate(pass, *a, &g.scale(sval));
                }
                if self.needs[*s] {
                    let dot = g
                        .data()
                        .iter()
                        .zip(self.values[*a].data())
                        .map(|(x, y)| x * y)
                        .sum();
                    Self::accumulate(pass, *s, &Matrix::scalar(dot));
                }
            }
            Op::Transpose(a) => {
                if self.needs[*a] {
                    Self::accumulate(pass, *a, &g.transpose());
                }
            }
            Op::Relu(a) => {
                if self.needs[*a] {
                    let x = &self.values[*a];
                    let da = Matrix::from_fn(x.rows(), x.cols(), |r, c| {
                        if x.get(r, c) > 0.0 {
                            g.get(r, c)
                        } else {
                            0.0
                        }
                    });
                    Self::accumulate(pass, *a, &da);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs[*a] {
                    // y is this node's own output.
                    let y = &self.values[i];
                    let mut da = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = (0..y.cols()).map(|c| g.get(r, c) * y.get(r, c)).sum();
                        for c in 0..y.cols() {
                            da.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    Self::accumulate(pass, *a, &da);
                }
            }
            Op::MeanRows(a) => {
                if self.needs[*a] {
                    let n = self.values[*a].rows();
                    let da = Matrix::from_fn(n, g.cols(), |_, c| g.get(0, c) / n as f64);
                    Self::accumulate(pass, *a, &da);
                }
            }
            Op::Sum(a) => {
                if self.needs[*a] {
                    let (r, c) = self.values[*a].shape();
                    Self::accumulate(pass, *a, &Matrix::filled(r, c, g.item()));
                }
            }
            Op::SumN(parts) => {
                for &p in parts {
                    if self.needs[p] {
                        Self::accumulate(pass, p, g);
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if self.needs[*a] {
                    let parent = &self.values[*a];
                    let mut da = Matrix::zeros(parent.rows(), parent.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            da.set(start + r, c, g.get(r, c));
                        }
                    }
                    Self::accumulate(pass, *a, &da);
                }
            }
            Op::SliceCols(a, start) => {
                if self.needs[*a] {
                    let parent = &self.values[*a];
                    let mut da = Matrix::zeros(parent.rows(), parent.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            da.set(r, start + c, g.get(r, c));
                        }
                    }
                    Self::accumulate(pass, *a, &da);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.values[p].rows();
                    if self.needs[p] {
                        let dp = Matrix::from_fn(rows, g.cols(), |r, c| g.get(offset + r, c));
                        Self::accumulate(pass, p, &dp);
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.values[p].cols();
                    if self.needs[p] {
                        let dp = Matrix::from_fn(g.rows(), cols, |r, c| g.get(r, offset + c));
                        Self::accumulate(pass, p, &dp);
                    }
                    offset += cols;
                }
            }
            Op::Variance(a) => {
                if self.needs[*a] {
                    let x = &self.values[*a];
                    let n = x.len() as f64;
                    let mu = x.mean();
                    let k = g.item() * 2.0 / n;
                    let da = x.map(|v| k * (v - mu));
                    Self::accumulate(pass, *a, &da);
                }
            }
            Op::MeanSqError(pred, target) => {
                let p = &self.values[*pred];
                let t = &self.values[*target];
                let n = p.len() as f64;
                let k = g.item() * 2.0 / n;
                if self.needs[*pred] {
                    let dp = Matrix::from_fn(p.rows(), p.cols(), |r, c| {
                        k * (p.get(r, c) - t.get(r, c))
                    });
                    Self::accumulate(pass, *pred, &dp);
                }
                if self.needs[*target] {
                    let dt = Matrix::from_fn(p.rows(), p.cols(), |r, c| {
                        -k * (p.get(r, c) - t.get(r, c))
                    });
                    Self::accumulate(pass, *target, &dt);
                }
            }
            Op::CrossEntropy(logits, labels) => {
                if self.needs[*logits] {
                    let z = &self.values[*logits];
                    let batch = z.rows() as f64;
                    let mut dz = Matrix::zeros(z.rows(), z.cols());
                    for (r, &label) in labels.iter().enumerate() {
                        let probs = softmax_row(z.row(r));
                        for c in 0..z.cols() {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            dz.set(r, c, g.item() * (probs[c] - onehot) / batch);
                        }
                    }
                    Self::accumulate(pass, *logits, &dz);
                }
            }
        }
    }
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

impl Node {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.inner.borrow().values[self.idx].shape()
    }

    /// Clones the value out of the tape.
    pub fn value(&self) -> Matrix {
        self.tape.inner.borrow().values[self.idx].clone()
    }

    /// Runs `f` against the value without cloning it.
    pub fn with_value<R>(&self, f: impl FnOnce(&Matrix) -> R) -> R {
        f(&self.tape.inner.borrow().values[self.idx])
    }

    /// The single entry of a scalar node.
    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().values[self.idx].item()
    }

    /// Clones the accumulated gradient.
    pub fn grad(&self) -> Matrix {
        self.tape.inner.borrow().grads[self.idx].clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().requires_grad[self.idx]
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(self)
    }

    fn same_tape(&self, other: &Node) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "nodes must share a tape"
        );
    }

    pub fn matmul(&self, rhs: &Node) -> Result<Node> {
        self.same_tape(rhs);
        let value = self.with_value(|a| rhs.with_value(|b| a.matmul(b)))?;
        Ok(self
            .tape
            .push(value, Op::Matmul(self.idx, rhs.idx), &[self.idx, rhs.idx]))
    }

    pub fn add(&self, rhs: &Node) -> Result<Node> {
        self.same_tape(rhs);
        let value = self.with_value(|a| rhs.with_value(|b| a.add(b)))?;
        Ok(self
            .tape
            .push(value, Op::Add(self.idx, rhs.idx), &[self.idx, rhs.idx]))
    }

    /// Adds a 1 x m row vector to every row of an n x m matrix.
    pub fn add_row(&self, row: &Node) -> Result<Node> {
        self.same_tape(row);
        let (rows, cols) = self.shape();
        if row.shape() != (1, cols) {
            return Err(Error::dimension("add_row", (rows, cols), row.shape()));
        }
        let value = self.with_value(|a| {
            row.with_value(|r| Matrix::from_fn(rows, cols, |i, j| a.get(i, j) + r.get(0, j)))
        });
        Ok(self
            .tape
            .push(value, Op::AddRow(self.idx, row.idx), &[self.idx, row.idx]))
    }

    pub fn scale(&self, k: f64) -> Node {
        let value = self.with_value(|a| a.scale(k));
        self.tape.push(value, Op::Scale(self.idx, k), &[self.idx])
    }

    /// Multiplies by a 1x1 node (e.g. a trainable gate).
    pub fn scale_by(&self, s: &Node) -> Result<Node> {
        self.same_tape(s);
        if s.shape() != (1, 1) {
            return Err(Error::dimension("scale_by", self.shape(), s.shape()));
        }
        let k = s.item();
        let value = self.with_value(|a| a.scale(k));
        Ok(self
            .tape
            .push(value, Op::ScaleByNode(self.idx, s.idx), &[self.idx, s.idx]))
    }

    pub fn transpose(&self) -> Node {
        let value = self.with_value(Matrix::transpose);
        self.tape.push(value, Op::Transpose(self.idx), &[self.idx])
    }

    pub fn relu(&self) -> Node {
        let value = self.with_value(|a| a.map(|v| v.max(0.0)));
        self.tape.push(value, Op::Relu(self.idx), &[self.idx])
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&self) -> Node {
        let value = self.with_value(|a| {
            let mut out = Matrix::zeros(a.rows(), a.cols());
            for r in 0..a.rows() {
                let probs = softmax_row(a.row(r));
                for (c, p) in probs.into_iter().enumerate() {
                    out.set(r, c, p);
                }
            }
            out
        });
        self.tape
            .push(value, Op::SoftmaxRows(self.idx), &[self.idx])
    }

    /// Column means as a 1 x m node.
    pub fn mean_rows(&self) -> Node {
        let value = self.with_value(|a| {
            let n = a.rows() as f64;
            Matrix::from_fn(1, a.cols(), |_, c| {
                (0..a.rows()).map(|r| a.get(r, c)).sum::<f64>() / n
            })
        });
        self.tape.push(value, Op::MeanRows(self.idx), &[self.idx])
    }

    /// Sum of all entries as a 1x1 node.
    pub fn sum(&self) -> Node {
        let value = self.with_value(|a| Matrix::scalar(a.sum()));
        self.tape.push(value, Op::Sum(self.idx), &[self.idx])
    }

    /// Population variance over all entries as a 1x1 node.
    pub fn variance(&self) -> Node {
        let value = self.with_value(|a| Matrix::scalar(a.population_variance()));
        self.tape.push(value, Op::Variance(self.idx), &[self.idx])
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Node> {
        let (rows, cols) = self.shape();
        if start + len > rows {
            return Err(Error::Contract(format!(
                "slice_rows [{start}, {}) out of bounds for {rows} rows",
                start + len
            )));
        }
        let value =
            self.with_value(|a| Matrix::from_fn(len, cols, |r, c| a.get(start + r, c)));
        Ok(self
            .tape
            .push(value, Op::SliceRows(self.idx, start), &[self.idx]))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Node> {
        let (rows, cols) = self.shape();
        if start + len > cols {
            return Err(Error::Contract(format!(
                "slice_cols [{start}, {}) out of bounds for {cols} cols",
                start + len
            )));
        }
        let value =
            self.with_value(|a| Matrix::from_fn(rows, len, |r, c| a.get(r, start + c)));
        Ok(self
            .tape
            .push(value, Op::SliceCols(self.idx, start), &[self.idx]))
    }

    /// Mean squared error against a constant target, as a 1x1 node.
    pub fn mean_sq_error(&self, target: &Matrix) -> Result<Node> {
        if self.shape() != target.shape() {
            return Err(Error::dimension("mean_sq_error", self.shape(), target.shape()));
        }
        let tnode = self.tape.constant(target.clone());
        let value = self.with_value(|p| {
            let se: f64 = p
                .data()
                .iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            Matrix::scalar(se / p.len() as f64)
        });
        Ok(self.tape.push(
            value,
            Op::MeanSqError(self.idx, tnode.idx),
            &[self.idx, tnode.idx],
        ))
    }

    /// Mean cross-entropy of row logits against class labels, as a 1x1 node.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Node> {
        let (rows, cols) = self.shape();
        if labels.len() != rows {
            return Err(Error::Contract(format!(
                "cross_entropy: {} labels for {rows} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Contract(format!(
                "cross_entropy: label {bad} out of range for {cols} classes"
            )));
        }
        let value = self.with_value(|z| {
            let mut total = 0.0;
            for (r, &label) in labels.iter().enumerate() {
                let row = z.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
                total += lse - row[label];
            }
            Matrix::scalar(total / rows as f64)
        });
        Ok(self.tape.push(
            value,
            Op::CrossEntropy(self.idx, labels.to_vec()),
            &[self.idx],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_grad_hand_case() {
        // sum(a . b) with a = [[1, 1]], b = [[2], [3]] gives da = [2, 3].
        let tape = Tape::new();
        let a = tape.leaf(Matrix::from_rows(&[vec![1.0, 1.0]]), true);
        let b = tape.leaf(Matrix::from_rows(&[vec![2.0], vec![3.0]]), true);
        let loss = a.matmul(&b).unwrap().sum();
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad(), Matrix::from_rows(&[vec![2.0, 3.0]]));
        assert_eq!(b.grad(), Matrix::from_rows(&[vec![1.0], vec![1.0]]));
    }

    #[test]
    fn softmax_uniform_and_closed_form() {
        let tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[vec![5.0, 5.0, 5.0, 5.0]]));
        let y = x.softmax_rows();
        for c in 0..4 {
            assert!(close(y.value().get(0, c), 0.25, 1e-15));
        }

        let x = tape.constant(Matrix::from_rows(&[vec![0.0, 3.0f64.ln()]]));
        let y = x.softmax_rows().value();
        assert!(close(y.get(0, 0), 0.25, 1e-12));
        assert!(close(y.get(0, 1), 0.75, 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one_at_large_magnitude() {
        let tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[
            vec![1e4, -1e4, 0.0],
            vec![9999.0, 10000.0, 9998.0],
        ]));
        let y = x.softmax_rows().value();
        for r in 0..2 {
            let sum: f64 = y.row(r).iter().sum();
            assert!(close(sum, 1.0, 1e-9), "row {r} sums to {sum}");
            assert!(y.row(r).iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn relu_negative_input_zero_value_and_grad() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[vec![-2.0]]), true);
        let loss = x.relu().sum();
        tape.backward(&loss).unwrap();
        assert_eq!(loss.item(), 0.0);
        assert_eq!(x.grad().get(0, 0), 0.0);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let tape = Tape::new();
        let w = tape.leaf(Matrix::from_fn(3, 2, |r, c| (r + c) as f64), true);
        let loss = w.sum();
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad(), Matrix::filled(3, 2, 1.0));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let tape = Tape::new();
        let w = tape.leaf(Matrix::filled(2, 2, 1.0), true);
        let loss = w.sum();
        tape.backward(&loss).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad(), Matrix::filled(2, 2, 2.0));
        tape.zero_grads();
        tape.backward(&loss).unwrap();
        assert_eq!(w.grad(), Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let w = tape.leaf(Matrix::zeros(2, 2), true);
        let err = tape.backward(&w).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn variance_constant_is_zero_everywhere() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::filled(2, 3, 4.0), true);
        let v = x.variance();
        tape.backward(&v).unwrap();
        assert_eq!(v.item(), 0.0);
        assert_eq!(x.grad(), Matrix::zeros(2, 3));
    }

    #[test]
    fn cross_entropy_matches_manual_log_softmax() {
        let tape = Tape::new();
        let z = tape.constant(Matrix::from_rows(&[vec![1.0, 2.0, 0.5]]));
        let ce = z.cross_entropy(&[1]).unwrap().item();
        let row = [1.0f64, 2.0, 0.5];
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!(close(ce, lse - 2.0, 1e-12));
    }

    #[test]
    fn scale_by_node_routes_gradient_to_gate() {
        let tape = Tape::new();
        let a = tape.constant(Matrix::from_rows(&[vec![2.0, 3.0]]));
        let c = tape.leaf(Matrix::scalar(0.0), true);
        let loss = a.scale_by(&c).unwrap().sum();
        tape.backward(&loss).unwrap();
        // d(sum(c*a))/dc = sum(a) = 5 even while c = 0.
        assert_eq!(c.grad().item(), 5.0);
    }

    #[test]
    fn slice_concat_round_trip_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(Matrix::from_fn(4, 3, |r, c| (3 * r + c) as f64), true);
        let top = x.slice_rows(0, 2).unwrap();
        let bottom = x.slice_rows(2, 2).unwrap();
        let rejoined = tape.concat_rows(&[top, bottom]).unwrap();
        assert_eq!(rejoined.value(), x.value());
        let loss = rejoined.sum();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad(), Matrix::filled(4, 3, 1.0));
    }

    #[test]
    fn mse_zero_at_equal_inputs() {
        let tape = Tape::new();
        let target = Matrix::from_rows(&[vec![1.0, -2.0]]);
        let p = tape.leaf(target.clone(), true);
        let loss = p.mean_sq_error(&target).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(loss.item(), 0.0);
        assert_eq!(p.grad(), Matrix::zeros(1, 2));
    }
}
