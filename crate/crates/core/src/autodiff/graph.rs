//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward
//! pass. Every operation appends a node whose inputs are earlier nodes, so
//! node order is already a topological order and [`Graph::backward`] only
//! has to walk the tape in reverse. Nodes that do not depend on any
//! trainable parameter are never visited during backward.

use super::param::{ParamId, ParamStore};
use super::tensor::{gemm_nn_acc, gemm_nt_acc, gemm_tn_acc, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddBiasRow(usize, usize),
    Mul(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols {
        src: usize,
        start: usize,
    },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    Mask {
        src: usize,
        mask: Tensor<T>,
    },
    LogSoftmaxCe {
        logits: usize,
        targets: Vec<usize>,
        probs: Tensor<T>,
    },
    Sum(usize),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`], indexed like the
/// parameter store. Frozen or unused parameters have no entry.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<&Tensor<T>>> {
        self.grads.iter().map(Option::as_ref)
    }
}

pub struct Graph<'p, T: Scalar = f32> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<usize>>,
}

fn shape_err(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Error {
    Error::Shape { op, left, right }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.val(v.0)
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.val(v.0).data()[0].as_f64()
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        match &self.nodes[i].value {
            Value::Owned(t) => t,
            Value::Param(id) => &self.params.get(*id).value,
        }
    }

    fn shape(&self, i: usize) -> (usize, usize) {
        self.val(i).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// The node for a stored parameter. Repeated calls return the same node,
    /// so every use of a parameter accumulates into one gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(i) = self.param_nodes[id.0] {
            return Var(i);
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: self.params.get(id).trainable,
        });
        let i = self.nodes.len() - 1;
        self.param_nodes[id.0] = Some(i);
        Var(i)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a.0), self.shape(b.0));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = Tensor::zeros(sa.0, sb.1);
        gemm_nn_acc(self.val(a.0), self.val(b.0), &mut out);
        Ok(self.push(out, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a.0), self.shape(b.0));
        if sa.1 != sb.1 {
            return Err(shape_err("matmul_t", sa, sb));
        }
        let mut out = Tensor::zeros(sa.0, sb.0);
        gemm_nt_acc(self.val(a.0), self.val(b.0), &mut out);
        Ok(self.push(out, Op::MatMulT(a.0, b.0), &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a.0), self.shape(b.0));
        if sa != sb {
            return Err(shape_err("add", sa, sb));
        }
        let mut out = self.val(a.0).clone();
        out.add_assign(self.val(b.0));
        Ok(self.push(out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds a `1×n` row to every row of an `m×n` matrix.
    pub fn add_bias_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a.0), self.shape(bias.0));
        if sb.0 != 1 || sa.1 != sb.1 {
            return Err(shape_err("add_bias_row", sa, sb));
        }
        let mut out = self.val(a.0).clone();
        let b = self.val(bias.0).data();
        for r in 0..sa.0 {
            for (o, &x) in out.row_mut(r).iter_mut().zip(b) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddBiasRow(a.0, bias.0), &[a.0, bias.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a.0), self.shape(b.0));
        if sa != sb {
            return Err(shape_err("mul", sa, sb));
        }
        let data = self
            .val(a.0)
            .data()
            .iter()
            .zip(self.val(b.0).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(sa.0, sa.1, data)?;
        Ok(self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Size("concat_cols of nothing".into()))?;
        let rows = self.shape(first.0).0;
        for p in parts {
            if self.shape(p.0).0 != rows {
                return Err(shape_err("concat_cols", self.shape(first.0), self.shape(p.0)));
            }
        }
        let cols: usize = parts.iter().map(|p| self.shape(p.0).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let src = self.val(p.0).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, Op::ConcatCols(idx.clone()), &idx))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Size("concat_rows of nothing".into()))?;
        let cols = self.shape(first.0).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.val(p.0);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.shape(first.0), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(out, Op::ConcatRows(idx.clone()), &idx))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(a.0);
        if start >= end || end > c {
            return Err(shape_err("slice_cols", (r, c), (start, end)));
        }
        let src = self.val(a.0);
        let mut out = Tensor::zeros(r, end - start);
        for i in 0..r {
            out.row_mut(i).copy_from_slice(&src.row(i)[start..end]);
        }
        Ok(self.push(out, Op::SliceCols { src: a.0, start }, &[a.0]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.val(a.0).map(|x| {
            if x >= T::zero() {
                T::one() / (T::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (T::one() + e)
            }
        });
        self.push(out, Op::Sigmoid(a.0), &[a.0])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.val(a.0).map(|x| x.tanh());
        self.push(out, Op::Tanh(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.val(a.0).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a.0), &[a.0])
    }

    /// Row `ids[i]` of `table` becomes output row `i`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.shape(table.0);
        let t = self.val(table.0);
        let mut out = Tensor::zeros(ids.len(), d);
        let mut idx = Vec::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            let id = id as usize;
            if id >= v {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: v,
                });
            }
            out.row_mut(i).copy_from_slice(t.row(id));
            idx.push(id);
        }
        Ok(self.push(
            out,
            Op::Embedding {
                table: table.0,
                ids: idx,
            },
            &[table.0],
        ))
    }

    /// Elementwise product with a constant mask.
    pub fn apply_mask(&mut self, a: Var, mask: Tensor<T>) -> Result<Var> {
        let sa = self.shape(a.0);
        if sa != mask.shape() {
            return Err(shape_err("apply_mask", sa, mask.shape()));
        }
        let data = self
            .val(a.0)
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&x, &m)| x * m)
            .collect();
        let out = Tensor::from_vec(sa.0, sa.1, data)?;
        Ok(self.push(out, Op::Mask { src: a.0, mask }, &[a.0]))
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`, as a 1×1 node.
    pub fn log_softmax_cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let (m, v) = self.shape(logits.0);
        if targets.len() != m || m == 0 {
            return Err(shape_err("log_softmax_cross_entropy", (m, v), (targets.len(), 1)));
        }
        let x = self.val(logits.0);
        let mut probs = Tensor::zeros(m, v);
        let mut total = 0.0f64;
        let mut tgt = Vec::with_capacity(m);
        for (r, &t) in targets.iter().enumerate() {
            let t = t as usize;
            if t >= v {
                return Err(Error::Index {
                    what: "softmax target",
                    index: t,
                    size: v,
                });
            }
            let row = x.row(r);
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for (p, &l) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (l - max).exp();
                z += *p;
            }
            let inv = T::one() / z;
            probs.row_mut(r).iter_mut().for_each(|p| *p *= inv);
            total += (max + z.ln() - row[t]).as_f64();
            tgt.push(t);
        }
        let loss = total / m as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        let out = Tensor::full(1, 1, T::of_f64(loss));
        Ok(self.push(
            out,
            Op::LogSoftmaxCe {
                logits: logits.0,
                targets: tgt,
                probs,
            },
            &[logits.0],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.val(a.0).sum();
        self.push(Tensor::full(1, 1, T::of_f64(s)), Op::Sum(a.0), &[a.0])
    }

    /// Propagates d(loss)/d(node) back to every trainable parameter reached.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss.0);
        if shape != (1, 1) {
            return Err(shape_err("backward (loss must be 1x1)", shape, (1, 1)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients {
            grads: vec![None; self.params.len()],
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::full(1, 1, T::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backward_node(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
    ) -> Result<()> {
        let needs = |j: usize| self.nodes[j].requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Param(id) => out.grads[id.0] = Some(g),
            &Op::MatMul(a, b) => {
                if needs(a) {
                    gemm_nt_acc(&g, self.val(b), buf(grads, a, self.shape(a)));
                }
                if needs(b) {
                    gemm_tn_acc(self.val(a), &g, buf(grads, b, self.shape(b)));
                }
            }
            &Op::MatMulT(a, b) => {
                if needs(a) {
                    gemm_nn_acc(&g, self.val(b), buf(grads, a, self.shape(a)));
                }
                if needs(b) {
                    gemm_tn_acc(&g, self.val(a), buf(grads, b, self.shape(b)));
                }
            }
            &Op::Add(a, b) => {
                for j in [a, b] {
                    if needs(j) {
                        buf(grads, j, g.shape()).add_assign(&g);
                    }
                }
            }
            &Op::AddBiasRow(a, b) => {
                if needs(a) {
                    buf(grads, a, g.shape()).add_assign(&g);
                }
                if needs(b) {
                    let gb = buf(grads, b, (1, g.cols()));
                    for r in 0..g.rows() {
                        for (o, &x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                for (j, other) in [(a, b), (b, a)] {
                    if needs(j) {
                        let ov = self.val(other).data();
                        let gj = buf(grads, j, g.shape());
                        for ((o, &x), &y) in gj.data_mut().iter_mut().zip(g.data()).zip(ov) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if needs(p) {
                        let gp = buf(grads, p, (r, c));
                        for row in 0..r {
                            for (o, &x) in gp.row_mut(row).iter_mut().zip(&g.row(row)[off..off + c]) {
                                *o += x;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if needs(p) {
                        let src = &g.data()[off * c..(off + r) * c];
                        for (o, &x) in buf(grads, p, (r, c)).data_mut().iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                    off += r;
                }
            }
            &Op::SliceCols { src, start } => {
                let gs = buf(grads, src, self.shape(src));
                for r in 0..g.rows() {
                    for (o, &x) in gs.row_mut(r)[start..start + g.cols()].iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            &Op::Sigmoid(a) => {
                let y = self.val(i).data();
                let ga = buf(grads, a, g.shape());
                for ((o, &dy), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(y) {
                    *o += dy * y * (T::one() - y);
                }
            }
            &Op::Tanh(a) => {
                let y = self.val(i).data();
                let ga = buf(grads, a, g.shape());
                for ((o, &dy), &y) in ga.data_mut().iter_mut().zip(g.data()).zip(y) {
                    *o += dy * (T::one() - y * y);
                }
            }
            &Op::Relu(a) => {
                let x = self.val(a).data();
                let ga = buf(grads, a, g.shape());
                for ((o, &dy), &x) in ga.data_mut().iter_mut().zip(g.data()).zip(x) {
                    if x > T::zero() {
                        *o += dy;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let gt = buf(grads, *table, self.shape(*table));
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::Mask { src, mask } => {
                let gs = buf(grads, *src, g.shape());
                for ((o, &dy), &m) in gs.data_mut().iter_mut().zip(g.data()).zip(mask.data()) {
                    *o += dy * m;
                }
            }
            Op::LogSoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let scale = g.data()[0] / T::of_f64(targets.len() as f64);
                let gl = buf(grads, *logits, probs.shape());
                for (r, &t) in targets.iter().enumerate() {
                    let row = gl.row_mut(r);
                    for (o, &p) in row.iter_mut().zip(probs.row(r)) {
                        *o += p * scale;
                    }
                    row[t] = row[t] - scale;
                }
            }
            &Op::Sum(a) => {
                let s = g.data()[0];
                let ga = buf(grads, a, self.shape(a));
                ga.data_mut().iter_mut().for_each(|o| *o += s);
            }
        }
        Ok(())
    }
}

fn buf<T: Scalar>(grads: &mut [Option<Tensor<T>>], i: usize, shape: (usize, usize)) -> &mut Tensor<T> {
    grads[i].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor<f64>) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, t);
        (s, id)
    }

    #[test]
    fn relu_forward() {
        let s = ParamStore::<f64>::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::from_rows(&[&[-1.0, 2.0]]));
        let y = g.relu(x);
        assert_eq!(g.value(y), &Tensor::from_rows(&[&[0.0, 2.0]]));
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let s = ParamStore::<f64>::new();
        for t in 0..4 {
            let mut g = Graph::new(&s);
            let x = g.constant(Tensor::full(1, 4, 0.7));
            let l = g.log_softmax_cross_entropy(x, &[t]).unwrap();
            assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_stable_on_large_logits() {
        let s = ParamStore::<f32>::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::from_rows(&[&[1000.0, -1000.0, 999.0]]));
        let l = g.log_softmax_cross_entropy(x, &[0]).unwrap();
        assert!(g.scalar(l).is_finite());
    }

    #[test]
    fn sum_of_matmul_gradient_is_outer_product() {
        // loss = sum(W x)  =>  dW[i][j] = x[j]
        let (s, w) = store_with("w", Tensor::from_rows(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let mut g = Graph::new(&s);
        let wv = g.param(w);
        let x = g.constant(Tensor::from_rows(&[&[0.5], &[-1.0], &[2.0]]));
        let y = g.matmul(wv, x).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert_eq!(
            grads.get(w).unwrap(),
            &Tensor::from_rows(&[&[0.5, -1.0, 2.0], &[0.5, -1.0, 2.0]])
        );
    }

    #[test]
    fn frozen_parameter_gets_no_gradient() {
        let (mut s, w) = store_with("w", Tensor::full(2, 2, 1.0));
        s.get_mut(w).trainable = false;
        let mut g = Graph::new(&s);
        let wv = g.param(w);
        let l = g.sum(wv);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(w).is_none());
        s.accumulate(&grads);
        assert!(s.get(w).grad.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sequential_backwards_accumulate() {
        let (mut s, w) = store_with("w", Tensor::from_rows(&[&[1.0, -2.0]]));
        for _ in 0..2 {
            let grads = {
                let mut g = Graph::new(&s);
                let wv = g.param(w);
                let sq = g.mul(wv, wv).unwrap();
                let l = g.sum(sq);
                g.backward(l).unwrap()
            };
            s.accumulate(&grads);
        }
        // d/dw sum(w^2) = 2w, twice
        assert_eq!(s.get(w).grad, Tensor::from_rows(&[&[4.0, -8.0]]));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (s, w) = store_with("w", Tensor::full(2, 2, 1.0));
        let mut g = Graph::new(&s);
        let wv = g.param(w);
        assert!(matches!(g.backward(wv), Err(Error::Shape { .. })));
    }

    #[test]
    fn shape_and_index_errors() {
        let (s, w) = store_with("w", Tensor::full(3, 2, 1.0));
        let mut g = Graph::new(&s);
        let wv = g.param(w);
        assert!(matches!(g.matmul(wv, wv), Err(Error::Shape { .. })));
        assert!(matches!(
            g.embedding(wv, &[3]),
            Err(Error::Index {
                index: 3,
                size: 3,
                ..
            })
        ));
        assert!(g.add_bias_row(wv, wv).is_err());
        assert!(g.slice_cols(wv, 1, 3).is_err());
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let (s, w) = store_with("w", Tensor::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let run = |masked: bool| {
            let mut g = Graph::new(&s);
            let wv = g.param(w);
            let x = if masked {
                g.apply_mask(wv, Tensor::full(2, 2, 1.0)).unwrap()
            } else {
                wv
            };
            let t = g.tanh(x);
            let v = g.value(t).clone();
            let l = g.sum(t);
            (v, g.backward(l).unwrap().get(w).unwrap().clone())
        };
        assert_eq!(run(true), run(false));
    }
}
