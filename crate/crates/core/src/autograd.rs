//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Graph`] is a flat tape: every op appends a node holding its output
//! value and the indices of its inputs. `backward` walks the tape in
//! reverse and accumulates gradients for parameter leaves. Nodes only ever
//! reference earlier nodes, so insertion order is a topological order.
//!
//! All arithmetic is f64. Gradients are exact (up to float rounding), which
//! the finite-difference harness in `trainer` verifies end to end.

use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::tensor::Matrix;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

enum Op {
    Constant,
    Param(String),
    /// a (m×k) · b (k×n)
    Matmul(NodeId, NodeId),
    /// a (m×k) · b (n×k)ᵀ
    MatmulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// x (m×n) + row (1×n) broadcast over rows
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Hadamard(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    EmbedGather {
        table: NodeId,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    SliceRows {
        x: NodeId,
        r0: usize,
        r1: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        c0: usize,
        c1: usize,
    },
    MeanPoolRows(NodeId),
    Reshape(NodeId),
    Transpose(NodeId),
    L2NormalizeRows(NodeId),
    /// x scaled elementwise by a 1×1 node
    MulScalar {
        x: NodeId,
        s: NodeId,
    },
    /// Mean cross-entropy over rows with a target id; `None` rows are skipped.
    MaskedCrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
    },
}

struct Node {
    value: Matrix,
    requires_grad: bool,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    param_cache: HashMap<String, NodeId>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            param_cache: HashMap::new(),
        }
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, false, Op::Constant)
    }

    /// Registers a named parameter leaf. Repeated use of the same name
    /// returns the original node so gradients accumulate.
    pub fn param(&mut self, name: &str, value: &Matrix, trainable: bool) -> NodeId {
        if let Some(&id) = self.param_cache.get(name) {
            return id;
        }
        let id = self.push(value.clone(), trainable, Op::Param(name.to_string()));
        self.param_cache.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, self.rg(a) || self.rg(b), Op::Matmul(a, b))
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, self.rg(a) || self.rg(b), Op::MatmulNt(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(v, self.rg(a) || self.rg(b), Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        let v = self.value(x).add_row_broadcast(self.value(row));
        self.push(v, self.rg(x) || self.rg(row), Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.value(x).scale(s);
        self.push(v, self.rg(x), Op::Scale(x, s))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).hadamard(self.value(b));
        self.push(v, self.rg(a) || self.rg(b), Op::Hadamard(a, b))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, self.rg(x), Op::Relu(x))
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::exp);
        self.push(v, self.rg(x), Op::Exp(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).softmax_rows();
        self.push(v, self.rg(x), Op::SoftmaxRows(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        let v = layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            v,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        )
    }

    pub fn embed_gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut v = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            v,
            self.rg(table),
            Op::EmbedGather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_rows(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, rg, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: NodeId, r0: usize, r1: usize) -> NodeId {
        let v = self.value(x).slice_rows(r0, r1);
        self.push(v, self.rg(x), Op::SliceRows { x, r0, r1 })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Matrix::concat_cols(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, rg, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, c0: usize, c1: usize) -> NodeId {
        let v = self.value(x).slice_cols(c0, c1);
        self.push(v, self.rg(x), Op::SliceCols { x, c0, c1 })
    }

    pub fn mean_pool_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mean_pool_rows();
        self.push(v, self.rg(x), Op::MeanPoolRows(x))
    }

    pub fn reshape(&mut self, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let v = self.value(x).reshape(rows, cols);
        self.push(v, self.rg(x), Op::Reshape(x))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).transpose();
        self.push(v, self.rg(x), Op::Transpose(x))
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut v = xv.clone();
        for r in 0..v.rows() {
            let n = crate::tensor::l2_norm(v.row(r));
            for a in v.row_mut(r) {
                *a /= n;
            }
        }
        self.push(v, self.rg(x), Op::L2NormalizeRows(x))
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.value(s).shape(), (1, 1), "scalar node must be 1×1");
        let sv = self.value(s).item();
        let v = self.value(x).scale(sv);
        self.push(v, self.rg(x) || self.rg(s), Op::MulScalar { x, s })
    }

    /// Mean cross-entropy over the rows that carry a `Some(target)`.
    /// Returns a 1×1 node. Also exposes the per-row count used.
    pub fn masked_cross_entropy(&mut self, logits: NodeId, targets: &[Option<usize>]) -> NodeId {
        let lm = self.value(logits);
        assert_eq!(lm.rows(), targets.len(), "targets length");
        let count = targets.iter().filter(|t| t.is_some()).count();
        assert!(count > 0, "masked_cross_entropy with no scored positions");
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                let row = lm.row(r);
                total += crate::tensor::log_sum_exp(row) - row[*t];
            }
        }
        let v = Matrix::scalar(total / count as f64);
        self.push(
            v,
            self.rg(logits),
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    /// Back-propagates from a 1×1 loss node; returns gradients keyed by
    /// parameter name for every trainable parameter reached.
    pub fn backward(&mut self, loss: NodeId) -> BTreeMap<String, Matrix> {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate_parents(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if node.requires_grad {
                    if let Some(g) = &grads[i] {
                        out.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        out
    }

    fn add_grad(&self, grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
        if !self.rg(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_parents(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.nodes[i].op {
            Op::Constant | Op::Param(_) => {}
            Op::Matmul(a, b) => {
                if self.rg(*a) {
                    self.add_grad(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.rg(*b) {
                    self.add_grad(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatmulNt(a, b) => {
                // c = a·bᵀ  ⇒  da = g·b, db = gᵀ·a
                if self.rg(*a) {
                    self.add_grad(grads, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    self.add_grad(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::AddRow(x, row) => {
                self.add_grad(grads, *x, g.clone());
                if self.rg(*row) {
                    let mut rsum = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in rsum.row_mut(0).iter_mut().zip(g.row(r).iter()) {
                            *o += v;
                        }
                    }
                    self.add_grad(grads, *row, rsum);
                }
            }
            Op::Scale(x, s) => self.add_grad(grads, *x, g.scale(*s)),
            Op::Hadamard(a, b) => {
                if self.rg(*a) {
                    self.add_grad(grads, *a, g.hadamard(self.value(*b)));
                }
                if self.rg(*b) {
                    self.add_grad(grads, *b, g.hadamard(self.value(*a)));
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dg = g.clone();
                for (d, &v) in dg.data_mut().iter_mut().zip(xv.data().iter()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.add_grad(grads, *x, dg);
            }
            Op::Exp(x) => {
                let out = &self.nodes[i].value;
                self.add_grad(grads, *x, g.hadamard(out));
            }
            Op::SoftmaxRows(x) => {
                let y = &self.nodes[i].value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                    for (o, (&yv, &gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr.iter()))
                    {
                        *o = yv * (gv - dot);
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let xv = self.value(*x);
                let gm = self.value(*gamma);
                let (rows, cols) = xv.shape();
                let nf = cols as f64;
                let mut dx = Matrix::zeros(rows, cols);
                let mut dgamma = Matrix::zeros(1, cols);
                let mut dbeta = Matrix::zeros(1, cols);
                for r in 0..rows {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let mean = xr.iter().sum::<f64>() / nf;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * inv_std).collect();
                    for c in 0..cols {
                        dgamma.data_mut()[c] += gr[c] * xhat[c];
                        dbeta.data_mut()[c] += gr[c];
                    }
                    let dxhat: Vec<f64> =
                        (0..cols).map(|c| gr[c] * gm.data()[c]).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / nf;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for c in 0..cols {
                        dx.set(
                            r,
                            c,
                            inv_std * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat),
                        );
                    }
                }
                self.add_grad(grads, *x, dx);
                if self.rg(*gamma) {
                    self.add_grad(grads, *gamma, dgamma);
                }
                if self.rg(*beta) {
                    self.add_grad(grads, *beta, dbeta);
                }
            }
            Op::EmbedGather { table, ids } => {
                if self.rg(*table) {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, &v) in dt.row_mut(id).iter_mut().zip(g.row(r).iter()) {
                            *o += v;
                        }
                    }
                    self.add_grad(grads, *table, dt);
                }
            }
            Op::ConcatRows(parts) => {
                let mut r = 0;
                for &p in parts {
                    let pr = self.value(p).rows();
                    if self.rg(p) {
                        self.add_grad(grads, p, g.slice_rows(r, r + pr));
                    }
                    r += pr;
                }
            }
            Op::SliceRows { x, r0, r1 } => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for (r, src) in (*r0..*r1).enumerate() {
                        dx.row_mut(src).copy_from_slice(g.row(r));
                    }
                    self.add_grad(grads, *x, dx);
                }
            }
            Op::ConcatCols(parts) => {
                let mut c = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    if self.rg(p) {
                        self.add_grad(grads, p, g.slice_cols(c, c + pc));
                    }
                    c += pc;
                }
            }
            Op::SliceCols { x, c0, c1 } => {
                if self.rg(*x) {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        for (c, &v) in (*c0..*c1).zip(g.row(r).iter()) {
                            dx.set(r, c, v);
                        }
                    }
                    self.add_grad(grads, *x, dx);
                }
            }
            Op::MeanPoolRows(x) => {
                let xv = self.value(*x);
                let t = xv.rows() as f64;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    for (o, &v) in dx.row_mut(r).iter_mut().zip(g.row(0).iter()) {
                        *o = v / t;
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let (r, c) = self.value(*x).shape();
                self.add_grad(grads, *x, g.reshape(r, c));
            }
            Op::Transpose(x) => self.add_grad(grads, *x, g.transpose()),
            Op::L2NormalizeRows(x) => {
                let xv = self.value(*x);
                let y = &self.nodes[i].value;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    let norm = crate::tensor::l2_norm(xv.row(r));
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum();
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = (gr[c] - dot * yr[c]) / norm;
                    }
                }
                self.add_grad(grads, *x, dx);
            }
            Op::MulScalar { x, s } => {
                let sv = self.value(*s).item();
                if self.rg(*x) {
                    self.add_grad(grads, *x, g.scale(sv));
                }
                if self.rg(*s) {
                    let ds: f64 = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data().iter())
                        .map(|(a, b)| a * b)
                        .sum();
                    self.add_grad(grads, *s, Matrix::scalar(ds));
                }
            }
            Op::MaskedCrossEntropy { logits, targets } => {
                if self.rg(*logits) {
                    let lm = self.value(*logits);
                    let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                    let gscale = g.item() / count;
                    let mut dl = Matrix::zeros(lm.rows(), lm.cols());
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = t {
                            let mut row = lm.row(r).to_vec();
                            crate::tensor::softmax_in_place(&mut row);
                            row[*t] -= 1.0;
                            for (o, v) in dl.row_mut(r).iter_mut().zip(row.iter()) {
                                *o = v * gscale;
                            }
                        }
                    }
                    self.add_grad(grads, *logits, dl);
                }
            }
        }
    }
}

fn layer_norm_forward(x: &Matrix, gamma: &Matrix, beta: &Matrix, eps: f64) -> Matrix {
    let (rows, cols) = x.shape();
    assert_eq!(gamma.shape(), (1, cols), "layer_norm gamma shape");
    assert_eq!(beta.shape(), (1, cols), "layer_norm beta shape");
    let mut out = Matrix::zeros(rows, cols);
    let nf = cols as f64;
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().sum::<f64>() / nf;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
        let inv_std = 1.0 / (var + eps).sqrt();
        for c in 0..cols {
            out.set(
                r,
                c,
                (xr[c] - mean) * inv_std * gamma.data()[c] + beta.data()[c],
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of `f` w.r.t. one scalar of one parameter.
    fn fd_grad(store: &ParamStore, name: &str, idx: usize, f: &dyn Fn(&ParamStore) -> f64) -> f64 {
        let h = 1e-5;
        let mut plus = store.clone();
        plus.get_mut(name).data_mut()[idx] += h;
        let mut minus = store.clone();
        minus.get_mut(name).data_mut()[idx] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn check_all(
        store: &ParamStore,
        f: &dyn Fn(&ParamStore) -> f64,
        grads: &BTreeMap<String, Matrix>,
        tol: f64,
    ) {
        for (name, g) in grads {
            for idx in 0..g.len() {
                let num = fd_grad(store, name, idx, f);
                let ana = g.data()[idx];
                let denom = ana.abs().max(num.abs()).max(1e-6);
                assert!(
                    (num - ana).abs() / denom < tol,
                    "{name}[{idx}]: analytic {ana} vs numeric {num}"
                );
            }
        }
    }

    #[test]
    fn gradients_of_composite_expression_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.insert("w", rand_matrix(&mut rng, 4, 3));
        store.insert("b", rand_matrix(&mut rng, 1, 4));
        store.insert("g", Matrix::from_fn(1, 4, |_, _| 1.0 + rng.gen_range(-0.1..0.1)));
        store.insert("beta", rand_matrix(&mut rng, 1, 4));
        store.mark_trainable_all();
        let x = rand_matrix(&mut rng, 5, 3);

        let f = move |s: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let xn = g.constant(x.clone());
            let w = g.param("w", s.get("w"), s.is_trainable("w"));
            let b = g.param("b", s.get("b"), s.is_trainable("b"));
            let gamma = g.param("g", s.get("g"), s.is_trainable("g"));
            let beta = g.param("beta", s.get("beta"), s.is_trainable("beta"));
            let h = g.matmul_nt(xn, w);
            let h = g.add_row(h, b);
            let h = g.layer_norm(h, gamma, beta, 1e-5);
            let h = g.relu(h);
            let sm = g.softmax_rows(h);
            let pooled = g.mean_pool_rows(sm);
            let loss = g.masked_cross_entropy(pooled, &[Some(2)]);
            g.value(loss).item()
        };

        // Rebuild once more to harvest analytic grads.
        let x2 = rand_matrix(&mut ChaCha8Rng::seed_from_u64(11), 0, 0);
        let _ = x2;
        let mut graph = Graph::new();
        let xn = {
            let mut rng2 = ChaCha8Rng::seed_from_u64(11);
            // consume the same draws as above to rebuild x
            let _w = rand_matrix(&mut rng2, 4, 3);
            let _b = rand_matrix(&mut rng2, 1, 4);
            let _g = Matrix::from_fn(1, 4, |_, _| 1.0 + rng2.gen_range(-0.1..0.1));
            let _beta = rand_matrix(&mut rng2, 1, 4);
            graph.constant(rand_matrix(&mut rng2, 5, 3))
        };
        let w = graph.param("w", store.get("w"), true);
        let b = graph.param("b", store.get("b"), true);
        let gamma = graph.param("g", store.get("g"), true);
        let beta = graph.param("beta", store.get("beta"), true);
        let h = graph.matmul_nt(xn, w);
        let h = graph.add_row(h, b);
        let h = graph.layer_norm(h, gamma, beta, 1e-5);
        let h = graph.relu(h);
        let sm = graph.softmax_rows(h);
        let pooled = graph.mean_pool_rows(sm);
        let loss = graph.masked_cross_entropy(pooled, &[Some(2)]);
        let grads = graph.backward(loss);

        assert_eq!(grads.len(), 4);
        check_all(&store, &f, &grads, 1e-4);
    }

    #[test]
    fn gradients_of_gather_concat_slice_normalize_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        store.insert("table", rand_matrix(&mut rng, 6, 4));
        store.insert("q", rand_matrix(&mut rng, 2, 4));
        store.insert("t", Matrix::scalar(0.3));
        store.mark_trainable_all();
        let ids = vec![1usize, 3, 1, 5];

        let build = |s: &ParamStore| -> (Graph, NodeId) {
            let mut g = Graph::new();
            let table = g.param("table", s.get("table"), s.is_trainable("table"));
            let q = g.param("q", s.get("q"), s.is_trainable("q"));
            let temp = g.param("t", s.get("t"), s.is_trainable("t"));
            let emb = g.embed_gather(table, &ids);
            let cat = g.concat_rows(&[emb, q]);
            let sl = g.slice_rows(cat, 1, 5);
            let nrm = g.l2_normalize_rows(sl);
            let sims = g.matmul_nt(nrm, nrm);
            let te = g.exp(temp);
            let scaled = g.mul_scalar(sims, te);
            let loss = g.masked_cross_entropy(scaled, &[Some(0), Some(1), None, Some(3)]);
            (g, loss)
        };

        let f = move |s: &ParamStore| {
            let (g, loss) = build(s);
            g.value(loss).item()
        };
        let (mut g, loss) = build(&store);
        let grads = g.backward(loss);
        assert!(grads.contains_key("table"));
        assert!(grads.contains_key("t"));
        check_all(&store, &f, &grads, 1e-4);
    }

    #[test]
    fn frozen_params_receive_no_grad() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::from_fn(3, 3, |r, c| (r + c) as f64 * 0.1));
        // not marked trainable
        let mut g = Graph::new();
        let x = g.constant(Matrix::from_fn(2, 3, |r, c| (r * 3 + c) as f64 * 0.2));
        let w = g.param("w", store.get("w"), store.is_trainable("w"));
        let y = g.matmul_nt(x, w);
        let loss = g.masked_cross_entropy(y, &[Some(0), Some(1)]);
        let grads = g.backward(loss);
        assert!(grads.is_empty());
    }
}
