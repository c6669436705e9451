use std::borrow::Cow;

use super::kernels::{self, matmul_acc, transposed};
use super::param::{Gradients, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        positions: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Dynamic reverse-mode tape. Built fresh for every forward pass; parameter
/// values are borrowed from the store, never copied.
pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Constant,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(self.store.value(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul of [{m}, {k}] by [{k2}, {n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_nt of [{m}, {k}] by transposed [{n}, {k2}]"
            )));
        }
        let bt = transposed(self.value(b).data(), n, k);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), &bt, m, k, n, &mut out);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNT(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what} of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`n` bias to every row of `x[m×n]`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if self.shape(bias) != [n] {
            return Err(Error::shape(format!(
                "bias {:?} for rows of width {n}",
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s), &[x])
    }

    /// Adds a constant tensor (no gradient flows into it).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::shape(format!(
                "add_const of {:?} and {:?}",
                self.shape(x),
                c.shape()
            )));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a + b)
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddConst(x), &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(kernels::gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    /// Softmax over the last dimension. `-inf` entries map to exactly zero.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let c = src.cols();
        let mut out = vec![0.0; src.numel()];
        for (r, (inp, o)) in src.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
            kernels::softmax_row(inp, o).ok_or(Error::DegenerateRow { row: r })?;
        }
        let shape = src.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims2(x)?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(format!(
                "layer_norm gain {:?} / bias {:?} for width {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        Ok(self.push(Tensor::from_parts(vec![m, d], out), op, &[x, gamma, beta]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let (_, n) = self.dims2(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (m, n2) = self.dims2(p)?;
            if n2 != n {
                return Err(Error::shape(format!("concat_rows widths {n} and {n2}")));
            }
            rows += m;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::from_parts(vec![rows, n], data), Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let (m, _) = self.dims2(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (m2, n) = self.dims2(p)?;
            if m2 != m {
                return Err(Error::shape(format!("concat_cols heights {m} and {m2}")));
            }
            widths.push(n);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, total], data), Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if width == 0 || start + width > n {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} of width {n}",
                start + width
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * width);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + width]);
        }
        Ok(self.push(Tensor::from_parts(vec![m, width], data), Op::SliceCols { x, start }, &[x]))
    }

    /// Row lookup `table[ids[i]]`; the gradient scatters back into the table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table)?;
        if ids.is_empty() {
            return Err(Error::invalid("embedding lookup of no ids"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape(format!("embedding id {bad} out of range {v}")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(vec![ids.len(), d], data), op, &[table]))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, d) = self.dims2(x)?;
        if rows.is_empty() {
            return Err(Error::invalid("gather of no rows"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= m) {
            return Err(Error::shape(format!("row {bad} out of range {m}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in rows {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let op = Op::GatherRows {
            x,
            rows: rows.to_vec(),
        };
        Ok(self.push(Tensor::from_parts(vec![rows.len(), d], data), op, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `-Σ_i log softmax(logits[positions[i]])[targets[i]]`.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        positions: &[usize],
    ) -> Result<Var> {
        let (t, v) = self.dims2(logits)?;
        if positions.is_empty() {
            return Err(Error::invalid("cross entropy over an empty position set"));
        }
        if positions.len() != targets.len() {
            return Err(Error::invalid(format!(
                "{} positions but {} targets",
                positions.len(),
                targets.len()
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= t) {
            return Err(Error::shape(format!("position {p} out of range {t}")));
        }
        if let Some(&y) = targets.iter().find(|&&y| y >= v) {
            return Err(Error::shape(format!("target {y} out of vocabulary {v}")));
        }
        let src = self.value(logits);
        let mut probs = vec![0.0; positions.len() * v];
        let mut logp = vec![0.0; v];
        let mut loss = 0.0;
        for (i, (&p, &y)) in positions.iter().zip(targets).enumerate() {
            let row = src.row(p);
            kernels::log_softmax_row(row, &mut logp).ok_or(Error::DegenerateRow { row: p })?;
            loss -= logp[y];
            for (q, &lp) in probs[i * v..(i + 1) * v].iter_mut().zip(&logp) {
                *q = lp.exp();
            }
        }
        let op = Op::CrossEntropy {
            logits,
            positions: positions.to_vec(),
            targets: targets.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Reverse pass from a scalar. Returns gradients for every parameter the
    /// loss reaches.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::invalid(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::empty(self.store.len());

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node<'p>,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => match &mut out.slots[id.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            },
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).cols();
                if needs(*a) {
                    let bt = transposed(self.value(*b).data(), k, n);
                    let ga = grad_slot(grads, *a, m * k);
                    matmul_acc(&g, &bt, m, n, k, ga);
                }
                if needs(*b) {
                    let at = transposed(self.value(*a).data(), m, k);
                    let gb = grad_slot(grads, *b, k * n);
                    matmul_acc(&at, &g, k, m, n, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).rows();
                if needs(*a) {
                    let ga = grad_slot(grads, *a, m * k);
                    matmul_acc(&g, self.value(*b).data(), m, n, k, ga);
                }
                if needs(*b) {
                    let gt = transposed(&g, m, n);
                    let gb = grad_slot(grads, *b, n * k);
                    matmul_acc(&gt, self.value(*a).data(), n, m, k, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        add_into(grad_slot(grads, v, g.len()), &g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = self.value(*b).data();
                    let ga = grad_slot(grads, *a, g.len());
                    for ((x, gi), y) in ga.iter_mut().zip(&g).zip(bv) {
                        *x += gi * y;
                    }
                }
                if needs(*b) {
                    let av = self.value(*a).data();
                    let gb = grad_slot(grads, *b, g.len());
                    for ((x, gi), y) in gb.iter_mut().zip(&g).zip(av) {
                        *x += gi * y;
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                let n = self.value(*bias).numel();
                if needs(*bias) {
                    let gb = grad_slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
                if needs(*x) {
                    add_into(grad_slot(grads, *x, g.len()), &g);
                }
            }
            Op::Scale(x, s) => {
                let gx = grad_slot(grads, *x, g.len());
                for (a, b) in gx.iter_mut().zip(&g) {
                    *a += b * s;
                }
            }
            Op::AddConst(x) | Op::Reshape(x) => {
                add_into(grad_slot(grads, *x, g.len()), &g);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let gx = grad_slot(grads, *x, g.len());
                for ((a, b), &v) in gx.iter_mut().zip(&g).zip(xv) {
                    *a += b * kernels::gelu_grad(v);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let gx = grad_slot(grads, *x, g.len());
                for ((yr, gr), outr) in y.chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        outr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = self.value(*gamma).numel();
                let gam = self.value(*gamma).data();
                if needs(*gamma) {
                    let gg = grad_slot(grads, *gamma, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if needs(*beta) {
                    let gb = grad_slot(grads, *beta, d);
                    for gr in g.chunks(d) {
                        add_into(gb, gr);
                    }
                }
                if needs(*x) {
                    let gx = grad_slot(grads, *x, g.len());
                    let mut dh = vec![0.0; d];
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for j in 0..d {
                            dh[j] = gr[j] * gam[j];
                            sum_dh += dh[j];
                            sum_dh_h += dh[j] * hr[j];
                        }
                        let scale = inv_std[r] / d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += scale * (d as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (m, n) = node.value.dims2().unwrap();
                let gt = transposed(&g, m, n);
                add_into(grad_slot(grads, *x, g.len()), &gt);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if needs(p) {
                        add_into(grad_slot(grads, p, len), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let m = node.value.rows();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if needs(p) {
                        let gp = grad_slot(grads, p, m * w);
                        for r in 0..m {
                            add_into(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + col..r * total + col + w],
                            );
                        }
                    }
                    col += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.value(*x).dims2().unwrap();
                let w = node.value.cols();
                let gx = grad_slot(grads, *x, m * n);
                for r in 0..m {
                    add_into(
                        &mut gx[r * n + start..r * n + start + w],
                        &g[r * w..(r + 1) * w],
                    );
                }
            }
            Op::Embedding { table, ids } => {
                let (v, d) = self.value(*table).dims2().unwrap();
                let gt = grad_slot(grads, *table, v * d);
                for (i, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[i * d..(i + 1) * d]);
                }
            }
            Op::GatherRows { x, rows } => {
                let (m, d) = self.value(*x).dims2().unwrap();
                let gx = grad_slot(grads, *x, m * d);
                for (i, &r) in rows.iter().enumerate() {
                    add_into(&mut gx[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let gx = grad_slot(grads, *x, n);
                for a in gx.iter_mut() {
                    *a += g[0];
                }
            }
            Op::CrossEntropy {
                logits,
                positions,
                targets,
                probs,
            } => {
                let (t, v) = self.value(*logits).dims2().unwrap();
                let gl = grad_slot(grads, *logits, t * v);
                for (i, (&p, &y)) in positions.iter().zip(targets).enumerate() {
                    let row = &mut gl[p * v..(p + 1) * v];
                    for (j, q) in probs[i * v..(i + 1) * v].iter().enumerate() {
                        row[j] += g[0] * q;
                    }
                    row[y] -= g[0];
                }
            }
        }
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}
