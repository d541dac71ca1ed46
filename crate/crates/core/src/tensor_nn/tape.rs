//! Reverse-mode differentiation over 2-D tensors.
//!
//! A [`Tape`] records every operation in evaluation order. Values are
//! computed eagerly; [`Tape::backward`] walks the record in reverse and
//! accumulates gradients. Only the operations the layers in this crate use
//! are provided.

use crate::error::{shape_err, Result};
use crate::tensor_nn::tensor::{dot, matmul_into, matmul_nt_into, matmul_tn_into, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Element(Var, usize),
    GatherRows(Var, Vec<usize>),
    PickPerRow(Var, Vec<Vec<usize>>),
    ExpertMix {
        x: Var,
        u: Var,
        v: Var,
        weights: Var,
        routes: Vec<Vec<usize>>,
        hidden: Vec<f64>,
    },
    ConstMix {
        b: Var,
        weights: Var,
        routes: Vec<Vec<usize>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Vec<f64>),
    RowDot(Var, Var),
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn dims(t: &Tensor) -> Result<(usize, usize)> {
    t.dims2()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims(self.value(a))?;
        let (n, k2) = dims(self.value(b))?;
        if k != k2 {
            return shape_err(format!("matmul_nt {m}x{k} by ({n}x{k2})^T"));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let value = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(value, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let value = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Adds the `1 x n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = dims(self.value(a))?;
        if self.value(b).shape() != [1, n] {
            return shape_err(format!("add_row {m}x{n} with {:?}", self.value(b).shape()));
        }
        let row = self.value(b).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, r) in chunk.iter_mut().zip(&row) {
                *x += r;
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::AddRow(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c))
    }

    /// Multiplies `a` by the `1 x 1` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err(format!("scale_by expects a scalar, got {:?}", self.value(s).shape()));
        }
        let c = self.scalar(s);
        let value = self.value(a).map(|x| x * c);
        Ok(self.push(value, Op::ScaleBy(a, s)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims(self.value(a))?;
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::SoftmaxRows(a)))
    }

    /// Row-wise softmax where entry `(i, j)` with `j > i` is masked out.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims(self.value(a))?;
        let mut data = self.value(a).data().to_vec();
        for (i, row) in data.chunks_mut(n).enumerate() {
            let visible = (i + 1).min(n);
            softmax_in_place(&mut row[..visible]);
            row[visible..].iter_mut().for_each(|v| *v = 0.0);
        }
        // Masked entries carry zero probability, so the plain softmax backward applies.
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::SoftmaxRows(a)))
    }

    /// Row-wise layer normalization with `1 x n` scale and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = dims(self.value(x))?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [1, n] {
                return shape_err(format!("layer_norm width {n}, param {:?}", self.value(p).shape()));
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..n {
                let h = (row[c] - mean) * is;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims(self.value(a))?;
        if start + len > n {
            return shape_err(format!("slice_cols {start}..{} of width {n}", start + len));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![m, len], data), Op::SliceCols(a, start)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims(self.value(a))?;
        if start + len > m {
            return shape_err(format!("slice_rows {start}..{} of {m}", start + len));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(Tensor::from_parts(vec![len, n], data), Op::SliceRows(a, start)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(crate::Error::EmptyInput("concat_cols"))?;
        let m = dims(self.value(first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims(self.value(p))?;
            if pm != m {
                return shape_err(format!("concat_cols rows {pm} vs {m}"));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, total], data), Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(crate::Error::EmptyInput("concat_rows"))?;
        let n = dims(self.value(first))?.1;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = dims(self.value(p))?;
            if pn != n {
                return shape_err(format!("concat_rows cols {pn} vs {n}"));
            }
            data.extend_from_slice(self.value(p).data());
            m += pm;
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::ConcatRows(parts.to_vec())))
    }

    /// The `1 x 1` node holding flat element `index` of `a`.
    pub fn element(&mut self, a: Var, index: usize) -> Result<Var> {
        let Some(&v) = self.value(a).data().get(index) else {
            return shape_err(format!("element {index} of {:?}", self.value(a).shape()));
        };
        Ok(self.push(Tensor::from_parts(vec![1, 1], vec![v]), Op::Element(a, index)))
    }

    /// Rows `ids` of a `n x d` table, in order.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = dims(self.value(table))?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(crate::Error::OutOfVocabulary { id, n });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::GatherRows(table, ids.to_vec()),
        ))
    }

    /// For row `t`, picks the columns `cols[t]`; all rows must pick the same count.
    pub fn pick_per_row(&mut self, a: Var, cols: Vec<Vec<usize>>) -> Result<Var> {
        let (m, n) = dims(self.value(a))?;
        if cols.len() != m {
            return shape_err(format!("pick_per_row: {} index rows for {m} rows", cols.len()));
        }
        let k = cols.first().map_or(0, Vec::len);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * k);
        for (t, row) in cols.iter().enumerate() {
            if row.len() != k || row.iter().any(|&c| c >= n) {
                return shape_err(format!("pick_per_row: bad index row {row:?}"));
            }
            data.extend(row.iter().map(|&c| src[t * n + c]));
        }
        Ok(self.push(Tensor::from_parts(vec![m, k], data), Op::PickPerRow(a, cols)))
    }

    /// Weighted sum of two-layer partial experts per row:
    /// `out_t = sum_s w[t,s] * V_i relu(U_i^T x_t)` with `i = routes[t][s]`.
    /// `u` and `v` are `[n, d, rank]` tables.
    pub fn expert_mix(&mut self, x: Var, u: Var, v: Var, weights: Var, routes: Vec<Vec<usize>>) -> Result<Var> {
        let (m, d) = dims(self.value(x))?;
        let (n, ud, rank) = match self.value(u).shape() {
            [n, ud, r] => (*n, *ud, *r),
            s => return shape_err(format!("expert table must be [n, d, rank], got {s:?}")),
        };
        if ud != d || self.value(v).shape() != self.value(u).shape() {
            return shape_err(format!(
                "expert tables {:?}/{:?} for input width {d}",
                self.value(u).shape(),
                self.value(v).shape()
            ));
        }
        check_routes(&routes, self.value(weights), m, n)?;
        let k = routes.first().map_or(0, Vec::len);
        let (xs, us, vs, ws) = (
            self.value(x).data(),
            self.value(u).data(),
            self.value(v).data(),
            self.value(weights).data(),
        );
        let mut hidden = vec![0.0; m * k * rank];
        let mut out = vec![0.0; m * d];
        for t in 0..m {
            let xt = &xs[t * d..(t + 1) * d];
            for (s, &i) in routes[t].iter().enumerate() {
                let ui = &us[i * d * rank..(i + 1) * d * rank];
                let vi = &vs[i * d * rank..(i + 1) * d * rank];
                let h = &mut hidden[(t * k + s) * rank..(t * k + s + 1) * rank];
                for (row, &xv) in xt.iter().enumerate() {
                    for (hj, &uv) in h.iter_mut().zip(&ui[row * rank..(row + 1) * rank]) {
                        *hj += xv * uv;
                    }
                }
                let w = ws[t * k + s];
                let o = &mut out[t * d..(t + 1) * d];
                for (row, ov) in o.iter_mut().enumerate() {
                    let vrow = &vi[row * rank..(row + 1) * rank];
                    let acc: f64 = vrow.iter().zip(h.iter()).map(|(a, &b)| a * b.max(0.0)).sum();
                    *ov += w * acc;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![m, d], out),
            Op::ExpertMix { x, u, v, weights, routes, hidden },
        ))
    }

    /// Weighted sum of constant experts: `out_t = sum_s w[t,s] * b_i`.
    pub fn const_mix(&mut self, b: Var, weights: Var, routes: Vec<Vec<usize>>) -> Result<Var> {
        let (n, d) = dims(self.value(b))?;
        let m = routes.len();
        check_routes(&routes, self.value(weights), m, n)?;
        let k = routes.first().map_or(0, Vec::len);
        let (bs, ws) = (self.value(b).data(), self.value(weights).data());
        let mut out = vec![0.0; m * d];
        for (t, route) in routes.iter().enumerate() {
            for (s, &i) in route.iter().enumerate() {
                let w = ws[t * k + s];
                for (o, &bv) in out[t * d..(t + 1) * d].iter_mut().zip(&bs[i * d..(i + 1) * d]) {
                    *o += w * bv;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, d], out), Op::ConstMix { b, weights, routes }))
    }

    /// Mean next-token cross-entropy (nats) of `m x V` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, v) = dims(self.value(logits))?;
        if targets.len() != m {
            return shape_err(format!("cross_entropy: {} targets for {m} rows", targets.len()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            if t >= v {
                return Err(crate::Error::OutOfVocabulary { id: t, n: v });
            }
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let value = Tensor::from_parts(vec![1, 1], vec![loss / m as f64]);
        Ok(self.push(value, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// Mean squared error against constant targets.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() || p.is_empty() {
            return shape_err(format!("mse: {} predictions, {} targets", p.len(), target.len()));
        }
        let loss = p.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
        let value = Tensor::from_parts(vec![1, 1], vec![loss]);
        Ok(self.push(value, Op::Mse(pred, target.to_vec())))
    }

    /// Per-row dot products, `m x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "row_dot")?;
        let (m, n) = dims(self.value(a))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = (0..m).map(|r| dot(&da[r * n..(r + 1) * n], &db[r * n..(r + 1) * n])).collect();
        Ok(self.push(Tensor::from_parts(vec![m, 1], data), Op::RowDot(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::from_parts(vec![1, 1], vec![s]), Op::Sum(a))
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return shape_err(format!("backward from non-scalar {:?}", self.value(output).shape()));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::filled(&shapes[output.0], 1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let shape_of = |v: Var| self.nodes[v.0].value.shape().to_vec();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape_of(v)));
            f(slot.data_mut());
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| matmul_nt_into(gd, bv, ga, m, n, k));
                acc(*b, &mut |gb| matmul_tn_into(av, gd, gb, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).rows();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| matmul_into(gd, bv, ga, m, n, k));
                acc(*b, &mut |gb| matmul_tn_into(gd, av, gb, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| add_into(gb, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| gb.iter_mut().zip(gd).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for ((x, gy), bvv) in ga.iter_mut().zip(gd).zip(bv) {
                        *x += gy * bvv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, gy), avv) in gb.iter_mut().zip(gd).zip(av) {
                        *x += gy * avv;
                    }
                });
            }
            Op::AddRow(a, b) => {
                let n = self.value(*b).cols();
                acc(*a, &mut |ga| add_into(ga, gd));
                acc(*b, &mut |gb| {
                    for row in gd.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for (x, gy) in ga.iter_mut().zip(gd) {
                    *x += c * gy;
                }
            }),
            Op::ScaleBy(a, s) => {
                let c = self.scalar(*s);
                let av = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for (x, gy) in ga.iter_mut().zip(gd) {
                        *x += c * gy;
                    }
                });
                let gs = dot(gd, av);
                acc(*s, &mut |gsv| gsv[0] += gs);
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for ((x, gy), &v) in ga.iter_mut().zip(gd).zip(av) {
                        if v > 0.0 {
                            *x += gy;
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = node.value.data();
                acc(*a, &mut |ga| {
                    for ((x, gy), &y) in ga.iter_mut().zip(gd).zip(yv) {
                        *x += gy * (1.0 - y * y);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let n = node.value.cols();
                let yv = node.value.data();
                acc(*a, &mut |ga| {
                    for ((gr, yr), dr) in ga.chunks_mut(n).zip(yv.chunks(n)).zip(gd.chunks(n)) {
                        let inner = dot(yr, dr);
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - inner);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let n = node.value.cols();
                let gv = self.value(*gamma).data();
                acc(*beta, &mut |gb| {
                    for row in gd.chunks(n) {
                        add_into(gb, row);
                    }
                });
                acc(*gamma, &mut |gg| {
                    for (row, hrow) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += row[j] * hrow[j];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, ((gxr, row), hrow)) in
                        gx.chunks_mut(n).zip(gd.chunks(n)).zip(xhat.chunks(n)).enumerate()
                    {
                        let dh: Vec<f64> = (0..n).map(|j| row[j] * gv[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h = dot(&dh, hrow) / n as f64;
                        for j in 0..n {
                            gxr[j] += inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let n = self.value(*a).cols();
                let len = node.value.cols();
                acc(*a, &mut |ga| {
                    for (r, row) in gd.chunks(len).enumerate() {
                        add_into(&mut ga[r * n + start..r * n + start + len], row);
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let n = node.value.cols();
                acc(*a, &mut |ga| add_into(&mut ga[start * n..start * n + gd.len()], gd));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    acc(p, &mut |gp| {
                        for (r, row) in gp.chunks_mut(w).enumerate() {
                            add_into(row, &gd[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(p, &mut |gp| add_into(gp, &gd[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Element(a, index) => acc(*a, &mut |ga| ga[*index] += gd[0]),
            Op::GatherRows(table, ids) => {
                let d = node.value.cols();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &gd[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::PickPerRow(a, cols) => {
                let n = self.value(*a).cols();
                let k = node.value.cols();
                acc(*a, &mut |ga| {
                    for (t, row) in cols.iter().enumerate() {
                        for (s, &c) in row.iter().enumerate() {
                            ga[t * n + c] += gd[t * k + s];
                        }
                    }
                });
            }
            Op::ExpertMix { x, u, v, weights, routes, hidden } => {
                self.backprop_expert_mix(*x, *u, *v, *weights, routes, hidden, gd, grads);
            }
            Op::ConstMix { b, weights, routes } => {
                let d = self.value(*b).cols();
                let k = routes.first().map_or(0, Vec::len);
                let (bs, ws) = (self.value(*b).data(), self.value(*weights).data());
                acc(*weights, &mut |gw| {
                    for (t, route) in routes.iter().enumerate() {
                        for (s, &i) in route.iter().enumerate() {
                            gw[t * k + s] += dot(&gd[t * d..(t + 1) * d], &bs[i * d..(i + 1) * d]);
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (t, route) in routes.iter().enumerate() {
                        for (s, &i) in route.iter().enumerate() {
                            let w = ws[t * k + s];
                            for (o, gy) in gb[i * d..(i + 1) * d].iter_mut().zip(&gd[t * d..(t + 1) * d]) {
                                *o += w * gy;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.value(*logits).cols();
                let scale = gd[0] / targets.len() as f64;
                acc(*logits, &mut |gl| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                });
            }
            Op::Mse(pred, target) => {
                let pv = self.value(*pred).data();
                let scale = 2.0 * gd[0] / target.len() as f64;
                acc(*pred, &mut |gp| {
                    for ((x, &p), &t) in gp.iter_mut().zip(pv).zip(target) {
                        *x += scale * (p - t);
                    }
                });
            }
            Op::RowDot(a, b) => {
                let n = self.value(*a).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += gd[i / n] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for (i, x) in gb.iter_mut().enumerate() {
                        *x += gd[i / n] * av[i];
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += gd[0])),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_expert_mix(
        &self,
        x: Var,
        u: Var,
        v: Var,
        weights: Var,
        routes: &[Vec<usize>],
        hidden: &[f64],
        gd: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (m, d) = self.value(x).dims2().unwrap();
        let rank = self.value(u).shape()[2];
        let k = routes.first().map_or(0, Vec::len);
        let (xs, us, vs, ws) = (
            self.value(x).data(),
            self.value(u).data(),
            self.value(v).data(),
            self.value(weights).data(),
        );
        let mut gx = vec![0.0; m * d];
        let mut gu = vec![0.0; self.value(u).len()];
        let mut gv = vec![0.0; self.value(v).len()];
        let mut gw = vec![0.0; m * k];
        let mut act = vec![0.0; rank];
        let mut dact = vec![0.0; rank];
        for t in 0..m {
            let xt = &xs[t * d..(t + 1) * d];
            let gt = &gd[t * d..(t + 1) * d];
            for (s, &i) in routes[t].iter().enumerate() {
                let base = i * d * rank;
                let h = &hidden[(t * k + s) * rank..(t * k + s + 1) * rank];
                for (a, &hv) in act.iter_mut().zip(h) {
                    *a = hv.max(0.0);
                }
                let w = ws[t * k + s];
                dact.iter_mut().for_each(|v| *v = 0.0);
                let mut gws = 0.0;
                for row in 0..d {
                    let vrow = &vs[base + row * rank..base + (row + 1) * rank];
                    gws += gt[row] * dot(vrow, &act);
                    let gvrow = &mut gv[base + row * rank..base + (row + 1) * rank];
                    for j in 0..rank {
                        gvrow[j] += w * gt[row] * act[j];
                        dact[j] += w * gt[row] * vrow[j];
                    }
                }
                gw[t * k + s] += gws;
                for j in 0..rank {
                    if h[j] <= 0.0 {
                        dact[j] = 0.0;
                    }
                }
                for row in 0..d {
                    let urow = &us[base + row * rank..base + (row + 1) * rank];
                    gx[t * d + row] += dot(urow, &dact);
                    let gurow = &mut gu[base + row * rank..base + (row + 1) * rank];
                    for j in 0..rank {
                        gurow[j] += xt[row] * dact[j];
                    }
                }
            }
        }
        for (var, g) in [(x, gx), (u, gu), (v, gv), (weights, gw)] {
            let shape = self.value(var).shape().to_vec();
            let slot = grads[var.0].get_or_insert_with(|| Tensor::zeros(&shape));
            add_into(slot.data_mut(), &g);
        }
    }
}

fn check_routes(routes: &[Vec<usize>], weights: &Tensor, m: usize, n: usize) -> Result<()> {
    let k = routes.first().map_or(0, Vec::len);
    if routes.len() != m || weights.shape() != [m, k] {
        return shape_err(format!(
            "{} routes for {m} rows with weights {:?}",
            routes.len(),
            weights.shape()
        ));
    }
    for route in routes {
        if route.len() != k {
            return shape_err("ragged routes");
        }
        if let Some(&bad) = route.iter().find(|&&i| i >= n) {
            return Err(crate::Error::OutOfVocabulary { id: bad, n });
        }
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, seed: u64) -> Tensor {
        Tensor::from_fn(rows, cols, |r, c| {
            (((r * 31 + c * 17) as u64 + seed) as f64 * 0.37).sin()
        })
        .unwrap()
    }

    #[test]
    fn matmul_gradients_match_closed_form() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 3, 1));
        let b = tape.leaf(t(3, 4, 2));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        // d(sum(AB))/dA = 1 * B^T, i.e. row sums of B broadcast.
        let ga = g.get(a);
        for i in 0..2 {
            for p in 0..3 {
                let expected: f64 = tape.value(b).row_slice(p).iter().sum();
                assert!((ga.get(i, p) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(3, 3, 5));
        let y = tape.causal_softmax_rows(a).unwrap();
        let v = tape.value(y);
        assert_eq!(v.get(0, 1), 0.0);
        assert_eq!(v.get(0, 2), 0.0);
        assert_eq!(v.get(1, 2), 0.0);
        assert!((v.get(0, 0) - 1.0).abs() < 1e-15);
        for r in 0..3 {
            assert!((v.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 2, 0));
        let b = tape.leaf(t(2, 2, 9));
        let s = tape.sum(a);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b), Tensor::zeros(&[2, 2]));
        assert_eq!(g.get(a), Tensor::filled(&[2, 2], 1.0));
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(2, 3, 0));
        let b = tape.leaf(t(2, 3, 1));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.slice_cols(a, 2, 2).is_err());
        let m = tape.matmul_nt(a, b).unwrap();
        assert!(tape.backward(m).is_err());
    }
}
