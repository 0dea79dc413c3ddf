//! Tape-based reverse-mode differentiation over rank-2 tensors.
//!
//! Every operation evaluates eagerly, appends a node to the tape and records
//! what its reverse rule needs. `backward` walks the tape in reverse, so node
//! inputs always have smaller indices than the node itself.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};

use super::{ParamId, ParamStore, Scalar, Tensor};

/// Additive value placed on masked attention logits.
pub const MASK_VALUE: f64 = -1e9;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow { a: Var, row: Var },
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    ParamRows { id: ParamId, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    MeanRows(Var),
    MeanOf(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad_id: usize,
        probs: Vec<T>,
        scale: T,
    },
}

/// Parameter rows a computation read. `None` marks a parameter that was
/// loaded whole.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Reads(BTreeMap<ParamId, Option<BTreeSet<usize>>>);

impl Reads {
    pub fn touches(&self, id: ParamId, row: usize) -> bool {
        match self.0.get(&id) {
            None => false,
            Some(None) => true,
            Some(Some(rows)) => rows.contains(&row),
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation tape. Parameters are copied in on first use, so the graph
/// never borrows the store it reads from.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044_715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044_715);
    let half = T::of(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(nodes[v.0].value.shape()))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn reads(&self) -> Reads {
        let mut out: BTreeMap<ParamId, Option<BTreeSet<usize>>> = self.params.keys().map(|&id| (id, None)).collect();
        for node in &self.nodes {
            if let Op::ParamRows { id, ids } = &node.op {
                if let Some(rows) = out.entry(*id).or_insert_with(|| Some(BTreeSet::new())) {
                    rows.extend(ids);
                }
            }
        }
        Reads(out)
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input that is not a stored parameter.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a parameter. Repeated calls return the same node, so shared
    /// weights accumulate a single gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), Op::Leaf, p.trainable);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (n, kb) = if trans_b {
            (bv.rows(), bv.cols())
        } else {
            (bv.cols(), bv.rows())
        };
        if k != kb {
            return Err(Error::shape(
                if trans_b { "matmul_t" } else { "matmul" },
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            av.data(),
            k as isize,
            1,
            bv.data(),
            rsb,
            csb,
            T::zero(),
            &mut out,
        );
        let req = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, trans_b }, req))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let req = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), req))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(av.shape().to_vec(), data)?;
        let req = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), req))
    }

    /// Adds a `1 x n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.numel() != av.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", av.shape(), rv.shape()),
            ));
        }
        let mut out = av.clone();
        let n = av.cols();
        let r = rv.data().to_vec();
        for chunk in out.data_mut().chunks_mut(n.max(1)) {
            for (o, &b) in chunk.iter_mut().zip(&r) {
                *o = *o + b;
            }
        }
        let req = self.needs(a) || self.needs(row);
        Ok(self.push(out, Op::AddRow { a, row }, req))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).map(|v| v * s);
        let req = self.needs(a);
        self.push(out, Op::Scale(a, s), req)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let req = self.needs(a);
        self.push(out, Op::Gelu(a), req)
    }

    /// Row-wise layer normalisation followed by `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(Error::shape("layer_norm", format!("input {:?}", xv.shape())));
        }
        let rows = xv.rows();
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut xhat = vec![T::zero(); rows * n];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * n];
        let nf = T::of(n as f64);
        let eps = T::of(LN_EPS);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / nf;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::from_vec(xv.shape().to_vec(), out)?;
        let req = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            req,
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Row-wise softmax of `x + mask`. The mask is a constant additive
    /// tensor of the same shape (use [`MASK_VALUE`] for blocked entries).
    pub fn softmax_masked(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(m) = mask {
            if m.shape() != xv.shape() {
                return Err(Error::shape(
                    "softmax",
                    format!("mask {:?} vs logits {:?}", m.shape(), xv.shape()),
                ));
            }
        }
        let n = xv.cols();
        let mut out = xv.clone();
        if let Some(m) = mask {
            out.add_assign(m);
        }
        if n > 0 {
            for row in out.data_mut().chunks_mut(n) {
                let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / sum;
                }
            }
        }
        let req = self.needs(x);
        Ok(self.push(out, Op::Softmax(x), req))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = Tensor::matrix(ids.len(), d, out)?;
        let req = self.needs(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            req,
        ))
    }

    /// Rows of a parameter table gathered straight from the store. Unlike
    /// `param` + `embedding` the table is never copied, which matters for
    /// large lookup tables; gradients are scattered back by `accumulate_into`.
    pub fn param_rows(&mut self, store: &ParamStore<T>, id: ParamId, ids: &[usize]) -> Result<Var> {
        let p = store.get(id);
        let (rows, d) = (p.tensor.rows(), p.tensor.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: i,
                    size: rows,
                });
            }
            out.extend_from_slice(p.tensor.row(i));
        }
        let out = Tensor::matrix(ids.len(), d, out)?;
        Ok(self.push(out, Op::ParamRows { id, ids: ids.to_vec() }, p.trainable))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column mismatch {} vs {cols}", v.cols()),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let req = parts.iter().any(|&p| self.needs(p));
        let out = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), req))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row mismatch {} vs {rows}", v.rows()),
                ));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let req = parts.iter().any(|&p| self.needs(p));
        let out = Tensor::matrix(rows, total, data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), req))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}..{} of {}", start + len, av.rows()),
            ));
        }
        let c = av.cols();
        let data = av.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::matrix(len, c, data)?;
        let req = self.needs(a);
        Ok(self.push(out, Op::SliceRows { a, start }, req))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{} of {}", start + len, av.cols()),
            ));
        }
        let rows = av.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let out = Tensor::matrix(rows, len, data)?;
        let req = self.needs(a);
        Ok(self.push(out, Op::SliceCols { a, start }, req))
    }

    /// Mean over axis 0, giving a `1 x n` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (rows, n) = (av.rows(), av.cols());
        if rows == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let mut out = vec![T::zero(); n];
        for r in 0..rows {
            for (o, &v) in out.iter_mut().zip(av.row(r)) {
                *o = *o + v;
            }
        }
        let inv = T::one() / T::of(rows as f64);
        out.iter_mut().for_each(|v| *v = *v * inv);
        let req = self.needs(a);
        Ok(self.push(Tensor::matrix(1, n, out)?, Op::MeanRows(a), req))
    }

    /// Elementwise arithmetic mean of same-shaped tensors.
    pub fn mean_of(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("mean_of", "no inputs"))?;
        let mut acc = Tensor::zeros(self.value(first).shape());
        for &p in parts {
            self.same_shape("mean_of", first, p)?;
            acc.add_assign(self.value(p));
        }
        let inv = T::one() / T::of(parts.len() as f64);
        let out = acc.map(|v| v * inv);
        let req = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::MeanOf(parts.to_vec()), req))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(T::zero(), |s, &v| s + v);
        let req = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), req)
    }

    /// Mean negative log-likelihood (nats) over targets different from `pad_id`.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad_id: usize,
    ) -> Result<Var> {
        let count = targets.iter().filter(|&&t| t != pad_id).count();
        if count == 0 {
            return Err(Error::NoTargets);
        }
        self.cross_entropy_impl(logits, targets, pad_id, 1.0 / count as f64)
    }

    /// Summed negative log-likelihood plus the number of non-pad targets.
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad_id: usize,
    ) -> Result<(Var, usize)> {
        let count = targets.iter().filter(|&&t| t != pad_id).count();
        Ok((self.cross_entropy_impl(logits, targets, pad_id, 1.0)?, count))
    }

    fn cross_entropy_impl(
        &mut self,
        logits: Var,
        targets: &[usize],
        pad_id: usize,
        scale: f64,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = (lv.rows(), lv.cols());
        if rows != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("{rows} logit rows vs {} targets", targets.len()),
            ));
        }
        let mut probs = vec![T::zero(); rows * vocab];
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t != pad_id && t >= vocab {
                return Err(Error::Index {
                    what: "vocabulary",
                    index: t,
                    size: vocab,
                });
            }
            let row = lv.row(r);
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for (p, &v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - max).exp();
                z = z + *p;
            }
            for p in &mut probs[r * vocab..(r + 1) * vocab] {
                *p = *p / z;
            }
            if t != pad_id {
                total = total + (z.ln() + max - row[t]);
            }
        }
        let scale = T::of(scale);
        let req = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
                probs,
                scale,
            },
            req,
        ))
    }

    /// Runs the reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        let nodes = &self.nodes;

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.reverse_rule(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn reverse_rule(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::ParamRows { .. } => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (av.rows(), av.cols());
                let n = g.cols();
                if needs(*a) {
                    let da = slot(grads, nodes, *a);
                    if *trans_b {
                        // dA = dC @ B, B is [n, k]
                        T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, bv.data(), k as isize, 1, T::one(), da.data_mut());
                    } else {
                        // dA = dC @ B^T, B is [k, n]
                        T::gemm(m, n, k, T::one(), g.data(), n as isize, 1, bv.data(), 1, n as isize, T::one(), da.data_mut());
                    }
                }
                if needs(*b) {
                    let db = slot(grads, nodes, *b);
                    if *trans_b {
                        // dB = dC^T @ A, shape [n, k]
                        T::gemm(n, m, k, T::one(), g.data(), 1, n as isize, av.data(), k as isize, 1, T::one(), db.data_mut());
                    } else {
                        // dB = A^T @ dC, shape [k, n]
                        T::gemm(k, m, n, T::one(), av.data(), 1, k as isize, g.data(), n as isize, 1, T::one(), db.data_mut());
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        slot(grads, nodes, v).add_assign(g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = &nodes[b.0].value;
                    let da = slot(grads, nodes, *a);
                    for ((d, &gv), &y) in da.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *d = *d + gv * y;
                    }
                }
                if needs(*b) {
                    let av = &nodes[a.0].value;
                    let db = slot(grads, nodes, *b);
                    for ((d, &gv), &x) in db.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *d = *d + gv * x;
                    }
                }
            }
            Op::AddRow { a, row } => {
                if needs(*a) {
                    slot(grads, nodes, *a).add_assign(g);
                }
                if needs(*row) {
                    let n = g.cols();
                    let dr = slot(grads, nodes, *row);
                    if n > 0 {
                        for chunk in g.data().chunks(n) {
                            for (d, &v) in dr.data_mut().iter_mut().zip(chunk) {
                                *d = *d + v;
                            }
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if needs(*a) {
                    let da = slot(grads, nodes, *a);
                    for (d, &v) in da.data_mut().iter_mut().zip(g.data()) {
                        *d = *d + v * *s;
                    }
                }
            }
            Op::Gelu(a) => {
                if needs(*a) {
                    let xv = &nodes[a.0].value;
                    let da = slot(grads, nodes, *a);
                    for ((d, &gv), &x) in da.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *d = *d + gv * gelu_grad(x);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = g.cols();
                let rows = g.rows();
                let gainv = nodes[gain.0].value.data();
                if needs(*gain) {
                    let dg = slot(grads, nodes, *gain);
                    for r in 0..rows {
                        for c in 0..n {
                            let d = &mut dg.data_mut()[c];
                            *d = *d + g.data()[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if needs(*bias) {
                    let db = slot(grads, nodes, *bias);
                    for r in 0..rows {
                        for c in 0..n {
                            let d = &mut db.data_mut()[c];
                            *d = *d + g.data()[r * n + c];
                        }
                    }
                }
                if needs(*x) {
                    let nf = T::of(n as f64);
                    let dx = slot(grads, nodes, *x);
                    let mut dxhat = vec![T::zero(); n];
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..n {
                            let v = g.data()[r * n + c] * gainv[c];
                            dxhat[c] = v;
                            mean_d = mean_d + v;
                            mean_dx = mean_dx + v * xhat[r * n + c];
                        }
                        mean_d = mean_d / nf;
                        mean_dx = mean_dx / nf;
                        for c in 0..n {
                            let o = &mut dx.data_mut()[r * n + c];
                            *o = *o + rstd[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if needs(*a) {
                    let y = &node.value;
                    let n = y.cols();
                    let da = slot(grads, nodes, *a);
                    if n > 0 {
                        for r in 0..y.rows() {
                            let yr = y.row(r);
                            let gr = &g.data()[r * n..(r + 1) * n];
                            let dot = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                            let dr = &mut da.data_mut()[r * n..(r + 1) * n];
                            for c in 0..n {
                                dr[c] = dr[c] + yr[c] * (gr[c] - dot);
                            }
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if needs(*table) {
                    let d = g.cols();
                    let dt = slot(grads, nodes, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g.data()[r * d..(r + 1) * d];
                        let dst = &mut dt.data_mut()[id * d..(id + 1) * d];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = nodes[p.0].value.rows();
                    if needs(p) {
                        let dp = slot(grads, nodes, p);
                        let src = &g.data()[offset * c..(offset + rows) * c];
                        for (o, &v) in dp.data_mut().iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let pc = nodes[p.0].value.cols();
                    if needs(p) {
                        let dp = slot(grads, nodes, p);
                        for r in 0..g.rows() {
                            let src = &g.data()[r * total + offset..r * total + offset + pc];
                            for (o, &v) in dp.data_mut()[r * pc..(r + 1) * pc].iter_mut().zip(src) {
                                *o = *o + v;
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceRows { a, start } => {
                if needs(*a) {
                    let c = g.cols();
                    let da = slot(grads, nodes, *a);
                    let dst = &mut da.data_mut()[start * c..(start + g.rows()) * c];
                    for (o, &v) in dst.iter_mut().zip(g.data()) {
                        *o = *o + v;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if needs(*a) {
                    let len = g.cols();
                    let da = slot(grads, nodes, *a);
                    let full = da.cols();
                    for r in 0..g.rows() {
                        let dst = &mut da.data_mut()[r * full + start..r * full + start + len];
                        for (o, &v) in dst.iter_mut().zip(g.row(r)) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::MeanRows(a) => {
                if needs(*a) {
                    let da = slot(grads, nodes, *a);
                    let rows = da.rows();
                    let n = da.cols();
                    let inv = T::one() / T::of(rows as f64);
                    for r in 0..rows {
                        for c in 0..n {
                            let o = &mut da.data_mut()[r * n + c];
                            *o = *o + g.data()[c] * inv;
                        }
                    }
                }
            }
            Op::MeanOf(parts) => {
                let inv = T::one() / T::of(parts.len() as f64);
                for &p in parts {
                    if needs(p) {
                        let dp = slot(grads, nodes, p);
                        for (o, &v) in dp.data_mut().iter_mut().zip(g.data()) {
                            *o = *o + v * inv;
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let s = g.item();
                    let da = slot(grads, nodes, *a);
                    da.data_mut().iter_mut().for_each(|o| *o = *o + s);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad_id,
                probs,
                scale,
            } => {
                if needs(*logits) {
                    let s = g.item() * *scale;
                    let dl = slot(grads, nodes, *logits);
                    let vocab = dl.cols();
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *pad_id {
                            continue;
                        }
                        let dr = &mut dl.data_mut()[r * vocab..(r + 1) * vocab];
                        for (c, o) in dr.iter_mut().enumerate() {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            *o = *o + s * (probs[r * vocab + c] - onehot);
                        }
                    }
                }
            }
        }
    }

    /// Adds the gradients of every loaded parameter into the store's
    /// accumulators. Frozen parameters are skipped by the store.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        let mut loaded: Vec<_> = self.params.iter().collect();
        loaded.sort_by_key(|(id, _)| **id);
        for (&id, &v) in loaded {
            if let Some(g) = self.grad(v) {
                store.accumulate(id, g)?;
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::ParamRows { id, ids }, Some(g)) = (&node.op, self.grads.get(i).and_then(Option::as_ref)) {
                store.accumulate_rows(*id, ids, g)?;
            }
        }
        Ok(())
    }

    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?;
        self.accumulate_into(store)
    }
}

/// Builds an additive attention mask of shape `[queries, keys]`.
/// `key_blocked[j]` masks key `j` for every query; `causal` additionally
/// blocks keys after the query position.
pub fn attention_mask<T: Scalar>(
    queries: usize,
    keys: usize,
    key_blocked: Option<&[bool]>,
    causal: bool,
) -> Option<Tensor<T>> {
    let any_blocked = key_blocked.is_some_and(|m| m.iter().any(|&b| b));
    if !any_blocked && !causal {
        return None;
    }
    let neg = T::of(MASK_VALUE);
    let mut m = Tensor::zeros(&[queries, keys]);
    for q in 0..queries {
        let row = m.row_mut(q);
        for (k, v) in row.iter_mut().enumerate() {
            let blocked = key_blocked.is_some_and(|b| b[k]) || (causal && k > q);
            if blocked {
                *v = neg;
            }
        }
    }
    Some(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[vec![0.3; 4]]));
        let y = g.softmax(x).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn mean_rows_of_identical_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[vec![1.0, -2.0, 3.5], vec![1.0, -2.0, 3.5]]));
        let m = g.mean_rows(x).unwrap();
        assert_eq!(g.value(m).data(), &[1.0, -2.0, 3.5]);
    }

    #[test]
    fn matmul_by_identity() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let i = g.constant(Tensor::identity(2));
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c), g.value(a));
    }

    #[test]
    fn shape_error_names_op() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(Error::Shape { op, detail }) => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("[2, 3]"));
            }
            other => panic!("expected shape error, got {other:?}"),
        }
        assert!(matches!(g.add_row(a, b), Err(Error::Shape { op: "add_row", .. })));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("docformer.p", t(&[vec![1.0, 2.0, 3.0]]), true);
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let s = g.sum(v);
        g.backward_into(s, &mut store).unwrap();
        assert_eq!(store.get(p).grad.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_half_square() {
        let mut store = ParamStore::<f64>::new();
        let p = store.add("docformer.p", t(&[vec![1.0, -2.0]]), true);
        let mut g = Graph::new();
        let v = g.param(&store, p);
        let sq = g.mul(v, v).unwrap();
        let s = g.sum(sq);
        let loss = g.scale(s, 0.5);
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get(p).grad.data(), &[1.0, -2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 16]));
        let l = g.softmax_cross_entropy(x, &[3], 0).unwrap();
        assert!((g.value(l).item() - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturates() {
        let mut g = Graph::<f64>::new();
        // loss = ln(1 + 3 e^-20) ~ 6.2e-9
        let mut logits = Tensor::zeros(&[1, 4]);
        logits.data_mut()[2] = 20.0;
        let x = g.constant(logits);
        let l = g.softmax_cross_entropy(x, &[2], 0).unwrap();
        assert!(g.value(l).item() < 1e-8);
    }

    #[test]
    fn cross_entropy_hand_mean() {
        // Row 0: two-way uniform -> ln 2. Row 1: eight-way uniform -> ln 8.
        let mut logits = Tensor::<f64>::full(&[2, 8], -1e4);
        for c in 0..2 {
            logits.row_mut(0)[c] = 0.0;
        }
        logits.row_mut(1).fill(0.0);
        let mut g = Graph::new();
        let x = g.constant(logits);
        let l = g.softmax_cross_entropy(x, &[1, 7], 0).unwrap();
        let expected = (2f64.ln() + 8f64.ln()) / 2.0;
        assert!((g.value(l).item() - expected).abs() < 1e-12);
        assert!((expected - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_excludes_pad_and_errors_without_targets() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            g.softmax_cross_entropy(x, &[0, 0], 0),
            Err(Error::NoTargets)
        ));
        let l = g.softmax_cross_entropy(x, &[0, 2], 0).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn param_rows_matches_embedding() {
        let table = t(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let weights = t(&[vec![1.0, -2.0], vec![0.5, 3.0], vec![-1.0, 1.0], vec![2.0, 2.0]]);
        let ids = [2, 0, 2, 1];
        let run = |direct: bool| {
            let mut store = ParamStore::<f64>::new();
            let id = store.add("tbl", table.clone(), true);
            let mut g = Graph::new();
            let rows = if direct {
                g.param_rows(&store, id, &ids).unwrap()
            } else {
                let v = g.param(&store, id);
                g.embedding(v, &ids).unwrap()
            };
            let w = g.constant(weights.clone());
            let y = g.mul(rows, w).unwrap();
            let l = g.sum(y);
            let value = g.value(rows).clone();
            g.backward_into(l, &mut store).unwrap();
            (value, store.get(id).grad.clone())
        };
        let (v1, g1) = run(true);
        let (v2, g2) = run(false);
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
        assert_eq!(g1.row(2), &[0.0, -1.0]);

        let mut store = ParamStore::<f64>::new();
        let id = store.add("tbl", table, false);
        let mut g = Graph::new();
        assert!(matches!(g.param_rows(&store, id, &[3]), Err(Error::Index { .. })));
        let r = g.param_rows(&store, id, &[0]).unwrap();
        let l = g.sum(r);
        g.backward_into(l, &mut store).unwrap();
        assert_eq!(store.get(id).grad.data(), &[0.0; 6]);
    }

    #[test]
    fn frozen_param_has_no_grad() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("lm.w", t(&[vec![2.0]]), false);
        let mut g = Graph::new();
        let x = g.leaf(t(&[vec![3.0]]));
        let wv = g.param(&store, w);
        let y = g.matmul(x, wv).unwrap();
        let s = g.sum(y);
        g.backward_into(s, &mut store).unwrap();
        assert_eq!(store.get(w).grad.data(), &[0.0]);
        assert_eq!(g.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn embedding_out_of_range() {
        let mut g = Graph::<f32>::new();
        let tbl = g.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(g.embedding(tbl, &[3]), Err(Error::Index { .. })));
    }
}
