use std::collections::BTreeMap;

use rand::Rng;

use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm_nn, gemm_nt, gemm_tn, softmax_in_place};
use super::{NumericsError, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Backward rule of a user-defined op: `(inputs, output, grad_output) -> grad per input`.
pub type BackwardFn<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather {
        table: Var,
        rows: Vec<usize>,
    },
    Cols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    PoolRows {
        x: Var,
        groups: Vec<Vec<usize>>,
    },
    Bilinear(Box<BilinearCache<T>>),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum(Var),
    Mask(Var, Vec<T>),
    Custom {
        inputs: Vec<Var>,
        backward: BackwardFn<T>,
    },
}

struct BilinearCache<T> {
    ent: Var,
    weight: Var,
    bias: Option<Var>,
    pairs: Vec<(usize, usize)>,
    /// Distinct head entities, in first-use order.
    heads: Vec<usize>,
    /// Slot in `heads` for every pair.
    slot: Vec<usize>,
    /// `[C][heads][d]`: head rows multiplied by each class matrix.
    projected: Vec<T>,
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records operations in execution order and replays them backwards.
///
/// Parameters are read in place from the borrowed store; gradients are
/// returned by [`Tape::backward`] and applied with [`ParamStore::accumulate`].
pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: BTreeMap<ParamId, Var>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = ta.dims2("matmul_nt")?;
        let (m, k2) = tb.dims2("matmul_nt")?;
        if k != k2 {
            return Err(NumericsError::dimension("matmul_nt", ta.shape(), tb.shape()));
        }
        let mut out = vec![T::zero(); n * m];
        gemm_nt(ta.data(), tb.data(), &mut out, n, k, m);
        let out = Tensor::from_parts(vec![n, m], out);
        Ok(self.push(out, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::dimension("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`m` vector to every row of an `n × m` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        let (tx, tr) = (self.value(x), self.value(row));
        let m = tx.cols();
        if tr.len() != m {
            return Err(NumericsError::dimension("add_row", tx.shape(), tr.shape()));
        }
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(m) {
            chunk.iter_mut().zip(tr.data()).for_each(|(o, &b)| *o += b);
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    /// `x · w + b` for `x: [n × in]`, `w: [in × out]`, `b: [out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumericsError::dimension("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| v * s).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu(v)).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax_rows();
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<Var, NumericsError> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let m = tx.cols();
        if tg.len() != m || tb.len() != m {
            return Err(NumericsError::dimension("layer_norm", tx.shape(), tg.shape()));
        }
        let eps = T::c(eps);
        let inv_m = T::one() / T::c(m as f64);
        let mut xhat = Vec::with_capacity(tx.len());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(m) {
            let mean = row.iter().copied().sum::<T>() * inv_m;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_m;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Selects rows of a 2-D table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let tt = self.value(table);
        let (n, m) = tt.dims2("gather_rows")?;
        if rows.is_empty() {
            return Err(NumericsError::Empty { op: "gather_rows" });
        }
        let mut data = Vec::with_capacity(rows.len() * m);
        for &r in rows {
            if r >= n {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: r,
                    len: n,
                });
            }
            data.extend_from_slice(tt.row(r));
        }
        let out = Tensor::from_parts(vec![rows.len(), m], data);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                rows: rows.to_vec(),
            },
            &[table],
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let (n, m) = tx.dims2("cols")?;
        if len == 0 || start + len > m {
            return Err(NumericsError::IndexOutOfRange {
                op: "cols",
                index: start + len,
                len: m,
            });
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let out = Tensor::from_parts(vec![n, len], data);
        Ok(self.push(out, Op::Cols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Empty { op: "concat_cols" })?;
        let n = self.value(*first).dims2("concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (pn, pm) = self.value(p).dims2("concat_cols")?;
            if pn != n {
                return Err(NumericsError::dimension(
                    "concat_cols",
                    self.value(*first).shape(),
                    self.value(p).shape(),
                ));
            }
            total += pm;
        }
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_parts(vec![n, total], data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Empty { op: "concat_rows" })?;
        let m = self.value(*first).dims2("concat_rows")?.1;
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let tp = self.value(p);
            let (pn, pm) = tp.dims2("concat_rows")?;
            if pm != m {
                return Err(NumericsError::dimension(
                    "concat_rows",
                    self.value(*first).shape(),
                    tp.shape(),
                ));
            }
            data.extend_from_slice(tp.data());
            n += pn;
        }
        let out = Tensor::from_parts(vec![n, m], data);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Mean of the listed rows, one output row per group.
    pub fn pool_rows(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var, NumericsError> {
        let tx = self.value(x);
        let (n, m) = tx.dims2("pool_rows")?;
        if groups.is_empty() {
            return Err(NumericsError::Empty { op: "pool_rows" });
        }
        let mut data = vec![T::zero(); groups.len() * m];
        for (g, rows) in groups.iter().enumerate() {
            if rows.is_empty() {
                return Err(NumericsError::Empty { op: "pool_rows" });
            }
            if let Some(&r) = rows.iter().find(|&&r| r >= n) {
                return Err(NumericsError::IndexOutOfRange {
                    op: "pool_rows",
                    index: r,
                    len: n,
                });
            }
            // sorted order and offsets from the first row make the result
            // independent of list order and exact for constant rows
            let mut sorted = rows.clone();
            sorted.sort_unstable();
            let base = tx.row(sorted[0]);
            let out = &mut data[g * m..(g + 1) * m];
            for &r in &sorted[1..] {
                for ((o, &v), &b) in out.iter_mut().zip(tx.row(r)).zip(base) {
                    *o += v - b;
                }
            }
            let count = T::c(rows.len() as f64);
            for (o, &b) in out.iter_mut().zip(base) {
                *o = b + *o / count;
            }
        }
        let out = Tensor::from_parts(vec![groups.len(), m], data);
        Ok(self.push(
            out,
            Op::PoolRows {
                x,
                groups: groups.to_vec(),
            },
            &[x],
        ))
    }

    /// Per-class bilinear scores `e_hᵀ W_c e_t + b_c` for each `(h, t)` pair.
    ///
    /// `ent` is `[m × d]`, `weight` is `[C × d × d]`, `bias` is `[C]`.
    /// Output is `[pairs × C]`.
    pub fn bilinear(
        &mut self,
        ent: Var,
        weight: Var,
        bias: Option<Var>,
        pairs: &[(usize, usize)],
    ) -> Result<Var, NumericsError> {
        let (te, tw) = (self.value(ent), self.value(weight));
        let (m, d) = te.dims2("bilinear")?;
        let (c, d1, d2) = match tw.shape() {
            [c, d1, d2] => (*c, *d1, *d2),
            s => {
                return Err(NumericsError::Rank {
                    op: "bilinear",
                    expected: 3,
                    shape: s.to_vec(),
                })
            }
        };
        if d1 != d || d2 != d {
            return Err(NumericsError::dimension("bilinear", te.shape(), tw.shape()));
        }
        if pairs.is_empty() {
            return Err(NumericsError::Empty { op: "bilinear" });
        }
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.len() != c {
                return Err(NumericsError::dimension("bilinear", tw.shape(), tb.shape()));
            }
        }
        let mut heads = Vec::new();
        let mut slot_of = vec![usize::MAX; m];
        let mut slot = Vec::with_capacity(pairs.len());
        for &(h, t) in pairs {
            for i in [h, t] {
                if i >= m {
                    return Err(NumericsError::IndexOutOfRange {
                        op: "bilinear",
                        index: i,
                        len: m,
                    });
                }
            }
            if slot_of[h] == usize::MAX {
                slot_of[h] = heads.len();
                heads.push(h);
            }
            slot.push(slot_of[h]);
        }
        let nh = heads.len();
        let head_rows: Vec<T> = heads.iter().flat_map(|&h| te.row(h).to_vec()).collect();
        let mut projected = vec![T::zero(); c * nh * d];
        for class in 0..c {
            let w_c = &tw.data()[class * d * d..(class + 1) * d * d];
            let out = &mut projected[class * nh * d..(class + 1) * nh * d];
            gemm_nn(&head_rows, w_c, out, nh, d, d);
        }
        let bias_data = bias.map(|b| self.value(b).data().to_vec());
        let mut logits = vec![T::zero(); pairs.len() * c];
        for (p, &(_, t)) in pairs.iter().enumerate() {
            let tail = te.row(t);
            for class in 0..c {
                let a = &projected[(class * nh + slot[p]) * d..(class * nh + slot[p] + 1) * d];
                let mut acc = a.iter().zip(tail).map(|(&x, &y)| x * y).sum::<T>();
                if let Some(b) = &bias_data {
                    acc += b[class];
                }
                logits[p * c + class] = acc;
            }
        }
        let out = Tensor::from_parts(vec![pairs.len(), c], logits);
        let mut inputs = vec![ent, weight];
        inputs.extend(bias);
        Ok(self.push(
            out,
            Op::Bilinear(Box::new(BilinearCache {
                ent,
                weight,
                bias,
                pairs: pairs.to_vec(),
                heads,
                slot,
                projected,
            })),
            &inputs,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumericsError> {
        let tl = self.value(logits);
        let (n, c) = tl.dims2("cross_entropy")?;
        if labels.len() != n {
            return Err(NumericsError::dimension("cross_entropy", tl.shape(), &[labels.len()]));
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(NumericsError::LabelOutOfRange {
                    row,
                    label,
                    classes: c,
                });
            }
        }
        let mut probs = tl.data().to_vec();
        let mut total = T::zero();
        for (row, &label) in labels.iter().enumerate() {
            let x = tl.row(row);
            let max = x.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = x.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - x[label];
            softmax_in_place(&mut probs[row * c..(row + 1) * c]);
        }
        let loss = total / T::c(n as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Inverted dropout. Identity when `rate == 0`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = T::c(1.0 / (1.0 - rate));
        let tx = self.value(x);
        let mask: Vec<T> = (0..tx.len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&v, &k)| v * k).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(out, Op::Mask(x, mask), &[x])
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, backward: BackwardFn<T>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            inputs,
        )
    }

    /// Reverse pass from a scalar loss. Consumes the tape.
    ///
    /// Every parameter registered on the tape gets an entry, zero if the loss
    /// does not depend on it.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(mut g) = grads[i].take() else { continue };
            g.iter_mut().for_each(|x| *x = x.flush());
            self.apply_rule(i, &g, &mut grads);
        }

        let entries = self
            .param_nodes
            .iter()
            .map(|(&id, &v)| {
                let len = self.params.value(id).len();
                let g = grads[v.0].take().unwrap_or_else(|| vec![T::zero(); len]);
                (id, g)
            })
            .collect();
        Ok(Gradients { entries })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn apply_rule(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.nodes[i].value.as_ref().expect("op nodes own their value");
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.rows(), ta.cols());
                let m = tb.cols();
                if let Some(da) = self.grad_slot(grads, *a) {
                    gemm_nt(g, tb.data(), da, n, m, k);
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    gemm_tn(ta.data(), g, db, k, n, m);
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k) = (ta.rows(), ta.cols());
                let m = tb.rows();
                if let Some(da) = self.grad_slot(grads, *a) {
                    gemm_nn(g, tb.data(), da, n, m, k);
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    gemm_tn(g, ta.data(), db, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.grad_slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &g)| *d += g);
                }
                let m = out.cols();
                if let Some(dr) = self.grad_slot(grads, *row) {
                    for chunk in g.chunks(m) {
                        dr.iter_mut().zip(chunk).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(da) = self.grad_slot(grads, *a) {
                    for ((d, &g), &y) in da.iter_mut().zip(g).zip(tb.data()) {
                        *d += g * y;
                    }
                }
                if let Some(db) = self.grad_slot(grads, *b) {
                    for ((d, &g), &x) in db.iter_mut().zip(g).zip(ta.data()) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *s);
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for ((d, &g), &v) in dx.iter_mut().zip(g).zip(tx.data()) {
                        *d += g * gelu_grad(v);
                    }
                }
            }
            Op::Softmax(x) => {
                let m = out.cols();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for ((drow, grow), yrow) in dx
                        .chunks_mut(m)
                        .zip(g.chunks(m))
                        .zip(out.data().chunks(m))
                    {
                        let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                        for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let m = out.cols();
                let tg = self.value(*gain).data().to_vec();
                if let Some(dg) = self.grad_slot(grads, *gain) {
                    for (grow, hrow) in g.chunks(m).zip(xhat.chunks(m)) {
                        for j in 0..m {
                            dg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(db) = self.grad_slot(grads, *bias) {
                    for grow in g.chunks(m) {
                        db.iter_mut().zip(grow).for_each(|(d, &g)| *d += g);
                    }
                }
                if let Some(dx) = self.grad_slot(grads, *x) {
                    let mt = T::c(m as f64);
                    for (r, ((drow, grow), hrow)) in dx
                        .chunks_mut(m)
                        .zip(g.chunks(m))
                        .zip(xhat.chunks(m))
                        .enumerate()
                    {
                        let dh: Vec<T> = grow.iter().zip(&tg).map(|(&a, &b)| a * b).collect();
                        let sum_dh = dh.iter().copied().sum::<T>();
                        let sum_dh_h = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>();
                        let scale = inv_std[r] / mt;
                        for j in 0..m {
                            drow[j] += scale * (mt * dh[j] - sum_dh - hrow[j] * sum_dh_h);
                        }
                    }
                }
            }
            Op::Gather { table, rows } => {
                let m = out.cols();
                if let Some(dt) = self.grad_slot(grads, *table) {
                    for (k, &r) in rows.iter().enumerate() {
                        let src = &g[k * m..(k + 1) * m];
                        dt[r * m..(r + 1) * m]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Cols { x, start } => {
                let len = out.cols();
                let m = self.value(*x).cols();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (r, grow) in g.chunks(len).enumerate() {
                        dx[r * m + start..r * m + start + len]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let pm = self.value(p).cols();
                    if let Some(dp) = self.grad_slot(grads, p) {
                        for (r, drow) in dp.chunks_mut(pm).enumerate() {
                            let src = &g[r * total + offset..r * total + offset + pm];
                            drow.iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                        }
                    }
                    offset += pm;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(dp) = self.grad_slot(grads, p) {
                        dp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(d, &g)| *d += g);
                    }
                    offset += len;
                }
            }
            Op::PoolRows { x, groups } => {
                let m = out.cols();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (k, rows) in groups.iter().enumerate() {
                        let inv = T::one() / T::c(rows.len() as f64);
                        let src = &g[k * m..(k + 1) * m];
                        for &r in rows {
                            dx[r * m..(r + 1) * m]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &g)| *d += g * inv);
                        }
                    }
                }
            }
            Op::Bilinear(cache) => self.bilinear_backward(cache, g, grads),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / T::c(labels.len() as f64);
                if let Some(dl) = self.grad_slot(grads, *logits) {
                    for (row, &label) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            dl[row * c + j] += scale * (probs[row * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mask(x, mask) => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for ((d, &g), &k) in dx.iter_mut().zip(g).zip(mask) {
                        *d += g * k;
                    }
                }
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let grad_out = Tensor::from_parts(out.shape().to_vec(), g.to_vec());
                let input_grads = backward(&values, out, &grad_out);
                for (v, ig) in inputs.iter().zip(input_grads) {
                    if let Some(d) = self.grad_slot(grads, *v) {
                        d.iter_mut().zip(ig.data()).for_each(|(d, &g)| *d += g);
                    }
                }
            }
        }
    }

    fn bilinear_backward(&self, cache: &BilinearCache<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let te = self.value(cache.ent);
        let tw = self.value(cache.weight);
        let d = te.cols();
        let c = tw.shape()[0];
        let nh = cache.heads.len();

        if let Some(b) = cache.bias {
            if let Some(db) = self.grad_slot(grads, b) {
                for grow in g.chunks(c) {
                    db.iter_mut().zip(grow).for_each(|(d, &g)| *d += g);
                }
            }
        }

        // s[c][slot][k] = sum over pairs with that head of g[p,c] * e_tail[k]
        let mut s = vec![T::zero(); c * nh * d];
        let mut d_ent = vec![T::zero(); te.len()];
        for (p, &(_, t)) in cache.pairs.iter().enumerate() {
            let tail = te.row(t);
            let slot = cache.slot[p];
            for class in 0..c {
                let gp = g[p * c + class];
                if gp == T::zero() {
                    continue;
                }
                let base = (class * nh + slot) * d;
                let a = &cache.projected[base..base + d];
                let dt = &mut d_ent[t * d..(t + 1) * d];
                dt.iter_mut().zip(a).for_each(|(o, &x)| *o += gp * x);
                s[base..base + d]
                    .iter_mut()
                    .zip(tail)
                    .for_each(|(o, &x)| *o += gp * x);
            }
        }

        let head_rows: Vec<T> = cache.heads.iter().flat_map(|&h| te.row(h).to_vec()).collect();
        if self.nodes[cache.ent.0].needs_grad {
            let mut d_heads = vec![T::zero(); nh * d];
            for class in 0..c {
                let w_c = &tw.data()[class * d * d..(class + 1) * d * d];
                let s_c = &s[class * nh * d..(class + 1) * nh * d];
                gemm_nt(s_c, w_c, &mut d_heads, nh, d, d);
            }
            for (slot, &h) in cache.heads.iter().enumerate() {
                d_ent[h * d..(h + 1) * d]
                    .iter_mut()
                    .zip(&d_heads[slot * d..(slot + 1) * d])
                    .for_each(|(o, &x)| *o += x);
            }
            if let Some(de) = self.grad_slot(grads, cache.ent) {
                de.iter_mut().zip(&d_ent).for_each(|(o, &x)| *o += x);
            }
        }
        if let Some(dw) = self.grad_slot(grads, cache.weight) {
            for class in 0..c {
                let s_c = &s[class * nh * d..(class + 1) * nh * d];
                let dw_c = &mut dw[class * d * d..(class + 1) * d * d];
                gemm_tn(&head_rows, s_c, dw_c, d, nh, d);
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Real>(x: T) -> T {
    let u = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    T::c(0.5) * x * (T::one() + u.tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let u = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    let th = u.tanh();
    let du = T::c(GELU_C) * (T::one() + T::c(3.0 * GELU_A) * x * x);
    T::c(0.5) * (T::one() + th) + T::c(0.5) * x * (T::one() - th * th) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(shape: Vec<usize>, data: &[f64]) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("p", Tensor::from_f64(shape, data).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn sum_of_parameter_has_unit_gradient() {
        let (s, id) = store_with(vec![2, 3], &[1., -2., 3., 0.5, 0., 9.]);
        let mut tape = Tape::new(&s);
        let p = tape.param(id);
        let loss = tape.sum(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(id).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn zero_scaled_loss_has_zero_gradient() {
        let (s, id) = store_with(vec![4], &[1., 2., 3., 4.]);
        let mut tape = Tape::new(&s);
        let p = tape.param(id);
        let z = tape.scale(p, 0.0);
        let loss = tape.sum(z);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(id).unwrap(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let (s, id) = store_with(vec![2], &[1., 2.]);
        let mut tape = Tape::new(&s);
        let p = tape.param(id);
        let y = tape.scale(p, 2.0);
        assert_eq!(
            tape.backward(y).unwrap_err(),
            NumericsError::NonScalarLoss(vec![2])
        );
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let (mut s, id) = store_with(vec![1], &[3.0]);
        for _ in 0..2 {
            let mut tape = Tape::new(&s);
            let p = tape.param(id);
            let sq = tape.mul(p, p).unwrap();
            let loss = tape.sum(sq);
            let g = tape.backward(loss).unwrap();
            s.accumulate(g);
        }
        assert_eq!(s.get(id).grad.as_deref(), Some(&[12.0][..]));
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let s = ParamStore::<f64>::new();
        let mut tape = Tape::new(&s);
        let x = tape.constant(Tensor::from_f64(vec![1, 2], &[0.0, 0.0]).unwrap());
        let l = tape.cross_entropy(x, &[0]).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let y = tape.constant(Tensor::from_f64(vec![1, 3], &[20.0, 0.0, 0.0]).unwrap());
        let l = tape.cross_entropy(y, &[0]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let s = ParamStore::<f64>::new();
        let mut tape = Tape::new(&s);
        let x = tape.constant(Tensor::zeros(vec![2, 3]));
        assert_eq!(
            tape.cross_entropy(x, &[0, 3]).unwrap_err(),
            NumericsError::LabelOutOfRange {
                row: 1,
                label: 3,
                classes: 3
            }
        );
    }

    #[test]
    fn softmax_is_stable() {
        let s = ParamStore::<f64>::new();
        let mut tape = Tape::new(&s);
        let x = tape.constant(Tensor::from_f64(vec![2, 2], &[1000.0, 0.0, 0.0, 0.0]).unwrap());
        let y = tape.softmax(x);
        let v = tape.value(y).data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-12);
        assert_eq!(&v[2..], &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let s = ParamStore::<f64>::new();
        let mut tape = Tape::new(&s);
        let i = tape.constant(Tensor::from_f64(vec![2, 2], &[1., 0., 0., 1.]).unwrap());
        let b = tape.constant(Tensor::from_f64(vec![2, 2], &[5., 6., 7., 8.]).unwrap());
        let y = tape.matmul(i, b).unwrap();
        assert_eq!(tape.value(y).data(), &[5., 6., 7., 8.]);
        let z = tape.constant(Tensor::zeros(vec![2, 2]));
        let w = tape.constant(Tensor::from_f64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let y = tape.matmul(z, w).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 6]);
    }

    #[test]
    fn bilinear_direct_arithmetic() {
        let s = ParamStore::<f64>::new();
        let mut tape = Tape::new(&s);
        let e = tape.constant(Tensor::from_f64(vec![2, 2], &[1., 2., 3., 4.]).unwrap());
        let w = tape.constant(Tensor::from_f64(vec![1, 2, 2], &[1., 0., 0., 1.]).unwrap());
        let y = tape.bilinear(e, w, None, &[(0, 1)]).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0]);
    }

    #[test]
    fn gather_out_of_range() {
        let (s, id) = store_with(vec![2, 2], &[0.; 4]);
        let mut tape = Tape::new(&s);
        let t = tape.param(id);
        assert!(matches!(
            tape.gather_rows(t, &[0, 2]),
            Err(NumericsError::IndexOutOfRange { index: 2, .. })
        ));
    }

    #[test]
    fn pool_rows_rejects_empty_group() {
        let s = ParamStore::<f64>::new();
        let mut tape = Tape::new(&s);
        let x = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(tape.pool_rows(x, &[vec![0], vec![]]).is_err());
    }
}
