//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! Operations append nodes in topological order (inputs always precede
//! consumers); [`Tape::backward`] replays them in reverse exactly once and
//! accumulates vector-Jacobian products into every gradient-requiring
//! node. A tape plus its nodes form a single-threaded unit of work;
//! distinct tapes may run concurrently with no shared state.
//!
//! Backward on an already-consumed tape is an error, not accumulation —
//! silent gradient doubling is the bug this prevents.

use crate::error::{Error, Result};
use crate::sampling::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{axis_lanes, matmul_kernel, Tensor};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Clone)]
enum Op<T> {
    Leaf,
    /// Matrix product with optional leading batch dims on either operand.
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    /// Broadcast-add a length-n vector to every row of an `r x n` matrix.
    AddRowVec { a: TensorId, bias: TensorId },
    MulElem { a: TensorId, b: TensorId },
    Scale { a: TensorId, factor: T },
    Relu { a: TensorId },
    Softmax { a: TensorId, axis: usize, temperature: T },
    /// Inverted dropout; mask entries are 0 or 1/(1-rate).
    Dropout { a: TensorId, mask: Vec<T> },
    Embedding { table: TensorId, ids: Vec<usize> },
    SliceCols { a: TensorId, start: usize, len: usize },
    ConcatCols { parts: Vec<TensorId> },
    ConcatRows { parts: Vec<TensorId> },
    Transpose { a: TensorId },
    /// Mean over the rows of an `l x d` matrix flagged true in `keep`.
    MeanPoolRows { a: TensorId, keep: Vec<bool> },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
    },
    /// Mean over the batch of -log softmax(logits)[label]; stores the
    /// softmax probabilities for the backward pass.
    NllLoss {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum { a: TensorId },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Recording tape for one forward/backward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> TensorId {
        debug_assert!(value.all_finite(), "non-finite value produced on tape");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient-tracked leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked leaf (inputs, noise, masks).
    pub fn constant(&mut self, value: Tensor<T>) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` w.r.t. this node, if any flowed.
    pub fn grad(&self, id: TensorId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    // ── Operations ──────────────────────────────────────────────────

    /// Matrix product. Both operands carry trailing `[rows, cols]` dims;
    /// leading dims are batch dims and must match, or be absent on one
    /// side (that operand is broadcast across the batch).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k1) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch_ok = ba == bb || ba.is_empty() || bb.is_empty();
        if k1 != k2 || !batch_ok {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let lead: Vec<usize> = if ba.is_empty() { bb.to_vec() } else { ba.to_vec() };
        let batch: usize = lead.iter().product();
        let (stride_a, stride_b) = (
            if ba.is_empty() { 0 } else { m * k1 },
            if bb.is_empty() { 0 } else { k1 * n },
        );
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for t in 0..batch {
            matmul_kernel(
                &da[t * stride_a..t * stride_a + m * k1],
                &db[t * stride_b..t * stride_b + k1 * n],
                m,
                k1,
                n,
                &mut out[t * m * n..(t + 1) * m * n],
            );
        }
        let mut shape = lead;
        shape.extend([m, n]);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Matmul { a, b }, req))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::Add { a, b }, req))
    }

    pub fn add_row_vec(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(bias).to_vec());
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(Error::shape("add_row_vec", &sa, &sb));
        }
        let n = sa[1];
        let bd = self.value(bias).data().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % n])
            .collect();
        let req = self.requires(a) || self.requires(bias);
        Ok(self.push(Tensor::new(sa, data)?, Op::AddRowVec { a, bias }, req))
    }

    pub fn mul_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul_elem", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(value, Op::MulElem { a, b }, req))
    }

    pub fn scale(&mut self, a: TensorId, factor: T) -> Result<TensorId> {
        let value = self.value(a).map(|x| x * factor);
        let req = self.requires(a);
        Ok(self.push(value, Op::Scale { a, factor }, req))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let value = self.value(a).map(|x| x.max(T::zero()));
        let req = self.requires(a);
        Ok(self.push(value, Op::Relu { a }, req))
    }

    /// Temperature softmax along `axis`; each slice sums to 1. Computed
    /// with max-subtraction for stability.
    pub fn softmax(&mut self, a: TensorId, axis: usize, temperature: T) -> Result<TensorId> {
        if temperature <= T::zero() {
            return Err(Error::param("temperature", "must be > 0"));
        }
        let value = self.value(a).softmax(axis, temperature)?;
        let req = self.requires(a);
        Ok(self.push(value, Op::Softmax { a, axis, temperature }, req))
    }

    /// Inverted dropout: when `active`, zero each element with probability
    /// `rate` and scale survivors by 1/(1-rate); when inactive, identity
    /// (returns the input node unchanged, bit-identical).
    pub fn dropout(
        &mut self,
        a: TensorId,
        rate: f64,
        active: bool,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::param("rate", format!("{rate} outside [0, 1)")));
        }
        if !active || rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = T::from_f64_c(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(a).numel())
            .map(|_| {
                if rng.next_f64() < rate {
                    T::zero()
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.requires(a);
        Ok(self.push(value, Op::Dropout { a, mask }, req))
    }

    /// Row gather: `out[i] = table[ids[i]]`. Backward scatter-adds.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::contract("embedding", "table must be 2-D"));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(
                "embedding",
                format!("id {bad} out of range for table with {v} rows"),
            ));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let req = self.requires(table);
        Ok(self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            req,
        ))
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start + len > sa[1] {
            return Err(Error::contract(
                "slice_cols",
                format!("range {start}..{} out of shape {sa:?}", start + len),
            ));
        }
        let (rows, cols) = (sa[0], sa[1]);
        let da = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&da[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        let req = self.requires(a);
        Ok(self.push(value, Op::SliceCols { a, start, len }, req))
    }

    /// Concatenate 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols", "no parts"));
        }
        let rows = self.shape(parts[0])[0];
        if parts
            .iter()
            .any(|&p| self.shape(p).len() != 2 || self.shape(p)[0] != rows)
        {
            return Err(Error::contract("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                let pd = self.value(p).data();
                data.extend_from_slice(&pd[r * c..(r + 1) * c]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            req,
        ))
    }

    /// Concatenate 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows", "no parts"));
        }
        let cols = self.shape(parts[0])[1];
        if parts
            .iter()
            .any(|&p| self.shape(p).len() != 2 || self.shape(p)[1] != cols)
        {
            return Err(Error::contract("concat_rows", "column counts differ"));
        }
        let rows: usize = parts.iter().map(|&p| self.shape(p)[0]).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            req,
        ))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let value = self.value(a).transpose2()?;
        let req = self.requires(a);
        Ok(self.push(value, Op::Transpose { a }, req))
    }

    /// `1 x d` mean of the rows of an `l x d` matrix flagged in `keep`.
    pub fn mean_pool_rows(&mut self, a: TensorId, keep: &[bool]) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || keep.len() != sa[0] {
            return Err(Error::contract(
                "mean_pool_rows",
                format!("keep length {} vs shape {sa:?}", keep.len()),
            ));
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::contract("mean_pool_rows", "all rows excluded"));
        }
        let (l, d) = (sa[0], sa[1]);
        let inv = T::from_f64_c(1.0 / count as f64);
        let da = self.value(a).data();
        let mut out = vec![T::zero(); d];
        for r in 0..l {
            if keep[r] {
                for c in 0..d {
                    out[c] += da[r * d + c];
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let value = Tensor::new(vec![1, d], out)?;
        let req = self.requires(a);
        Ok(self.push(
            value,
            Op::MeanPoolRows {
                a,
                keep: keep.to_vec(),
            },
            req,
        ))
    }

    /// Per-row layer normalization of an `l x d` matrix with learned gain
    /// and shift.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: T,
    ) -> Result<TensorId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || self.shape(gamma) != [sx[1]] || self.shape(beta) != [sx[1]] {
            return Err(Error::shape("layer_norm", &sx, self.shape(gamma)));
        }
        let (l, d) = (sx[0], sx[1]);
        let dx = self.value(x).data();
        let (g, b) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let inv_d = T::from_f64_c(1.0 / d as f64);
        let mut x_hat = vec![T::zero(); l * d];
        let mut inv_std = vec![T::zero(); l];
        let mut out = vec![T::zero(); l * d];
        for r in 0..l {
            let row = &dx[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |acc, &v| acc + v) * inv_d;
            let var = row
                .iter()
                .fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean))
                * inv_d;
            let is = (var + eps).sqrt().recip();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                x_hat[r * d + c] = xh;
                out[r * d + c] = g[c] * xh + b[c];
            }
        }
        let value = Tensor::new(sx, out)?;
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
            req,
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, computed via
    /// log-sum-exp. Returns a scalar node.
    pub fn nll_loss(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(Error::contract(
                "nll_loss",
                format!("logits {sl:?} vs {} labels", labels.len()),
            ));
        }
        let (bsz, m) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= m) {
            return Err(Error::contract(
                "nll_loss",
                format!("label {bad} out of range for {m} classes"),
            ));
        }
        let dl = self.value(logits).data();
        let mut probs = vec![T::zero(); bsz * m];
        let mut total = T::zero();
        for i in 0..bsz {
            let row = &dl[i * m..(i + 1) * m];
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * m + j] = e;
                sum += e;
            }
            for j in 0..m {
                probs[i * m + j] = probs[i * m + j] / sum;
            }
            let lse = max + sum.ln();
            total += lse - row[labels[i]];
        }
        let loss = total * T::from_f64_c(1.0 / bsz as f64);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                what: "nll_loss".into(),
            });
        }
        let req = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::NllLoss {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            req,
        ))
    }

    /// Sum of all elements; returns a scalar node.
    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let total = self
            .value(a)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let req = self.requires(a);
        Ok(self.push(Tensor::scalar(total), Op::Sum { a }, req))
    }

    // ── Backward ────────────────────────────────────────────────────

    fn accumulate(&mut self, id: TensorId, contrib: &[T]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contrib) {
                    *gi += c;
                }
            }
            None => node.grad = Some(contrib.to_vec()),
        }
    }

    /// Populate gradients of every gradient-requiring node reachable from
    /// `loss`. `loss` must be scalar; a tape can be consumed only once.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.consumed {
            return Err(Error::contract(
                "backward",
                "tape already consumed; build a fresh tape per backward pass",
            ));
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let grad_out = self.nodes[idx].grad.clone().unwrap();
            let op = self.nodes[idx].op.clone();
            self.backward_op(TensorId(idx), &op, &grad_out);
        }
        Ok(())
    }

    fn backward_op(&mut self, out: TensorId, op: &Op<T>, dy: &[T]) {
        match op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch: usize = self.shape(out)[..self.shape(out).len() - 2]
                    .iter()
                    .product();
                let (stride_a, stride_b) = (
                    if sa.len() == 2 { 0 } else { m * k },
                    if sb.len() == 2 { 0 } else { k * n },
                );
                let da_len: usize = sa.iter().product();
                let db_len: usize = sb.iter().product();
                let (va, vb) = (
                    self.value(*a).data().to_vec(),
                    self.value(*b).data().to_vec(),
                );
                if self.requires(*a) {
                    let mut da = vec![T::zero(); da_len];
                    for t in 0..batch {
                        matmul_nt_acc(
                            &dy[t * m * n..(t + 1) * m * n],
                            &vb[t * stride_b..t * stride_b + k * n],
                            m,
                            n,
                            k,
                            &mut da[t * stride_a..t * stride_a + m * k],
                        );
                    }
                    self.accumulate(*a, &da);
                }
                if self.requires(*b) {
                    let mut db = vec![T::zero(); db_len];
                    for t in 0..batch {
                        matmul_tn_acc(
                            &va[t * stride_a..t * stride_a + m * k],
                            &dy[t * m * n..(t + 1) * m * n],
                            m,
                            k,
                            n,
                            &mut db[t * stride_b..t * stride_b + k * n],
                        );
                    }
                    self.accumulate(*b, &db);
                }
            }

            Op::Add { a, b } => {
                self.accumulate(*a, dy);
                self.accumulate(*b, dy);
            }

            Op::AddRowVec { a, bias } => {
                self.accumulate(*a, dy);
                if self.requires(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut db = vec![T::zero(); n];
                    for (i, &g) in dy.iter().enumerate() {
                        db[i % n] += g;
                    }
                    self.accumulate(*bias, &db);
                }
            }

            Op::MulElem { a, b } => {
                if self.requires(*a) {
                    let da: Vec<T> = dy
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.requires(*b) {
                    let db: Vec<T> = dy
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.accumulate(*b, &db);
                }
            }

            Op::Scale { a, factor } => {
                let da: Vec<T> = dy.iter().map(|&g| g * *factor).collect();
                self.accumulate(*a, &da);
            }

            Op::Relu { a } => {
                let da: Vec<T> = dy
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                self.accumulate(*a, &da);
            }

            Op::Softmax { a, axis, temperature } => {
                // dx = (1/temp) * s ⊙ (dy - <dy, s>) per lane.
                let s = self.value(out).data().to_vec();
                let (outer, len, inner) = axis_lanes(self.shape(*a), *axis);
                let inv_t = temperature.recip();
                let mut da = vec![T::zero(); s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for l in 0..len {
                            let idx = base + l * inner;
                            dot += dy[idx] * s[idx];
                        }
                        for l in 0..len {
                            let idx = base + l * inner;
                            da[idx] = inv_t * s[idx] * (dy[idx] - dot);
                        }
                    }
                }
                self.accumulate(*a, &da);
            }

            Op::Dropout { a, mask } => {
                let da: Vec<T> = dy.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(*a, &da);
            }

            Op::Embedding { table, ids } => {
                if self.requires(*table) {
                    let d = self.shape(*table)[1];
                    let mut dt = vec![T::zero(); self.value(*table).numel()];
                    for (row, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dt[id * d + c] += dy[row * d + c];
                        }
                    }
                    self.accumulate(*table, &dt);
                }
            }

            Op::SliceCols { a, start, len } => {
                let (rows, cols) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..*len {
                        da[r * cols + start + c] = dy[r * len + c];
                    }
                }
                self.accumulate(*a, &da);
            }

            Op::ConcatCols { parts } => {
                let rows = self.shape(out)[0];
                let total = self.shape(out)[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.requires(p) {
                        let mut dp = vec![T::zero(); rows * c];
                        for r in 0..rows {
                            dp[r * c..(r + 1) * c]
                                .copy_from_slice(&dy[r * total + offset..r * total + offset + c]);
                        }
                        self.accumulate(p, &dp);
                    }
                    offset += c;
                }
            }

            Op::ConcatRows { parts } => {
                let cols = self.shape(out)[1];
                let mut offset = 0;
                for &p in parts {
                    let r = self.shape(p)[0];
                    if self.requires(p) {
                        self.accumulate(p, &dy[offset * cols..(offset + r) * cols]);
                    }
                    offset += r;
                }
            }

            Op::Transpose { a } => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                // out is c x r; transpose dy back to r x c.
                let mut da = vec![T::zero(); r * c];
                for i in 0..c {
                    for j in 0..r {
                        da[j * c + i] = dy[i * r + j];
                    }
                }
                self.accumulate(*a, &da);
            }

            Op::MeanPoolRows { a, keep } => {
                let (l, d) = (self.shape(*a)[0], self.shape(*a)[1]);
                let count = keep.iter().filter(|&&k| k).count();
                let inv = T::from_f64_c(1.0 / count as f64);
                let mut da = vec![T::zero(); l * d];
                for r in 0..l {
                    if keep[r] {
                        for c in 0..d {
                            da[r * d + c] = dy[c] * inv;
                        }
                    }
                }
                self.accumulate(*a, &da);
            }

            Op::LayerNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                let (l, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let g = self.value(*gamma).data().to_vec();
                let inv_d = T::from_f64_c(1.0 / d as f64);
                if self.requires(*beta) {
                    let mut db = vec![T::zero(); d];
                    for r in 0..l {
                        for c in 0..d {
                            db[c] += dy[r * d + c];
                        }
                    }
                    self.accumulate(*beta, &db);
                }
                if self.requires(*gamma) {
                    let mut dg = vec![T::zero(); d];
                    for r in 0..l {
                        for c in 0..d {
                            dg[c] += dy[r * d + c] * x_hat[r * d + c];
                        }
                    }
                    self.accumulate(*gamma, &dg);
                }
                if self.requires(*x) {
                    let mut dx = vec![T::zero(); l * d];
                    for r in 0..l {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for c in 0..d {
                            let dxh = dy[r * d + c] * g[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * x_hat[r * d + c];
                        }
                        mean_dxh *= inv_d;
                        mean_dxh_xh *= inv_d;
                        for c in 0..d {
                            let dxh = dy[r * d + c] * g[c];
                            dx[r * d + c] =
                                inv_std[r] * (dxh - mean_dxh - x_hat[r * d + c] * mean_dxh_xh);
                        }
                    }
                    self.accumulate(*x, &dx);
                }
            }

            Op::NllLoss {
                logits,
                labels,
                probs,
            } => {
                let bsz = labels.len();
                let m = self.shape(*logits)[1];
                let scale = dy[0] * T::from_f64_c(1.0 / bsz as f64);
                let mut dl = vec![T::zero(); bsz * m];
                for i in 0..bsz {
                    for j in 0..m {
                        let indicator = if j == labels[i] { T::one() } else { T::zero() };
                        dl[i * m + j] = (probs[i * m + j] - indicator) * scale;
                    }
                }
                self.accumulate(*logits, &dl);
            }

            Op::Sum { a } => {
                let da = vec![dy[0]; self.value(*a).numel()];
                self.accumulate(*a, &da);
            }
        }
    }
}

/// out[m×k] += a[m×n] · bᵀ where b is [k×n].
fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * k + p] += acc;
        }
    }
}

/// out[k×n] += aᵀ · b where a is [m×k], b is [m×n].
fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for (&bv, o) in brow.iter().zip(orow.iter_mut()) {
                *o += av * bv;
            }
        }
    }
}
