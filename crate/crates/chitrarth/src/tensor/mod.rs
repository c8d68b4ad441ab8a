//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during one forward pass. Operations
//! append nodes that record their inputs; [`Tape::backward`] replays the
//! recording in reverse and accumulates gradients into every node that
//! requires them. The tape is rebuilt for each forward pass — there is no
//! graph reuse.
//!
//! The engine is generic over the scalar type: training runs at `f32`, the
//! finite-difference oracle runs the identical graph at `f64`.

pub mod grad_check;
pub mod kernels;

use crate::error::{Error, Result};

/// Scalar types the tape can compute with.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn from_f32(x: f32) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn from_f32(x: f32) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn from_f32(x: f32) -> Self {
        x as f64
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a tensor stored on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add {
        a: TensorRef,
        b: TensorRef,
    },
    AddBias {
        a: TensorRef,
        bias: TensorRef,
    },
    Mul {
        a: TensorRef,
        b: TensorRef,
    },
    Scale {
        a: TensorRef,
        factor: T,
    },
    Matmul {
        a: TensorRef,
        b: TensorRef,
    },
    Transpose {
        a: TensorRef,
    },
    Concat {
        parts: Vec<TensorRef>,
        axis: usize,
    },
    Slice {
        a: TensorRef,
        axis: usize,
        start: usize,
        len: usize,
    },
    Embedding {
        table: TensorRef,
        ids: Vec<u32>,
    },
    LayerNorm {
        x: TensorRef,
        gamma: TensorRef,
        beta: TensorRef,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: TensorRef,
    },
    SoftmaxRows {
        a: TensorRef,
        causal: bool,
    },
    CrossEntropyMasked {
        logits: TensorRef,
        targets: Vec<u32>,
        mask: Vec<bool>,
        probs: Vec<T>,
        n_masked: usize,
    },
    Sum {
        a: TensorRef,
    },
    MeanScalars {
        parts: Vec<TensorRef>,
    },
}

/// One recorded tensor: flat row-major data plus gradient bookkeeping.
struct Node<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
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
            grad_enabled: true,
        }
    }

    /// Tape that never tracks gradients (generation / evaluation).
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Op<T>) -> TensorRef {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let rq = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            data,
            shape,
            requires_grad: rq,
            grad: None,
            op,
        });
        TensorRef(self.nodes.len() - 1)
    }

    fn rq(&self, r: TensorRef) -> bool {
        self.nodes[r.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, r: TensorRef) -> &[T] {
        &self.nodes[r.0].data
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        &self.nodes[r.0].shape
    }

    pub fn numel(&self, r: TensorRef) -> usize {
        self.nodes[r.0].data.len()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, r: TensorRef) -> T {
        debug_assert_eq!(self.numel(r), 1);
        self.nodes[r.0].data[0]
    }

    pub fn requires_grad(&self, r: TensorRef) -> bool {
        self.nodes[r.0].requires_grad
    }

    pub fn grad(&self, r: TensorRef) -> Option<&[T]> {
        self.nodes[r.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rows_cols(&self, r: TensorRef, op: &'static str) -> Result<(usize, usize)> {
        match *self.nodes[r.0].shape.as_slice() {
            [rows, cols] => Ok((rows, cols)),
            _ => Err(Error::ShapeMismatch {
                op,
                lhs: self.nodes[r.0].shape.clone(),
                rhs: vec![],
            }),
        }
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, data: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<TensorRef> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    pub fn leaf_from_f32(&mut self, data: &[f32], shape: &[usize], requires_grad: bool) -> Result<TensorRef> {
        let converted = data.iter().map(|&v| T::from_f32(v)).collect();
        self.leaf(converted, shape, requires_grad)
    }

    pub fn constant(&mut self, data: Vec<T>, shape: &[usize]) -> Result<TensorRef> {
        self.leaf(data, shape, false)
    }

    // ── Elementwise and linear ops ──────────────────────────────────

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rq = self.rq(a) || self.rq(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, rq, Op::Add { a, b }))
    }

    /// Adds a `[cols]` bias vector to every row of a `[rows, cols]` tensor.
    pub fn add_bias(&mut self, a: TensorRef, bias: TensorRef) -> Result<TensorRef> {
        let (rows, cols) = self.rows_cols(a, "add_bias")?;
        if self.shape(bias) != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let mut data = self.data(a).to_vec();
        for i in 0..rows {
            for j in 0..cols {
                data[i * cols + j] = data[i * cols + j] + self.data(bias)[j];
            }
        }
        let rq = self.rq(a) || self.rq(bias);
        Ok(self.push(data, vec![rows, cols], rq, Op::AddBias { a, bias }))
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rq = self.rq(a) || self.rq(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(data, shape, rq, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: TensorRef, factor: T) -> TensorRef {
        let data = self.data(a).iter().map(|&x| x * factor).collect();
        let rq = self.rq(a);
        let shape = self.shape(a).to_vec();
        self.push(data, shape, rq, Op::Scale { a, factor })
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (m, ka) = self.rows_cols(a, "matmul")?;
        let (kb, n) = self.rows_cols(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let data = kernels::matmul(self.data(a), self.data(b), m, ka, n);
        let rq = self.rq(a) || self.rq(b);
        Ok(self.push(data, vec![m, n], rq, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, a: TensorRef) -> Result<TensorRef> {
        let (rows, cols) = self.rows_cols(a, "transpose")?;
        let data = kernels::transpose(self.data(a), rows, cols);
        let rq = self.rq(a);
        Ok(self.push(data, vec![cols, rows], rq, Op::Transpose { a }))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[TensorRef], axis: usize) -> Result<TensorRef> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: vec![parts.len(), axis],
                rhs: vec![],
            });
        }
        let (r0, c0) = self.rows_cols(parts[0], "concat")?;
        let mut rows = r0;
        let mut cols = c0;
        for &p in &parts[1..] {
            let (r, c) = self.rows_cols(p, "concat")?;
            if axis == 0 {
                if c != c0 {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: vec![r, c],
                    });
                }
                rows += r;
            } else {
                if r != r0 {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        lhs: vec![r0, c0],
                        rhs: vec![r, c],
                    });
                }
                cols += c;
            }
        }
        let mut data = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                data.extend_from_slice(self.data(p));
            }
        } else {
            for i in 0..rows {
                for &p in parts {
                    let pc = self.shape(p)[1];
                    data.extend_from_slice(&self.data(p)[i * pc..(i + 1) * pc]);
                }
            }
        }
        let rq = parts.iter().any(|&p| self.rq(p));
        Ok(self.push(
            data,
            vec![rows, cols],
            rq,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Slices `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, a: TensorRef, axis: usize, start: usize, len: usize) -> Result<TensorRef> {
        let (rows, cols) = self.rows_cols(a, "slice")?;
        let extent = if axis == 0 { rows } else { cols };
        if axis > 1 || start + len > extent {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: vec![rows, cols],
                rhs: vec![axis, start, len],
            });
        }
        let data = if axis == 0 {
            self.data(a)[start * cols..(start + len) * cols].to_vec()
        } else {
            let mut d = Vec::with_capacity(rows * len);
            for i in 0..rows {
                d.extend_from_slice(&self.data(a)[i * cols + start..i * cols + start + len]);
            }
            d
        };
        let shape = if axis == 0 { vec![len, cols] } else { vec![rows, len] };
        let rq = self.rq(a);
        Ok(self.push(data, shape, rq, Op::Slice { a, axis, start, len }))
    }

    /// Looks up rows of `table` (`[vocab, dim]`) for each id.
    pub fn embedding(&mut self, table: TensorRef, ids: &[u32]) -> Result<TensorRef> {
        let (vocab, dim) = self.rows_cols(table, "embedding")?;
        for &id in ids {
            if id as usize >= vocab {
                return Err(Error::Vocabulary { id, vocab });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            let row = &self.data(table)[id as usize * dim..(id as usize + 1) * dim];
            data.extend_from_slice(row);
        }
        let rq = self.rq(table);
        Ok(self.push(
            data,
            vec![ids.len(), dim],
            rq,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row-wise layer norm with learned `[cols]` scale and shift.
    pub fn layernorm(&mut self, x: TensorRef, gamma: TensorRef, beta: TensorRef, eps: f64) -> Result<TensorRef> {
        let (rows, cols) = self.rows_cols(x, "layernorm")?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let eps_t = T::from_f64(eps);
        let (mean, rstd) = kernels::layernorm_stats(self.data(x), rows, cols, eps_t);
        let mut data = vec![T::zero(); rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                let xhat = (self.data(x)[i * cols + j] - mean[i]) * rstd[i];
                data[i * cols + j] = xhat * self.data(gamma)[j] + self.data(beta)[j];
            }
        }
        let rq = self.rq(x) || self.rq(gamma) || self.rq(beta);
        Ok(self.push(
            data,
            vec![rows, cols],
            rq,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        ))
    }

    pub fn gelu(&mut self, a: TensorRef) -> TensorRef {
        let data = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        let rq = self.rq(a);
        let shape = self.shape(a).to_vec();
        self.push(data, shape, rq, Op::Gelu { a })
    }

    /// Row-wise softmax with max subtraction; rows sum to 1.
    pub fn softmax_rows(&mut self, a: TensorRef) -> Result<TensorRef> {
        self.softmax_impl(a, false)
    }

    /// Softmax over each row's causal prefix: row i is a distribution over
    /// columns `0..=i`, exactly zero beyond. Requires a square input.
    pub fn causal_softmax_rows(&mut self, a: TensorRef) -> Result<TensorRef> {
        let (rows, cols) = self.rows_cols(a, "causal_softmax_rows")?;
        if rows != cols {
            return Err(Error::ShapeMismatch {
                op: "causal_softmax_rows",
                lhs: vec![rows, cols],
                rhs: vec![],
            });
        }
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: TensorRef, causal: bool) -> Result<TensorRef> {
        let (rows, cols) = self.rows_cols(a, "softmax_rows")?;
        let data = if causal {
            kernels::softmax_rows(self.data(a), rows, cols, |i| i + 1)
        } else {
            kernels::softmax_rows(self.data(a), rows, cols, |_| cols)
        };
        let rq = self.rq(a);
        Ok(self.push(data, vec![rows, cols], rq, Op::SoftmaxRows { a, causal }))
    }

    /// Mean negative log-likelihood over positions where `mask` is set.
    /// Gradients at masked-out rows are exactly zero.
    pub fn cross_entropy_masked(&mut self, logits: TensorRef, targets: &[u32], mask: &[bool]) -> Result<TensorRef> {
        let (t, v) = self.rows_cols(logits, "cross_entropy_masked")?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_masked",
                lhs: vec![t, v],
                rhs: vec![targets.len(), mask.len()],
            });
        }
        for (&id, &m) in targets.iter().zip(mask) {
            if m && id as usize >= v {
                return Err(Error::Vocabulary { id, vocab: v });
            }
        }
        let n_masked = mask.iter().filter(|&&m| m).count();
        if n_masked == 0 {
            return Err(Error::EmptySupervision { id: String::new() });
        }
        let mut probs = vec![T::zero(); t * v];
        let mut total = T::zero();
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let row = &self.data(logits)[i * v..(i + 1) * v];
            let mut m = row[0];
            for &x in &row[1..] {
                if x > m {
                    m = x;
                }
            }
            let mut denom = T::zero();
            for &x in row {
                denom = denom + (x - m).exp();
            }
            let lse = m + denom.ln();
            total = total + (lse - row[targets[i] as usize]);
            for (j, &x) in row.iter().enumerate() {
                probs[i * v + j] = (x - m).exp() / denom;
            }
        }
        let loss = total / T::from_f64(n_masked as f64);
        let rq = self.rq(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            rq,
            Op::CrossEntropyMasked {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                n_masked,
            },
        ))
    }

    pub fn sum(&mut self, a: TensorRef) -> TensorRef {
        let mut s = T::zero();
        for &x in self.data(a) {
            s = s + x;
        }
        let rq = self.rq(a);
        self.push(vec![s], vec![1], rq, Op::Sum { a })
    }

    /// Mean of scalar tensors, accumulated in f64 so the result does not
    /// depend on summation order for realistic magnitudes.
    pub fn mean_scalars(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "mean_scalars",
                lhs: vec![0],
                rhs: vec![],
            });
        }
        let mut acc = 0f64;
        for &p in parts {
            if self.numel(p) != 1 {
                return Err(Error::NotScalar {
                    op: "mean_scalars",
                    shape: self.shape(p).to_vec(),
                });
            }
            acc += self.scalar_value(p).to_f64();
        }
        let mean = T::from_f64(acc / parts.len() as f64);
        let rq = parts.iter().any(|&p| self.rq(p));
        Ok(self.push(
            vec![mean],
            vec![1],
            rq,
            Op::MeanScalars {
                parts: parts.to_vec(),
            },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Each call computes ∂loss/∂node in a
    /// scratch buffer and then adds it into every node that requires grad,
    /// so gradients accumulate across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::NotScalar {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut scratch: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        scratch[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.propagate(i, &g, &mut scratch);
            }
            scratch[i] = Some(g);
        }
        for (i, s) in scratch.into_iter().enumerate() {
            let Some(s) = s else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let n = self.nodes[i].data.len();
            let grad = self.nodes[i].grad.get_or_insert_with(|| vec![T::zero(); n]);
            for (g, c) in grad.iter_mut().zip(s) {
                *g = *g + c;
            }
        }
        Ok(())
    }

    fn add_into(scratch: &mut Vec<Option<Vec<T>>>, r: TensorRef, numel: usize, contrib: &[T]) {
        let slot = scratch[r.0].get_or_insert_with(|| vec![T::zero(); numel]);
        for (g, &c) in slot.iter_mut().zip(contrib) {
            *g = *g + c;
        }
    }

    fn propagate(&self, node_idx: usize, g: &[T], scratch: &mut Vec<Option<Vec<T>>>) {
        let mut add_grad = |r: TensorRef, contrib: &[T]| {
            if self.nodes[r.0].requires_grad {
                Self::add_into(scratch, r, self.nodes[r.0].data.len(), contrib);
            }
        };
        let op = &self.nodes[node_idx].op;
        match op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                add_grad(*a, g);
                add_grad(*b, g);
            }
            Op::AddBias { a, bias } => {
                add_grad(*a, g);
                if self.rq(*bias) {
                    let cols = self.shape(*bias)[0];
                    let rows = g.len() / cols;
                    let mut db = vec![T::zero(); cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            db[j] = db[j] + g[i * cols + j];
                        }
                    }
                    add_grad(*bias, &db);
                }
            }
            Op::Mul { a, b } => {
                if self.rq(*a) {
                    let da: Vec<T> = g.iter().zip(self.data(*b)).map(|(&gv, &bv)| gv * bv).collect();
                    add_grad(*a, &da);
                }
                if self.rq(*b) {
                    let db: Vec<T> = g.iter().zip(self.data(*a)).map(|(&gv, &av)| gv * av).collect();
                    add_grad(*b, &db);
                }
            }
            Op::Scale { a, factor } => {
                if self.rq(*a) {
                    let da: Vec<T> = g.iter().map(|&gv| gv * *factor).collect();
                    add_grad(*a, &da);
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rq(*a) {
                    let da = kernels::matmul_bt(g, self.data(*b), m, n, k);
                    add_grad(*a, &da);
                }
                if self.rq(*b) {
                    let db = kernels::matmul_at(self.data(*a), g, m, k, n);
                    add_grad(*b, &db);
                }
            }
            Op::Transpose { a } => {
                if self.rq(*a) {
                    let (rows, cols) = (self.shape(*a)[0], self.shape(*a)[1]);
                    // g has shape [cols, rows]; transpose back.
                    let da = kernels::transpose(g, cols, rows);
                    add_grad(*a, &da);
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.numel(p);
                        if self.rq(p) {
                            let dp = g[offset..offset + n].to_vec();
                            add_grad(p, &dp);
                        }
                        offset += n;
                    }
                } else {
                    let rows = self.shape(parts[0])[0];
                    let total_cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                    let mut col_offset = 0;
                    for &p in parts {
                        let pc = self.shape(p)[1];
                        if self.rq(p) {
                            let mut dp = vec![T::zero(); rows * pc];
                            for i in 0..rows {
                                for j in 0..pc {
                                    dp[i * pc + j] = g[i * total_cols + col_offset + j];
                                }
                            }
                            add_grad(p, &dp);
                        }
                        col_offset += pc;
                    }
                }
            }
            Op::Slice { a, axis, start, len } => {
                if self.rq(*a) {
                    let (rows, cols) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let mut da = vec![T::zero(); rows * cols];
                    if *axis == 0 {
                        da[start * cols..(start + len) * cols].copy_from_slice(g);
                    } else {
                        for i in 0..rows {
                            for j in 0..*len {
                                da[i * cols + start + j] = g[i * len + j];
                            }
                        }
                    }
                    add_grad(*a, &da);
                }
            }
            Op::Embedding { table, ids } => {
                if self.rq(*table) {
                    let dim = self.shape(*table)[1];
                    let mut dt = vec![T::zero(); self.numel(*table)];
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..dim {
                            let idx = id as usize * dim + j;
                            dt[idx] = dt[idx] + g[t * dim + j];
                        }
                    }
                    add_grad(*table, &dt);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let (rows, cols) = (self.shape(*x)[0], self.shape(*x)[1]);
                let inv_c = T::from_f64(1.0 / cols as f64);
                if self.rq(*x) {
                    let mut dx = vec![T::zero(); rows * cols];
                    for i in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..cols {
                            let xhat = (self.data(*x)[i * cols + j] - mean[i]) * rstd[i];
                            let gg = g[i * cols + j] * self.data(*gamma)[j];
                            m1 = m1 + gg;
                            m2 = m2 + gg * xhat;
                        }
                        m1 = m1 * inv_c;
                        m2 = m2 * inv_c;
                        for j in 0..cols {
                            let xhat = (self.data(*x)[i * cols + j] - mean[i]) * rstd[i];
                            let gg = g[i * cols + j] * self.data(*gamma)[j];
                            dx[i * cols + j] = rstd[i] * (gg - m1 - xhat * m2);
                        }
                    }
                    add_grad(*x, &dx);
                }
                if self.rq(*gamma) {
                    let mut dg = vec![T::zero(); cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            let xhat = (self.data(*x)[i * cols + j] - mean[i]) * rstd[i];
                            dg[j] = dg[j] + g[i * cols + j] * xhat;
                        }
                    }
                    add_grad(*gamma, &dg);
                }
                if self.rq(*beta) {
                    let mut db = vec![T::zero(); cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            db[j] = db[j] + g[i * cols + j];
                        }
                    }
                    add_grad(*beta, &db);
                }
            }
            Op::Gelu { a } => {
                if self.rq(*a) {
                    let da: Vec<T> = g
                        .iter()
                        .zip(self.data(*a))
                        .map(|(&gv, &x)| gv * kernels::gelu_grad(x))
                        .collect();
                    add_grad(*a, &da);
                }
            }
            Op::SoftmaxRows { a, causal } => {
                if self.rq(*a) {
                    let (rows, cols) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let y = self.nodes[node_idx].data.clone();
                    let mut da = vec![T::zero(); rows * cols];
                    for i in 0..rows {
                        let width = if *causal { i + 1 } else { cols };
                        let mut dot = T::zero();
                        for j in 0..width {
                            dot = dot + g[i * cols + j] * y[i * cols + j];
                        }
                        for j in 0..width {
                            da[i * cols + j] = y[i * cols + j] * (g[i * cols + j] - dot);
                        }
                    }
                    add_grad(*a, &da);
                }
            }
            Op::CrossEntropyMasked {
                logits,
                targets,
                mask,
                probs,
                n_masked,
            } => {
                if self.rq(*logits) {
                    let (t, v) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                    let scale = g[0] / T::from_f64(*n_masked as f64);
                    let mut dl = vec![T::zero(); t * v];
                    for i in 0..t {
                        if !mask[i] {
                            continue;
                        }
                        for j in 0..v {
                            let indicator = if j == targets[i] as usize { T::one() } else { T::zero() };
                            dl[i * v + j] = (probs[i * v + j] - indicator) * scale;
                        }
                    }
                    add_grad(*logits, &dl);
                }
            }
            Op::Sum { a } => {
                if self.rq(*a) {
                    let da = vec![g[0]; self.numel(*a)];
                    add_grad(*a, &da);
                }
            }
            Op::MeanScalars { parts } => {
                let k = T::from_f64(parts.len() as f64);
                let share = g[0] / k;
                for &p in parts {
                    add_grad(p, &[share]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn leaf32(tape: &mut Tape<f32>, data: &[f32], shape: &[usize]) -> TensorRef {
        tape.leaf(data.to_vec(), shape, true).unwrap()
    }

    /// Reference triple-loop product, independent of the kernel loop order.
    fn reference_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::<f32>::new();
        let a = leaf32(&mut tape, &[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let eye = leaf32(&mut tape, &[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_matches_hand_product() {
        let mut tape = Tape::<f32>::new();
        let a = leaf32(&mut tape, &[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = leaf32(&mut tape, &[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.data(c), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = leaf32(&mut tape, &[0.0; 6], &[2, 3]);
        let b = leaf32(&mut tape, &[0.0; 4], &[2, 2]);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    proptest! {
        #[test]
        fn matmul_agrees_with_reference_oracle(
            m in 1usize..5, k in 1usize..5, n in 1usize..5,
            seed in 0u64..1000,
        ) {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let mut tape = Tape::<f64>::new();
            let ar = tape.leaf(a.clone(), &[m, k], false).unwrap();
            let br = tape.leaf(b.clone(), &[k, n], false).unwrap();
            let c = tape.matmul(ar, br).unwrap();
            let expected = reference_matmul(&a, &b, m, k, n);
            for (x, y) in tape.data(c).iter().zip(&expected) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(
            rows in 1usize..5, cols in 1usize..8,
            scale in prop::sample::select(vec![1.0f32, 10.0, 1e3]),
            seed in 0u64..1000,
        ) {
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect();
            let mut tape = Tape::<f32>::new();
            let xr = tape.leaf(x, &[rows, cols], false).unwrap();
            let y = tape.softmax_rows(xr).unwrap();
            for i in 0..rows {
                let s: f32 = tape.data(y)[i * cols..(i + 1) * cols].iter().sum();
                prop_assert!((s - 1.0).abs() <= 1e-6, "row {i} sums to {s}");
            }
        }
    }

    #[test]
    fn softmax_symmetry_and_forced_values() {
        let mut tape = Tape::<f32>::new();
        let x = leaf32(&mut tape, &[0.0, 0.0, 0.0, 3f32.ln()], &[2, 2]);
        let y = tape.softmax_rows(x).unwrap();
        let d = tape.data(y);
        assert!((d[0] - 0.5).abs() < 1e-7 && (d[1] - 0.5).abs() < 1e-7);
        assert!((d[2] - 0.25).abs() < 1e-6 && (d[3] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_is_stable_at_large_magnitudes() {
        let mut tape = Tape::<f32>::new();
        let x = leaf32(&mut tape, &[1000.0, 0.0], &[1, 2]);
        let y = tape.softmax_rows(x).unwrap();
        let d = tape.data(y);
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-6 && d[1].abs() < 1e-6);
    }

    #[test]
    fn causal_softmax_zeroes_future_columns() {
        let mut tape = Tape::<f32>::new();
        let x = leaf32(&mut tape, &[5.0, 99.0, 99.0, 1.0, 1.0, 99.0, 0.5, 0.25, 0.125], &[3, 3]);
        let y = tape.causal_softmax_rows(x).unwrap();
        let d = tape.data(y);
        assert_eq!(d[0], 1.0);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
        assert_eq!(d[5], 0.0);
        assert!((d[3] - 0.5).abs() < 1e-7 && (d[4] - 0.5).abs() < 1e-7);
        let last: f32 = d[6..9].iter().sum();
        assert!((last - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_logits_give_ln_v() {
        let mut tape = Tape::<f32>::new();
        let logits = leaf32(&mut tape, &[0.7; 12], &[3, 4]);
        let loss = tape
            .cross_entropy_masked(logits, &[0, 3, 2], &[true, true, true])
            .unwrap();
        assert!((tape.scalar_value(loss) - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_vanishes_for_confident_correct_logits() {
        let mut tape = Tape::<f32>::new();
        let logits = leaf32(&mut tape, &[50.0, 0.0, 0.0, 0.0, 0.0, 50.0], &[2, 3]);
        let loss = tape
            .cross_entropy_masked(logits, &[0, 2], &[true, true])
            .unwrap();
        assert!(tape.scalar_value(loss) < 1e-6);
    }

    #[test]
    fn cross_entropy_matches_hand_arithmetic() {
        // rows: uniform pair, then [0, ln 3]; mean of ln 2 and ln(4/3).
        let mut tape = Tape::<f32>::new();
        let logits = leaf32(&mut tape, &[0.0, 0.0, 0.0, 3f32.ln()], &[2, 2]);
        let loss = tape
            .cross_entropy_masked(logits, &[0, 1], &[true, true])
            .unwrap();
        let expected = 0.49041462650586312f32;
        assert!((tape.scalar_value(loss) - expected).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_masked_rows_get_bitwise_zero_grad() {
        let mut tape = Tape::<f32>::new();
        let logits = leaf32(&mut tape, &[0.3, -0.4, 1.2, 0.9, -2.0, 0.1, 0.0, 0.5], &[4, 2]);
        let loss = tape
            .cross_entropy_masked(logits, &[0, 1, 0, 1], &[true, false, false, true])
            .unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        assert_eq!(g[2].to_bits(), 0.0f32.to_bits());
        assert_eq!(g[3].to_bits(), 0.0f32.to_bits());
        assert_eq!(g[4].to_bits(), 0.0f32.to_bits());
        assert_eq!(g[5].to_bits(), 0.0f32.to_bits());
        assert!(g[0] != 0.0 && g[6] != 0.0);
    }

    #[test]
    fn cross_entropy_rejects_empty_supervision() {
        let mut tape = Tape::<f32>::new();
        let logits = leaf32(&mut tape, &[0.0; 4], &[2, 2]);
        let err = tape
            .cross_entropy_masked(logits, &[0, 1], &[false, false])
            .unwrap_err();
        assert!(matches!(err, Error::EmptySupervision { .. }));
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut tape = Tape::<f32>::new();
        let x = leaf32(&mut tape, &[2.0, -1.0, 7.5], &[1, 3]);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_sum_matches_analytic_derivative() {
        let mut tape = Tape::<f32>::new();
        let x = leaf32(&mut tape, &[3.0], &[1, 1]);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f32>::new();
        let x = leaf32(&mut tape, &[1.0, 2.0], &[1, 2]);
        let y = tape.scale(x, 2.0);
        assert!(matches!(tape.backward(y), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn gradients_accumulate_until_cleared() {
        let mut tape = Tape::<f32>::new();
        let x = leaf32(&mut tape, &[1.0, 2.0], &[1, 2]);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut tape = Tape::<f32>::new();
        let table = leaf32(&mut tape, &[0.0; 8], &[4, 2]);
        assert!(matches!(
            tape.embedding(table, &[0, 4]),
            Err(Error::Vocabulary { id: 4, vocab: 4 })
        ));
    }

    #[test]
    fn inference_tape_tracks_no_gradients() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.leaf(vec![1.0, 2.0], &[1, 2], true).unwrap();
        let loss = tape.sum(x);
        assert!(!tape.requires_grad(loss));
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn identical_graphs_are_bitwise_identical() {
        use rand::prelude::*;
        let build = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
            let x: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let w: Vec<f32> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut tape = Tape::<f32>::new();
            let xr = tape.leaf(x, &[3, 4], true).unwrap();
            let wr = tape.leaf(w, &[4, 3], true).unwrap();
            let h = tape.matmul(xr, wr).unwrap();
            let a = tape.gelu(h);
            let s = tape.softmax_rows(a).unwrap();
            let loss = tape.sum(s);
            tape.backward(loss).unwrap();
            (
                tape.data(s).to_vec(),
                tape.grad(xr).unwrap().to_vec(),
                tape.grad(wr).unwrap().to_vec(),
            )
        };
        let (d1, gx1, gw1) = build();
        let (d2, gx2, gw2) = build();
        assert!(d1.iter().zip(&d2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gx1.iter().zip(&gx2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gw1.iter().zip(&gw2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
