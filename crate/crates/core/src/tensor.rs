//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created through it. Operations compute
//! eagerly and record themselves on the tape; [`Tape::backward`] replays the
//! recording in reverse to accumulate gradients into every leaf. The tape is
//! rebuilt per forward pass (dynamic graph), which is cheap at the model
//! sizes this crate targets.
//!
//! Arithmetic is generic over [`Real`] so the same operation code runs in
//! f32 for training and in f64 when tests compare gradients against finite
//! differences.

use thiserror::Error;

/// Scalar types the tape can differentiate through.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::iter::Sum
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64_lossy(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).expect("finite literal")
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    LossNotScalar(Vec<usize>),
    #[error("tensor id {0} is not on this tape")]
    NotOnTape(usize),
    #[error("backward target is a leaf, not the output of a traced operation")]
    LossNotTraced,
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug)]
enum Op<F: Real> {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    MatMulBt { a: TensorId, b: TensorId },
    BatchMatMul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Hadamard { a: TensorId, b: TensorId },
    Scale { x: TensorId, factor: F },
    RowSoftmax { x: TensorId, causal: bool },
    RmsNorm { x: TensorId, weight: TensorId, inv_rms: Vec<F> },
    Silu { x: TensorId, sigmoid: Vec<F> },
    Gather { table: TensorId, ids: Vec<usize> },
    MeanCrossEntropy { logits: TensorId, targets: Vec<usize>, probs: Vec<F> },
    Rope { x: TensorId },
    Reshape { x: TensorId },
    Permute { x: TensorId, perm: Vec<usize> },
}

#[derive(Debug)]
struct Node<F: Real> {
    shape: Vec<usize>,
    values: Vec<F>,
    grad: Option<Vec<F>>,
    op: Op<F>,
}

/// Records one forward pass; replays it in reverse for gradients.
#[derive(Debug)]
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

pub const RMS_NORM_EPS: f64 = 1e-5;
pub const ROPE_BASE: f64 = 10_000.0;

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<F>, op: Op<F>) -> TensorId {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn node(&self, id: TensorId) -> Result<&Node<F>> {
        self.nodes.get(id.0).ok_or(TensorError::NotOnTape(id.0))
    }

    /// Registers a differentiable input. Gradients accumulate here.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<F>) -> Result<TensorId> {
        if numel(shape) != values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "leaf",
                details: format!("shape {:?} holds {} values, got {}", shape, numel(shape), values.len()),
            });
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf))
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].values
    }

    pub fn scalar(&self, id: TensorId) -> F {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Gradient of the most recent [`Tape::backward`] loss w.r.t. `id`.
    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    // ── primitives ──────────────────────────────────────────────────────

    /// 2-D matrix product `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                details: format!("{sa:?} × {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        matmul_kernel(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b }))
    }

    /// Matrix product against a transposed right operand:
    /// `[m,k] × [n,k]ᵀ → [m,n]`. Semantically `matmul(a, transpose(b))`
    /// without materializing the transpose; both operand rows stream
    /// contiguously.
    pub fn matmul_bt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_bt",
                details: format!("{sa:?} × {sb:?}ᵀ"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![F::zero(); m * n];
        matmul_nt_kernel(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMulBt { a, b }))
    }

    /// Batched matrix product `[B,m,k] × [B,k,n] → [B,m,n]`.
    pub fn batch_matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "batch_matmul",
                details: format!("{sa:?} × {sb:?}"),
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::zero(); bsz * m * n];
        for i in 0..bsz {
            matmul_kernel(
                &self.nodes[a.0].values[i * m * k..(i + 1) * m * k],
                &self.nodes[b.0].values[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(vec![bsz, m, n], out, Op::BatchMatMul { a, b }))
    }

    /// Elementwise sum of two identically shaped tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                details: format!("{sa:?} vs {sb:?}"),
            });
        }
        let out = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(sa, out, Op::Add { a, b }))
    }

    /// Elementwise product of two identically shaped tensors.
    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.node(a)?.shape.clone(), self.node(b)?.shape.clone());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "hadamard",
                details: format!("{sa:?} vs {sb:?}"),
            });
        }
        let out = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(sa, out, Op::Hadamard { a, b }))
    }

    pub fn scale(&mut self, x: TensorId, factor: F) -> Result<TensorId> {
        let shape = self.node(x)?.shape.clone();
        let out = self.nodes[x.0].values.iter().map(|&v| v * factor).collect();
        Ok(self.push(shape, out, Op::Scale { x, factor }))
    }

    /// Softmax over the last axis. Subtracts the row maximum before
    /// exponentiating, so adding a constant to a row changes nothing.
    pub fn row_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        self.softmax_inner(x, false)
    }

    /// Softmax over the causal prefix of each row: row `i` of the trailing
    /// `[T, T]` block is normalized over columns `0..=i`, the rest is 0.
    pub fn causal_row_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        self.softmax_inner(x, true)
    }

    fn softmax_inner(&mut self, x: TensorId, causal: bool) -> Result<TensorId> {
        let shape = self.node(x)?.shape.clone();
        if shape.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "row_softmax",
                details: format!("need rank >= 1, got {shape:?}"),
            });
        }
        let n = shape[shape.len() - 1];
        if causal && (shape.len() < 2 || shape[shape.len() - 2] != n) {
            return Err(TensorError::ShapeMismatch {
                op: "causal_row_softmax",
                details: format!("trailing dims must be square, got {shape:?}"),
            });
        }
        let rows_per_block = if causal { n } else { 1 };
        let vals = &self.nodes[x.0].values;
        let mut out = vec![F::zero(); vals.len()];
        for (r, (row_in, row_out)) in vals.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let limit = if causal { (r % rows_per_block) + 1 } else { n };
            let max = row_in[..limit]
                .iter()
                .fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut denom = F::zero();
            for j in 0..limit {
                let e = (row_in[j] - max).exp();
                row_out[j] = e;
                denom += e;
            }
            let inv = denom.recip();
            for v in row_out[..limit].iter_mut() {
                *v = *v * inv;
            }
        }
        Ok(self.push(shape, out, Op::RowSoftmax { x, causal }))
    }

    /// Root-mean-square normalization over the last axis with a learned
    /// per-dimension weight: `y = w * x / sqrt(mean(x^2) + eps)`.
    pub fn rms_norm(&mut self, x: TensorId, weight: TensorId) -> Result<TensorId> {
        let shape = self.node(x)?.shape.clone();
        let wshape = self.node(weight)?.shape.clone();
        let n = *shape.last().ok_or_else(|| TensorError::ShapeMismatch {
            op: "rms_norm",
            details: "input must have rank >= 1".into(),
        })?;
        if wshape != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "rms_norm",
                details: format!("weight {wshape:?} does not match last dim of {shape:?}"),
            });
        }
        let eps = F::from_f64_lossy(RMS_NORM_EPS);
        let inv_n = F::one() / F::from_f64_lossy(n as f64);
        let vals = &self.nodes[x.0].values;
        let w = &self.nodes[weight.0].values;
        let mut out = vec![F::zero(); vals.len()];
        let mut inv_rms = Vec::with_capacity(vals.len() / n);
        for (row_in, row_out) in vals.chunks(n).zip(out.chunks_mut(n)) {
            let mean_sq = row_in.iter().map(|&v| v * v).sum::<F>() * inv_n;
            let inv = (mean_sq + eps).sqrt().recip();
            inv_rms.push(inv);
            for j in 0..n {
                row_out[j] = w[j] * row_in[j] * inv;
            }
        }
        Ok(self.push(shape, out, Op::RmsNorm { x, weight, inv_rms }))
    }

    /// `x * sigmoid(x)`, elementwise.
    pub fn silu(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.node(x)?.shape.clone();
        let sig: Vec<F> = self.nodes[x.0].values.iter().map(|&v| sigmoid(v)).collect();
        let out = self.nodes[x.0]
            .values
            .iter()
            .zip(&sig)
            .map(|(&v, &s)| v * s)
            .collect();
        Ok(self.push(shape, out, Op::Silu { x, sigmoid: sig }))
    }

    /// Gathers rows of a 2-D table: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let shape = self.node(table)?.shape.clone();
        if shape.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                details: format!("table must be 2-D, got {shape:?}"),
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    size: rows,
                });
            }
        }
        let vals = &self.nodes[table.0].values;
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            out.extend_from_slice(&vals[id * cols..(id + 1) * cols]);
        }
        Ok(self.push(
            vec![ids.len(), cols],
            out,
            Op::Gather { table, ids: ids.to_vec() },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits`: `-(1/n) Σ_i ln softmax(logits[i])[targets[i]]`. Scalar.
    pub fn mean_cross_entropy(&mut self, logits: TensorId, targets: &[usize]) -> Result<TensorId> {
        let shape = self.node(logits)?.shape.clone();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "mean_cross_entropy",
                details: format!("logits {shape:?} vs {} targets", targets.len()),
            });
        }
        let (rows, v) = (shape[0], shape[1]);
        if rows == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "mean_cross_entropy",
                details: "need at least one target".into(),
            });
        }
        for &t in targets {
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "mean_cross_entropy",
                    index: t,
                    size: v,
                });
            }
        }
        let vals = &self.nodes[logits.0].values;
        let mut probs = vec![F::zero(); vals.len()];
        let mut total = F::zero();
        for (r, (row_in, row_p)) in vals.chunks(v).zip(probs.chunks_mut(v)).enumerate() {
            let max = row_in.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let mut denom = F::zero();
            for j in 0..v {
                let e = (row_in[j] - max).exp();
                row_p[j] = e;
                denom += e;
            }
            let inv = denom.recip();
            for p in row_p.iter_mut() {
                *p = *p * inv;
            }
            total += -(row_p[targets[r]].ln());
        }
        let loss = total / F::from_f64_lossy(rows as f64);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::MeanCrossEntropy { logits, targets: targets.to_vec(), probs },
        ))
    }

    /// Rotary position encoding over `[heads, positions, head_dim]`:
    /// consecutive pairs of the last axis are rotated by `pos * base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.node(x)?.shape.clone();
        if shape.len() != 3 || shape[2] % 2 != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "rope",
                details: format!("need [heads, pos, even head_dim], got {shape:?}"),
            });
        }
        let (h, t, dh) = (shape[0], shape[1], shape[2]);
        let vals = &self.nodes[x.0].values;
        let mut out = vec![F::zero(); vals.len()];
        apply_rope(vals, &mut out, h, t, dh, false);
        Ok(self.push(shape, out, Op::Rope { x }))
    }

    /// Reinterprets the value buffer under a new shape with equal element count.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let old = self.node(x)?.shape.clone();
        if numel(&old) != numel(shape) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                details: format!("{old:?} -> {shape:?}"),
            });
        }
        let vals = self.nodes[x.0].values.clone();
        Ok(self.push(shape.to_vec(), vals, Op::Reshape { x }))
    }

    /// Materializes an axis permutation (generalized transpose).
    pub fn permute(&mut self, x: TensorId, perm: &[usize]) -> Result<TensorId> {
        let old = self.node(x)?.shape.clone();
        let mut seen = vec![false; old.len()];
        let valid = perm.len() == old.len()
            && perm.iter().all(|&p| {
                if p >= old.len() || seen[p] {
                    false
                } else {
                    seen[p] = true;
                    true
                }
            });
        if !valid {
            return Err(TensorError::ShapeMismatch {
                op: "permute",
                details: format!("perm {perm:?} invalid for shape {old:?}"),
            });
        }
        let new_shape: Vec<usize> = perm.iter().map(|&p| old[p]).collect();
        let mut out = vec![F::zero(); numel(&old)];
        permute_kernel(&self.nodes[x.0].values, &mut out, &old, perm);
        Ok(self.push(new_shape, out, Op::Permute { x, perm: perm.to_vec() }))
    }

    /// 2-D transpose, a special case of [`Tape::permute`].
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let rank = self.node(x)?.shape.len();
        if rank != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                details: format!("need rank 2, got rank {rank}"),
            });
        }
        self.permute(x, &[1, 0])
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates `d loss / d node` into every node's gradient buffer.
    /// `loss` must be a scalar produced by a traced operation.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        let node = self.node(loss)?;
        if numel(&node.shape) != 1 {
            return Err(TensorError::LossNotScalar(node.shape.clone()));
        }
        if matches!(node.op, Op::Leaf) {
            return Err(TensorError::LossNotTraced);
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gout, &mut grads);
            self.nodes[idx].grad = Some(gout);
        }
        // Leaves the loss never touched still report an exact zero gradient.
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.grad.is_none() {
                node.grad = Some(vec![F::zero(); node.values.len()]);
            }
        }
        Ok(())
    }

    fn accumulate(grads: &mut [Option<Vec<F>>], id: TensorId, len: usize) -> &mut Vec<F> {
        grads[id.0].get_or_insert_with(|| vec![F::zero(); len])
    }

    fn propagate(&self, idx: usize, gout: &[F], grads: &mut [Option<Vec<F>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                let av = &self.nodes[a.0].values;
                let bv = &self.nodes[b.0].values;
                matmul_grad(av, bv, gout, m, k, n, grads, *a, *b);
            }
            Op::MatMulBt { a, b } => {
                // out = A·Bᵀ with A:[m,k], B:[n,k] → dA += G·B, dB += Gᵀ·A
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[0];
                let av = &self.nodes[a.0].values;
                let bv = &self.nodes[b.0].values;
                {
                    let ga = Self::accumulate(grads, *a, m * k);
                    matmul_kernel(gout, bv, m, n, k, ga);
                }
                let gb = Self::accumulate(grads, *b, n * k);
                matmul_tn_kernel(gout, av, m, n, k, gb);
            }
            Op::BatchMatMul { a, b } => {
                let sa = &self.nodes[a.0].shape;
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.nodes[b.0].shape[2];
                let av = self.nodes[a.0].values.clone();
                let bv = self.nodes[b.0].values.clone();
                {
                    let ga = Self::accumulate(grads, *a, bsz * m * k);
                    for i in 0..bsz {
                        matmul_nt_kernel(
                            &gout[i * m * n..(i + 1) * m * n],
                            &bv[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                }
                let gb = Self::accumulate(grads, *b, bsz * k * n);
                for i in 0..bsz {
                    matmul_tn_kernel(
                        &av[i * m * k..(i + 1) * m * k],
                        &gout[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
            }
            Op::Add { a, b } => {
                for &t in [a, b].iter() {
                    let g = Self::accumulate(grads, *t, gout.len());
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
            }
            Op::Hadamard { a, b } => {
                let av = self.nodes[a.0].values.clone();
                let bv = self.nodes[b.0].values.clone();
                {
                    let ga = Self::accumulate(grads, *a, gout.len());
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * bv[i];
                    }
                }
                let gb = Self::accumulate(grads, *b, gout.len());
                for i in 0..gout.len() {
                    gb[i] += gout[i] * av[i];
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                let g = Self::accumulate(grads, *x, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go * f;
                }
            }
            Op::RowSoftmax { x, causal } => {
                // dx_i = p_i * (g_i - Σ_j g_j p_j); masked columns have p = 0.
                let shape = &self.nodes[idx].shape;
                let n = shape[shape.len() - 1];
                let probs = &self.nodes[idx].values;
                let _ = causal;
                let g = Self::accumulate(grads, *x, probs.len());
                for ((row_p, row_go), row_g) in
                    probs.chunks(n).zip(gout.chunks(n)).zip(g.chunks_mut(n))
                {
                    let dot: F = row_p.iter().zip(row_go).map(|(&p, &go)| p * go).sum();
                    for j in 0..n {
                        row_g[j] += row_p[j] * (row_go[j] - dot);
                    }
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let n = *self.nodes[idx].shape.last().unwrap();
                let xv = self.nodes[x.0].values.clone();
                let wv = self.nodes[weight.0].values.clone();
                let inv_n = F::one() / F::from_f64_lossy(n as f64);
                {
                    let gx = Self::accumulate(grads, *x, xv.len());
                    for (r, ((row_x, row_go), row_gx)) in
                        xv.chunks(n).zip(gout.chunks(n)).zip(gx.chunks_mut(n)).enumerate()
                    {
                        let inv = inv_rms[r];
                        let dot: F = row_go
                            .iter()
                            .zip(row_x)
                            .zip(&wv)
                            .map(|((&go, &xi), &wi)| go * wi * xi)
                            .sum();
                        let scale = dot * inv * inv * inv * inv_n;
                        for j in 0..n {
                            row_gx[j] += row_go[j] * wv[j] * inv - row_x[j] * scale;
                        }
                    }
                }
                let gw = Self::accumulate(grads, *weight, n);
                for (r, (row_x, row_go)) in xv.chunks(n).zip(gout.chunks(n)).enumerate() {
                    let inv = inv_rms[r];
                    for j in 0..n {
                        gw[j] += row_go[j] * row_x[j] * inv;
                    }
                }
            }
            Op::Silu { x, sigmoid } => {
                let xv = &self.nodes[x.0].values;
                let g = Self::accumulate(grads, *x, xv.len());
                for i in 0..xv.len() {
                    let s = sigmoid[i];
                    g[i] += gout[i] * s * (F::one() + xv[i] * (F::one() - s));
                }
            }
            Op::Gather { table, ids } => {
                let cols = self.nodes[table.0].shape[1];
                let len = self.nodes[table.0].values.len();
                let g = Self::accumulate(grads, *table, len);
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..cols {
                        g[id * cols + j] += gout[i * cols + j];
                    }
                }
            }
            Op::MeanCrossEntropy { logits, targets, probs } => {
                let v = self.nodes[logits.0].shape[1];
                let rows = targets.len();
                let scale = gout[0] / F::from_f64_lossy(rows as f64);
                let g = Self::accumulate(grads, *logits, probs.len());
                for (r, (row_p, row_g)) in probs.chunks(v).zip(g.chunks_mut(v)).enumerate() {
                    for j in 0..v {
                        let indicator = if j == targets[r] { F::one() } else { F::zero() };
                        row_g[j] += scale * (row_p[j] - indicator);
                    }
                }
            }
            Op::Rope { x } => {
                let shape = &self.nodes[idx].shape;
                let (h, t, dh) = (shape[0], shape[1], shape[2]);
                let g = Self::accumulate(grads, *x, gout.len());
                let mut tmp = vec![F::zero(); gout.len()];
                apply_rope(gout, &mut tmp, h, t, dh, true);
                for (gi, &ti) in g.iter_mut().zip(&tmp) {
                    *gi += ti;
                }
            }
            Op::Reshape { x } => {
                let g = Self::accumulate(grads, *x, gout.len());
                for (gi, &go) in g.iter_mut().zip(gout) {
                    *gi += go;
                }
            }
            Op::Permute { x, perm } => {
                let old = &self.nodes[x.0].shape;
                let mut inverse = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let permuted_shape = &self.nodes[idx].shape;
                let mut tmp = vec![F::zero(); gout.len()];
                permute_kernel(gout, &mut tmp, permuted_shape, &inverse);
                debug_assert_eq!(numel(old), tmp.len());
                let g = Self::accumulate(grads, *x, gout.len());
                for (gi, &ti) in g.iter_mut().zip(&tmp) {
                    *gi += ti;
                }
            }
        }
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// `out += a × b` for row-major `a: [m,k]`, `b: [k,n]`.
fn matmul_kernel<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Dot product with eight fixed-order partial sums; the lane layout keeps
/// results bit-stable while letting the compiler vectorize.
fn dot8<F: Real>(x: &[F], y: &[F]) -> F {
    let mut lanes = [F::zero(); 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let xs = &x[c * 8..(c + 1) * 8];
        let ys = &y[c * 8..(c + 1) * 8];
        for l in 0..8 {
            lanes[l] = lanes[l] + xs[l] * ys[l];
        }
    }
    let mut acc = ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5]))
        + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]));
    for j in chunks * 8..x.len() {
        acc = acc + x[j] * y[j];
    }
    acc
}

/// `out += g × bᵀ` for `g: [m,n]`, `b: [k,n]` — the dA term of matmul.
fn matmul_nt_kernel<F: Real>(g: &[F], b: &[F], m: usize, n: usize, k: usize, out: &mut [F]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (o, brow) in orow.iter_mut().zip(b.chunks_exact(n)) {
            *o += dot8(grow, brow);
        }
    }
}

/// `out += aᵀ × g` for `a: [m,k]`, `g: [m,n]` — the dB term of matmul.
fn matmul_tn_kernel<F: Real>(a: &[F], g: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (&av, orow) in arow.iter().zip(out.chunks_exact_mut(n)) {
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn matmul_grad<F: Real>(
    a: &[F],
    b: &[F],
    gout: &[F],
    m: usize,
    k: usize,
    n: usize,
    grads: &mut [Option<Vec<F>>],
    aid: TensorId,
    bid: TensorId,
) {
    {
        let ga = grads[aid.0].get_or_insert_with(|| vec![F::zero(); m * k]);
        matmul_nt_kernel(gout, b, m, n, k, ga);
    }
    let gb = grads[bid.0].get_or_insert_with(|| vec![F::zero(); k * n]);
    matmul_tn_kernel(a, gout, m, k, n, gb);
}

/// Rotates consecutive pairs of the last axis by position-dependent angles.
/// `inverse` rotates by the negated angle (used by the backward pass).
fn apply_rope<F: Real>(input: &[F], out: &mut [F], h: usize, t: usize, dh: usize, inverse: bool) {
    let half = dh / 2;
    // angle table shared across heads: one sin/cos per (position, pair)
    let freqs: Vec<f64> = (0..half)
        .map(|i| ROPE_BASE.powf(-2.0 * i as f64 / dh as f64))
        .collect();
    let mut table = Vec::with_capacity(t * half);
    for pos in 0..t {
        for &f in &freqs {
            let (sin, cos) = (pos as f64 * f).sin_cos();
            let sin = if inverse { -sin } else { sin };
            table.push((F::from_f64_lossy(sin), F::from_f64_lossy(cos)));
        }
    }
    for head in 0..h {
        for pos in 0..t {
            let base = (head * t + pos) * dh;
            let angles = &table[pos * half..(pos + 1) * half];
            for (i, &(sin, cos)) in angles.iter().enumerate() {
                let x0 = input[base + 2 * i];
                let x1 = input[base + 2 * i + 1];
                out[base + 2 * i] = x0 * cos - x1 * sin;
                out[base + 2 * i + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

fn permute_kernel<F: Real>(input: &[F], out: &mut [F], in_shape: &[usize], perm: &[usize]) {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    match rank {
        2 => {
            let (s0, s1) = (in_strides[perm[0]], in_strides[perm[1]]);
            let mut dst = 0;
            for a in 0..out_shape[0] {
                let base = a * s0;
                for b in 0..out_shape[1] {
                    out[dst] = input[base + b * s1];
                    dst += 1;
                }
            }
        }
        3 => {
            let (s0, s1, s2) = (in_strides[perm[0]], in_strides[perm[1]], in_strides[perm[2]]);
            let mut dst = 0;
            for a in 0..out_shape[0] {
                for b in 0..out_shape[1] {
                    let base = a * s0 + b * s1;
                    for c in 0..out_shape[2] {
                        out[dst] = input[base + c * s2];
                        dst += 1;
                    }
                }
            }
        }
        _ => {
            let mut out_index = vec![0usize; rank];
            for slot in out.iter_mut() {
                let mut src = 0;
                for (axis, &idx) in out_index.iter().enumerate() {
                    src += idx * in_strides[perm[axis]];
                }
                *slot = input[src];
                for axis in (0..rank).rev() {
                    out_index[axis] += 1;
                    if out_index[axis] < out_shape[axis] {
                        break;
                    }
                    out_index[axis] = 0;
                }
            }
        }
    }
}
