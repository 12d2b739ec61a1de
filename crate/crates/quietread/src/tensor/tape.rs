//! Wengert tape: ops are recorded in forward order and replayed in reverse to
//! accumulate vector-Jacobian products. A tape drives exactly one backward
//! pass and is invalidated afterwards.

use super::kernels;
use super::{ensure_all_finite, IntMatrix, Result, Scalar, Tensor, TensorError};

pub type NodeId = usize;

// Tanh-approximation GELU constants, fixed so results are bit-stable across
// implementations: 0.5·x·(1 + tanh(C0·(x + C1·x³))).
const GELU_C0: f64 = 0.7978845608;
const GELU_C1: f64 = 0.044715;

enum Op<T> {
    Leaf,
    Matmul { a: NodeId, b: NodeId, m: usize, k: usize, n: usize },
    Bmm { a: NodeId, b: NodeId, batch: usize, m: usize, k: usize, n: usize },
    TransposeLast2 { x: NodeId, batch: usize, rows: usize, cols: usize },
    // [B·S, H·dh] -> [B·H, S, dh] and its inverse permutation.
    ToHeads { x: NodeId, b: usize, s: usize, heads: usize, dh: usize },
    FromHeads { x: NodeId, b: usize, s: usize, heads: usize, dh: usize },
    Reshape { x: NodeId },
    SliceCols { x: NodeId, rows: usize, cols: usize, start: usize, len: usize },
    Add { a: NodeId, b: NodeId },
    AddBias { x: NodeId, bias: NodeId, rows: usize, cols: usize },
    // x is [B·S, d]; pos is [max_seq, d], first s rows used per batch element.
    AddPos { x: NodeId, pos: NodeId, b: usize, s: usize, d: usize },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: T },
    Gelu { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, rows: usize, dim: usize, mean: Vec<T>, rstd: Vec<T> },
    // prefix = 0 is strictly causal; rows i < prefix attend to all of 0..prefix.
    SoftmaxCausal { x: NodeId, batch: usize, s: usize, prefix: usize },
    EmbeddingGather { table: NodeId, ids: Vec<u32>, dim: usize },
    CrossEntropyMasked { logits: NodeId, rows: usize, vocab: usize, targets: Vec<u32>, mask: Vec<bool> },
    MeanPoolTrailing { x: NodeId, b: usize, s: usize, d: usize, window: usize },
    SumAll { x: NodeId },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a computation and replays it backwards once.
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
        Tape { nodes: Vec::new(), consumed: false }
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(TensorError::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, grad: None, requires_grad, op });
        self.nodes.len() - 1
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[0]
    }

    /// Gradient accumulated by [`Tape::backward`]; `None` if no path to the
    /// loss touched this node.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.nodes[id].grad.take()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Copies a tensor onto the tape as a differentiation root.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<NodeId> {
        self.check_live()?;
        ensure_all_finite("leaf", t.data())?;
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf))
    }

    /// Non-differentiable value on the tape.
    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<T>) -> Result<NodeId> {
        self.check_live()?;
        if shape.iter().product::<usize>() != value.len() {
            return Err(TensorError::DataLength {
                expected: shape.iter().product(),
                got: value.len(),
                shape,
            });
        }
        ensure_all_finite("constant", &value)?;
        Ok(self.push(shape, value, false, Op::Leaf))
    }

    /// `c[i][j] = Σ_t a[i][t]·b[t][j]`; strictly 2-D.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let value = kernels::matmul(self.value(a), self.value(b), m, k, n);
        ensure_all_finite("matmul", &value)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![m, n], value, rg, Op::Matmul { a, b, m, k, n }))
    }

    /// Batched matmul over matching leading dimension: `[N,m,k] @ [N,k,n]`.
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch { op: "bmm", lhs: sa, rhs: sb });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut value = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            let av = &self.value(a)[i * m * k..(i + 1) * m * k];
            let bv = &self.value(b)[i * k * n..(i + 1) * k * n];
            value.extend_from_slice(&kernels::matmul(av, bv, m, k, n));
        }
        ensure_all_finite("bmm", &value)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![batch, m, n], value, rg, Op::Bmm { a, b, batch, m, k, n }))
    }

    pub fn transpose_last2(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(TensorError::BadShape { op: "transpose_last2", expected: "[N,r,c]".into(), got: s });
        }
        let (batch, rows, cols) = (s[0], s[1], s[2]);
        let xv = self.value(x);
        let mut value = vec![T::ZERO; xv.len()];
        for i in 0..batch {
            let base = i * rows * cols;
            for r in 0..rows {
                for c in 0..cols {
                    value[base + c * rows + r] = xv[base + r * cols + c];
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(vec![batch, cols, rows], value, rg, Op::TransposeLast2 { x, batch, rows, cols }))
    }

    /// `[B·S, H·dh] -> [B·H, S, dh]`
    pub fn to_heads(&mut self, x: NodeId, b: usize, s: usize, heads: usize, dh: usize) -> Result<NodeId> {
        self.check_live()?;
        let sx = self.shape(x).to_vec();
        if sx != [b * s, heads * dh] {
            return Err(TensorError::BadShape { op: "to_heads", expected: format!("[{}, {}]", b * s, heads * dh), got: sx });
        }
        let xv = self.value(x);
        let mut value = vec![T::ZERO; xv.len()];
        for bi in 0..b {
            for si in 0..s {
                for h in 0..heads {
                    let src = (bi * s + si) * heads * dh + h * dh;
                    let dst = ((bi * heads + h) * s + si) * dh;
                    value[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(vec![b * heads, s, dh], value, rg, Op::ToHeads { x, b, s, heads, dh }))
    }

    /// `[B·H, S, dh] -> [B·S, H·dh]`
    pub fn from_heads(&mut self, x: NodeId, b: usize, s: usize, heads: usize, dh: usize) -> Result<NodeId> {
        self.check_live()?;
        let sx = self.shape(x).to_vec();
        if sx != [b * heads, s, dh] {
            return Err(TensorError::BadShape { op: "from_heads", expected: format!("[{}, {}, {}]", b * heads, s, dh), got: sx });
        }
        let xv = self.value(x);
        let mut value = vec![T::ZERO; xv.len()];
        for bi in 0..b {
            for si in 0..s {
                for h in 0..heads {
                    let src = ((bi * heads + h) * s + si) * dh;
                    let dst = (bi * s + si) * heads * dh + h * dh;
                    value[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let rg = self.requires(x);
        Ok(self.push(vec![b * s, heads * dh], value, rg, Op::FromHeads { x, b, s, heads, dh }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check_live()?;
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(TensorError::DataLength { expected: n, got: self.value(x).len(), shape });
        }
        let value = self.value(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(shape, value, rg, Op::Reshape { x }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check_live()?;
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(TensorError::BadShape { op: "slice_cols", expected: format!("2-D with ≥ {} cols", start + len), got: s });
        }
        let (rows, cols) = (s[0], s[1]);
        let xv = self.value(x);
        let mut value = Vec::with_capacity(rows * len);
        for r in 0..rows {
            value.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let rg = self.requires(x);
        Ok(self.push(vec![rows, len], value, rg, Op::SliceCols { x, rows, cols, start, len }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let value: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        ensure_all_finite("add", &value)?;
        let rg = self.requires(a) || self.requires(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, rg, Op::Add { a, b }))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sb[0] != sx[1] {
            return Err(TensorError::ShapeMismatch { op: "add_bias", lhs: sx, rhs: sb });
        }
        let (rows, cols) = (sx[0], sx[1]);
        let bv = self.value(bias).to_vec();
        let value: Vec<T> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % cols])
            .collect();
        ensure_all_finite("add_bias", &value)?;
        let rg = self.requires(x) || self.requires(bias);
        Ok(self.push(sx, value, rg, Op::AddBias { x, bias, rows, cols }))
    }

    /// Adds the first `s` rows of a position table to every batch element of
    /// a `[B·S, d]` activation.
    pub fn add_pos(&mut self, x: NodeId, pos: NodeId, b: usize, s: usize) -> Result<NodeId> {
        self.check_live()?;
        let (sx, sp) = (self.shape(x).to_vec(), self.shape(pos).to_vec());
        if sx.len() != 2 || sp.len() != 2 || sp[1] != sx[1] || sx[0] != b * s || sp[0] < s {
            return Err(TensorError::ShapeMismatch { op: "add_pos", lhs: sx, rhs: sp });
        }
        let d = sx[1];
        let pv = self.value(pos).to_vec();
        let xv = self.value(x);
        let mut value = Vec::with_capacity(xv.len());
        for bi in 0..b {
            for si in 0..s {
                let row = &xv[(bi * s + si) * d..(bi * s + si + 1) * d];
                let prow = &pv[si * d..(si + 1) * d];
                value.extend(row.iter().zip(prow).map(|(&x, &p)| x + p));
            }
        }
        ensure_all_finite("add_pos", &value)?;
        let rg = self.requires(x) || self.requires(pos);
        Ok(self.push(sx, value, rg, Op::AddPos { x, pos, b, s, d }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_live()?;
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let value: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        ensure_all_finite("mul", &value)?;
        let rg = self.requires(a) || self.requires(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, value, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        self.check_live()?;
        let value: Vec<T> = self.value(x).iter().map(|&v| v * factor).collect();
        ensure_all_finite("scale", &value)?;
        let rg = self.requires(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, rg, Op::Scale { x, factor }))
    }

    /// Tanh-approximation GELU with the documented fixed constants.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let c0 = T::from_f64(GELU_C0);
        let c1 = T::from_f64(GELU_C1);
        let half = T::from_f64(0.5);
        let value: Vec<T> = self
            .value(x)
            .iter()
            .map(|&v| half * v * (T::ONE + (c0 * (v + c1 * v * v * v)).tanh()))
            .collect();
        ensure_all_finite("gelu", &value)?;
        let rg = self.requires(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, rg, Op::Gelu { x }))
    }

    /// Per-last-axis normalization `(x−mean)/sqrt(var+eps)`, then affine.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        self.check_live()?;
        let sx = self.shape(x).to_vec();
        let dim = *sx.last().ok_or_else(|| TensorError::BadShape {
            op: "layernorm",
            expected: "rank ≥ 1".into(),
            got: sx.clone(),
        })?;
        if self.shape(gamma) != [dim] || self.shape(beta) != [dim] {
            return Err(TensorError::ShapeMismatch {
                op: "layernorm",
                lhs: self.shape(gamma).to_vec(),
                rhs: vec![dim],
            });
        }
        if eps <= T::ZERO {
            return Err(TensorError::Contract("layernorm eps must be > 0".into()));
        }
        let rows = self.value(x).len() / dim;
        let inv_d = T::ONE / T::from_f64(dim as f64);
        let gv = self.value(gamma).to_vec();
        let bv = self.value(beta).to_vec();
        let xv = self.value(x);
        let mut value = vec![T::ZERO; xv.len()];
        let mut means = vec![T::ZERO; rows];
        let mut rstds = vec![T::ZERO; rows];
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = T::ZERO;
            for &v in row {
                let dv = v - mean;
                var += dv * dv;
            }
            var *= inv_d;
            let rstd = T::ONE / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            for c in 0..dim {
                value[r * dim + c] = (row[c] - mean) * rstd * gv[c] + bv[c];
            }
        }
        ensure_all_finite("layernorm", &value)?;
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(sx, value, rg, Op::LayerNorm { x, gamma, beta, rows, dim, mean: means, rstd: rstds }))
    }

    /// Row-wise masked softmax over `[N,S,S]` score matrices: row `i` sees
    /// columns `0..=i`; entries above the diagonal are exactly zero.
    pub fn softmax_causal(&mut self, x: NodeId) -> Result<NodeId> {
        self.softmax_visibility(x, 0)
    }

    /// Prefix-LM variant: rows `i < prefix` additionally see all columns
    /// `0..prefix`. `prefix = 0` is [`Tape::softmax_causal`].
    pub fn softmax_prefix(&mut self, x: NodeId, prefix: usize) -> Result<NodeId> {
        self.softmax_visibility(x, prefix)
    }

    fn softmax_visibility(&mut self, x: NodeId, prefix: usize) -> Result<NodeId> {
        self.check_live()?;
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[1] != sx[2] {
            return Err(TensorError::BadShape { op: "softmax_causal", expected: "[N,S,S]".into(), got: sx });
        }
        let (batch, s) = (sx[0], sx[1]);
        let xv = self.value(x);
        let mut value = vec![T::ZERO; xv.len()];
        for n in 0..batch {
            for i in 0..s {
                let base = (n * s + i) * s;
                let limit = visible_cols(i, s, prefix);
                let row = &xv[base..base + limit];
                let mut max = row[0];
                for &v in row {
                    max = max.maximum(v);
                }
                let mut sum = T::ZERO;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - max).exp();
                    value[base + j] = e;
                    sum += e;
                }
                let inv = T::ONE / sum;
                for j in 0..limit {
                    value[base + j] *= inv;
                }
            }
        }
        ensure_all_finite("softmax_causal", &value)?;
        let rg = self.requires(x);
        Ok(self.push(sx, value, rg, Op::SoftmaxCausal { x, batch, s, prefix }))
    }

    /// Row lookup `table[ids]`; backward scatter-adds rows, accumulating
    /// duplicates in order.
    pub fn embedding_gather(&mut self, table: NodeId, ids: &IntMatrix) -> Result<NodeId> {
        self.check_live()?;
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(TensorError::BadShape { op: "embedding_gather", expected: "[V,d]".into(), got: st });
        }
        let (vocab, dim) = (st[0], st[1]);
        let tv = self.value(table);
        let mut value = Vec::with_capacity(ids.data.len() * dim);
        for &id in &ids.data {
            if id as usize >= vocab {
                return Err(TensorError::IndexOutOfRange { op: "embedding_gather", id, vocab });
            }
            value.extend_from_slice(&tv[id as usize * dim..(id as usize + 1) * dim]);
        }
        let rg = self.requires(table);
        Ok(self.push(
            vec![ids.rows, ids.cols, dim],
            value,
            rg,
            Op::EmbeddingGather { table, ids: ids.data.clone(), dim },
        ))
    }

    /// Summed negative log-likelihood over masked-in positions. Returns the
    /// scalar loss node and the masked-in token count; masked-out positions
    /// contribute nothing to the value and receive bitwise-zero gradient.
    /// Targets are read (and validated) only where the mask is true.
    pub fn cross_entropy_masked(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        mask: &[bool],
    ) -> Result<(NodeId, usize)> {
        self.check_live()?;
        let sl = self.shape(logits).to_vec();
        let vocab = *sl.last().ok_or_else(|| TensorError::BadShape {
            op: "cross_entropy_masked",
            expected: "[..,V]".into(),
            got: sl.clone(),
        })?;
        let rows = self.value(logits).len() / vocab;
        if targets.len() != rows || mask.len() != rows {
            return Err(TensorError::BadShape {
                op: "cross_entropy_masked",
                expected: format!("targets/mask of length {rows}"),
                got: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::AllMasked);
        }
        let lv = self.value(logits);
        let mut loss_sum = T::ZERO;
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let t = targets[r];
            if t as usize >= vocab {
                return Err(TensorError::IndexOutOfRange { op: "cross_entropy_masked", id: t, vocab });
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            let mut max = row[0];
            for &v in row {
                max = max.maximum(v);
            }
            let mut sum = T::ZERO;
            for &v in row {
                sum += (v - max).exp();
            }
            loss_sum += max + sum.ln() - row[t as usize];
        }
        if !loss_sum.is_finite() {
            return Err(TensorError::NonFinite { op: "cross_entropy_masked" });
        }
        let rg = self.requires(logits);
        let id = self.push(
            vec![1],
            vec![loss_sum],
            rg,
            Op::CrossEntropyMasked { logits, rows, vocab, targets: targets.to_vec(), mask: mask.to_vec() },
        );
        Ok((id, count))
    }

    /// Trailing mean over the last `window` positions (inclusive), per batch
    /// element of a `[B·S, d]` activation. `window = 1` is the identity.
    pub fn mean_pool_trailing(&mut self, x: NodeId, b: usize, s: usize, window: usize) -> Result<NodeId> {
        self.check_live()?;
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || sx[0] != b * s {
            return Err(TensorError::BadShape { op: "mean_pool_trailing", expected: format!("[{}, d]", b * s), got: sx });
        }
        if window == 0 {
            return Err(TensorError::Contract("mean_pool_trailing window must be ≥ 1".into()));
        }
        let d = sx[1];
        let xv = self.value(x);
        let mut value = vec![T::ZERO; xv.len()];
        for bi in 0..b {
            for i in 0..s {
                let lo = i + 1 - window.min(i + 1);
                let len = T::from_f64((i - lo + 1) as f64);
                let out = &mut value[(bi * s + i) * d..(bi * s + i + 1) * d];
                for j in lo..=i {
                    let row = &xv[(bi * s + j) * d..(bi * s + j + 1) * d];
                    for (o, &v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                for o in out.iter_mut() {
                    *o = *o / len;
                }
            }
        }
        ensure_all_finite("mean_pool_trailing", &value)?;
        let rg = self.requires(x);
        Ok(self.push(sx, value, rg, Op::MeanPoolTrailing { x, b, s, d, window }))
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.check_live()?;
        let mut acc = T::ZERO;
        for &v in self.value(x) {
            acc += v;
        }
        if !acc.is_finite() {
            return Err(TensorError::NonFinite { op: "sum_all" });
        }
        let rg = self.requires(x);
        Ok(self.push(vec![1], vec![acc], rg, Op::SumAll { x }))
    }

    fn accum(&mut self, id: NodeId, delta: Vec<T>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => self.nodes[id].grad = Some(delta),
        }
    }

    /// Replays the tape in reverse, accumulating gradients for every
    /// requires-grad node reachable from `loss`. Consumes the tape: any
    /// further op or second backward is a contract error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check_live()?;
        self.consumed = true;
        if self.nodes[loss].value.len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: self.nodes[loss].shape.clone() });
        }
        self.nodes[loss].grad = Some(vec![T::ONE]);
        for id in (0..=loss).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let dy = self.nodes[id].grad.as_ref().expect("checked above").clone();
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            self.backward_op(id, op, dy);
        }
        Ok(())
    }

    fn backward_op(&mut self, out: NodeId, op: Op<T>, dy: Vec<T>) {
        match op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                if self.requires(a) {
                    let da = kernels::matmul_bt(&dy, &self.nodes[b].value, m, n, k);
                    self.accum(a, da);
                }
                if self.requires(b) {
                    let db = kernels::matmul_at(&self.nodes[a].value, &dy, m, k, n);
                    self.accum(b, db);
                }
            }
            Op::Bmm { a, b, batch, m, k, n } => {
                if self.requires(a) {
                    let mut da = Vec::with_capacity(batch * m * k);
                    for i in 0..batch {
                        let dyi = &dy[i * m * n..(i + 1) * m * n];
                        let bv = &self.nodes[b].value[i * k * n..(i + 1) * k * n];
                        da.extend_from_slice(&kernels::matmul_bt(dyi, bv, m, n, k));
                    }
                    self.accum(a, da);
                }
                if self.requires(b) {
                    let mut db = Vec::with_capacity(batch * k * n);
                    for i in 0..batch {
                        let av = &self.nodes[a].value[i * m * k..(i + 1) * m * k];
                        let dyi = &dy[i * m * n..(i + 1) * m * n];
                        db.extend_from_slice(&kernels::matmul_at(av, dyi, m, k, n));
                    }
                    self.accum(b, db);
                }
            }
            Op::TransposeLast2 { x, batch, rows, cols } => {
                if self.requires(x) {
                    // dy has shape [batch, cols, rows]; transpose back.
                    let mut dx = vec![T::ZERO; batch * rows * cols];
                    for i in 0..batch {
                        let base = i * rows * cols;
                        for c in 0..cols {
                            for r in 0..rows {
                                dx[base + r * cols + c] = dy[base + c * rows + r];
                            }
                        }
                    }
                    self.accum(x, dx);
                }
            }
            Op::ToHeads { x, b, s, heads, dh } => {
                if self.requires(x) {
                    let mut dx = vec![T::ZERO; b * s * heads * dh];
                    for bi in 0..b {
                        for si in 0..s {
                            for h in 0..heads {
                                let fwd_dst = ((bi * heads + h) * s + si) * dh;
                                let fwd_src = (bi * s + si) * heads * dh + h * dh;
                                dx[fwd_src..fwd_src + dh].copy_from_slice(&dy[fwd_dst..fwd_dst + dh]);
                            }
                        }
                    }
                    self.accum(x, dx);
                }
            }
            Op::FromHeads { x, b, s, heads, dh } => {
                if self.requires(x) {
                    let mut dx = vec![T::ZERO; b * s * heads * dh];
                    for bi in 0..b {
                        for si in 0..s {
                            for h in 0..heads {
                                let fwd_dst = (bi * s + si) * heads * dh + h * dh;
                                let fwd_src = ((bi * heads + h) * s + si) * dh;
                                dx[fwd_src..fwd_src + dh].copy_from_slice(&dy[fwd_dst..fwd_dst + dh]);
                            }
                        }
                    }
                    self.accum(x, dx);
                }
            }
            Op::Reshape { x } => {
                if self.requires(x) {
                    self.accum(x, dy);
                }
            }
            Op::SliceCols { x, rows, cols, start, len } => {
                if self.requires(x) {
                    let mut dx = vec![T::ZERO; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&dy[r * len..(r + 1) * len]);
                    }
                    self.accum(x, dx);
                }
            }
            Op::Add { a, b } => {
                if self.requires(a) {
                    self.accum(a, dy.clone());
                }
                if self.requires(b) {
                    self.accum(b, dy);
                }
            }
            Op::AddBias { x, bias, rows, cols } => {
                if self.requires(bias) {
                    let mut db = vec![T::ZERO; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += dy[r * cols + c];
                        }
                    }
                    self.accum(bias, db);
                }
                if self.requires(x) {
                    self.accum(x, dy);
                }
            }
            Op::AddPos { x, pos, b, s, d } => {
                if self.requires(pos) {
                    let max_rows = self.nodes[pos].value.len() / d;
                    let mut dp = vec![T::ZERO; max_rows * d];
                    for bi in 0..b {
                        for si in 0..s {
                            let src = (bi * s + si) * d;
                            for c in 0..d {
                                dp[si * d + c] += dy[src + c];
                            }
                        }
                    }
                    self.accum(pos, dp);
                }
                if self.requires(x) {
                    self.accum(x, dy);
                }
            }
            Op::Mul { a, b } => {
                if self.requires(a) {
                    let da: Vec<T> = dy.iter().zip(&self.nodes[b].value).map(|(&g, &v)| g * v).collect();
                    self.accum(a, da);
                }
                if self.requires(b) {
                    let db: Vec<T> = dy.iter().zip(&self.nodes[a].value).map(|(&g, &v)| g * v).collect();
                    self.accum(b, db);
                }
            }
            Op::Scale { x, factor } => {
                if self.requires(x) {
                    let dx: Vec<T> = dy.iter().map(|&g| g * factor).collect();
                    self.accum(x, dx);
                }
            }
            Op::Gelu { x } => {
                if self.requires(x) {
                    let c0 = T::from_f64(GELU_C0);
                    let c1 = T::from_f64(GELU_C1);
                    let half = T::from_f64(0.5);
                    let three = T::from_f64(3.0);
                    let dx: Vec<T> = dy
                        .iter()
                        .zip(&self.nodes[x].value)
                        .map(|(&g, &v)| {
                            let t = (c0 * (v + c1 * v * v * v)).tanh();
                            let du = c0 * (T::ONE + three * c1 * v * v);
                            g * (half * (T::ONE + t) + half * v * (T::ONE - t * t) * du)
                        })
                        .collect();
                    self.accum(x, dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, rows, dim, mean, rstd } => {
                let inv_d = T::ONE / T::from_f64(dim as f64);
                if self.requires(beta) {
                    let mut db = vec![T::ZERO; dim];
                    for r in 0..rows {
                        for c in 0..dim {
                            db[c] += dy[r * dim + c];
                        }
                    }
                    self.accum(beta, db);
                }
                if self.requires(gamma) {
                    let xv = &self.nodes[x].value;
                    let mut dg = vec![T::ZERO; dim];
                    for r in 0..rows {
                        for c in 0..dim {
                            let xhat = (xv[r * dim + c] - mean[r]) * rstd[r];
                            dg[c] += dy[r * dim + c] * xhat;
                        }
                    }
                    self.accum(gamma, dg);
                }
                if self.requires(x) {
                    let gv = self.nodes[gamma].value.clone();
                    let xv = &self.nodes[x].value;
                    let mut dx = vec![T::ZERO; rows * dim];
                    for r in 0..rows {
                        let mut sum_dxhat = T::ZERO;
                        let mut sum_dxhat_xhat = T::ZERO;
                        for c in 0..dim {
                            let xhat = (xv[r * dim + c] - mean[r]) * rstd[r];
                            let dxhat = dy[r * dim + c] * gv[c];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        let mean_dxhat = sum_dxhat * inv_d;
                        let mean_dxhat_xhat = sum_dxhat_xhat * inv_d;
                        for c in 0..dim {
                            let xhat = (xv[r * dim + c] - mean[r]) * rstd[r];
                            let dxhat = dy[r * dim + c] * gv[c];
                            dx[r * dim + c] = rstd[r] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    self.accum(x, dx);
                }
            }
            Op::SoftmaxCausal { x, batch, s, prefix } => {
                if self.requires(x) {
                    let pv = &self.nodes[out].value;
                    let mut dx = vec![T::ZERO; batch * s * s];
                    for n in 0..batch {
                        for i in 0..s {
                            let base = (n * s + i) * s;
                            let limit = visible_cols(i, s, prefix);
                            let mut dot = T::ZERO;
                            for j in 0..limit {
                                dot += dy[base + j] * pv[base + j];
                            }
                            for j in 0..limit {
                                dx[base + j] = pv[base + j] * (dy[base + j] - dot);
                            }
                        }
                    }
                    self.accum(x, dx);
                }
            }
            Op::EmbeddingGather { table, ids, dim } => {
                if self.requires(table) {
                    let vocab = self.nodes[table].value.len() / dim;
                    let mut dt = vec![T::ZERO; vocab * dim];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = id as usize * dim;
                        let src = r * dim;
                        for c in 0..dim {
                            dt[dst + c] += dy[src + c];
                        }
                    }
                    self.accum(table, dt);
                }
            }
            Op::CrossEntropyMasked { logits, rows, vocab, targets, mask } => {
                if self.requires(logits) {
                    let up = dy[0];
                    let lv = &self.nodes[logits].value;
                    let mut dl = vec![T::ZERO; rows * vocab];
                    for r in 0..rows {
                        if !mask[r] {
                            continue;
                        }
                        let row = &lv[r * vocab..(r + 1) * vocab];
                        let mut max = row[0];
                        for &v in row {
                            max = max.maximum(v);
                        }
                        let mut sum = T::ZERO;
                        for &v in row {
                            sum += (v - max).exp();
                        }
                        let inv = T::ONE / sum;
                        let out_row = &mut dl[r * vocab..(r + 1) * vocab];
                        for (o, &v) in out_row.iter_mut().zip(row) {
                            *o = up * (v - max).exp() * inv;
                        }
                        out_row[targets[r] as usize] -= up;
                    }
                    self.accum(logits, dl);
                }
            }
            Op::MeanPoolTrailing { x, b, s, d, window } => {
                if self.requires(x) {
                    let mut dx = vec![T::ZERO; b * s * d];
                    for bi in 0..b {
                        for i in 0..s {
                            let lo = i + 1 - window.min(i + 1);
                            let coeff = T::ONE / T::from_f64((i - lo + 1) as f64);
                            let src = (bi * s + i) * d;
                            for j in lo..=i {
                                let dst = (bi * s + j) * d;
                                for c in 0..d {
                                    dx[dst + c] += dy[src + c] * coeff;
                                }
                            }
                        }
                    }
                    self.accum(x, dx);
                }
            }
            Op::SumAll { x } => {
                if self.requires(x) {
                    let n = self.nodes[x].value.len();
                    self.accum(x, vec![dy[0]; n]);
                }
            }
        }
    }
}

fn visible_cols(row: usize, s: usize, prefix: usize) -> usize {
    if row < prefix {
        prefix.min(s)
    } else {
        row + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::matmul_naive;

    fn leaf_f64(tape: &mut Tape<f64>, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        let t = Tensor::new(shape, data).unwrap().with_grad();
        tape.leaf(&t).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::<f64>::new();
        let a = leaf_f64(&mut tape, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let eye = leaf_f64(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let c = tape.matmul(a, eye).unwrap();
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0]);

        let x = leaf_f64(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        let y = leaf_f64(&mut tape, vec![2, 1], vec![3.0, 4.0]);
        let d = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(d), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn random_matmul_matches_triple_loop_oracle() {
        let mut rng = crate::rng::seeded(42);
        use rand::Rng;
        let a: Vec<f64> = (0..35).map(|_| rng.random::<f64>() - 0.5).collect();
        let b: Vec<f64> = (0..15).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut tape = Tape::<f64>::new();
        let na = leaf_f64(&mut tape, vec![7, 5], a.clone());
        let nb = leaf_f64(&mut tape, vec![5, 3], b.clone());
        let c = tape.matmul(na, nb).unwrap();
        let oracle = matmul_naive(&a, &b, 7, 5, 3);
        for (x, y) in tape.value(c).iter().zip(&oracle) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_causal_uniform_rows_and_exact_zeros() {
        let mut tape = Tape::<f64>::new();
        let s = 4;
        let x = tape.constant(vec![1, s, s], vec![0.7; s * s]).unwrap();
        let p = tape.softmax_causal(x).unwrap();
        let pv = tape.value(p);
        for i in 0..s {
            for j in 0..s {
                let v = pv[i * s + j];
                if j > i {
                    assert_eq!(v, 0.0, "strict zero above diagonal");
                } else {
                    assert!((v - 1.0 / (i as f64 + 1.0)).abs() < 1e-12);
                }
            }
            let row_sum: f64 = pv[i * s..(i + 1) * s].iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_causal_single_element_and_analytic_two_way() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![1, 1, 1], vec![3.5]).unwrap();
        let p = tape.softmax_causal(x).unwrap();
        assert_eq!(tape.value(p), &[1.0]);

        let scores = tape
            .constant(vec![1, 2, 2], vec![0.0, 0.0, 0.0, 3.0f64.ln()])
            .unwrap();
        let p = tape.softmax_causal(scores).unwrap();
        let row1 = &tape.value(p)[2..4];
        assert!((row1[0] - 0.25).abs() < 1e-12 && (row1[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn layernorm_degenerate_affine_and_normalized_cases() {
        let mut tape = Tape::<f64>::new();
        let gamma1 = tape.constant(vec![2], vec![1.0, 1.0]).unwrap();
        let beta0 = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();

        // Constant row: variance 0, eps-dominated output ~ 0.
        let x = tape.constant(vec![1, 2], vec![3.0, 3.0]).unwrap();
        let y = tape.layernorm(x, gamma1, beta0, 1e-5).unwrap();
        assert!(tape.value(y).iter().all(|v| v.abs() < 1e-9));

        // Already normalized input passes through (up to eps).
        let x = tape.constant(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let y = tape.layernorm(x, gamma1, beta0, 1e-5).unwrap();
        assert!((tape.value(y)[0] - 1.0).abs() < 1e-3);
        assert!((tape.value(y)[1] + 1.0).abs() < 1e-3);

        // gamma = 0 leaves only beta.
        let gamma0 = tape.constant(vec![2], vec![0.0, 0.0]).unwrap();
        let beta5 = tape.constant(vec![2], vec![5.0, 5.0]).unwrap();
        let x = tape.constant(vec![1, 2], vec![9.0, -2.0]).unwrap();
        let y = tape.layernorm(x, gamma0, beta5, 1e-5).unwrap();
        assert_eq!(tape.value(y), &[5.0, 5.0]);
    }

    #[test]
    fn gelu_fixed_points() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(vec![3], vec![0.0, 10.0, 1.0]).unwrap();
        let y = tape.gelu(x).unwrap();
        let v = tape.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-6);
        assert!((v[2] - 0.8411921).abs() < 1e-5);
    }

    #[test]
    fn embedding_gather_basis_and_duplicate_scatter() {
        let mut tape = Tape::<f64>::new();
        // One-hot basis table.
        let table = Tensor::new(vec![4, 4], {
            let mut d = vec![0.0; 16];
            for i in 0..4 {
                d[i * 4 + i] = 1.0;
            }
            d
        })
        .unwrap()
        .with_grad();
        let t = tape.leaf(&table).unwrap();
        let ids = IntMatrix::new(1, 1, vec![2]);
        let g = tape.embedding_gather(t, &ids).unwrap();
        assert_eq!(tape.value(g), &[0.0, 0.0, 1.0, 0.0]);

        // Duplicate ids accumulate their upstream gradients.
        let mut tape = Tape::<f64>::new();
        let t = tape.leaf(&table).unwrap();
        let ids = IntMatrix::new(1, 2, vec![3, 3]);
        let g = tape.embedding_gather(t, &ids).unwrap();
        let w = tape
            .constant(vec![1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0])
            .unwrap();
        let prod = tape.mul(g, w).unwrap();
        let loss = tape.sum_all(prod).unwrap();
        tape.backward(loss).unwrap();
        let dt = tape.grad(t).unwrap();
        assert_eq!(&dt[12..16], &[11.0, 22.0, 33.0, 44.0]);

        // Out-of-range id is an error naming the id and vocab size.
        let mut tape = Tape::<f64>::new();
        let t = tape.leaf(&table).unwrap();
        let err = tape.embedding_gather(t, &IntMatrix::new(1, 1, vec![9])).unwrap_err();
        assert!(err.to_string().contains('9') && err.to_string().contains('4'));
    }

    #[test]
    fn gather_matches_loop_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::seeded(5);
        let (v, d) = (11, 6);
        let table: Vec<f64> = (0..v * d).map(|_| rng.random::<f64>()).collect();
        let ids: Vec<u32> = (0..10).map(|_| rng.random_range(0..v as u32)).collect();
        let mut tape = Tape::<f64>::new();
        let t = leaf_f64(&mut tape, vec![v, d], table.clone());
        let g = tape.embedding_gather(t, &IntMatrix::new(2, 5, ids.clone())).unwrap();
        for (r, &id) in ids.iter().enumerate() {
            for c in 0..d {
                assert_eq!(tape.value(g)[r * d + c], table[id as usize * d + c]);
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_and_confident_and_all_masked() {
        // Uniform logits over V=8 with 3 masked-in tokens: loss = 3·ln 8.
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(vec![4, 8], vec![0.25; 32]).unwrap();
        let targets = vec![1, 2, 3, 4];
        let mask = vec![true, true, false, true];
        let (loss, count) = tape.cross_entropy_masked(logits, &targets, &mask).unwrap();
        assert_eq!(count, 3);
        assert!((tape.scalar_value(loss) - 3.0 * 8.0f64.ln()).abs() < 1e-4);

        // Near-one-hot correct logit.
        let mut tape = Tape::<f64>::new();
        let mut row = vec![0.0; 8];
        row[5] = 100.0;
        let logits = tape.constant(vec![1, 8], row).unwrap();
        let (loss, _) = tape.cross_entropy_masked(logits, &[5], &[true]).unwrap();
        assert!(tape.scalar_value(loss) < 1e-6);

        // Fully masked input is a defined error.
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(vec![2, 8], vec![0.0; 16]).unwrap();
        let err = tape.cross_entropy_masked(logits, &[0, 0], &[false, false]).unwrap_err();
        assert!(matches!(err, TensorError::AllMasked));
    }

    #[test]
    fn cross_entropy_ignores_masked_out_targets_entirely() {
        // Garbage (even out-of-range) targets at masked-out rows are never read.
        let mut tape = Tape::<f64>::new();
        let logits = leaf_f64(&mut tape, vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, 1.0, 2.0, 3.0, 4.0]);
        let (loss, _) = tape
            .cross_entropy_masked(logits, &[2, u32::MAX], &[true, false])
            .unwrap();
        tape.backward(loss).unwrap();
        let dl = tape.grad(logits).unwrap();
        for &g in &dl[4..8] {
            assert_eq!(g.to_bits(), 0.0f64.to_bits(), "masked-out grad must be bitwise zero");
        }
    }

    #[test]
    fn backward_sum_gives_ones_and_product_swaps() {
        let mut tape = Tape::<f64>::new();
        let x = leaf_f64(&mut tape, vec![2, 3], vec![5.0, -1.0, 2.0, 0.0, 9.0, 4.0]);
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::<f64>::new();
        let x = leaf_f64(&mut tape, vec![3], vec![1.0, 2.0, 3.0]);
        let y = leaf_f64(&mut tape, vec![3], vec![4.0, 5.0, 6.0]);
        let p = tape.mul(x, y).unwrap();
        let loss = tape.sum_all(p).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, 5.0, 6.0]);
        assert_eq!(tape.grad(y).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut tape = Tape::<f64>::new();
        let x = leaf_f64(&mut tape, vec![2], vec![1.0, 2.0]);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));

        let mut tape = Tape::<f64>::new();
        let x = leaf_f64(&mut tape, vec![2], vec![1.0, 2.0]);
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss).unwrap_err(), TensorError::TapeConsumed));
        assert!(matches!(tape.sum_all(x).unwrap_err(), TensorError::TapeConsumed));
    }

    #[test]
    fn non_finite_values_error_immediately() {
        let mut tape = Tape::<f32>::new();
        let big = tape.constant(vec![1], vec![f32::MAX]).unwrap();
        let big2 = tape.scale(big, 2.0).unwrap_err();
        assert!(matches!(big2, TensorError::NonFinite { .. }));
        let t = Tensor::new(vec![1], vec![f32::NAN]).unwrap();
        assert!(matches!(Tape::new().leaf(&t).unwrap_err(), TensorError::NonFinite { .. }));
    }

    #[test]
    fn mean_pool_trailing_hand_case_and_identity() {
        let mut tape = Tape::<f64>::new();
        let x = leaf_f64(&mut tape, vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let p = tape.mean_pool_trailing(x, 1, 4, 2).unwrap();
        assert_eq!(tape.value(p), &[1.0, 1.5, 2.5, 3.5]);

        let mut tape = Tape::<f64>::new();
        let x = leaf_f64(&mut tape, vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let p = tape.mean_pool_trailing(x, 1, 3, 1).unwrap();
        assert_eq!(tape.value(p), tape.value(x), "window 1 is the identity");
    }

    #[test]
    fn mean_pool_constant_rows_pass_through() {
        let mut tape = Tape::<f64>::new();
        let x = leaf_f64(&mut tape, vec![5, 2], [0.3, -0.7].repeat(5));
        let p = tape.mean_pool_trailing(x, 1, 5, 3).unwrap();
        for (a, b) in tape.value(p).iter().zip(tape.value(x)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Central-difference check of every op's backward rule through a small
    /// composite graph touching matmul, bias, gelu, layernorm, attention-style
    /// bmm/softmax, pooling, gather, and masked cross entropy.
    #[test]
    fn finite_difference_composite_graph() {
        use rand::Rng;
        let (s, d, v) = (5, 4, 7);

        let mut rng = crate::rng::seeded(99);
        let table: Vec<f64> = (0..v * d).map(|_| rng.random::<f64>() * 0.4 - 0.2).collect();
        let w: Vec<f64> = (0..d * d).map(|_| rng.random::<f64>() * 0.4 - 0.2).collect();
        let bias: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 0.2 - 0.1).collect();
        let gamma: Vec<f64> = (0..d).map(|_| 1.0 + rng.random::<f64>() * 0.1).collect();
        let beta: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 0.1).collect();
        let ids = IntMatrix::new(1, s, vec![1, 3, 3, 0, 6]);
        let targets: Vec<u32> = vec![2, 0, 5, 1, 4];
        let mask = vec![true, false, true, true, true];

        let loss_for = |params: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::<f64>::new();
            let t0 = tape.leaf(&Tensor::new(vec![v, d], params[0].clone()).unwrap().with_grad()).unwrap();
            let t1 = tape.leaf(&Tensor::new(vec![d, d], params[1].clone()).unwrap().with_grad()).unwrap();
            let t2 = tape.leaf(&Tensor::new(vec![d], params[2].clone()).unwrap().with_grad()).unwrap();
            let t3 = tape.leaf(&Tensor::new(vec![d], params[3].clone()).unwrap().with_grad()).unwrap();
            let t4 = tape.leaf(&Tensor::new(vec![d], params[4].clone()).unwrap().with_grad()).unwrap();

            let emb = tape.embedding_gather(t0, &ids).unwrap();
            let x = tape.reshape(emb, vec![s, d]).unwrap();
            let x = tape.layernorm(x, t3, t4, 1e-5).unwrap();
            let x = tape.matmul(x, t1).unwrap();
            let x = tape.add_bias(x, t2).unwrap();
            let x = tape.gelu(x).unwrap();
            let x = tape.mean_pool_trailing(x, 1, s, 2).unwrap();
            // One attention-style head: scores over pooled states.
            let q = tape.reshape(x, vec![1, s, d]).unwrap();
            let kt = tape.transpose_last2(q).unwrap();
            let scores = tape.bmm(q, kt).unwrap();
            let probs = tape.softmax_causal(scores).unwrap();
            let mixed = tape.bmm(probs, q).unwrap();
            let flat = tape.reshape(mixed, vec![s, d]).unwrap();
            // Project to vocab with the (transposable) table itself — reuse
            // exercises gradient accumulation through two paths.
            let logits_w = tape.matmul(flat, t1).unwrap();
            let logits = {
                // widen d -> v by gathering columns via matmul with table^T slice
                let t0_2d = tape.reshape(t0, vec![v, d]).unwrap();
                let t0_t = tape.reshape(t0_2d, vec![1, v, d]).unwrap();
                let t0_t = tape.transpose_last2(t0_t).unwrap();
                let t0_t = tape.reshape(t0_t, vec![d, v]).unwrap();
                tape.matmul(logits_w, t0_t).unwrap()
            };
            let (loss, count) = tape.cross_entropy_masked(logits, &targets, &mask).unwrap();
            let mean = tape.scale(loss, 1.0 / count as f64).unwrap();
            tape.scalar_value(mean)
        };

        // Analytic gradients.
        let params = vec![table.clone(), w.clone(), bias.clone(), gamma.clone(), beta.clone()];
        let grads: Vec<Vec<f64>> = {
            let mut tape = Tape::<f64>::new();
            let mut nodes = Vec::new();
            let shapes: Vec<Vec<usize>> =
                vec![vec![v, d], vec![d, d], vec![d], vec![d], vec![d]];
            for (sh, p) in shapes.iter().zip(&params) {
                nodes.push(
                    tape.leaf(&Tensor::new(sh.clone(), p.clone()).unwrap().with_grad()).unwrap(),
                );
            }
            let emb = tape.embedding_gather(nodes[0], &ids).unwrap();
            let x = tape.reshape(emb, vec![s, d]).unwrap();
            let x = tape.layernorm(x, nodes[3], nodes[4], 1e-5).unwrap();
            let x = tape.matmul(x, nodes[1]).unwrap();
            let x = tape.add_bias(x, nodes[2]).unwrap();
            let x = tape.gelu(x).unwrap();
            let x = tape.mean_pool_trailing(x, 1, s, 2).unwrap();
            let q = tape.reshape(x, vec![1, s, d]).unwrap();
            let kt = tape.transpose_last2(q).unwrap();
            let scores = tape.bmm(q, kt).unwrap();
            let probs = tape.softmax_causal(scores).unwrap();
            let mixed = tape.bmm(probs, q).unwrap();
            let flat = tape.reshape(mixed, vec![s, d]).unwrap();
            let logits_w = tape.matmul(flat, nodes[1]).unwrap();
            let t0_2d = tape.reshape(nodes[0], vec![v, d]).unwrap();
            let t0_t = tape.reshape(t0_2d, vec![1, v, d]).unwrap();
            let t0_t = tape.transpose_last2(t0_t).unwrap();
            let t0_t = tape.reshape(t0_t, vec![d, v]).unwrap();
            let logits = tape.matmul(logits_w, t0_t).unwrap();
            let (loss, count) = tape.cross_entropy_masked(logits, &targets, &mask).unwrap();
            let mean = tape.scale(loss, 1.0 / count as f64).unwrap();
            tape.backward(mean).unwrap();
            nodes.iter().map(|&n| tape.grad(n).unwrap().to_vec()).collect()
        };

        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            for ci in 0..p.len() {
                let mut plus = params.clone();
                plus[pi][ci] += h;
                let mut minus = params.clone();
                minus[pi][ci] -= h;
                let fd = (loss_for(&plus) - loss_for(&minus)) / (2.0 * h);
                let ad = grads[pi][ci];
                let denom = (ad.abs() + fd.abs()).max(1e-8);
                assert!(
                    ((ad - fd) / denom).abs() < 1e-5,
                    "param {pi} coord {ci}: ad={ad} fd={fd}"
                );
            }
        }
    }
}
