//! Define-by-run tape: forward ops record themselves, `backward` replays in
//! reverse. Nodes hold `Arc` payloads so parameter leaves are zero-copy.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::quant::QuantizedTensor;
use crate::tensor::Tensor;

/// Reference to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

static TAPE_EPOCH: AtomicU64 = AtomicU64::new(1);

#[derive(Debug)]
enum Op {
    /// Parameter leaf; data is shared with the owning tensor.
    Leaf,
    /// Tape-owned constant (ids, masks, fixture values). Never requires grad.
    Constant,
    /// a[m,k] @ b[k,n]
    Matmul { a: NodeId, b: NodeId },
    /// x[n,k] @ w[d,k]^T -> [n,d]
    Linear { x: NodeId, w: NodeId },
    /// Same as Linear but the weight stays in 4-bit form; it is dequantized
    /// transiently in both passes and never materialized on the tape.
    LinearQuant { x: NodeId, w: Arc<QuantizedTensor> },
    Add { a: NodeId, b: NodeId },
    /// x[m,n] + row[n] broadcast over rows
    AddRow { x: NodeId, row: NodeId },
    Mul { a: NodeId, b: NodeId },
    Div { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f32 },
    Gelu { x: NodeId },
    SoftmaxRows { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f32 },
    /// Mean over rows of -log softmax(logits)[target]
    CrossEntropy { logits: NodeId, targets: Arc<Vec<usize>> },
    Embedding { table: NodeId, ids: Arc<Vec<usize>> },
    /// Inverted dropout; mask entries are 0 or 1/(1-p).
    Dropout { x: NodeId, mask: Arc<Vec<f32>> },
    Transpose { x: NodeId },
    Reshape { x: NodeId },
    /// Columns [start, start+len) of a 2-D input.
    SliceCols { x: NodeId, start: usize },
    /// Per-output-unit L2 norms of a [d,k] weight: sqrt(sum_j x[i,j]^2 + eps).
    /// One norm per output row, i.e. the column norms of the transposed map.
    ColumnNorms { x: NodeId, eps: f32 },
    /// Row i scaled by s[i].
    ScaleRows { x: NodeId, s: NodeId },
    /// Column j scaled by s[j].
    ScaleCols { x: NodeId, s: NodeId },
    Sum { x: NodeId },
    /// Fused multi-head self-attention over [batch*seq, dim] projections.
    /// `mask` is additive on key positions ([batch*seq], 0 or large negative).
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        heads: usize,
        seq: usize,
        probs: Arc<Vec<f32>>,
        mask: Arc<Vec<f32>>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    grad: Option<Vec<f32>>,
    requires: bool,
}

/// Reverse-mode tape. Rebuilt per forward pass.
#[derive(Debug)]
pub struct Tape {
    epoch: u64,
    nodes: Vec<Node>,
    /// Bytes of buffers held by op records (attention probs, masks).
    aux_bytes: usize,
    /// High-water mark of transient dequantized weights (bytes).
    transient_bytes: usize,
    /// Full-precision values of scalar reductions, for oracles that need a
    /// read-out below f32 resolution. The stored f32 is the engine value.
    scalars: HashMap<usize, f64>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            epoch: TAPE_EPOCH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            aux_bytes: 0,
            transient_bytes: 0,
            scalars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn epoch(&self) -> u64 {
        self.epoch
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, data: Vec<f32>, requires: bool) -> NodeId {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced by forward op"
        );
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            shape,
            data: Arc::new(data),
            grad: None,
            requires,
        });
        id
    }

    /// Register a tensor as a leaf. Repeated registration of the same tensor
    /// on the same tape returns the original node so gradients accumulate.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        if let Some((epoch, idx)) = t.binding().get() {
            if epoch == self.epoch && idx < self.nodes.len() {
                return NodeId(idx);
            }
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            shape: t.shape().to_vec(),
            data: t.data_arc(),
            grad: None,
            requires: t.requires_grad,
        });
        t.binding().set(Some((self.epoch, id.0)));
        id
    }

    /// Tape-owned constant; gradients never flow into it.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Op::Constant, shape, data, false)
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient of a tensor registered as a leaf on this tape, if any.
    /// Scalar value at full accumulation precision when the node is a
    /// scalar reduction; falls back to the stored f32.
    pub fn scalar64(&self, id: NodeId) -> f64 {
        self.scalars
            .get(&id.0)
            .copied()
            .unwrap_or_else(|| self.nodes[id.0].data[0] as f64)
    }

    pub fn grad_of(&self, t: &Tensor) -> Option<&[f32]> {
        match t.binding().get() {
            Some((epoch, idx)) if epoch == self.epoch => self.nodes[idx].grad.as_deref(),
            _ => None,
        }
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = mm(self.value(a), self.value(b), m, k, n);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul { a, b }, vec![m, n], data, req))
    }

    /// y = x @ w^T for x[n,k], w[d,k].
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::Shape {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let (n, k, d) = (sx[0], sx[1], sw[0]);
        let data = mm_bt(self.value(x), self.value(w), n, k, d);
        let req = self.requires(x) || self.requires(w);
        Ok(self.push(Op::Linear { x, w }, vec![n, d], data, req))
    }

    /// y = x @ dequant(w)^T with the dequantized weight kept transient.
    pub fn linear_quant(&mut self, x: NodeId, w: &Arc<QuantizedTensor>) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let sw = w.shape().to_vec();
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::Shape {
                op: "linear_quant",
                lhs: sx,
                rhs: sw,
            });
        }
        let (n, k, d) = (sx[0], sx[1], sw[0]);
        let wdata = w.dequantize_values();
        self.note_transient(wdata.len() * 4);
        let data = mm_bt(self.value(x), &wdata, n, k, d);
        let req = self.requires(x);
        Ok(self.push(
            Op::LinearQuant { x, w: Arc::clone(w) },
            vec![n, d],
            data,
            req,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Shape {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let data: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        let id = self.push(Op::Add { a, b }, sa, data, req);
        if let (Some(&xa), Some(&xb)) = (self.scalars.get(&a.0), self.scalars.get(&b.0)) {
            self.scalars.insert(id.0, xa + xb);
        }
        Ok(id)
    }

    /// x[m,n] + row[n], broadcast over rows.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (sx, sr) = (self.shape(x).to_vec(), self.shape(row).to_vec());
        if sx.len() != 2 || sr.len() != 1 || sr[0] != sx[1] {
            return Err(Error::Shape {
                op: "add_row",
                lhs: sx,
                rhs: sr,
            });
        }
        let n = sx[1];
        let rowv = self.value(row).to_vec();
        let data: Vec<f32> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + rowv[i % n])
            .collect();
        let req = self.requires(x) || self.requires(row);
        Ok(self.push(Op::AddRow { x, row }, sx, data, req))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Shape {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        let data: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul { a, b }, sa, data, req))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Shape {
                op: "div",
                lhs: sa,
                rhs: sb,
            });
        }
        let data: Vec<f32> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x / y)
            .collect();
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Div { a, b }, sa, data, req))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let shape = self.shape(x).to_vec();
        let data: Vec<f32> = self.value(x).iter().map(|v| v * c).collect();
        let req = self.requires(x);
        let id = self.push(Op::Scale { x, c }, shape, data, req);
        if let Some(&xv) = self.scalars.get(&x.0) {
            self.scalars.insert(id.0, xv * c as f64);
        }
        id
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let data: Vec<f32> = self.value(x).iter().map(|&v| gelu_fwd(v)).collect();
        let req = self.requires(x);
        self.push(Op::Gelu { x }, shape, data, req)
    }

    /// Row-wise softmax over the last dimension, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("softmax_rows on 0-d tensor");
        let xs = self.value(x);
        let mut data = vec![0.0f32; xs.len()];
        for (row, out) in xs.chunks(n).zip(data.chunks_mut(n)) {
            softmax_into(row, out);
        }
        let req = self.requires(x);
        self.push(Op::SoftmaxRows { x }, shape, data, req)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f32) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: sx,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xs = self.value(x);
        let g = self.value(gamma).to_vec();
        let b = self.value(beta).to_vec();
        let mut data = vec![0.0f32; xs.len()];
        for (row, out) in xs.chunks(d).zip(data.chunks_mut(d)) {
            let (mean, var) = row_stats(row);
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, sx, data, req))
    }

    /// Mean over the batch of -log softmax(logits)[target].
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Contract(format!(
                "cross_entropy: logits {s:?} vs {} targets",
                targets.len()
            )));
        }
        let n = s[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Contract(format!(
                "cross_entropy: target index {bad} out of range 0..{n}"
            )));
        }
        let xs = self.value(logits);
        let mut total = 0.0f64;
        for (row, &t) in xs.chunks(n).zip(targets) {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            total -= (row[t] - max) as f64 - lse.ln();
        }
        let exact = total / targets.len() as f64;
        let req = self.requires(logits);
        let id = self.push(
            Op::CrossEntropy {
                logits,
                targets: Arc::new(targets.to_vec()),
            },
            vec![1],
            vec![exact as f32],
            req,
        );
        self.scalars.insert(id.0, exact);
        Ok(id)
    }

    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::Contract("embedding table must be 2-d".into()));
        }
        let (vocab, dim) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Contract(format!(
                "embedding id {bad} out of range 0..{vocab}"
            )));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            data.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let req = self.requires(table);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: Arc::new(ids.to_vec()),
            },
            vec![ids.len(), dim],
            data,
            req,
        ))
    }

    /// Inverted dropout: kept entries are scaled by 1/(1-p) so eval needs no
    /// rescale. Eval mode is simply not calling this.
    pub fn dropout(&mut self, x: NodeId, p: f32, rng: &mut impl Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout p {p} outside [0,1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let shape = self.shape(x).to_vec();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f32> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f32>() < p { 0.0 } else { keep })
            .collect();
        let data: Vec<f32> = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.aux_bytes += mask.len() * 4;
        let req = self.requires(x);
        Ok(self.push(
            Op::Dropout {
                x,
                mask: Arc::new(mask),
            },
            shape,
            data,
            req,
        ))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Contract("transpose requires a 2-d tensor".into()));
        }
        let (r, c) = (s[0], s[1]);
        let xs = self.value(x);
        let mut data = vec![0.0f32; xs.len()];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xs[i * c + j];
            }
        }
        let req = self.requires(x);
        Ok(self.push(Op::Transpose { x }, vec![c, r], data, req))
    }

    pub fn reshape(&mut self, x: NodeId, new_shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: new_shape,
            });
        }
        // zero-copy: the node shares the input's buffer
        let data = Arc::clone(&self.nodes[x.0].data);
        let req = self.requires(x);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Reshape { x },
            shape: new_shape,
            data,
            grad: None,
            requires: req,
        });
        Ok(id)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::Contract(format!(
                "slice_cols [{start}, {}) out of {:?}",
                start + len,
                s
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let xs = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&xs[i * cols + start..i * cols + start + len]);
        }
        let req = self.requires(x);
        Ok(self.push(Op::SliceCols { x, start }, vec![rows, len], data, req))
    }

    /// Per-output-unit L2 norms of a [d,k] weight matrix (guarded by eps
    /// inside the square root). Serves the magnitude normalization of
    /// direction-decomposed adapters.
    pub fn column_norms(&mut self, x: NodeId, eps: f32) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Contract("column_norms requires a 2-d tensor".into()));
        }
        let (d, k) = (s[0], s[1]);
        let xs = self.value(x);
        let data: Vec<f32> = (0..d)
            .map(|i| {
                let row = &xs[i * k..(i + 1) * k];
                (row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>() + eps as f64).sqrt()
                    as f32
            })
            .collect();
        let req = self.requires(x);
        Ok(self.push(Op::ColumnNorms { x, eps }, vec![d], data, req))
    }

    /// Column j of x scaled by s[j].
    pub fn scale_cols(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        if sx.len() != 2 || ss.len() != 1 || ss[0] != sx[1] {
            return Err(Error::Shape {
                op: "scale_cols",
                lhs: sx,
                rhs: ss,
            });
        }
        let (n, d) = (sx[0], sx[1]);
        let sv = self.value(s).to_vec();
        let xs = self.value(x);
        let mut data = vec![0.0f32; n * d];
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] = xs[i * d + j] * sv[j];
            }
        }
        let req = self.requires(x) || self.requires(s);
        Ok(self.push(Op::ScaleCols { x, s }, sx, data, req))
    }

    /// Row i of x scaled by s[i].
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (sx, ss) = (self.shape(x).to_vec(), self.shape(s).to_vec());
        if sx.len() != 2 || ss.len() != 1 || ss[0] != sx[0] {
            return Err(Error::Shape {
                op: "scale_rows",
                lhs: sx,
                rhs: ss,
            });
        }
        let (d, k) = (sx[0], sx[1]);
        let sv = self.value(s).to_vec();
        let xs = self.value(x);
        let mut data = vec![0.0f32; d * k];
        for i in 0..d {
            for j in 0..k {
                data[i * k + j] = xs[i * k + j] * sv[i];
            }
        }
        let req = self.requires(x) || self.requires(s);
        Ok(self.push(Op::ScaleRows { x, s }, sx, data, req))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let req = self.requires(x);
        let id = self.push(Op::Sum { x }, vec![1], vec![total as f32], req);
        self.scalars.insert(id.0, total);
        id
    }

    /// Fused multi-head self-attention. q/k/v are [batch*seq, dim] with
    /// dim divisible by `heads`; `mask` is additive on key positions.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        heads: usize,
        seq: usize,
        mask: &Arc<Vec<f32>>,
    ) -> Result<NodeId> {
        let s = self.shape(q).to_vec();
        if self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(Error::Shape {
                op: "attention",
                lhs: s,
                rhs: self.shape(k).to_vec(),
            });
        }
        if s.len() != 2 || s[0] != batch * seq || s[1] % heads != 0 {
            return Err(Error::Contract(format!(
                "attention: shape {s:?} incompatible with batch {batch} seq {seq} heads {heads}"
            )));
        }
        if mask.len() != batch * seq {
            return Err(Error::Contract("attention mask length mismatch".into()));
        }
        let dim = s[1];
        let dh = dim / heads;
        let inv = 1.0 / (dh as f32).sqrt();
        let (qs, ks, vs) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0f32; batch * heads * seq * seq];
        let mut out = vec![0.0f32; batch * seq * dim];
        let mut scores = vec![0.0f32; seq];
        let mut acc = vec![0.0f64; dh];
        for b in 0..batch {
            let row0 = b * seq;
            for h in 0..heads {
                let c0 = h * dh;
                for t in 0..seq {
                    let qrow = &qs[(row0 + t) * dim + c0..(row0 + t) * dim + c0 + dh];
                    for (u, sc) in scores.iter_mut().enumerate() {
                        let krow = &ks[(row0 + u) * dim + c0..(row0 + u) * dim + c0 + dh];
                        *sc = dot64(qrow, krow) * inv + mask[row0 + u];
                    }
                    let p0 = ((b * heads + h) * seq + t) * seq;
                    softmax_into(&scores, &mut probs[p0..p0 + seq]);
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for u in 0..seq {
                        let p = probs[p0 + u] as f64;
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &vs[(row0 + u) * dim + c0..(row0 + u) * dim + c0 + dh];
                        for (a, &vv) in acc.iter_mut().zip(vrow) {
                            *a += p * vv as f64;
                        }
                    }
                    let orow = (row0 + t) * dim + c0;
                    for (c, &a) in acc.iter().enumerate() {
                        out[orow + c] = a as f32;
                    }
                }
            }
        }
        self.aux_bytes += probs.len() * 4;
        let req = self.requires(q) || self.requires(k) || self.requires(v);
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                seq,
                probs: Arc::new(probs),
                mask: Arc::clone(mask),
            },
            vec![batch * seq, dim],
            out,
            req,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every reachable `requires` node gets
    /// its gradient; reuse of a node accumulates additively.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().unwrap();
            self.step_back(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, g: &[f32]) {
        let node = &mut self.nodes[id.0];
        if !node.requires {
            return;
        }
        match &mut node.grad {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn step_back(&mut self, i: usize, g: &[f32]) {
        // Arc clones keep the borrow checker happy without copying payloads.
        match &self.nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let k = self.shape(a)[1];
                if self.requires(a) {
                    let da = mm_bt(g, self.value(b), m, n, k);
                    self.acc(a, &da);
                }
                if self.requires(b) {
                    let mut db = vec![0.0f32; k * n];
                    mm_at_acc(&mut db, self.value(a), g, m, k, n);
                    self.acc(b, &db);
                }
            }
            Op::Linear { x, w } => {
                let (x, w) = (*x, *w);
                let (n, d) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let k = self.shape(w)[1];
                if self.requires(x) {
                    let dx = mm(g, self.value(w), n, d, k);
                    self.acc(x, &dx);
                }
                if self.requires(w) {
                    let mut dw = vec![0.0f32; d * k];
                    mm_at_acc(&mut dw, g, self.value(x), n, d, k);
                    self.acc(w, &dw);
                }
            }
            Op::LinearQuant { x, w } => {
                let x = *x;
                let w = Arc::clone(w);
                let (n, d) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let k = w.shape()[1];
                if self.requires(x) {
                    let wdata = w.dequantize_values();
                    self.note_transient(wdata.len() * 4);
                    let dx = mm(g, &wdata, n, d, k);
                    self.acc(x, &dx);
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.acc(a, g);
                self.acc(b, g);
            }
            Op::AddRow { x, row } => {
                let (x, row) = (*x, *row);
                self.acc(x, g);
                if self.requires(row) {
                    let n = self.shape(row)[0];
                    let mut dr = vec![0.0f32; n];
                    for (idx, v) in g.iter().enumerate() {
                        dr[idx % n] += v;
                    }
                    self.acc(row, &dr);
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let da: Vec<f32> = g.iter().zip(self.value(b)).map(|(g, y)| g * y).collect();
                    self.acc(a, &da);
                }
                if self.requires(b) {
                    let db: Vec<f32> = g.iter().zip(self.value(a)).map(|(g, x)| g * x).collect();
                    self.acc(b, &db);
                }
            }
            Op::Div { a, b } => {
                let (a, b) = (*a, *b);
                if self.requires(a) {
                    let da: Vec<f32> = g.iter().zip(self.value(b)).map(|(g, y)| g / y).collect();
                    self.acc(a, &da);
                }
                if self.requires(b) {
                    let db: Vec<f32> = g
                        .iter()
                        .zip(self.value(a).iter().zip(self.value(b)))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.acc(b, &db);
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let dx: Vec<f32> = g.iter().map(|v| v * c).collect();
                self.acc(x, &dx);
            }
            Op::Gelu { x } => {
                let x = *x;
                let dx: Vec<f32> = g
                    .iter()
                    .zip(self.value(x))
                    .map(|(g, &v)| g * gelu_bwd(v))
                    .collect();
                self.acc(x, &dx);
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                let n = *self.nodes[i].shape.last().unwrap();
                let out = Arc::clone(&self.nodes[i].data);
                let mut dx = vec![0.0f32; g.len()];
                for ((orow, grow), drow) in
                    out.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n))
                {
                    let dot: f32 = orow.iter().zip(grow).map(|(o, g)| o * g).sum();
                    for j in 0..n {
                        drow[j] = orow[j] * (grow[j] - dot);
                    }
                }
                self.acc(x, &dx);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                let d = *self.nodes[i].shape.last().unwrap();
                let xv = Arc::clone(&self.nodes[x.0].data);
                let gv = self.value(gamma).to_vec();
                let mut dx = vec![0.0f32; xv.len()];
                let mut dgamma = vec![0.0f32; d];
                let mut dbeta = vec![0.0f32; d];
                for ((row, grow), drow) in
                    xv.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d))
                {
                    let (mean, var) = row_stats(row);
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f32> = row.iter().map(|v| (v - mean) * inv).collect();
                    let mut dxhat_sum = 0.0f32;
                    let mut dxhat_dot = 0.0f32;
                    for j in 0..d {
                        let dxh = grow[j] * gv[j];
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                        dxhat_sum += dxh;
                        dxhat_dot += dxh * xhat[j];
                    }
                    let df = d as f32;
                    for j in 0..d {
                        let dxh = grow[j] * gv[j];
                        drow[j] = inv / df * (df * dxh - dxhat_sum - xhat[j] * dxhat_dot);
                    }
                }
                self.acc(x, &dx);
                self.acc(gamma, &dgamma);
                self.acc(beta, &dbeta);
            }
            Op::CrossEntropy { logits, targets } => {
                let logits = *logits;
                let targets = Arc::clone(targets);
                let n = self.shape(logits)[1];
                let batch = targets.len();
                let xv = Arc::clone(&self.nodes[logits.0].data);
                let mut dl = vec![0.0f32; xv.len()];
                let scale = g[0] / batch as f32;
                for ((row, &t), drow) in xv.chunks(n).zip(targets.iter()).zip(dl.chunks_mut(n)) {
                    softmax_into(row, drow);
                    for v in drow.iter_mut() {
                        *v *= scale;
                    }
                    drow[t] -= scale;
                }
                self.acc(logits, &dl);
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = Arc::clone(ids);
                if self.requires(table) {
                    let dim = self.shape(table)[1];
                    let mut dt = vec![0.0f32; self.value(table).len()];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..dim {
                            dt[id * dim + c] += g[r * dim + c];
                        }
                    }
                    self.acc(table, &dt);
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let mask = Arc::clone(mask);
                let dx: Vec<f32> = g.iter().zip(mask.iter()).map(|(g, m)| g * m).collect();
                self.acc(x, &dx);
            }
            Op::Transpose { x } => {
                let x = *x;
                let (r, c) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let mut dx = vec![0.0f32; g.len()];
                for a in 0..r {
                    for b in 0..c {
                        dx[b * r + a] = g[a * c + b];
                    }
                }
                self.acc(x, &dx);
            }
            Op::Reshape { x } => {
                let x = *x;
                self.acc(x, g);
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let len = self.nodes[i].shape[1];
                let (rows, cols) = (self.shape(x)[0], self.shape(x)[1]);
                let mut dx = vec![0.0f32; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.acc(x, &dx);
            }
            Op::ColumnNorms { x, .. } => {
                let x = *x;
                let k = self.shape(x)[1];
                let norms = Arc::clone(&self.nodes[i].data);
                let xv = Arc::clone(&self.nodes[x.0].data);
                let mut dx = vec![0.0f32; xv.len()];
                for (idx, (&gi, &ni)) in g.iter().zip(norms.iter()).enumerate() {
                    let f = gi / ni;
                    for j in 0..k {
                        dx[idx * k + j] = f * xv[idx * k + j];
                    }
                }
                self.acc(x, &dx);
            }
            Op::ScaleRows { x, s } => {
                let (x, s) = (*x, *s);
                let (d, k) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                if self.requires(x) {
                    let sv = self.value(s).to_vec();
                    let mut dx = vec![0.0f32; d * k];
                    for a in 0..d {
                        for j in 0..k {
                            dx[a * k + j] = g[a * k + j] * sv[a];
                        }
                    }
                    self.acc(x, &dx);
                }
                if self.requires(s) {
                    let xv = Arc::clone(&self.nodes[x.0].data);
                    let mut ds = vec![0.0f32; d];
                    for a in 0..d {
                        let mut acc = 0.0f32;
                        for j in 0..k {
                            acc += g[a * k + j] * xv[a * k + j];
                        }
                        ds[a] = acc;
                    }
                    self.acc(s, &ds);
                }
            }
            Op::ScaleCols { x, s } => {
                let (x, s) = (*x, *s);
                let (n, d) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                if self.requires(x) {
                    let sv = self.value(s).to_vec();
                    let mut dx = vec![0.0f32; n * d];
                    for a in 0..n {
                        for j in 0..d {
                            dx[a * d + j] = g[a * d + j] * sv[j];
                        }
                    }
                    self.acc(x, &dx);
                }
                if self.requires(s) {
                    let xv = Arc::clone(&self.nodes[x.0].data);
                    let mut ds = vec![0.0f64; d];
                    for a in 0..n {
                        for j in 0..d {
                            ds[j] += g[a * d + j] as f64 * xv[a * d + j] as f64;
                        }
                    }
                    let ds: Vec<f32> = ds.iter().map(|&v| v as f32).collect();
                    self.acc(s, &ds);
                }
            }
            Op::Sum { x } => {
                let x = *x;
                let dx = vec![g[0]; self.value(x).len()];
                self.acc(x, &dx);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                seq,
                probs,
                ..
            } => {
                let (q, k, v) = (*q, *k, *v);
                let (batch, heads, seq) = (*batch, *heads, *seq);
                let probs = Arc::clone(probs);
                let dim = self.nodes[i].shape[1];
                let dh = dim / heads;
                let inv = 1.0 / (dh as f32).sqrt();
                let qv = Arc::clone(&self.nodes[q.0].data);
                let kv = Arc::clone(&self.nodes[k.0].data);
                let vv = Arc::clone(&self.nodes[v.0].data);
                let mut dq = vec![0.0f32; qv.len()];
                let mut dk = vec![0.0f32; kv.len()];
                let mut dv = vec![0.0f32; vv.len()];
                let mut dp = vec![0.0f32; seq];
                let mut ds = vec![0.0f32; seq];
                for b in 0..batch {
                    let row0 = b * seq;
                    for h in 0..heads {
                        let c0 = h * dh;
                        for t in 0..seq {
                            let p0 = ((b * heads + h) * seq + t) * seq;
                            let grow = &g[(row0 + t) * dim + c0..(row0 + t) * dim + c0 + dh];
                            // dV and dP
                            for u in 0..seq {
                                let p = probs[p0 + u];
                                let vrow = (row0 + u) * dim + c0;
                                let mut dot = 0.0f64;
                                for c in 0..dh {
                                    dot += grow[c] as f64 * vv[vrow + c] as f64;
                                    dv[vrow + c] += p * grow[c];
                                }
                                dp[u] = dot as f32;
                            }
                            // softmax jvp
                            let dot = dot64(&dp, &probs[p0..p0 + seq]);
                            for u in 0..seq {
                                ds[u] = probs[p0 + u] * (dp[u] - dot);
                            }
                            // dQ, dK
                            let qrow = (row0 + t) * dim + c0;
                            for u in 0..seq {
                                let s = ds[u] * inv;
                                if s == 0.0 {
                                    continue;
                                }
                                let krow = (row0 + u) * dim + c0;
                                for c in 0..dh {
                                    dq[qrow + c] += s * kv[krow + c];
                                    dk[krow + c] += s * qv[qrow + c];
                                }
                            }
                        }
                    }
                }
                self.acc(q, &dq);
                self.acc(k, &dk);
                self.acc(v, &dv);
            }
        }
    }

    // ── memory introspection ─────────────────────────────────────────

    fn note_transient(&mut self, bytes: usize) {
        self.transient_bytes = self.transient_bytes.max(bytes);
    }

    /// Bytes of tape-owned forward buffers (leaf data is shared with the
    /// owning tensors and not counted) plus op-held buffers.
    pub fn forward_bytes(&self) -> usize {
        let node_bytes: usize = self
            .nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .map(|n| n.data.len() * 4)
            .sum();
        node_bytes + self.aux_bytes
    }

    /// Bytes of gradient buffers currently held by the tape.
    pub fn grad_bytes(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| n.grad.as_ref().map_or(0, |g| g.len() * 4))
            .sum()
    }

    /// High-water mark of transient dequantized weight buffers.
    pub fn transient_bytes(&self) -> usize {
        self.transient_bytes
    }
}

// ── kernels ──────────────────────────────────────────────────────────

// Inner reductions accumulate in f64 and round once at the end: the same
// float cost class, but forward noise stays near one f32 ulp, which the
// finite-difference oracles rely on.

/// c[m,n] = a[m,k] @ b[k,n]
fn mm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let aip = aip as f64;
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in acc.iter_mut().zip(brow) {
                *cv += aip * bv as f64;
            }
        }
        for (cv, &av) in c[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *cv = av as f32;
        }
    }
    c
}

/// c[m,n] = a[m,k] @ b[n,k]^T  (rows of both operands are contiguous)
fn mm_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = dot64(arow, brow);
        }
    }
    c
}

/// out[p,k] += a[m,p]^T @ b[m,k]
fn mm_at_acc(out: &mut [f32], a: &[f32], b: &[f32], m: usize, p: usize, k: usize) {
    let mut acc: Vec<f64> = out.iter().map(|&v| v as f64).collect();
    for i in 0..m {
        let brow = &b[i * k..(i + 1) * k];
        for j in 0..p {
            let aij = a[i * p + j];
            if aij == 0.0 {
                continue;
            }
            let aij = aij as f64;
            let orow = &mut acc[j * k..(j + 1) * k];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov += aij * bv as f64;
            }
        }
    }
    for (ov, &av) in out.iter_mut().zip(&acc) {
        *ov = av as f32;
    }
}

fn dot64(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum::<f64>() as f32
}

fn row_stats(row: &[f32]) -> (f32, f32) {
    let d = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d;
    let var = row
        .iter()
        .map(|&v| {
            let c = v as f64 - mean;
            c * c
        })
        .sum::<f64>()
        / d;
    (mean as f32, var as f32)
}

fn softmax_into(row: &[f32], out: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - max).exp();
        *o = e;
        sum += e as f64;
    }
    let inv = (1.0 / sum) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

fn gelu_fwd(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
