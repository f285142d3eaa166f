//! Minimal reverse-mode automatic differentiation over 2-D matrices.
//!
//! The model builds its forward pass eagerly on a [`Tape`]; calling
//! [`Tape::backward`] on a scalar node fills gradients for every node,
//! including parameter leaves. Everything is `f64`, single-threaded, and
//! allocation-simple: each node owns its value and gradient buffers.
//!
//! The op set is exactly what the summarizer needs: matrix product,
//! elementwise add/multiply, tanh/relu, column concatenation, row-wise
//! layer normalization, row gather (embedding lookup), row resize/zeroing
//! (sequence alignment and masking), multi-head scaled dot-product
//! attention, and a summed token cross-entropy.

#![allow(clippy::needless_range_loop)] // indexed loops mirror the math

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor { rows: r, cols: c, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Target id marking a position that contributes no loss (padding).
pub const IGNORE_TARGET: u32 = u32::MAX;

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    Tanh {
        a: NodeId,
    },
    Relu {
        a: NodeId,
    },
    ConcatCols {
        a: NodeId,
        b: NodeId,
    },
    LayerNorm {
        a: NodeId,
        inv_std: Vec<f64>,
    },
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    ResizeRows {
        a: NodeId,
    },
    ZeroRows {
        a: NodeId,
        keep: Vec<bool>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        num_heads: usize,
        // Saved softmax weights, laid out [head][query][key]. Masked and
        // causally-hidden entries are exactly zero, so backward needs no
        // separate mask.
        weights: Vec<f64>,
    },
    SumCrossEntropy {
        logits: NodeId,
        targets: Vec<u32>,
        // Saved softmax probabilities for rows with a real target.
        probs: Vec<f64>,
    },
    AddScalars {
        terms: Vec<NodeId>,
    },
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

/// Growable computation graph. Values are computed eagerly as ops are
/// pushed; gradients are filled by [`Tape::backward`].
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let grad = vec![0.0; value.data.len()];
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// C = A B with A (m x k), B (k x n).
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.cols, bv.rows, "matmul inner dimensions");
        let (m, k, n) = (av.rows, av.cols, bv.cols);
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            for p in 0..k {
                let aip = av.data[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv.data[p * n..(p + 1) * n];
                let orow = &mut out.data[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        self.push(out, Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "add shapes");
        let mut out = av.clone();
        for (o, x) in out.data.iter_mut().zip(&bv.data) {
            *o += x;
        }
        self.push(out, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!((av.rows, av.cols), (bv.rows, bv.cols), "mul shapes");
        let mut out = av.clone();
        for (o, x) in out.data.iter_mut().zip(&bv.data) {
            *o *= x;
        }
        self.push(out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.nodes[a.0].value.clone();
        for o in &mut out.data {
            *o *= c;
        }
        self.push(out, Op::Scale { a, c })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut out = self.nodes[a.0].value.clone();
        for o in &mut out.data {
            *o = o.tanh();
        }
        self.push(out, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.nodes[a.0].value.clone();
        for o in &mut out.data {
            *o = o.max(0.0);
        }
        self.push(out, Op::Relu { a })
    }

    /// [A ; B] along the column axis: (m x ca), (m x cb) -> (m x ca+cb).
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.rows, bv.rows, "concat_cols row counts");
        let (m, ca, cb) = (av.rows, av.cols, bv.cols);
        let mut out = Tensor::zeros(m, ca + cb);
        for i in 0..m {
            out.data[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(av.row(i));
            out.data[i * (ca + cb) + ca..(i + 1) * (ca + cb)].copy_from_slice(bv.row(i));
        }
        self.push(out, Op::ConcatCols { a, b })
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let (m, n) = (av.rows, av.cols);
        let mut out = Tensor::zeros(m, n);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = av.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..n {
                out.data[i * n + j] = (row[j] - mean) * is;
            }
        }
        self.push(out, Op::LayerNorm { a, inv_std })
    }

    /// Gathers rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tv = &self.nodes[table.0].value;
        let n = tv.cols;
        let mut out = Tensor::zeros(ids.len(), n);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < tv.rows, "row id {id} out of table range {}", tv.rows);
            out.data[i * n..(i + 1) * n].copy_from_slice(tv.row(id));
        }
        self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Truncates or zero-pads to exactly `new_rows` rows.
    pub fn resize_rows(&mut self, a: NodeId, new_rows: usize) -> NodeId {
        let av = &self.nodes[a.0].value;
        let n = av.cols;
        let mut out = Tensor::zeros(new_rows, n);
        let keep = av.rows.min(new_rows);
        out.data[..keep * n].copy_from_slice(&av.data[..keep * n]);
        self.push(out, Op::ResizeRows { a })
    }

    /// Zeroes every row whose `keep` flag is false.
    pub fn zero_rows(&mut self, a: NodeId, keep: &[bool]) -> NodeId {
        let av = &self.nodes[a.0].value;
        assert_eq!(av.rows, keep.len(), "mask length");
        let n = av.cols;
        let mut out = av.clone();
        for (i, &k) in keep.iter().enumerate() {
            if !k {
                out.data[i * n..(i + 1) * n].fill(0.0);
            }
        }
        self.push(
            out,
            Op::ZeroRows {
                a,
                keep: keep.to_vec(),
            },
        )
    }

    /// Multi-head scaled dot-product attention. `q` is (Lq x d), `k` and
    /// `v` are (Lk x d); `key_mask[j] == false` removes key j from every
    /// query's softmax; `causal` additionally removes keys j > i. A query
    /// with no visible key outputs a zero row.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        num_heads: usize,
        key_mask: &[bool],
        causal: bool,
    ) -> NodeId {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let d = qv.cols;
        assert_eq!(kv.cols, d, "key width");
        assert_eq!(vv.cols, d, "value width");
        assert_eq!(kv.rows, vv.rows, "key/value lengths");
        assert_eq!(key_mask.len(), kv.rows, "key mask length");
        assert!(d % num_heads == 0, "head count divides width");
        let (lq, lk) = (qv.rows, kv.rows);
        let hd = d / num_heads;
        let scale = 1.0 / (hd as f64).sqrt();

        let mut out = Tensor::zeros(lq, d);
        let mut weights = vec![0.0f64; num_heads * lq * lk];
        for h in 0..num_heads {
            let off = h * hd;
            for i in 0..lq {
                let qrow = &qv.data[i * d + off..i * d + off + hd];
                let mut scores = vec![f64::NEG_INFINITY; lk];
                let mut any = false;
                for j in 0..lk {
                    if !key_mask[j] || (causal && j > i) {
                        continue;
                    }
                    let krow = &kv.data[j * d + off..j * d + off + hd];
                    scores[j] = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    any = true;
                }
                if !any {
                    continue;
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for s in &mut scores {
                    if s.is_finite() {
                        *s = (*s - max).exp();
                        denom += *s;
                    } else {
                        *s = 0.0;
                    }
                }
                let wrow = &mut weights[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                for j in 0..lk {
                    wrow[j] = scores[j] / denom;
                }
                for j in 0..lk {
                    let w = wrow[j];
                    if w == 0.0 {
                        continue;
                    }
                    let vrow = &vv.data[j * d + off..j * d + off + hd];
                    let orow = &mut out.data[i * d + off..i * d + off + hd];
                    for t in 0..hd {
                        orow[t] += w * vrow[t];
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                num_heads,
                weights,
            },
        )
    }

    /// Scalar node holding the sum over rows of `-log softmax(logits)[target]`,
    /// skipping rows whose target is [`IGNORE_TARGET`].
    pub fn sum_cross_entropy(&mut self, logits: NodeId, targets: &[u32]) -> NodeId {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.rows, targets.len(), "one target per row");
        let vsize = lv.cols;
        let mut probs = vec![0.0f64; lv.rows * vsize];
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t == IGNORE_TARGET {
                continue;
            }
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &x in row {
                denom += (x - max).exp();
            }
            let log_denom = denom.ln() + max;
            for (j, &x) in row.iter().enumerate() {
                probs[i * vsize + j] = (x - log_denom).exp();
            }
            total += log_denom - row[t as usize];
        }
        self.push(
            Tensor::scalar(total),
            Op::SumCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Sum of scalar (1x1) nodes.
    pub fn add_scalars(&mut self, terms: &[NodeId]) -> NodeId {
        let mut total = 0.0;
        for &t in terms {
            let v = &self.nodes[t.0].value;
            assert_eq!((v.rows, v.cols), (1, 1), "add_scalars takes scalars");
            total += v.data[0];
        }
        self.push(
            Tensor::scalar(total),
            Op::AddScalars {
                terms: terms.to_vec(),
            },
        )
    }

    /// Reverse pass from a scalar node. Gradients accumulate; call once per
    /// tape.
    pub fn backward(&mut self, loss: NodeId) {
        {
            let n = &mut self.nodes[loss.0];
            assert_eq!((n.value.rows, n.value.cols), (1, 1), "loss must be scalar");
            n.grad[0] = 1.0;
        }
        for id in (0..=loss.0).rev() {
            // Split borrows: take the grad out, push into parents, restore.
            let grad = std::mem::take(&mut self.nodes[id].grad);
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, kdim, n) = {
                        let av = &self.nodes[a.0].value;
                        let bv = &self.nodes[b.0].value;
                        (av.rows, av.cols, bv.cols)
                    };
                    // dA = dC B^T
                    let mut da = vec![0.0; m * kdim];
                    {
                        let bv = &self.nodes[b.0].value;
                        for i in 0..m {
                            for j in 0..n {
                                let g = grad[i * n + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for p in 0..kdim {
                                    da[i * kdim + p] += g * bv.data[p * n + j];
                                }
                            }
                        }
                    }
                    // dB = A^T dC
                    let mut db = vec![0.0; kdim * n];
                    {
                        let av = &self.nodes[a.0].value;
                        for i in 0..m {
                            for p in 0..kdim {
                                let x = av.data[i * kdim + p];
                                if x == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] += x * grad[i * n + j];
                                }
                            }
                        }
                    }
                    for (g, d) in self.nodes[a.0].grad.iter_mut().zip(da) {
                        *g += d;
                    }
                    for (g, d) in self.nodes[b.0].grad.iter_mut().zip(db) {
                        *g += d;
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    for (g, d) in self.nodes[a.0].grad.iter_mut().zip(&grad) {
                        *g += d;
                    }
                    for (g, d) in self.nodes[b.0].grad.iter_mut().zip(&grad) {
                        *g += d;
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let bv = self.nodes[b.0].value.data.clone();
                    let av = self.nodes[a.0].value.data.clone();
                    for ((g, d), x) in self.nodes[a.0].grad.iter_mut().zip(&grad).zip(&bv) {
                        *g += d * x;
                    }
                    for ((g, d), x) in self.nodes[b.0].grad.iter_mut().zip(&grad).zip(&av) {
                        *g += d * x;
                    }
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    for (g, d) in self.nodes[a.0].grad.iter_mut().zip(&grad) {
                        *g += d * c;
                    }
                }
                Op::Tanh { a } => {
                    let a = *a;
                    let yv = self.nodes[id].value.data.clone();
                    for ((g, d), y) in self.nodes[a.0].grad.iter_mut().zip(&grad).zip(&yv) {
                        *g += d * (1.0 - y * y);
                    }
                }
                Op::Relu { a } => {
                    let a = *a;
                    let yv = self.nodes[id].value.data.clone();
                    for ((g, d), y) in self.nodes[a.0].grad.iter_mut().zip(&grad).zip(&yv) {
                        if *y > 0.0 {
                            *g += d;
                        }
                    }
                }
                Op::ConcatCols { a, b } => {
                    let (a, b) = (*a, *b);
                    let ca = self.nodes[a.0].value.cols;
                    let cb = self.nodes[b.0].value.cols;
                    let m = self.nodes[a.0].value.rows;
                    for i in 0..m {
                        for j in 0..ca {
                            self.nodes[a.0].grad[i * ca + j] += grad[i * (ca + cb) + j];
                        }
                        for j in 0..cb {
                            self.nodes[b.0].grad[i * cb + j] += grad[i * (ca + cb) + ca + j];
                        }
                    }
                }
                Op::LayerNorm { a, inv_std } => {
                    let a = *a;
                    let inv_std = inv_std.clone();
                    let yv = self.nodes[id].value.clone();
                    let (m, n) = (yv.rows, yv.cols);
                    for i in 0..m {
                        let dy = &grad[i * n..(i + 1) * n];
                        let y = yv.row(i);
                        let mean_dy = dy.iter().sum::<f64>() / n as f64;
                        let mean_dyy = dy.iter().zip(y).map(|(d, yy)| d * yy).sum::<f64>() / n as f64;
                        let is = inv_std[i];
                        for j in 0..n {
                            self.nodes[a.0].grad[i * n + j] +=
                                is * (dy[j] - mean_dy - y[j] * mean_dyy);
                        }
                    }
                }
                Op::GatherRows { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let n = self.nodes[table.0].value.cols;
                    for (i, id_row) in ids.iter().enumerate() {
                        for j in 0..n {
                            self.nodes[table.0].grad[id_row * n + j] += grad[i * n + j];
                        }
                    }
                }
                Op::ResizeRows { a } => {
                    let a = *a;
                    let src_rows = self.nodes[a.0].value.rows;
                    let n = self.nodes[a.0].value.cols;
                    let new_rows = self.nodes[id].value.rows;
                    let keep = src_rows.min(new_rows);
                    for i in 0..keep {
                        for j in 0..n {
                            self.nodes[a.0].grad[i * n + j] += grad[i * n + j];
                        }
                    }
                }
                Op::ZeroRows { a, keep } => {
                    let a = *a;
                    let keep = keep.clone();
                    let n = self.nodes[a.0].value.cols;
                    for (i, &kf) in keep.iter().enumerate() {
                        if kf {
                            for j in 0..n {
                                self.nodes[a.0].grad[i * n + j] += grad[i * n + j];
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    num_heads,
                    weights,
                    ..
                } => {
                    let (q, k, v, num_heads) = (*q, *k, *v, *num_heads);
                    let weights = weights.clone();
                    let d = self.nodes[q.0].value.cols;
                    let lq = self.nodes[q.0].value.rows;
                    let lk = self.nodes[k.0].value.rows;
                    let hd = d / num_heads;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let qv = self.nodes[q.0].value.data.clone();
                    let kv = self.nodes[k.0].value.data.clone();
                    let vv = self.nodes[v.0].value.data.clone();
                    let mut dq = vec![0.0; lq * d];
                    let mut dk = vec![0.0; lk * d];
                    let mut dv = vec![0.0; lk * d];
                    for h in 0..num_heads {
                        let off = h * hd;
                        for i in 0..lq {
                            let w = &weights[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                            let dout = &grad[i * d + off..i * d + off + hd];
                            // dW_ij = <dOut_i, V_j>, dV_j += w_ij dOut_i
                            let mut dw = vec![0.0; lk];
                            for j in 0..lk {
                                if w[j] == 0.0 {
                                    continue;
                                }
                                let vrow = &vv[j * d + off..j * d + off + hd];
                                let mut dot = 0.0;
                                for t in 0..hd {
                                    dot += dout[t] * vrow[t];
                                    dv[j * d + off + t] += w[j] * dout[t];
                                }
                                dw[j] = dot;
                            }
                            // Softmax backward.
                            let inner: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
                            for j in 0..lk {
                                if w[j] == 0.0 {
                                    continue;
                                }
                                let ds = w[j] * (dw[j] - inner) * scale;
                                let krow = &kv[j * d + off..j * d + off + hd];
                                let qrow = &qv[i * d + off..i * d + off + hd];
                                for t in 0..hd {
                                    dq[i * d + off + t] += ds * krow[t];
                                    dk[j * d + off + t] += ds * qrow[t];
                                }
                            }
                        }
                    }
                    for (g, dd) in self.nodes[q.0].grad.iter_mut().zip(dq) {
                        *g += dd;
                    }
                    for (g, dd) in self.nodes[k.0].grad.iter_mut().zip(dk) {
                        *g += dd;
                    }
                    for (g, dd) in self.nodes[v.0].grad.iter_mut().zip(dv) {
                        *g += dd;
                    }
                }
                Op::SumCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let probs = probs.clone();
                    let g = grad[0];
                    let vsize = self.nodes[logits.0].value.cols;
                    for (i, &t) in targets.iter().enumerate() {
                        if t == IGNORE_TARGET {
                            continue;
                        }
                        for j in 0..vsize {
                            let indicator = if j == t as usize { 1.0 } else { 0.0 };
                            self.nodes[logits.0].grad[i * vsize + j] +=
                                g * (probs[i * vsize + j] - indicator);
                        }
                    }
                }
                Op::AddScalars { terms } => {
                    let terms = terms.clone();
                    for t in terms {
                        self.nodes[t.0].grad[0] += grad[0];
                    }
                }
            }
            self.nodes[id].grad = grad;
        }
    }
}

/// Row-wise log-softmax of a plain matrix (inference helper; no gradient).
pub fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for i in 0..logits.rows {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let log_denom = denom.ln() + max;
        for j in 0..logits.cols {
            out.set(i, j, row[j] - log_denom);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_tensor(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.next_gaussian() * 0.5).collect();
        Tensor { rows, cols, data }
    }

    /// Central finite difference of `f` at coordinate `idx` of `x`.
    fn finite_diff(f: &dyn Fn(&Tensor) -> f64, x: &Tensor, idx: usize, h: f64) -> f64 {
        let mut plus = x.clone();
        plus.data[idx] += h;
        let mut minus = x.clone();
        minus.data[idx] -= h;
        (f(&plus) - f(&minus)) / (2.0 * h)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    /// Checks analytic gradients of a scalar-valued graph against central
    /// differences for every coordinate of one leaf tensor.
    fn check_leaf(
        build: &dyn Fn(&mut Tape, NodeId) -> NodeId,
        x: &Tensor,
        tol: f64,
    ) {
        let eval = |xt: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let leaf = tape.leaf(xt.clone());
            let loss = build(&mut tape, leaf);
            tape.value(loss).data[0]
        };
        let mut tape = Tape::new();
        let leaf = tape.leaf(x.clone());
        let loss = build(&mut tape, leaf);
        tape.backward(loss);
        let analytic = tape.grad(leaf).to_vec();
        for idx in 0..x.data.len() {
            let fd = finite_diff(&eval, x, idx, 1e-5);
            assert!(
                rel_err(analytic[idx], fd) < tol,
                "coordinate {idx}: analytic {} vs fd {}",
                analytic[idx],
                fd
            );
        }
    }

    #[test]
    fn matmul_tanh_gradients_match_fd() {
        let mut rng = Rng::new(1);
        let x = random_tensor(&mut rng, 3, 4);
        let w = random_tensor(&mut rng, 4, 2);
        check_leaf(
            &move |tape, leaf| {
                let wn = tape.leaf(w.clone());
                let y = tape.matmul(leaf, wn);
                let t = tape.tanh(y);
                let sq = tape.mul(t, t);
                // Reduce to scalar by summing via matmul with ones.
                let ones_r = tape.leaf(Tensor::from_rows(vec![vec![1.0; 3]]));
                let ones_c = tape.leaf(Tensor::from_rows((0..2).map(|_| vec![1.0]).collect()));
                let rowsum = tape.matmul(ones_r, sq);
                tape.matmul(rowsum, ones_c)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn layer_norm_gradients_match_fd() {
        let mut rng = Rng::new(2);
        let x = random_tensor(&mut rng, 3, 5);
        let w = random_tensor(&mut rng, 5, 1);
        check_leaf(
            &move |tape, leaf| {
                let ln = tape.layer_norm(leaf);
                let wn = tape.leaf(w.clone());
                let proj = tape.matmul(ln, wn);
                let sq = tape.mul(proj, proj);
                let ones = tape.leaf(Tensor::from_rows(vec![vec![1.0; 3]]));
                tape.matmul(ones, sq)
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn attention_gradients_match_fd() {
        let mut rng = Rng::new(3);
        let kv = random_tensor(&mut rng, 4, 6);
        let vv = random_tensor(&mut rng, 4, 6);
        let x = random_tensor(&mut rng, 3, 6);
        let key_mask = vec![true, true, false, true];
        check_leaf(
            &move |tape, leaf| {
                let k = tape.leaf(kv.clone());
                let v = tape.leaf(vv.clone());
                let att = tape.attention(leaf, k, v, 2, &key_mask, false);
                let sq = tape.mul(att, att);
                let ones_r = tape.leaf(Tensor::from_rows(vec![vec![1.0; 3]]));
                let ones_c = tape.leaf(Tensor::from_rows((0..6).map(|_| vec![1.0]).collect()));
                let rowsum = tape.matmul(ones_r, sq);
                tape.matmul(rowsum, ones_c)
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn attention_key_and_value_gradients_match_fd() {
        let mut rng = Rng::new(4);
        let qv = random_tensor(&mut rng, 2, 4);
        let x = random_tensor(&mut rng, 3, 4);
        let key_mask = vec![true; 3];
        check_leaf(
            &move |tape, leaf| {
                let q = tape.leaf(qv.clone());
                let att = tape.attention(q, leaf, leaf, 2, &key_mask, false);
                let sq = tape.mul(att, att);
                let ones_r = tape.leaf(Tensor::from_rows(vec![vec![1.0; 2]]));
                let ones_c = tape.leaf(Tensor::from_rows((0..4).map(|_| vec![1.0]).collect()));
                let rowsum = tape.matmul(ones_r, sq);
                tape.matmul(rowsum, ones_c)
            },
            &x,
            1e-5,
        );
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let mut rng = Rng::new(5);
        let q = random_tensor(&mut rng, 3, 4);
        let k = random_tensor(&mut rng, 3, 4);
        let mut v = random_tensor(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let (qn, kn, vn) = (
            tape.leaf(q.clone()),
            tape.leaf(k.clone()),
            tape.leaf(v.clone()),
        );
        let out1 = tape.attention(qn, kn, vn, 1, &[true; 3], true).0;
        let row0: Vec<f64> = tape.nodes[out1].value.row(0).to_vec();
        // Changing the last value row cannot affect the first query output.
        v.data[2 * 4] += 100.0;
        let mut tape2 = Tape::new();
        let (qn, kn, vn) = (tape2.leaf(q), tape2.leaf(k), tape2.leaf(v));
        let out2 = tape2.attention(qn, kn, vn, 1, &[true; 3], true).0;
        assert_eq!(row0, tape2.nodes[out2].value.row(0).to_vec());
    }

    #[test]
    fn cross_entropy_gradients_match_fd() {
        let mut rng = Rng::new(6);
        let x = random_tensor(&mut rng, 4, 5);
        let targets = vec![1u32, 4, IGNORE_TARGET, 0];
        check_leaf(
            &move |tape, leaf| tape.sum_cross_entropy(leaf, &targets),
            &x,
            1e-6,
        );
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_v() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(3, 7));
        let loss = tape.sum_cross_entropy(logits, &[0, 1, 2]);
        let got = tape.value(loss).data[0] / 3.0;
        assert!((got - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn concat_and_gather_gradients_match_fd() {
        let mut rng = Rng::new(7);
        let x = random_tensor(&mut rng, 3, 4);
        let other = random_tensor(&mut rng, 2, 4);
        check_leaf(
            &move |tape, leaf| {
                let rows = tape.gather_rows(leaf, &[0, 2, 1, 2]);
                let o = tape.leaf(other.clone());
                let resized = tape.resize_rows(o, 4);
                let cat = tape.concat_cols(rows, resized);
                let masked = tape.zero_rows(cat, &[true, true, false, true]);
                let sq = tape.mul(masked, masked);
                let ones_r = tape.leaf(Tensor::from_rows(vec![vec![1.0; 4]]));
                let ones_c = tape.leaf(Tensor::from_rows((0..8).map(|_| vec![1.0]).collect()));
                let rowsum = tape.matmul(ones_r, sq);
                tape.matmul(rowsum, ones_c)
            },
            &x,
            1e-6,
        );
    }

    #[test]
    fn log_softmax_rows_sum_to_one_in_probability() {
        let mut rng = Rng::new(8);
        let x = random_tensor(&mut rng, 3, 6);
        let ls = log_softmax_rows(&x);
        for i in 0..3 {
            let total: f64 = ls.row(i).iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
