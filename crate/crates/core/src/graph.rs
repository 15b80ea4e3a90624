//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Define-by-run: every op evaluates eagerly and records itself in a
//! [`Graph`]; `backward` replays the tape in reverse construction order,
//! which is already a valid topological order. The op set is the minimum a
//! small decoder-only transformer needs: matmul, adds, scaling, row softmax,
//! RMS normalization, embedding lookup, rotary rotation, column
//! slice/concat, gelu, and cross-entropy with logits.
//!
//! Reductions that run over sequence positions (softmax denominators, the
//! attention-weighted value sum, cross-entropy totals) optionally group the
//! positions of one pair step before accumulating. Addition of two f64
//! values is commutative, so exchanging the two channel blocks of a step
//! cannot change a grouped rounding; this is what makes a channel swap of an
//! interleaved sequence reproduce the forward pass bit for bit.

use crate::tensor::{Tensor, TensorError};

pub const GELU_TANH_COEFF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub(crate) const RMS_EPS: f64 = 1e-12;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Reduction {
    Mean,
    Sum,
}

enum Op {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    /// `a @ b^T`; right operand is stored row-major and read as its transpose.
    MatmulNt {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// Adds a length-`n` vector to every row of an `[m, n]` tensor.
    BroadcastAdd {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    SoftmaxRows {
        a: NodeId,
        pair_group: Option<usize>,
    },
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        inv_rms: Vec<f64>,
    },
    Embed {
        table: NodeId,
        ids: Vec<usize>,
    },
    /// Per-head rotary rotation; `angles` is `[rows, head_dim/2]` flattened
    /// and shared across heads within a row.
    Rope {
        x: NodeId,
        n_heads: usize,
        angles: Vec<f64>,
    },
    SliceCols {
        a: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    Gelu {
        a: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        reduction: Reduction,
    },
    SumAll {
        a: NodeId,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Left-to-right sum of `f(0..n)` where adjacent `group`-sized blocks are
/// paired: each pair reduces to `block + block` before joining the running
/// total. `None` is a plain left-to-right fold. Any tail shorter than a full
/// pair is folded in sequentially.
fn pair_grouped_sum(n: usize, group: Option<usize>, f: &mut dyn FnMut(usize) -> f64) -> f64 {
    let g = match group {
        Some(g) if g > 0 => g,
        _ => {
            let mut acc = 0.0;
            for i in 0..n {
                acc += f(i);
            }
            return acc;
        }
    };
    let chunk = 2 * g;
    let mut total = 0.0;
    let mut i = 0;
    while i + chunk <= n {
        let mut s0 = 0.0;
        for k in i..i + g {
            s0 += f(k);
        }
        let mut s1 = 0.0;
        for k in i + g..i + chunk {
            s1 += f(k);
        }
        total += s0 + s1;
        i += chunk;
    }
    while i < n {
        total += f(i);
        i += 1;
    }
    total
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients flow into it.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf (inputs, masks, fixed bases).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn mat(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), TensorError> {
        let t = &self.nodes[id.0].value;
        if t.shape().len() != 2 {
            return Err(TensorError::RankMismatch {
                op,
                need: "rank-2 tensor",
                got: t.shape().to_vec(),
            });
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    // ── Op constructors ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul_impl(a, b, None)
    }

    /// Matmul whose inner reduction axis is grouped by pair step. Used for
    /// the attention-weighted value sum, where the inner axis ranges over
    /// sequence positions.
    pub fn matmul_pair_grouped(
        &mut self,
        a: NodeId,
        b: NodeId,
        group: usize,
    ) -> Result<NodeId, TensorError> {
        self.matmul_impl(a, b, Some(group))
    }

    fn matmul_impl(
        &mut self,
        a: NodeId,
        b: NodeId,
        pair_group: Option<usize>,
    ) -> Result<NodeId, TensorError> {
        let (m, ka) = self.mat(a, "matmul")?;
        let (kb, n) = self.mat(b, "matmul")?;
        if ka != kb {
            return Err(TensorError::IncompatibleShapes {
                op: "matmul",
                lhs: vec![m, ka],
                rhs: vec![kb, n],
            });
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; m * n];
        match pair_group {
            None => {
                for i in 0..m {
                    for k in 0..ka {
                        let x = av[i * ka + k];
                        let brow = &bv[k * n..(k + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += x * brow[j];
                        }
                    }
                }
            }
            Some(_) => {
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = pair_grouped_sum(ka, pair_group, &mut |k| {
                            av[i * ka + k] * bv[k * n + j]
                        });
                    }
                }
            }
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::Matmul { a, b },
            rg,
        ))
    }

    /// `a @ b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, ka) = self.mat(a, "matmul_nt")?;
        let (n, kb) = self.mat(b, "matmul_nt")?;
        if ka != kb {
            return Err(TensorError::IncompatibleShapes {
                op: "matmul_nt",
                lhs: vec![m, ka],
                rhs: vec![n, kb],
            });
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * ka..(i + 1) * ka];
            for j in 0..n {
                let brow = &bv[j * ka..(j + 1) * ka];
                let mut s = 0.0;
                for c in 0..ka {
                    s += arow[c] * brow[c];
                }
                out[i * n + j] = s;
            }
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatmulNt { a, b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (sa, sb) = (
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[b.0].value.shape().to_vec(),
        );
        if sa != sb {
            return Err(TensorError::IncompatibleShapes {
                op: "add",
                lhs: sa,
                rhs: sb,
            });
        }
        let out: Vec<f64> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::new(sa, out)?, Op::Add { a, b }, rg))
    }

    pub fn broadcast_add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.mat(a, "broadcast_add")?;
        let bt = &self.nodes[b.0].value;
        if bt.shape() != [n] {
            return Err(TensorError::IncompatibleShapes {
                op: "broadcast_add",
                lhs: vec![m, n],
                rhs: bt.shape().to_vec(),
            });
        }
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = av[i * n + j] + bv[j];
            }
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::BroadcastAdd { a, b }, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let t = &self.nodes[a.0].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * c).collect())
            .expect("scale preserves shape");
        let rg = self.needs_grad(&[a]);
        self.push(out, Op::Scale { a, c }, rg)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.softmax_impl(a, None)
    }

    pub fn softmax_rows_pair_grouped(
        &mut self,
        a: NodeId,
        group: usize,
    ) -> Result<NodeId, TensorError> {
        self.softmax_impl(a, Some(group))
    }

    fn softmax_impl(&mut self, a: NodeId, pair_group: Option<usize>) -> Result<NodeId, TensorError> {
        let (m, n) = self.mat(a, "softmax_rows")?;
        let av = self.nodes[a.0].value.data();
        if av.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &av[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = (row[j] - mx).exp();
            }
            let denom = pair_grouped_sum(n, pair_group, &mut |j| orow[j]);
            for v in orow.iter_mut() {
                *v /= denom;
            }
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::SoftmaxRows { a, pair_group },
            rg,
        ))
    }

    /// RMS normalization of each row of `x`, scaled elementwise by `gain`.
    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.mat(x, "rms_norm")?;
        let gt = &self.nodes[gain.0].value;
        if gt.shape() != [n] {
            return Err(TensorError::IncompatibleShapes {
                op: "rms_norm",
                lhs: vec![m, n],
                rhs: gt.shape().to_vec(),
            });
        }
        let xv = self.nodes[x.0].value.data();
        let gv = self.nodes[gain.0].value.data();
        let mut out = vec![0.0; m * n];
        let mut inv_rms = vec![0.0; m];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let inv = 1.0 / (ms + RMS_EPS).sqrt();
            inv_rms[i] = inv;
            for j in 0..n {
                out[i * n + j] = row[j] * inv * gv[j];
            }
        }
        let rg = self.needs_grad(&[x, gain]);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::RmsNorm { x, gain, inv_rms },
            rg,
        ))
    }

    /// Gathers `table` rows by id: `out[i] = table[ids[i]]`.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let (rows, d) = self.mat(table, "embed")?;
        for &id in ids {
            if id >= rows {
                return Err(TensorError::IndexOutOfBounds {
                    op: "embed",
                    index: id,
                    len: rows,
                });
            }
        }
        let tv = self.nodes[table.0].value.data();
        let mut out = vec![0.0; ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            out[i * d..(i + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.needs_grad(&[table]);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out)?,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Rotates adjacent column pairs of every head by per-row angles.
    /// `angles` must be `[rows, head_dim/2]`; all heads of a row share them.
    pub fn rope(&mut self, x: NodeId, n_heads: usize, angles: &Tensor) -> Result<NodeId, TensorError> {
        let (m, d) = self.mat(x, "rope")?;
        if n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0 {
            return Err(TensorError::RankMismatch {
                op: "rope",
                need: "columns divisible into heads of even width",
                got: vec![m, d],
            });
        }
        let hd = d / n_heads;
        let half = hd / 2;
        if angles.shape() != [m, half] {
            return Err(TensorError::IncompatibleShapes {
                op: "rope",
                lhs: vec![m, half],
                rhs: angles.shape().to_vec(),
            });
        }
        let xv = self.nodes[x.0].value.data();
        let av = angles.data();
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            for h in 0..n_heads {
                for j in 0..half {
                    let th = av[i * half + j];
                    let (sin, cos) = th.sin_cos();
                    let c0 = i * d + h * hd + 2 * j;
                    let (x0, x1) = (xv[c0], xv[c0 + 1]);
                    out[c0] = x0 * cos - x1 * sin;
                    out[c0 + 1] = x0 * sin + x1 * cos;
                }
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Tensor::matrix(m, d, out)?,
            Op::Rope {
                x,
                n_heads,
                angles: av.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (m, n) = self.mat(a, "slice_cols")?;
        if start + len > n {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice_cols",
                index: start + len,
                len: n,
            });
        }
        let av = self.nodes[a.0].value.data();
        let mut out = vec![0.0; m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len].copy_from_slice(&av[i * n + start..i * n + start + len]);
        }
        let rg = self.needs_grad(&[a]);
        Ok(self.push(
            Tensor::matrix(m, len, out)?,
            Op::SliceCols { a, start, len },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        assert!(!parts.is_empty(), "concat_cols of zero parts");
        let (m, _) = self.mat(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (mp, np) = self.mat(p, "concat_cols")?;
            if mp != m {
                return Err(TensorError::IncompatibleShapes {
                    op: "concat_cols",
                    lhs: vec![m, 0],
                    rhs: vec![mp, np],
                });
            }
            widths.push(np);
            total += np;
        }
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let np = widths[idx];
            let pv = self.nodes[p.0].value.data();
            for i in 0..m {
                out[i * total + off..i * total + off + np]
                    .copy_from_slice(&pv[i * np..(i + 1) * np]);
            }
            off += np;
        }
        let rg = self.needs_grad(parts);
        Ok(self.push(
            Tensor::matrix(m, total, out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let t = &self.nodes[a.0].value;
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&x| gelu_scalar(x)).collect(),
        )
        .expect("gelu preserves shape");
        let rg = self.needs_grad(&[a]);
        self.push(out, Op::Gelu { a }, rg)
    }

    /// Scalar cross-entropy of `logits` rows against optional class targets.
    /// Rows with `None` contribute nothing; at least one target is required.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[Option<usize>],
        reduction: Reduction,
        pair_group: Option<usize>,
    ) -> Result<NodeId, TensorError> {
        let (m, n) = self.mat(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(TensorError::IncompatibleShapes {
                op: "cross_entropy",
                lhs: vec![m, n],
                rhs: vec![targets.len()],
            });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::RankMismatch {
                op: "cross_entropy",
                need: "at least one target position",
                got: vec![m],
            });
        }
        for t in targets.iter().flatten() {
            if *t >= n {
                return Err(TensorError::IndexOutOfBounds {
                    op: "cross_entropy",
                    index: *t,
                    len: n,
                });
            }
        }
        let lv = self.nodes[logits.0].value.data();
        if lv.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let total = pair_grouped_sum(m, pair_group, &mut |i| match targets[i] {
            None => 0.0,
            Some(t) => row_nll(&lv[i * n..(i + 1) * n], t),
        });
        let value = match reduction {
            Reduction::Mean => total / count as f64,
            Reduction::Sum => total,
        };
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                reduction,
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.needs_grad(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll { a }, rg)
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Accumulates gradients of the scalar `root` into every upstream node
    /// with `requires_grad`. Returns the gradient table indexed like nodes.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TensorError> {
        let rt = &self.nodes[root.0].value;
        if !rt.is_scalar() {
            return Err(TensorError::RankMismatch {
                op: "backward",
                need: "scalar root",
                got: rt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if self.nodes[idx].requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.cols();
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                self.accumulate(grads, *a, |da| {
                    for i in 0..m {
                        for kk in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[kk * n + j];
                            }
                            da[i * k + kk] += s;
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for kk in 0..k {
                        for i in 0..m {
                            let x = av[i * k + kk];
                            for j in 0..n {
                                db[kk * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::MatmulNt { a, b } => {
                let (m, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let n = self.nodes[b.0].value.rows();
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                self.accumulate(grads, *a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for c in 0..k {
                                da[i * k + c] += gv * bv[j * k + c];
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for j in 0..n {
                        for i in 0..m {
                            let gv = g[i * n + j];
                            for c in 0..k {
                                db[j * k + c] += gv * av[i * k + c];
                            }
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, |da| {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
            }
            Op::BroadcastAdd { a, b } => {
                let (m, n) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                self.accumulate(grads, *a, |da| {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.accumulate(grads, *a, |da| {
                    for (d, gv) in da.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                });
            }
            Op::SoftmaxRows { a, pair_group } => {
                let y = self.nodes[idx].value.data();
                let (m, n) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let pg = *pair_group;
                self.accumulate(grads, *a, |da| {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot = pair_grouped_sum(n, pg, &mut |j| gr[j] * yr[j]);
                        for j in 0..n {
                            da[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (m, n) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let xv = self.nodes[x.0].value.data();
                let gv = self.nodes[gain.0].value.data();
                self.accumulate(grads, *x, |dx| {
                    for i in 0..m {
                        let inv = inv_rms[i];
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * gv[j] * xv[i * n + j];
                        }
                        let corr = s * inv * inv * inv / n as f64;
                        for j in 0..n {
                            dx[i * n + j] += g[i * n + j] * gv[j] * inv - xv[i * n + j] * corr;
                        }
                    }
                });
                self.accumulate(grads, *gain, |dg| {
                    for i in 0..m {
                        let inv = inv_rms[i];
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xv[i * n + j] * inv;
                        }
                    }
                });
            }
            Op::Embed { table, ids } => {
                let d = self.nodes[table.0].value.cols();
                self.accumulate(grads, *table, |dt| {
                    for (i, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[i * d + j];
                        }
                    }
                });
            }
            Op::Rope { x, n_heads, angles } => {
                let (m, d) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                let hd = d / n_heads;
                let half = hd / 2;
                let n_heads = *n_heads;
                self.accumulate(grads, *x, |dx| {
                    for i in 0..m {
                        for h in 0..n_heads {
                            for j in 0..half {
                                let th = angles[i * half + j];
                                let (sin, cos) = th.sin_cos();
                                let c0 = i * d + h * hd + 2 * j;
                                let (g0, g1) = (g[c0], g[c0 + 1]);
                                dx[c0] += g0 * cos + g1 * sin;
                                dx[c0 + 1] += -g0 * sin + g1 * cos;
                            }
                        }
                    }
                });
            }
            Op::SliceCols { a, start, len } => {
                let (m, n) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                let (start, len) = (*start, *len);
                self.accumulate(grads, *a, |da| {
                    for i in 0..m {
                        for j in 0..len {
                            da[i * n + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total = self.nodes[idx].value.cols();
                let m = self.nodes[idx].value.rows();
                let mut off = 0;
                for &p in parts {
                    let np = self.nodes[p.0].value.cols();
                    self.accumulate(grads, p, |dp| {
                        for i in 0..m {
                            for j in 0..np {
                                dp[i * np + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += np;
                }
            }
            Op::Gelu { a } => {
                let xv = self.nodes[a.0].value.data();
                self.accumulate(grads, *a, |da| {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += g[i] * gelu_grad_scalar(xv[i]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                reduction,
            } => {
                let (m, n) = (
                    self.nodes[logits.0].value.rows(),
                    self.nodes[logits.0].value.cols(),
                );
                let lv = self.nodes[logits.0].value.data();
                let count = targets.iter().flatten().count();
                let w = match reduction {
                    Reduction::Mean => g[0] / count as f64,
                    Reduction::Sum => g[0],
                };
                self.accumulate(grads, *logits, |dl| {
                    for i in 0..m {
                        let Some(t) = targets[i] else { continue };
                        let row = &lv[i * n..(i + 1) * n];
                        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        for j in 0..n {
                            let p = (row[j] - mx).exp() / denom;
                            let ind = if j == t { 1.0 } else { 0.0 };
                            dl[i * n + j] += w * (p - ind);
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                self.accumulate(grads, *a, |da| {
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                });
            }
        }
    }
}

/// Gradient table produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `id`, if any flowed.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_TANH_COEFF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_TANH_COEFF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_TANH_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// `logsumexp(row) - row[target]`, stabilized by the row max.
fn row_nll(row: &[f64], target: usize) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
    lse - row[target]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    const FD_STEP: f64 = 1e-5;

    fn rand_vec(rng: &mut StdRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central finite difference of `f` at `x`, one coordinate at a time.
    fn numerical_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        let mut probe = x.to_vec();
        for i in 0..x.len() {
            probe[i] = x[i] + FD_STEP;
            let hi = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let lo = f(&probe);
            probe[i] = x[i];
            out[i] = (hi - lo) / (2.0 * FD_STEP);
        }
        out
    }

    fn assert_grads_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-6);
            let rel = (a - n).abs() / denom;
            assert!(
                rel < tol,
                "grad[{i}]: analytic {a} vs numeric {n} (rel err {rel:.3e})"
            );
        }
    }

    /// Builds a scalar-valued graph from a flat parameter vector and checks
    /// the analytic gradient of every returned param node against central
    /// differences. `build` returns the scalar root plus the param nodes in
    /// the order their coordinates appear in the flat vector.
    fn check_op_grad(
        dims: usize,
        build: impl Fn(&mut Graph, &[f64]) -> (NodeId, Vec<NodeId>),
        seed: u64,
    ) {
        let mut rng = StdRng::seed_from_u64(seed);
        let x = rand_vec(&mut rng, dims);
        let f = |v: &[f64]| {
            let mut g = Graph::new();
            let (root, _) = build(&mut g, v);
            g.value(root).item()
        };
        let mut g = Graph::new();
        let (root, params) = build(&mut g, &x);
        let grads = g.backward(root).unwrap();
        let mut analytic = Vec::with_capacity(dims);
        for p in params {
            analytic.extend_from_slice(grads.get(p).expect("param grad missing"));
        }
        assert_eq!(analytic.len(), dims, "param nodes must cover the flat vector");
        let numeric = numerical_grad(&f, &x);
        assert_grads_close(&analytic, &numeric, 1e-4);
    }

    // ── Per-op gradient checks against central differences ─────────

    #[test]
    fn grad_matmul_left() {
        check_op_grad(
            6,
            |g, v| {
                let a = g.param(Tensor::matrix(2, 3, v.to_vec()).unwrap());
                let b = g.constant(
                    Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.25, -0.75, 1.5]).unwrap(),
                );
                let y = g.matmul(a, b).unwrap();
                (g.sum_all(y), vec![a])
            },
            11,
        );
    }

    #[test]
    fn grad_matmul_right() {
        check_op_grad(
            6,
            |g, v| {
                let a = g.constant(
                    Tensor::matrix(2, 3, vec![1.0, -0.5, 0.25, 2.0, 0.75, -1.25]).unwrap(),
                );
                let b = g.param(Tensor::matrix(3, 2, v.to_vec()).unwrap());
                let y = g.matmul(a, b).unwrap();
                (g.sum_all(y), vec![b])
            },
            12,
        );
    }

    #[test]
    fn grad_matmul_nt() {
        check_op_grad(
            8,
            |g, v| {
                let a = g.param(Tensor::matrix(2, 4, v.to_vec()).unwrap());
                let b = g.constant(
                    Tensor::matrix(3, 4, (0..12).map(|i| 0.1 * i as f64 - 0.5).collect()).unwrap(),
                );
                let y = g.matmul_nt(a, b).unwrap();
                // Slice keeps the jacobian non-uniform across columns.
                let s = g.slice_cols(y, 1, 2).unwrap();
                (g.sum_all(s), vec![a])
            },
            13,
        );
    }

    #[test]
    fn grad_softmax_through_slice() {
        check_op_grad(
            8,
            |g, v| {
                let a = g.param(Tensor::matrix(2, 4, v.to_vec()).unwrap());
                let y = g.softmax_rows(a).unwrap();
                let s = g.slice_cols(y, 0, 2).unwrap();
                (g.sum_all(s), vec![a])
            },
            14,
        );
    }

    #[test]
    fn grad_softmax_pair_grouped_matches_plain() {
        // Grouping only reorders additions; gradients agree to tight tolerance.
        let mut rng = StdRng::seed_from_u64(15);
        let x = rand_vec(&mut rng, 12);
        let run = |grouped: bool| -> Vec<f64> {
            let mut g = Graph::new();
            let a = g.param(Tensor::matrix(2, 6, x.clone()).unwrap());
            let y = if grouped {
                g.softmax_rows_pair_grouped(a, 1).unwrap()
            } else {
                g.softmax_rows(a).unwrap()
            };
            let s = g.slice_cols(y, 2, 3).unwrap();
            let root = g.sum_all(s);
            let grads = g.backward(root).unwrap();
            grads.get(a).unwrap().to_vec()
        };
        let plain = run(false);
        let grouped = run(true);
        assert_grads_close(&plain, &grouped, 1e-12);
    }

    #[test]
    fn grad_rms_norm_both_inputs() {
        check_op_grad(
            8 + 4,
            |g, v| {
                let x = g.param(Tensor::matrix(2, 4, v[..8].to_vec()).unwrap());
                let gain = g.param(Tensor::new(vec![4], v[8..].to_vec()).unwrap());
                let y = g.rms_norm(x, gain).unwrap();
                let s = g.slice_cols(y, 1, 3).unwrap();
                (g.sum_all(s), vec![x, gain])
            },
            16,
        );
    }

    #[test]
    fn grad_embed() {
        check_op_grad(
            8,
            |g, v| {
                let table = g.param(Tensor::matrix(4, 2, v.to_vec()).unwrap());
                let y = g.embed(table, &[3, 0, 0, 2]).unwrap();
                (g.sum_all(y), vec![table])
            },
            18,
        );
    }

    #[test]
    fn grad_rope() {
        check_op_grad(
            8,
            |g, v| {
                let x = g.param(Tensor::matrix(2, 4, v.to_vec()).unwrap());
                let angles = Tensor::matrix(2, 1, vec![0.3, 1.7]).unwrap();
                let y = g.rope(x, 2, &angles).unwrap();
                let s = g.slice_cols(y, 0, 3).unwrap();
                (g.sum_all(s), vec![x])
            },
            19,
        );
    }

    #[test]
    fn grad_gelu() {
        check_op_grad(
            6,
            |g, v| {
                let x = g.param(Tensor::matrix(2, 3, v.to_vec()).unwrap());
                let y = g.gelu(x);
                (g.sum_all(y), vec![x])
            },
            20,
        );
    }

    #[test]
    fn grad_cross_entropy_mean_with_gaps() {
        check_op_grad(
            12,
            |g, v| {
                let logits = g.param(Tensor::matrix(3, 4, v.to_vec()).unwrap());
                let l = g
                    .cross_entropy(logits, &[Some(2), None, Some(0)], Reduction::Mean, None)
                    .unwrap();
                (l, vec![logits])
            },
            21,
        );
    }

    #[test]
    fn grad_broadcast_add_and_scale() {
        check_op_grad(
            3,
            |g, v| {
                let a =
                    g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
                let b = g.param(Tensor::new(vec![3], v.to_vec()).unwrap());
                let y = g.broadcast_add(a, b).unwrap();
                let z = g.scale(y, -1.75);
                (g.sum_all(z), vec![b])
            },
            22,
        );
    }

    #[test]
    fn grad_composite_two_layer_chain() {
        // matmul -> gelu -> rms_norm -> matmul -> cross-entropy, all through
        // one parameter matrix used twice.
        check_op_grad(
            9,
            |g, v| {
                let w = g.param(Tensor::matrix(3, 3, v.to_vec()).unwrap());
                let x = g.constant(
                    Tensor::matrix(2, 3, vec![0.5, -0.25, 1.0, -0.75, 0.3, 0.9]).unwrap(),
                );
                let gain = g.constant(Tensor::new(vec![3], vec![1.0, 0.9, 1.1]).unwrap());
                let h = g.matmul(x, w).unwrap();
                let h = g.gelu(h);
                let h = g.rms_norm(h, gain).unwrap();
                let logits = g.matmul(h, w).unwrap();
                let l = g
                    .cross_entropy(logits, &[Some(0), Some(2)], Reduction::Sum, None)
                    .unwrap();
                (l, vec![w])
            },
            23,
        );
    }

    // ── Forward semantics ───────────────────────────────────────────

    #[test]
    fn softmax_rows_normalize() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap());
        let y = g.softmax_rows(a).unwrap();
        for i in 0..2 {
            let s: f64 = g.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
        }
    }

    #[test]
    fn softmax_handles_mask_scale_bias() {
        // A -1e30 additive bias must drive the weight to exactly zero.
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(1, 3, vec![0.2, -1e30, 0.4]).unwrap());
        let y = g.softmax_rows(a).unwrap();
        assert_eq!(g.value(y).data()[1], 0.0);
        let s: f64 = g.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_n() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 4, vec![0.0; 8]).unwrap());
        let l = g
            .cross_entropy(a, &[Some(1), Some(3)], Reduction::Mean, None)
            .unwrap();
        assert!((g.value(l).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn rope_zero_angle_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let angles = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let y = g.rope(x, 1, &angles).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let angles = Tensor::matrix(1, 2, vec![0.9, -2.3]).unwrap();
        let y = g.rope(x, 1, &angles).unwrap();
        let v = g.value(y).data();
        assert!((v[0].hypot(v[1]) - 1.0f64.hypot(2.0)).abs() < 1e-12);
        assert!((v[2].hypot(v[3]) - 3.0f64.hypot(4.0)).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let a = g.param(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        let y = g.scale(a, 2.0);
        let err = g.backward(y).unwrap_err();
        assert!(matches!(err, TensorError::RankMismatch { op: "backward", .. }));
    }

    #[test]
    fn matmul_shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.constant(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let err = g.matmul(a, b).unwrap_err();
        assert!(matches!(err, TensorError::IncompatibleShapes { op: "matmul", .. }));
    }

    #[test]
    fn cross_entropy_rejects_all_none_targets() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(g
            .cross_entropy(a, &[None, None], Reduction::Mean, None)
            .is_err());
    }

    #[test]
    fn shared_parameter_accumulates_from_both_uses() {
        // y = sum(x + x): every coordinate's grad is exactly 2.
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap());
        let y = g.add(x, x).unwrap();
        let root = g.sum_all(y);
        let grads = g.backward(root).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    // ── Pair-grouped reduction properties ──────────────────────────

    #[test]
    fn pair_grouped_sum_is_block_swap_invariant() {
        // Exchanging the two blocks inside each pair must reproduce the sum
        // bit for bit; a plain fold has no such guarantee.
        let mut rng = StdRng::seed_from_u64(99);
        for g in [1usize, 2, 3] {
            let n = 2 * g * 5;
            let xs = rand_vec(&mut rng, n);
            let mut swapped = xs.clone();
            for c in 0..5 {
                let base = c * 2 * g;
                for j in 0..g {
                    swapped.swap(base + j, base + g + j);
                }
            }
            let a = pair_grouped_sum(n, Some(g), &mut |i| xs[i]);
            let b = pair_grouped_sum(n, Some(g), &mut |i| swapped[i]);
            assert_eq!(a.to_bits(), b.to_bits(), "group width {g}");
        }
    }

    #[test]
    fn pair_grouped_matmul_matches_plain_values() {
        let mut rng = StdRng::seed_from_u64(7);
        let a = Tensor::matrix(3, 8, rand_vec(&mut rng, 24)).unwrap();
        let b = Tensor::matrix(8, 2, rand_vec(&mut rng, 16)).unwrap();
        let mut g = Graph::new();
        let an = g.constant(a.clone());
        let bn = g.constant(b.clone());
        let plain = g.matmul(an, bn).unwrap();
        let grouped = g.matmul_pair_grouped(an, bn, 2).unwrap();
        for (p, q) in g.value(plain).data().iter().zip(g.value(grouped).data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
