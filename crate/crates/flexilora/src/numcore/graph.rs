//! Recorded op graph with reverse-mode differentiation.
//!
//! Every operation appends a node (op kind, input ids, output id) to the
//! graph in insertion order; `backward` walks the nodes in strict reverse
//! insertion order. Forward evaluation is a pure function of the node
//! record, so replaying the tape reproduces every output bit-exactly.

use super::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
pub enum OpKind {
    /// a[m,k] . b[k,n]
    MatMul,
    /// a[m,k] . b[n,k]^T
    MatMulNt,
    Add,
    /// x[m,n] + v[n] broadcast over rows (the only broadcast in the op set)
    AddRow,
    /// x[m,n] * v[n] broadcast over rows
    MulRow,
    Mul,
    Scale { c: f64 },
    Relu,
    Tanh,
    RowSoftmax,
    /// Row softmax over a [t,t] score matrix restricted to columns j <= i.
    CausalSoftmax,
    LayerNorm { eps: f64 },
    /// out[i,:] = table[ids[i],:]
    GatherRows { ids: Vec<usize> },
    SliceRows { start: usize, len: usize },
    ConcatRows,
    SliceCols { start: usize, len: usize },
    ConcatCols,
    /// Mask-weighted mean over rows: out[1,d] = sum_i m_i x_i / sum_i m_i
    MaskedMeanRows { mask: Vec<f64> },
    /// Mean over rows of -log softmax(logits)[label]
    CrossEntropy { labels: Vec<usize> },
    Sum,
    Reshape { shape: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    kind: OpKind,
    inputs: Vec<TensorId>,
    output: TensorId,
}

pub struct Graph {
    precision: Precision,
    tensors: Vec<Tensor>,
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph { precision, tensors: Vec::new(), nodes: Vec::new(), consumed: false }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn leaf(&mut self, shape: Vec<usize>, mut data: Vec<f64>, requires_grad: bool) -> Result<TensorId> {
        self.precision.round_slice(&mut data);
        let t = Tensor::new(shape, data, requires_grad)?;
        Ok(self.push_tensor(t))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, data, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> TensorId {
        let v = self.precision.round(v);
        self.push_tensor(Tensor::scalar(v))
    }

    fn push_tensor(&mut self, t: Tensor) -> TensorId {
        self.tensors.push(t);
        TensorId(self.tensors.len() - 1)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    // ---- op builders ------------------------------------------------------

    fn record(&mut self, kind: OpKind, inputs: Vec<TensorId>) -> Result<TensorId> {
        let (shape, data) = eval_op(&kind, &inputs, &self.tensors, self.precision)?;
        let requires_grad = inputs.iter().any(|id| self.tensors[id.0].requires_grad);
        let out = self.push_tensor(Tensor { shape, data, grad: None, requires_grad });
        self.nodes.push(Node { kind, inputs, output: out });
        Ok(out)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.record(OpKind::MatMul, vec![a, b])
    }

    /// a . b^T, with b stored row-major as [n, k].
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.record(OpKind::MatMulNt, vec![a, b])
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.record(OpKind::Add, vec![a, b])
    }

    pub fn add_row(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        self.record(OpKind::AddRow, vec![x, v])
    }

    pub fn mul_row(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        self.record(OpKind::MulRow, vec![x, v])
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.record(OpKind::Mul, vec![a, b])
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        self.record(OpKind::Scale { c }, vec![x])
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.record(OpKind::Relu, vec![x])
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        self.record(OpKind::Tanh, vec![x])
    }

    pub fn row_softmax(&mut self, x: TensorId) -> Result<TensorId> {
        self.record(OpKind::RowSoftmax, vec![x])
    }

    pub fn causal_softmax(&mut self, scores: TensorId) -> Result<TensorId> {
        self.record(OpKind::CausalSoftmax, vec![scores])
    }

    pub fn layer_norm(&mut self, x: TensorId) -> Result<TensorId> {
        self.record(OpKind::LayerNorm { eps: 1e-5 }, vec![x])
    }

    pub fn gather_rows(&mut self, table: TensorId, ids: Vec<usize>) -> Result<TensorId> {
        self.record(OpKind::GatherRows { ids }, vec![table])
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.record(OpKind::SliceRows { start, len }, vec![x])
    }

    pub fn concat_rows(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        self.record(OpKind::ConcatRows, xs.to_vec())
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.record(OpKind::SliceCols { start, len }, vec![x])
    }

    pub fn concat_cols(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        self.record(OpKind::ConcatCols, xs.to_vec())
    }

    pub fn masked_mean_rows(&mut self, x: TensorId, mask: Vec<f64>) -> Result<TensorId> {
        self.record(OpKind::MaskedMeanRows { mask }, vec![x])
    }

    pub fn cross_entropy(&mut self, logits: TensorId, labels: Vec<usize>) -> Result<TensorId> {
        self.record(OpKind::CrossEntropy { labels }, vec![logits])
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        self.record(OpKind::Sum, vec![x])
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        self.record(OpKind::Reshape { shape }, vec![x])
    }

    // ---- backward ---------------------------------------------------------

    /// Populate `grad` on every `requires_grad` tensor reachable from `loss`.
    /// A second call on the same graph is an error (catches double-step bugs).
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph(
                "backward already ran on this graph; build a fresh graph per step".into(),
            ));
        }
        if loss.0 >= self.tensors.len() {
            return Err(Error::Graph("loss tensor does not belong to this graph".into()));
        }
        if !self.tensors[loss.0].is_scalar() {
            return Err(Error::Graph(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.tensors[loss.0].shape
            )));
        }
        if !self.nodes.iter().rev().any(|n| n.output == loss) {
            return Err(Error::Graph(
                "loss tensor is detached: it was not produced by a recorded op".into(),
            ));
        }
        self.consumed = true;

        if self.tensors[loss.0].requires_grad {
            self.tensors[loss.0].grad = Some(vec![1.0]);
        } else {
            // Loss detached from every trainable leaf: nothing to do.
            return Ok(());
        }

        for ni in (0..self.nodes.len()).rev() {
            let node = self.nodes[ni].clone();
            let out_grad = match self.tensors[node.output.0].grad.clone() {
                Some(g) => g,
                None => continue,
            };
            backprop_op(&node.kind, &node.inputs, node.output, &out_grad, &mut self.tensors)?;
        }

        if self.precision == Precision::F32 {
            for t in self.tensors.iter_mut() {
                if let Some(g) = t.grad.as_mut() {
                    Precision::F32.round_slice(g);
                }
            }
        }
        Ok(())
    }

    /// Re-execute every recorded node from its stored inputs and verify the
    /// stored output bit-exactly.
    pub fn replay_forward_bitexact(&self) -> Result<bool> {
        for node in &self.nodes {
            let (shape, data) = eval_op(&node.kind, &node.inputs, &self.tensors, self.precision)?;
            let stored = &self.tensors[node.output.0];
            if shape != stored.shape {
                return Ok(false);
            }
            if data.len() != stored.data.len()
                || data
                    .iter()
                    .zip(stored.data.iter())
                    .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn assert_all_finite(&self) -> Result<()> {
        for (i, t) in self.tensors.iter().enumerate() {
            if !t.all_finite() {
                return Err(Error::Graph(format!("tensor {i} contains non-finite values")));
            }
        }
        Ok(())
    }
}

// ---- shared kernels --------------------------------------------------------

/// c = a . b with a[m,k], b[k,n]; row-major, fixed accumulation order.
pub(crate) fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                    *cv += av * bv;
                }
            }
        }
    }
    c
}

/// c = a . b^T with a[m,k], b[n,k].
pub(crate) fn matmul_nt_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = dot(arow, brow);
        }
    }
    c
}

/// c = a^T . g with a[m,k], g[m,n] -> c[k,n].
pub(crate) fn matmul_tn_kernel(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let crow = &mut c[p * n..(p + 1) * n];
                for (cv, &gv) in crow.iter_mut().zip(grow.iter()) {
                    *cv += av * gv;
                }
            }
        }
    }
    c
}

/// Four-lane dot product; lane order is fixed so results are deterministic.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut s = (s0 + s1) + (s2 + s3);
    for i in chunks * 4..n {
        s += a[i] * b[i];
    }
    s
}

fn softmax_row(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// log(sum_j exp(x_j)) with max-subtraction.
fn log_sum_exp(row: &[f64]) -> f64 {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
    mx + s.ln()
}

// ---- forward ---------------------------------------------------------------

fn eval_op(
    kind: &OpKind,
    inputs: &[TensorId],
    tensors: &[Tensor],
    precision: Precision,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let t = |i: usize| &tensors[inputs[i].0];
    let (shape, mut data): (Vec<usize>, Vec<f64>) = match kind {
        OpKind::MatMul => {
            let (a, b) = (t(0), t(1));
            let (m, k) = a.dims2("matmul")?;
            let (k2, n) = b.dims2("matmul")?;
            if k != k2 {
                return Err(Error::ShapeMismatch { op: "matmul", lhs: a.shape.clone(), rhs: b.shape.clone() });
            }
            (vec![m, n], matmul_kernel(&a.data, &b.data, m, k, n))
        }
        OpKind::MatMulNt => {
            let (a, b) = (t(0), t(1));
            let (m, k) = a.dims2("matmul_nt")?;
            let (n, k2) = b.dims2("matmul_nt")?;
            if k != k2 {
                return Err(Error::ShapeMismatch { op: "matmul_nt", lhs: a.shape.clone(), rhs: b.shape.clone() });
            }
            (vec![m, n], matmul_nt_kernel(&a.data, &b.data, m, k, n))
        }
        OpKind::Add => {
            let (a, b) = (t(0), t(1));
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch { op: "add", lhs: a.shape.clone(), rhs: b.shape.clone() });
            }
            (a.shape.clone(), a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect())
        }
        OpKind::AddRow => {
            let (x, v) = (t(0), t(1));
            let (m, n) = x.dims2("add_row")?;
            if v.numel() != n {
                return Err(Error::ShapeMismatch { op: "add_row", lhs: x.shape.clone(), rhs: v.shape.clone() });
            }
            let mut out = x.data.clone();
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] += v.data[j];
                }
            }
            (vec![m, n], out)
        }
        OpKind::MulRow => {
            let (x, v) = (t(0), t(1));
            let (m, n) = x.dims2("mul_row")?;
            if v.numel() != n {
                return Err(Error::ShapeMismatch { op: "mul_row", lhs: x.shape.clone(), rhs: v.shape.clone() });
            }
            let mut out = x.data.clone();
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] *= v.data[j];
                }
            }
            (vec![m, n], out)
        }
        OpKind::Mul => {
            let (a, b) = (t(0), t(1));
            if a.shape != b.shape {
                return Err(Error::ShapeMismatch { op: "mul", lhs: a.shape.clone(), rhs: b.shape.clone() });
            }
            (a.shape.clone(), a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect())
        }
        OpKind::Scale { c } => {
            let x = t(0);
            (x.shape.clone(), x.data.iter().map(|v| v * c).collect())
        }
        OpKind::Relu => {
            let x = t(0);
            (x.shape.clone(), x.data.iter().map(|v| v.max(0.0)).collect())
        }
        OpKind::Tanh => {
            let x = t(0);
            (x.shape.clone(), x.data.iter().map(|v| v.tanh()).collect())
        }
        OpKind::RowSoftmax => {
            let x = t(0);
            let (m, n) = x.dims2("row_softmax")?;
            let mut out = x.data.clone();
            for i in 0..m {
                softmax_row(&mut out[i * n..(i + 1) * n]);
            }
            (vec![m, n], out)
        }
        OpKind::CausalSoftmax => {
            let x = t(0);
            let (m, n) = x.dims2("causal_softmax")?;
            if m != n {
                return Err(Error::InvalidArgument {
                    op: "causal_softmax",
                    msg: format!("scores must be square, got {:?}", x.shape),
                });
            }
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let live = i + 1;
                let mut row: Vec<f64> = x.data[i * n..i * n + live].to_vec();
                softmax_row(&mut row);
                out[i * n..i * n + live].copy_from_slice(&row);
            }
            (vec![m, n], out)
        }
        OpKind::LayerNorm { eps } => {
            let x = t(0);
            let (m, n) = x.dims2("layer_norm")?;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                let row = &x.data[i * n..(i + 1) * n];
                let mu: f64 = row.iter().sum::<f64>() / n as f64;
                let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    out[i * n + j] = (row[j] - mu) * rstd;
                }
            }
            (vec![m, n], out)
        }
        OpKind::GatherRows { ids } => {
            let table = t(0);
            let (rows, n) = table.dims2("gather_rows")?;
            let mut out = Vec::with_capacity(ids.len() * n);
            for &id in ids {
                if id >= rows {
                    return Err(Error::InvalidArgument {
                        op: "gather_rows",
                        msg: format!("row index {id} out of range for table with {rows} rows"),
                    });
                }
                out.extend_from_slice(&table.data[id * n..(id + 1) * n]);
            }
            (vec![ids.len(), n], out)
        }
        OpKind::SliceRows { start, len } => {
            let x = t(0);
            let (m, n) = x.dims2("slice_rows")?;
            if start + len > m {
                return Err(Error::InvalidArgument {
                    op: "slice_rows",
                    msg: format!("rows {start}..{} out of range for {m} rows", start + len),
                });
            }
            (vec![*len, n], x.data[start * n..(start + len) * n].to_vec())
        }
        OpKind::ConcatRows => {
            if inputs.is_empty() {
                return Err(Error::InvalidArgument { op: "concat_rows", msg: "no inputs".into() });
            }
            let (_, n) = t(0).dims2("concat_rows")?;
            let mut rows = 0;
            let mut out = Vec::new();
            for (i, _) in inputs.iter().enumerate() {
                let x = t(i);
                let (mi, ni) = x.dims2("concat_rows")?;
                if ni != n {
                    return Err(Error::ShapeMismatch { op: "concat_rows", lhs: t(0).shape.clone(), rhs: x.shape.clone() });
                }
                rows += mi;
                out.extend_from_slice(&x.data);
            }
            (vec![rows, n], out)
        }
        OpKind::SliceCols { start, len } => {
            let x = t(0);
            let (m, n) = x.dims2("slice_cols")?;
            if start + len > n {
                return Err(Error::InvalidArgument {
                    op: "slice_cols",
                    msg: format!("cols {start}..{} out of range for {n} cols", start + len),
                });
            }
            let mut out = Vec::with_capacity(m * len);
            for i in 0..m {
                out.extend_from_slice(&x.data[i * n + start..i * n + start + len]);
            }
            (vec![m, *len], out)
        }
        OpKind::ConcatCols => {
            if inputs.is_empty() {
                return Err(Error::InvalidArgument { op: "concat_cols", msg: "no inputs".into() });
            }
            let (m, _) = t(0).dims2("concat_cols")?;
            let mut widths = Vec::with_capacity(inputs.len());
            let mut total = 0;
            for (i, _) in inputs.iter().enumerate() {
                let (mi, ni) = t(i).dims2("concat_cols")?;
                if mi != m {
                    return Err(Error::ShapeMismatch { op: "concat_cols", lhs: t(0).shape.clone(), rhs: t(i).shape.clone() });
                }
                widths.push(ni);
                total += ni;
            }
            let mut out = Vec::with_capacity(m * total);
            for i in 0..m {
                for (xi, &w) in widths.iter().enumerate() {
                    let x = t(xi);
                    out.extend_from_slice(&x.data[i * w..(i + 1) * w]);
                }
            }
            (vec![m, total], out)
        }
        OpKind::MaskedMeanRows { mask } => {
            let x = t(0);
            let (m, n) = x.dims2("masked_mean_rows")?;
            if mask.len() != m {
                return Err(Error::InvalidArgument {
                    op: "masked_mean_rows",
                    msg: format!("mask length {} != {} rows", mask.len(), m),
                });
            }
            let total: f64 = mask.iter().sum();
            if total <= 0.0 {
                return Err(Error::InvalidArgument {
                    op: "masked_mean_rows",
                    msg: "mask selects no rows".into(),
                });
            }
            let mut out = vec![0.0; n];
            for i in 0..m {
                if mask[i] != 0.0 {
                    for j in 0..n {
                        out[j] += mask[i] * x.data[i * n + j];
                    }
                }
            }
            for v in out.iter_mut() {
                *v /= total;
            }
            (vec![1, n], out)
        }
        OpKind::CrossEntropy { labels } => {
            let logits = t(0);
            let (m, c) = logits.dims2("cross_entropy")?;
            if m == 0 {
                return Err(Error::InvalidArgument { op: "cross_entropy", msg: "empty batch".into() });
            }
            if labels.len() != m {
                return Err(Error::InvalidArgument {
                    op: "cross_entropy",
                    msg: format!("{} labels for {} rows", labels.len(), m),
                });
            }
            let mut loss = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(Error::InvalidArgument {
                        op: "cross_entropy",
                        msg: format!("label {y} out of range for {c} classes"),
                    });
                }
                let row = &logits.data[i * c..(i + 1) * c];
                loss += log_sum_exp(row) - row[y];
            }
            (vec![1], vec![loss / m as f64])
        }
        OpKind::Sum => {
            let x = t(0);
            (vec![1], vec![x.data.iter().sum()])
        }
        OpKind::Reshape { shape } => {
            let x = t(0);
            let numel: usize = shape.iter().product();
            if numel != x.numel() {
                return Err(Error::InvalidArgument {
                    op: "reshape",
                    msg: format!("cannot reshape {:?} into {:?}", x.shape, shape),
                });
            }
            (shape.clone(), x.data.clone())
        }
    };
    precision.round_slice(&mut data);
    Ok((shape, data))
}

// ---- backward --------------------------------------------------------------

fn accumulate(tensors: &mut [Tensor], id: TensorId, delta: &[f64]) {
    let t = &mut tensors[id.0];
    if !t.requires_grad {
        return;
    }
    let g = t.grad.get_or_insert_with(|| vec![0.0; t.data.len()]);
    for (gv, dv) in g.iter_mut().zip(delta.iter()) {
        *gv += dv;
    }
}

fn backprop_op(
    kind: &OpKind,
    inputs: &[TensorId],
    output: TensorId,
    g: &[f64],
    tensors: &mut Vec<Tensor>,
) -> Result<()> {
    match kind {
        OpKind::MatMul => {
            let a = tensors[inputs[0].0].clone();
            let b = tensors[inputs[1].0].clone();
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[1];
            if tensors[inputs[0].0].requires_grad {
                let da = matmul_nt_kernel(g, &b.data, m, n, k);
                accumulate(tensors, inputs[0], &da);
            }
            if tensors[inputs[1].0].requires_grad {
                let db = matmul_tn_kernel(&a.data, g, m, k, n);
                accumulate(tensors, inputs[1], &db);
            }
        }
        OpKind::MatMulNt => {
            let a = tensors[inputs[0].0].clone();
            let b = tensors[inputs[1].0].clone();
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[0];
            if tensors[inputs[0].0].requires_grad {
                let da = matmul_kernel(g, &b.data, m, n, k);
                accumulate(tensors, inputs[0], &da);
            }
            if tensors[inputs[1].0].requires_grad {
                let db = matmul_tn_kernel(g, &a.data, m, n, k);
                accumulate(tensors, inputs[1], &db);
            }
        }
        OpKind::Add => {
            accumulate(tensors, inputs[0], g);
            accumulate(tensors, inputs[1], g);
        }
        OpKind::AddRow => {
            let (m, n) = {
                let x = &tensors[inputs[0].0];
                (x.shape[0], x.shape[1])
            };
            accumulate(tensors, inputs[0], g);
            if tensors[inputs[1].0].requires_grad {
                let mut dv = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dv[j] += g[i * n + j];
                    }
                }
                accumulate(tensors, inputs[1], &dv);
            }
        }
        OpKind::MulRow => {
            let x = tensors[inputs[0].0].clone();
            let v = tensors[inputs[1].0].clone();
            let (m, n) = (x.shape[0], x.shape[1]);
            if tensors[inputs[0].0].requires_grad {
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[i * n + j] * v.data[j];
                    }
                }
                accumulate(tensors, inputs[0], &dx);
            }
            if tensors[inputs[1].0].requires_grad {
                let mut dv = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        dv[j] += g[i * n + j] * x.data[i * n + j];
                    }
                }
                accumulate(tensors, inputs[1], &dv);
            }
        }
        OpKind::Mul => {
            let a = tensors[inputs[0].0].clone();
            let b = tensors[inputs[1].0].clone();
            if tensors[inputs[0].0].requires_grad {
                let da: Vec<f64> = g.iter().zip(&b.data).map(|(gv, bv)| gv * bv).collect();
                accumulate(tensors, inputs[0], &da);
            }
            if tensors[inputs[1].0].requires_grad {
                let db: Vec<f64> = g.iter().zip(&a.data).map(|(gv, av)| gv * av).collect();
                accumulate(tensors, inputs[1], &db);
            }
        }
        OpKind::Scale { c } => {
            let dx: Vec<f64> = g.iter().map(|gv| gv * c).collect();
            accumulate(tensors, inputs[0], &dx);
        }
        OpKind::Relu => {
            let x = tensors[inputs[0].0].clone();
            let dx: Vec<f64> = g
                .iter()
                .zip(&x.data)
                .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                .collect();
            accumulate(tensors, inputs[0], &dx);
        }
        OpKind::Tanh => {
            let y = tensors[output.0].clone();
            let dx: Vec<f64> = g.iter().zip(&y.data).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
            accumulate(tensors, inputs[0], &dx);
        }
        OpKind::RowSoftmax | OpKind::CausalSoftmax => {
            let y = tensors[output.0].clone();
            let (m, n) = (y.shape[0], y.shape[1]);
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                let yr = &y.data[i * n..(i + 1) * n];
                let gr = &g[i * n..(i + 1) * n];
                let dot: f64 = yr.iter().zip(gr.iter()).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    dx[i * n + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(tensors, inputs[0], &dx);
        }
        OpKind::LayerNorm { eps } => {
            let x = tensors[inputs[0].0].clone();
            let y = tensors[output.0].clone();
            let (m, n) = (x.shape[0], x.shape[1]);
            let mut dx = vec![0.0; m * n];
            for i in 0..m {
                let xr = &x.data[i * n..(i + 1) * n];
                let yr = &y.data[i * n..(i + 1) * n];
                let gr = &g[i * n..(i + 1) * n];
                let mu: f64 = xr.iter().sum::<f64>() / n as f64;
                let var: f64 = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                let g_mean: f64 = gr.iter().sum::<f64>() / n as f64;
                let gy_mean: f64 = gr.iter().zip(yr.iter()).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                for j in 0..n {
                    dx[i * n + j] = rstd * (gr[j] - g_mean - yr[j] * gy_mean);
                }
            }
            accumulate(tensors, inputs[0], &dx);
        }
        OpKind::GatherRows { ids } => {
            if tensors[inputs[0].0].requires_grad {
                let n = tensors[inputs[0].0].shape[1];
                let mut dt = vec![0.0; tensors[inputs[0].0].numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..n {
                        dt[id * n + j] += g[i * n + j];
                    }
                }
                accumulate(tensors, inputs[0], &dt);
            }
        }
        OpKind::SliceRows { start, len } => {
            if tensors[inputs[0].0].requires_grad {
                let (m, n) = (tensors[inputs[0].0].shape[0], tensors[inputs[0].0].shape[1]);
                let mut dx = vec![0.0; m * n];
                dx[start * n..(start + len) * n].copy_from_slice(g);
                accumulate(tensors, inputs[0], &dx);
            }
        }
        OpKind::ConcatRows => {
            let n = tensors[output.0].shape[1];
            let mut row = 0;
            for inp in inputs {
                let mi = tensors[inp.0].shape[0];
                let part = &g[row * n..(row + mi) * n];
                accumulate(tensors, *inp, part);
                row += mi;
            }
        }
        OpKind::SliceCols { start, len } => {
            if tensors[inputs[0].0].requires_grad {
                let (m, n) = (tensors[inputs[0].0].shape[0], tensors[inputs[0].0].shape[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                accumulate(tensors, inputs[0], &dx);
            }
        }
        OpKind::ConcatCols => {
            let m = tensors[output.0].shape[0];
            let total = tensors[output.0].shape[1];
            let mut col = 0;
            for inp in inputs {
                let w = tensors[inp.0].shape[1];
                if tensors[inp.0].requires_grad {
                    let mut dx = vec![0.0; m * w];
                    for i in 0..m {
                        dx[i * w..(i + 1) * w].copy_from_slice(&g[i * total + col..i * total + col + w]);
                    }
                    accumulate(tensors, *inp, &dx);
                }
                col += w;
            }
        }
        OpKind::MaskedMeanRows { mask } => {
            if tensors[inputs[0].0].requires_grad {
                let (m, n) = (tensors[inputs[0].0].shape[0], tensors[inputs[0].0].shape[1]);
                let total: f64 = mask.iter().sum();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    if mask[i] != 0.0 {
                        let w = mask[i] / total;
                        for j in 0..n {
                            dx[i * n + j] = w * g[j];
                        }
                    }
                }
                accumulate(tensors, inputs[0], &dx);
            }
        }
        OpKind::CrossEntropy { labels } => {
            if tensors[inputs[0].0].requires_grad {
                let logits = tensors[inputs[0].0].clone();
                let (m, c) = (logits.shape[0], logits.shape[1]);
                let gs = g[0] / m as f64;
                let mut dl = vec![0.0; m * c];
                for (i, &y) in labels.iter().enumerate() {
                    let mut row: Vec<f64> = logits.data[i * c..(i + 1) * c].to_vec();
                    softmax_row(&mut row);
                    for j in 0..c {
                        let delta = if j == y { 1.0 } else { 0.0 };
                        dl[i * c + j] = gs * (row[j] - delta);
                    }
                }
                accumulate(tensors, inputs[0], &dl);
            }
        }
        OpKind::Sum => {
            if tensors[inputs[0].0].requires_grad {
                let dx = vec![g[0]; tensors[inputs[0].0].numel()];
                accumulate(tensors, inputs[0], &dx);
            }
        }
        OpKind::Reshape { .. } => {
            accumulate(tensors, inputs[0], g);
        }
    }
    Ok(())
}
