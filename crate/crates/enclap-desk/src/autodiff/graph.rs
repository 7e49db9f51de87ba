//! Computation graph and reverse-mode backward pass.
//!
//! Nodes are appended in forward order, so node index order is already a
//! topological order and backward is a single reverse sweep. Only rank-1/2
//! tensors flow through the ops; multi-head attention and convolutions are
//! composed from slicing, unfolding and matmul.

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::{AutodiffError, Result};
use std::collections::HashMap;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    /// Identical shapes.
    Same,
    /// `b` is a length-`cols` vector applied to every row of `a`.
    RowVec,
    /// `b` is a single element applied everywhere.
    Scalar,
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Add { a: Var, b: Var, bc: Broadcast },
    Mul { a: Var, b: Var, bc: Broadcast },
    Scale { a: Var, c: f64 },
    GatherRows { table: Var, indices: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxRows { x: Var },
    LogSoftmaxRows { x: Var, soft: Vec<f64> },
    Gelu { x: Var },
    Relu { x: Var },
    SumAll { x: Var },
    MeanAll { x: Var },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    UnfoldRows { x: Var, windows: Vec<Vec<usize>> },
    MeanPoolRows { x: Var, group: usize },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Exp { x: Var },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Growable computation graph. One graph per training step.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Gradients accumulated at leaf nodes across backward calls.
    leaf_grads: HashMap<usize, Vec<f64>>,
}

const LN_EPS: f64 = 1e-12;

/// Row-major matmul with optional transposes; transposed operands are
/// materialized so the inner loop stays contiguous.
fn mm(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Result<Tensor> {
    if a.shape().len() != 2 || b.shape().len() != 2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul",
            detail: format!("expected rank-2 operands, got {:?} and {:?}", a.shape(), b.shape()),
        });
    }
    let (m, k) = if ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
    let (k2, n) = if tb { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
    if k != k2 {
        return Err(AutodiffError::ShapeMismatch {
            op: "matmul",
            detail: format!(
                "inner dims disagree: {:?}{} x {:?}{}",
                a.shape(),
                if ta { "^T" } else { "" },
                b.shape(),
                if tb { "^T" } else { "" }
            ),
        });
    }
    let at;
    let a_eff: &[f64] = if ta {
        at = transpose(a.data(), a.rows(), a.cols());
        &at
    } else {
        a.data()
    };
    let bt;
    let b_eff: &[f64] = if tb {
        bt = transpose(b.data(), b.rows(), b.cols());
        &bt
    } else {
        b.data()
    };
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a_eff[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b_eff[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(m, n, out)
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    // tanh approximation; the backward pass differentiates the same form.
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated at a leaf created with [`Graph::input`] or
    /// [`Graph::param`]. `None` until a backward pass has reached it.
    pub fn leaf_grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let id = self.nodes.len();
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var(id))
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf { param: None }, value, false, "constant")
    }

    /// Trainable leaf that is not tied to a parameter store (used for
    /// gradient checks on raw functions).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(Op::Leaf { param: None }, value, true, "input")
    }

    /// Leaf bound to a stored parameter; backward accumulates into the
    /// store's gradient buffer.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(Op::Leaf { param: Some(id) }, store.value(id).clone(), true, "param")
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let value = mm(self.value(a), ta, self.value(b), tb)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::Matmul { a, b, ta, tb }, value, rg, "matmul")
    }

    fn broadcast_kind(&self, a: Var, b: Var, op: &'static str) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if tb.numel() == 1 {
            Ok(Broadcast::Scalar)
        } else if tb.shape().len() == 1 && tb.numel() == ta.cols() && ta.shape().len() == 2 {
            Ok(Broadcast::RowVec)
        } else {
            Err(AutodiffError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind(a, b, "add")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = ta.data().to_vec();
        match bc {
            Broadcast::Same => {
                for (o, &v) in out.iter_mut().zip(tb.data()) {
                    *o += v;
                }
            }
            Broadcast::Scalar => {
                let v = tb.item();
                out.iter_mut().for_each(|o| *o += v);
            }
            Broadcast::RowVec => {
                let c = ta.cols();
                for (i, o) in out.iter_mut().enumerate() {
                    *o += tb.data()[i % c];
                }
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::Add { a, b, bc }, value, rg, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind(a, b, "mul")?;
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = ta.data().to_vec();
        match bc {
            Broadcast::Same => {
                for (o, &v) in out.iter_mut().zip(tb.data()) {
                    *o *= v;
                }
            }
            Broadcast::Scalar => {
                let v = tb.item();
                out.iter_mut().for_each(|o| *o *= v);
            }
            Broadcast::RowVec => {
                let c = ta.cols();
                for (i, o) in out.iter_mut().enumerate() {
                    *o *= tb.data()[i % c];
                }
            }
        }
        let value = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.requires(a) || self.requires(b);
        self.push(Op::Mul { a, b, bc }, value, rg, "mul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = Tensor::new(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().map(|v| v * c).collect(),
        )?;
        let rg = self.requires(a);
        self.push(Op::Scale { a, c }, value, rg, "scale")
    }

    /// Row gather: `out[i] = table[indices[i]]`. Backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("table must be rank 2, got {:?}", t.shape()),
            });
        }
        let c = t.cols();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= t.rows() {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather_rows",
                    detail: format!("row {} out of {}", i, t.rows()),
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let value = Tensor::matrix(indices.len(), c, out)?;
        let rg = self.requires(table);
        self.push(Op::GatherRows { table, indices: indices.to_vec() }, value, rg, "gather_rows")
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if self.value(gain).numel() != c || self.value(bias).numel() != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "layer_norm",
                detail: format!("gain/bias must have {} elements", c),
            });
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        {
            let g = self.value(gain).data().to_vec();
            let b = self.value(bias).data().to_vec();
            let t = self.value(x);
            for i in 0..r {
                let row = t.row(i);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + LN_EPS).sqrt();
                inv_std[i] = is;
                for j in 0..c {
                    let xh = (row[j] - mean) * is;
                    xhat[i * c + j] = xh;
                    out[i * c + j] = g[j] * xh + b[j];
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push(Op::LayerNorm { x, gain, bias, xhat, inv_std }, value, rg, "layer_norm")
    }

    /// Softmax along each row.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                sum += e;
            }
            for j in 0..c {
                out[i * c + j] /= sum;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.requires(x);
        self.push(Op::SoftmaxRows { x }, value, rg, "softmax_rows")
    }

    /// Log-softmax along each row.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut out = vec![0.0; r * c];
        let mut soft = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
                soft[i * c + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.requires(x);
        self.push(Op::LogSoftmaxRows { x, soft }, value, rg, "log_softmax_rows")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| gelu(v)).collect())?;
        let rg = self.requires(x);
        self.push(Op::Gelu { x }, value, rg, "gelu")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v.max(0.0)).collect())?;
        let rg = self.requires(x);
        self.push(Op::Relu { x }, value, rg, "relu")
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires(x);
        self.push(Op::SumAll { x }, Tensor::scalar(s), rg, "sum_all")
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.requires(x);
        self.push(Op::MeanAll { x }, Tensor::scalar(s), rg, "mean_all")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat_rows",
                detail: "no parts".into(),
            });
        }
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts differ: {} vs {}", c, t.cols()),
                });
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let value = Tensor::matrix(rows, c, out)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(Op::ConcatRows { parts: parts.to_vec() }, value, rg, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "concat_cols",
                detail: "no parts".into(),
            });
        }
        let r = self.value(parts[0]).rows();
        let total_c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = vec![0.0; r * total_c];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts differ: {} vs {}", r, t.rows()),
                });
            }
            let c = t.cols();
            for i in 0..r {
                out[i * total_c + off..i * total_c + off + c].copy_from_slice(t.row(i));
            }
            off += c;
        }
        let value = Tensor::matrix(r, total_c, out)?;
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(Op::ConcatCols { parts: parts.to_vec() }, value, rg, "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.rows() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_rows",
                detail: format!("{}..{} out of {} rows", start, start + len, t.rows()),
            });
        }
        let c = t.cols();
        let value = Tensor::matrix(len, c, t.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.requires(x);
        self.push(Op::SliceRows { x, start, len }, value, rg, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if start + len > t.cols() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "slice_cols",
                detail: format!("{}..{} out of {} cols", start, start + len, t.cols()),
            });
        }
        let r = t.rows();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let value = Tensor::matrix(r, len, out)?;
        let rg = self.requires(x);
        self.push(Op::SliceCols { x, start, len }, value, rg, "slice_cols")
    }

    /// Each output row is the concatenation of the input rows listed in one
    /// window. Used to express strided 1-d convolution as matmul.
    pub fn unfold_rows(&mut self, x: Var, windows: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(x);
        let c = t.cols();
        let k = windows.first().map(|w| w.len()).unwrap_or(0);
        if k == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "unfold_rows",
                detail: "empty windows".into(),
            });
        }
        let mut out = Vec::with_capacity(windows.len() * k * c);
        for w in windows {
            if w.len() != k {
                return Err(AutodiffError::InvalidArgument {
                    op: "unfold_rows",
                    detail: "ragged windows".into(),
                });
            }
            for &i in w {
                if i >= t.rows() {
                    return Err(AutodiffError::IndexOutOfRange {
                        op: "unfold_rows",
                        detail: format!("row {} out of {}", i, t.rows()),
                    });
                }
                out.extend_from_slice(t.row(i));
            }
        }
        let value = Tensor::matrix(windows.len(), k * c, out)?;
        let rg = self.requires(x);
        self.push(Op::UnfoldRows { x, windows: windows.to_vec() }, value, rg, "unfold_rows")
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn mean_pool_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        if group == 0 || r % group != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "mean_pool_rows",
                detail: format!("{} rows not divisible by group {}", r, group),
            });
        }
        let out_r = r / group;
        let mut out = vec![0.0; out_r * c];
        for i in 0..r {
            let dst = i / group;
            for j in 0..c {
                out[dst * c + j] += t.data()[i * c + j] / group as f64;
            }
        }
        let value = Tensor::matrix(out_r, c, out)?;
        let rg = self.requires(x);
        self.push(Op::MeanPoolRows { x, group }, value, rg, "mean_pool_rows")
    }

    /// L2-normalize each row.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut norms = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = t.row(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms[i] = n;
            for j in 0..c {
                out[i * c + j] = row[j] / n;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.requires(x);
        self.push(Op::NormalizeRows { x, norms }, value, rg, "normalize_rows")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v.exp()).collect())?;
        let rg = self.requires(x);
        self.push(Op::Exp { x }, value, rg, "exp")
    }

    /// Reverse sweep from a scalar output. Gradients accumulate into the
    /// parameter store and into leaf buffers; call repeatedly to sum the
    /// gradients of several losses.
    pub fn backward(&mut self, out: Var, store: &mut ParamStore) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(AutodiffError::NonScalarOutput { numel: self.value(out).numel() });
        }
        let Graph { nodes, leaf_grads } = self;
        let n = nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);

        for idx in (0..=out.0).rev() {
            if !nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFinite { op: "backward" });
            }
            propagate(nodes, leaf_grads, idx, &g, &mut grads, store)?;
        }
        Ok(())
    }

}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, delta: &[f64]) {
        if !nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

fn propagate(
    nodes: &[Node],
    leaf_grads: &mut HashMap<usize, Vec<f64>>,
    idx: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    store: &mut ParamStore,
) -> Result<()> {
        // Immutable view over nodes for value access while matching on op.
        macro_rules! val {
            ($v:expr) => {
                &nodes[$v.0].value
            };
        }
        match &nodes[idx].op {
            Op::Leaf { param } => {
                if let Some(pid) = *param {
                    store.accumulate_grad(pid, g);
                }
                match leaf_grads.get_mut(&idx) {
                    Some(acc) => {
                        for (a, d) in acc.iter_mut().zip(g) {
                            *a += d;
                        }
                    }
                    None => {
                        leaf_grads.insert(idx, g.to_vec());
                    }
                }
            }
            Op::Matmul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let gt = Tensor::matrix(nodes[idx].value.rows(), nodes[idx].value.cols(), g.to_vec())?;
                if nodes[a.0].requires_grad {
                    let da = match (ta, tb) {
                        (false, false) => mm(&gt, false, val!(b), true)?,
                        (false, true) => mm(&gt, false, val!(b), false)?,
                        (true, false) => mm(val!(b), false, &gt, true)?,
                        (true, true) => mm(val!(b), true, &gt, true)?,
                    };
                    accumulate(grads, &nodes, a, da.data());
                }
                if nodes[b.0].requires_grad {
                    let db = match (ta, tb) {
                        (false, false) => mm(val!(a), true, &gt, false)?,
                        (false, true) => mm(&gt, true, val!(a), false)?,
                        (true, false) => mm(val!(a), false, &gt, false)?,
                        (true, true) => mm(&gt, true, val!(a), true)?,
                    };
                    accumulate(grads, &nodes, b, db.data());
                }
            }
            Op::Add { a, b, bc } => {
                let (a, b, bc) = (*a, *b, *bc);
                if nodes[a.0].requires_grad {
                    accumulate(grads, &nodes, a, g);
                }
                if nodes[b.0].requires_grad {
                    let db = reduce_broadcast(g, nodes[a.0].value.cols(), bc);
                    accumulate(grads, &nodes, b, &db);
                }
            }
            Op::Mul { a, b, bc } => {
                let (a, b, bc) = (*a, *b, *bc);
                if nodes[a.0].requires_grad {
                    let bv = val!(b);
                    let c = nodes[a.0].value.cols();
                    let da: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gi)| {
                            gi * match bc {
                                Broadcast::Same => bv.data()[i],
                                Broadcast::Scalar => bv.item(),
                                Broadcast::RowVec => bv.data()[i % c],
                            }
                        })
                        .collect();
                    accumulate(grads, &nodes, a, &da);
                }
                if nodes[b.0].requires_grad {
                    let av = val!(a);
                    let prod: Vec<f64> = g.iter().zip(av.data()).map(|(&gi, &ai)| gi * ai).collect();
                    let db = reduce_broadcast(&prod, av.cols(), bc);
                    accumulate(grads, &nodes, b, &db);
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                if nodes[a.0].requires_grad {
                    let da: Vec<f64> = g.iter().map(|&gi| gi * c).collect();
                    accumulate(grads, &nodes, a, &da);
                }
            }
            Op::GatherRows { table, indices } => {
                let table = *table;
                if nodes[table.0].requires_grad {
                    let t = val!(table);
                    let c = t.cols();
                    let mut dt = vec![0.0; t.numel()];
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            dt[i * c + j] += g[k * c + j];
                        }
                    }
                    accumulate(grads, &nodes, table, &dt);
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let c = nodes[x.0].value.cols();
                let r = nodes[x.0].value.rows();
                let gval = val!(gain).data().to_vec();
                if nodes[gain.0].requires_grad {
                    let mut dg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                    accumulate(grads, &nodes, gain, &dg);
                }
                if nodes[bias.0].requires_grad {
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            db[j] += g[i * c + j];
                        }
                    }
                    accumulate(grads, &nodes, bias, &db);
                }
                if nodes[x.0].requires_grad {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..c {
                            let dxh = g[i * c + j] * gval[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[i * c + j];
                        }
                        mean_dxhat /= c as f64;
                        mean_dxhat_xhat /= c as f64;
                        for j in 0..c {
                            let dxh = g[i * c + j] * gval[j];
                            dx[i * c + j] =
                                inv_std[i] * (dxh - mean_dxhat - xhat[i * c + j] * mean_dxhat_xhat);
                        }
                    }
                    accumulate(grads, &nodes, x, &dx);
                }
            }
            Op::SoftmaxRows { x } => {
                let x = *x;
                if nodes[x.0].requires_grad {
                    let y = &nodes[idx].value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| g[i * c + j] * y.data()[i * c + j]).sum();
                        for j in 0..c {
                            dx[i * c + j] = y.data()[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                    accumulate(grads, &nodes, x, &dx);
                }
            }
            Op::LogSoftmaxRows { x, soft } => {
                let x = *x;
                if nodes[x.0].requires_grad {
                    let (r, c) = (nodes[idx].value.rows(), nodes[idx].value.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let gsum: f64 = (0..c).map(|j| g[i * c + j]).sum();
                        for j in 0..c {
                            dx[i * c + j] = g[i * c + j] - soft[i * c + j] * gsum;
                        }
                    }
                    accumulate(grads, &nodes, x, &dx);
                }
            }
            Op::Gelu { x } => {
                let x = *x;
                if nodes[x.0].requires_grad {
                    let xv = val!(x);
                    let dx: Vec<f64> =
                        g.iter().zip(xv.data()).map(|(&gi, &xi)| gi * gelu_grad(xi)).collect();
                    accumulate(grads, &nodes, x, &dx);
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if nodes[x.0].requires_grad {
                    let xv = val!(x);
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(xv.data())
                        .map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 })
                        .collect();
                    accumulate(grads, &nodes, x, &dx);
                }
            }
            Op::SumAll { x } => {
                let x = *x;
                if nodes[x.0].requires_grad {
                    let dx = vec![g[0]; nodes[x.0].value.numel()];
                    accumulate(grads, &nodes, x, &dx);
                }
            }
            Op::MeanAll { x } => {
                let x = *x;
                if nodes[x.0].requires_grad {
                    let n = nodes[x.0].value.numel();
                    let dx = vec![g[0] / n as f64; n];
                    accumulate(grads, &nodes, x, &dx);
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let sz = nodes[p.0].value.numel();
                    if nodes[p.0].requires_grad {
                        accumulate(grads, &nodes, p, &g[off..off + sz]);
                    }
                    off += sz;
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let r = nodes[idx].value.rows();
                let total_c = nodes[idx].value.cols();
                let mut off = 0;
                for p in parts {
                    let c = nodes[p.0].value.cols();
                    if nodes[p.0].requires_grad {
                        let mut dp = vec![0.0; r * c];
                        for i in 0..r {
                            dp[i * c..(i + 1) * c]
                                .copy_from_slice(&g[i * total_c + off..i * total_c + off + c]);
                        }
                        accumulate(grads, &nodes, p, &dp);
                    }
                    off += c;
                }
            }
            Op::SliceRows { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                if nodes[x.0].requires_grad {
                    let t = val!(x);
                    let c = t.cols();
                    let mut dx = vec![0.0; t.numel()];
                    dx[start * c..(start + len) * c].copy_from_slice(g);
                    accumulate(grads, &nodes, x, &dx);
                }
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                if nodes[x.0].requires_grad {
                    let t = val!(x);
                    let (r, c) = (t.rows(), t.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        dx[i * c + start..i * c + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    accumulate(grads, &nodes, x, &dx);
                }
            }
            Op::UnfoldRows { x, windows } => {
                let x = *x;
                let windows = windows.clone();
                if nodes[x.0].requires_grad {
                    let t = val!(x);
                    let c = t.cols();
                    let mut dx = vec![0.0; t.numel()];
                    for (wi, w) in windows.iter().enumerate() {
                        for (k, &i) in w.iter().enumerate() {
                            let src = &g[(wi * w.len() + k) * c..(wi * w.len() + k + 1) * c];
                            for j in 0..c {
                                dx[i * c + j] += src[j];
                            }
                        }
                    }
                    accumulate(grads, &nodes, x, &dx);
                }
            }
            Op::MeanPoolRows { x, group } => {
                let (x, group) = (*x, *group);
                if nodes[x.0].requires_grad {
                    let t = val!(x);
                    let (r, c) = (t.rows(), t.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let src = i / group;
                        for j in 0..c {
                            dx[i * c + j] = g[src * c + j] / group as f64;
                        }
                    }
                    accumulate(grads, &nodes, x, &dx);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let x = *x;
                let norms = norms.clone();
                if nodes[x.0].requires_grad {
                    let y = &nodes[idx].value;
                    let (r, c) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| g[i * c + j] * y.data()[i * c + j]).sum();
                        for j in 0..c {
                            dx[i * c + j] = (g[i * c + j] - y.data()[i * c + j] * dot) / norms[i];
                        }
                    }
                    accumulate(grads, &nodes, x, &dx);
                }
            }
            Op::Exp { x } => {
                let x = *x;
                if nodes[x.0].requires_grad {
                    let y = &nodes[idx].value;
                    let dx: Vec<f64> = g.iter().zip(y.data()).map(|(&gi, &yi)| gi * yi).collect();
                    accumulate(grads, &nodes, x, &dx);
                }
            }
        }
        Ok(())
}

fn reduce_broadcast(g: &[f64], cols: usize, bc: Broadcast) -> Vec<f64> {
    match bc {
        Broadcast::Same => g.to_vec(),
        Broadcast::Scalar => vec![g.iter().sum()],
        Broadcast::RowVec => {
            let mut out = vec![0.0; cols];
            for (i, &gi) in g.iter().enumerate() {
                out[i % cols] += gi;
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::fdcheck::{central_difference, max_rel_error};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        ParamStore::new()
    }

    #[test]
    fn square_gradient_at_three() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let mut s = store();
        g.backward(y, &mut s).unwrap();
        assert_eq!(g.leaf_grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 5, vec![0.3, -1.2, 2.0, 0.0, 0.7]).unwrap()).unwrap();
        let sm = g.softmax_rows(x).unwrap();
        let s = g.sum_all(sm).unwrap();
        let mut st = store();
        g.backward(s, &mut st).unwrap();
        for &v in g.leaf_grad(x).unwrap() {
            assert!(v.abs() < 1e-12, "got {v}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..30).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(5, 6, data).unwrap()).unwrap();
        let y = g.softmax_rows(x).unwrap();
        for i in 0..5 {
            let s: f64 = g.value(y).row(i).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn layer_norm_row_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 16;
        let data: Vec<f64> = (0..4 * c).map(|_| rng.gen_range(-2.0..5.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(4, c, data).unwrap()).unwrap();
        let gain = g.constant(Tensor::vector(vec![1.0; c])).unwrap();
        let bias = g.constant(Tensor::vector(vec![0.0; c])).unwrap();
        let y = g.layer_norm(x, gain, bias).unwrap();
        for i in 0..4 {
            let row = g.value(y).row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            assert!(mean.abs() <= 1e-10);
            assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn backward_requires_scalar_output() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(2, 2, vec![1.0; 4]).unwrap()).unwrap();
        let y = g.scale(x, 2.0).unwrap();
        let mut s = store();
        assert!(matches!(
            g.backward(y, &mut s),
            Err(AutodiffError::NonScalarOutput { .. })
        ));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1e308)).unwrap();
        let y = g.mul(x, x);
        assert!(matches!(y, Err(AutodiffError::NonFinite { .. })));
    }

    /// Finite-difference check for a scalar function of one input tensor.
    fn fd_check<F>(shape: Vec<usize>, seed: u64, f: F)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel: usize = shape.iter().product();
        let point: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.5..1.5)).collect();

        let eval = |vals: &[f64]| -> f64 {
            let mut g = Graph::new();
            let x = g.input(Tensor::new(shape.clone(), vals.to_vec()).unwrap()).unwrap();
            let y = f(&mut g, x);
            g.value(y).item()
        };
        let fd = central_difference(&eval, &point, 1e-5);

        let mut g = Graph::new();
        let x = g.input(Tensor::new(shape.clone(), point.clone()).unwrap()).unwrap();
        let y = f(&mut g, x);
        let mut s = store();
        g.backward(y, &mut s).unwrap();
        let ad = g.leaf_grad(x).unwrap();
        let err = max_rel_error(ad, &fd);
        assert!(err <= 1e-4, "rel error {err} for seed {seed}");
    }

    #[test]
    fn fd_check_elementwise_ops() {
        for seed in 0..3 {
            fd_check(vec![3, 4], seed, |g, x| {
                let y = g.gelu(x).unwrap();
                g.sum_all(y).unwrap()
            });
            fd_check(vec![3, 4], seed, |g, x| {
                let y = g.relu(x).unwrap();
                let z = g.mul(y, y).unwrap();
                g.sum_all(z).unwrap()
            });
            fd_check(vec![2, 3], seed, |g, x| {
                let y = g.exp(x).unwrap();
                g.mean_all(y).unwrap()
            });
        }
    }

    #[test]
    fn fd_check_softmax_and_layernorm() {
        for seed in 0..3 {
            fd_check(vec![2, 5], seed, |g, x| {
                let w = g
                    .constant(Tensor::matrix(5, 1, vec![0.3, -0.7, 1.1, 0.2, -0.4]).unwrap())
                    .unwrap();
                let y = g.softmax_rows(x).unwrap();
                let z = g.matmul(y, w, false, false).unwrap();
                g.sum_all(z).unwrap()
            });
            fd_check(vec![2, 6], seed, |g, x| {
                let gain =
                    g.constant(Tensor::vector(vec![1.1, 0.9, 1.0, 1.2, 0.8, 1.0])).unwrap();
                let bias =
                    g.constant(Tensor::vector(vec![0.1, -0.1, 0.0, 0.2, 0.0, -0.2])).unwrap();
                let y = g.layer_norm(x, gain, bias).unwrap();
                let z = g.mul(y, y).unwrap();
                g.sum_all(z).unwrap()
            });
            fd_check(vec![2, 4], seed, |g, x| {
                let y = g.log_softmax_rows(x).unwrap();
                let m = g
                    .constant(Tensor::matrix(2, 4, vec![0.2, 0.5, 0.1, 0.2, 0.4, 0.1, 0.3, 0.2]).unwrap())
                    .unwrap();
                let z = g.mul(y, m).unwrap();
                g.sum_all(z).unwrap()
            });
        }
    }

    #[test]
    fn fd_check_matmul_variants() {
        for seed in 0..2 {
            for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
                fd_check(vec![3, 3], seed, move |g, x| {
                    let mut rng = ChaCha8Rng::seed_from_u64(99);
                    let w = g
                        .constant(
                            Tensor::matrix(3, 3, (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect())
                                .unwrap(),
                        )
                        .unwrap();
                    let y = g.matmul(x, w, ta, tb).unwrap();
                    let z = g.mul(y, y).unwrap();
                    g.sum_all(z).unwrap()
                });
            }
        }
    }

    #[test]
    fn fd_check_structural_ops() {
        for seed in 0..2 {
            fd_check(vec![4, 3], seed, |g, x| {
                let a = g.slice_rows(x, 0, 2).unwrap();
                let b = g.slice_rows(x, 2, 2).unwrap();
                let cat = g.concat_rows(&[b, a]).unwrap();
                let sc = g.slice_cols(cat, 1, 2).unwrap();
                let z = g.mul(sc, sc).unwrap();
                g.sum_all(z).unwrap()
            });
            fd_check(vec![6, 2], seed, |g, x| {
                let u = g.unfold_rows(x, &[vec![0, 1, 2], vec![2, 3, 4], vec![3, 4, 5]]).unwrap();
                let p = g.mean_pool_rows(u, 3).unwrap();
                let z = g.mul(p, p).unwrap();
                g.sum_all(z).unwrap()
            });
            fd_check(vec![3, 4], seed, |g, x| {
                let y = g.normalize_rows(x).unwrap();
                let w = g
                    .constant(Tensor::matrix(3, 4, vec![0.3; 12]).unwrap())
                    .unwrap();
                let z = g.mul(y, w).unwrap();
                g.sum_all(z).unwrap()
            });
        }
    }

    #[test]
    fn fd_check_gather_rows() {
        for seed in 0..2 {
            fd_check(vec![5, 3], seed, |g, x| {
                let e = g.gather_rows(x, &[1, 1, 4, 0]).unwrap();
                let z = g.mul(e, e).unwrap();
                g.sum_all(z).unwrap()
            });
        }
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let mut s = store();
        let id = s.register("w", Tensor::scalar(2.0));
        let w = g.param(&s, id).unwrap();
        let y = g.mul(w, w).unwrap();
        g.backward(y, &mut s).unwrap();
        g.backward(y, &mut s).unwrap();
        assert_eq!(s.grad(id), &[8.0]);
        s.zero_grads();
        g.backward(y, &mut s).unwrap();
        assert_eq!(s.grad(id), &[4.0]);
    }
}
