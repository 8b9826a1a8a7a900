use std::borrow::Cow;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, dot, log_sum_exp, matmul_acc, matmul_at_acc, matmul_bt_acc, softmax_row};
use super::{Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether the tape keeps what `backward` needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Records every primitive; dropout is active.
    Train,
    /// Records every primitive; dropout is the identity. Used for gradient
    /// checks and for losses evaluated without parameter updates.
    Eval,
    /// Forward values only; `backward` is unavailable.
    Inference,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Vec<f64>),
    Affine(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    RowNormalize(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    SoftCrossEntropy { probs: Var, target: Vec<f64>, floor: f64 },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf | Param(_) => vec![],
            MatMul(a, b) | MatMulBt(a, b) | Add(a, b) | AddRow(a, b) | Sub(a, b) | Mul(a, b) => vec![*a, *b],
            MulConst(a, _) | Affine(a, _) | Softmax(a) | Gelu(a) | RowNormalize(a) | Sum(a) | Mean(a) => vec![*a],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Embedding { table, .. } => vec![*table],
            Dropout { x, .. } | SliceRows { x, .. } | SliceCols { x, .. } => vec![*x],
            ConcatRows(v) | ConcatCols(v) => v.clone(),
            CrossEntropy { logits, .. } => vec![*logits],
            SoftCrossEntropy { probs, .. } => vec![*probs],
        }
    }
}

struct Node<'p> {
    value: Cow<'p, [f64]>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], one slot per registered
/// parameter. Slots whose parameter does not reach the loss hold zeros.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub slots: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &[Tensor]) -> Self {
        Gradients { slots: params.iter().map(|p| vec![0.0; p.len()]).collect() }
    }

    /// Element-wise `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for s in &mut self.slots {
            for x in s.iter_mut() {
                *x *= c;
            }
        }
    }
}

/// Ordered record of primitive applications over 2-D row-major values.
///
/// Vectors are `1×n`, scalars `1×1`. Records are appended in creation order,
/// so every input of a record precedes it and the reverse sweep in
/// [`Tape::backward`] visits each record exactly once.
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    mode: Mode,
    rng: Option<ChaCha8Rng>,
    param_slots: usize,
}

impl<'p> Tape<'p> {
    pub fn new(mode: Mode) -> Self {
        Tape { nodes: Vec::new(), mode, rng: None, param_slots: 0 }
    }

    /// Training-mode tape whose dropout masks come from `rng`.
    pub fn with_rng(mode: Mode, rng: ChaCha8Rng) -> Self {
        Tape { nodes: Vec::new(), mode, rng: Some(rng), param_slots: 0 }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1` record.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn recording(&self) -> bool {
        self.mode != Mode::Inference
    }

    fn push(&mut self, op_name: &'static str, value: Cow<'p, [f64]>, rows: usize, cols: usize, op: Op) -> Result<Var, TensorError> {
        debug_assert_eq!(value.len(), rows * cols);
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let is_param = matches!(op, Op::Param(_));
        let needs_grad = self.recording() && (is_param || op.inputs().iter().any(|v| self.nodes[v.0].needs_grad));
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, rows, cols, needs_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Result<Var, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape { op: "constant", lhs: vec![data.len()], rhs: vec![rows, cols] });
        }
        self.push("constant", Cow::Owned(data), rows, cols, Op::Leaf)
    }

    /// Borrowed constant input (no gradient).
    pub fn constant_ref(&mut self, data: &'p [f64], rows: usize, cols: usize) -> Result<Var, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::Shape { op: "constant", lhs: vec![data.len()], rhs: vec![rows, cols] });
        }
        self.push("constant", Cow::Borrowed(data), rows, cols, Op::Leaf)
    }

    /// Registers a parameter. Its gradient lands in the slot with the same
    /// index as the registration order.
    pub fn param(&mut self, t: &'p Tensor) -> Result<Var, TensorError> {
        let (rows, cols) = t.as_matrix();
        let slot = self.param_slots;
        self.param_slots += 1;
        self.push("param", Cow::Borrowed(t.data()), rows, cols, Op::Param(slot))
    }

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape { op, lhs: vec![sa.0, sa.1], rhs: vec![sb.0, sb.1] });
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ((m, k), (k2, n)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(TensorError::Shape { op: "matmul", lhs: vec![m, k], rhs: vec![k2, n] });
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        self.push("matmul", Cow::Owned(out), m, n, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ((m, k), (n, k2)) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(TensorError::Shape { op: "matmul_bt", lhs: vec![m, k], rhs: vec![n, k2] });
        }
        let out = kernels::matmul_bt(self.value(a), self.value(b), m, k, n);
        self.push("matmul_bt", Cow::Owned(out), m, n, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.check_same("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push("add", Cow::Owned(out), r, c, Op::Add(a, b))
    }

    /// Adds the `1×n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ((r, c), (br, bc)) = (self.shape(a), self.shape(b));
        if br != 1 || bc != c {
            return Err(TensorError::Shape { op: "add_row", lhs: vec![r, c], rhs: vec![br, bc] });
        }
        let bv = self.value(b);
        let out = self.value(a).chunks(c).flat_map(|row| row.iter().zip(bv).map(|(x, y)| x + y)).collect();
        self.push("add_row", Cow::Owned(out), r, c, Op::AddRow(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.check_same("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        self.push("sub", Cow::Owned(out), r, c, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.check_same("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push("mul", Cow::Owned(out), r, c, Op::Mul(a, b))
    }

    /// Element-wise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, k: Vec<f64>) -> Result<Var, TensorError> {
        let (r, c) = self.shape(a);
        if k.len() != r * c {
            return Err(TensorError::Shape { op: "mul_const", lhs: vec![r, c], rhs: vec![k.len()] });
        }
        let out = self.value(a).iter().zip(&k).map(|(x, y)| x * y).collect();
        self.push("mul_const", Cow::Owned(out), r, c, Op::MulConst(a, k))
    }

    /// `scale·a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, TensorError> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|x| scale * x + shift).collect();
        self.push("affine", Cow::Owned(out), r, c, Op::Affine(a, scale))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.affine(a, c, 0.0)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.shape(a);
        let mut out = vec![0.0; r * c];
        for (x, o) in self.value(a).chunks(c).zip(out.chunks_mut(c)) {
            softmax_row(x, o);
        }
        self.push("softmax", Cow::Owned(out), r, c, Op::Softmax(a))
    }

    /// Row-wise layer normalisation with learned `1×c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != (1, c) {
                let (pr, pc) = self.shape(p);
                return Err(TensorError::Shape { op: "layer_norm", lhs: vec![r, c], rhs: vec![pr, pc] });
            }
        }
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for (i, row) in self.value(x).chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm { x, gamma, beta, xhat, inv_std };
        self.push("layer_norm", Cow::Owned(out), r, c, op)
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().map(|&x| x * kernels::normal_cdf(x)).collect();
        self.push("gelu", Cow::Owned(out), r, c, Op::Gelu(a))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let (rows, d) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Shape { op: "embedding", lhs: vec![rows, d], rhs: vec![bad] });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let op = Op::Embedding { table, ids: ids.to_vec() };
        self.push("embedding", Cow::Owned(out), ids.len(), d, op)
    }

    /// Inverted dropout: active only in [`Mode::Train`].
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, TensorError> {
        if self.mode != Mode::Train || p <= 0.0 {
            return Ok(x);
        }
        let (r, c) = self.shape(x);
        let keep = 1.0 - p;
        let rng = self.rng.as_mut().ok_or(TensorError::Contract("dropout in train mode needs a generator"))?;
        let mask: Vec<f64> = (0..r * c).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.push("dropout", Cow::Owned(out), r, c, Op::Dropout { x, mask })
    }

    /// Stacks values with equal column counts along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let c = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                return Err(TensorError::Shape { op: "concat_rows", lhs: vec![rows, c], rhs: vec![pr, pc] });
            }
            out.extend_from_slice(self.value(p));
            rows += pr;
        }
        self.push("concat_rows", Cow::Owned(out), rows, c, Op::ConcatRows(parts.to_vec()))
    }

    /// Joins values with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let r = self.shape(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pr != r {
                return Err(TensorError::Shape { op: "concat_cols", lhs: vec![r, cols], rhs: vec![pr, pc] });
            }
            cols += pc;
        }
        let mut out = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let pc = self.shape(p).1;
                out.extend_from_slice(&self.value(p)[i * pc..(i + 1) * pc]);
            }
        }
        self.push("concat_cols", Cow::Owned(out), r, cols, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if start + len > r || len == 0 {
            return Err(TensorError::Shape { op: "slice_rows", lhs: vec![r, c], rhs: vec![start, len] });
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", Cow::Owned(out), len, c, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.shape(x);
        if start + len > c || len == 0 {
            return Err(TensorError::Shape { op: "slice_cols", lhs: vec![r, c], rhs: vec![start, len] });
        }
        let out = self.value(x).chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        self.push("slice_cols", Cow::Owned(out), r, len, Op::SliceCols { x, start })
    }

    /// Divides each row by its sum. Rows must have positive sums.
    pub fn row_normalize(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            let s: f64 = row.iter().sum();
            if s <= 0.0 || !s.is_finite() {
                return Err(TensorError::NonFinite { op: "row_normalize" });
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        self.push("row_normalize", Cow::Owned(out), r, c, Op::RowNormalize(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).iter().sum();
        self.push("sum", Cow::Owned(vec![s]), 1, 1, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Cow::Owned(vec![s]), 1, 1, Op::Mean(a))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.shape(logits);
        if targets.len() != r || targets.iter().any(|&t| t >= c) {
            return Err(TensorError::Shape { op: "cross_entropy", lhs: vec![r, c], rhs: vec![targets.len()] });
        }
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for (i, row) in self.value(logits).chunks(c).enumerate() {
            total += log_sum_exp(row) - row[targets[i]];
            softmax_row(row, &mut probs[i * c..(i + 1) * c]);
        }
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        self.push("cross_entropy", Cow::Owned(vec![total / r as f64]), 1, 1, op)
    }

    /// Mean over rows of `-Σₖ targetₖ · log max(probsₖ, floor)`.
    pub fn soft_cross_entropy(&mut self, probs: Var, target: Vec<f64>, floor: f64) -> Result<Var, TensorError> {
        let (r, c) = self.shape(probs);
        if target.len() != r * c {
            return Err(TensorError::Shape { op: "soft_cross_entropy", lhs: vec![r, c], rhs: vec![target.len()] });
        }
        let total: f64 = self
            .value(probs)
            .iter()
            .zip(&target)
            .filter(|(_, &t)| t != 0.0)
            .map(|(&q, &t)| -t * q.max(floor).ln())
            .sum();
        let op = Op::SoftCrossEntropy { probs, target, floor };
        self.push("soft_cross_entropy", Cow::Owned(vec![total / r as f64]), 1, 1, op)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.mode == Mode::Inference {
            return Err(TensorError::Contract("backward on an inference tape"));
        }
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(TensorError::NotScalar { shape: vec![r, c] });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = vec![Vec::new(); self.param_slots];
        for node in &self.nodes {
            if let Op::Param(s) = node.op {
                out[s] = vec![0.0; node.value.len()];
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            for inp in node.op.inputs() {
                if inp.0 >= idx {
                    return Err(TensorError::Internal("tape record refers forward"));
                }
            }
            self.backprop_node(node, &g, &mut grads, &mut out);
        }
        Ok(Gradients { slots: out })
    }

    fn backprop_node(&self, node: &Node<'p>, g: &[f64], grads: &mut [Option<Vec<f64>>], params: &mut [Vec<f64>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };
        let (r, c) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::Param(s) => {
                for (a, b) in params[*s].iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                let n = c;
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |buf| matmul_bt_acc(g, bv, buf, m, n, k));
                acc(*b, &mut |buf| matmul_at_acc(av, g, buf, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
                let n = c;
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |buf| matmul_acc(g, bv, buf, m, n, k));
                acc(*b, &mut |buf| matmul_at_acc(g, av, buf, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| add_into(buf, g));
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| {
                    for row in g.chunks(c) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |buf| add_into(buf, g));
                acc(*b, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * av[i];
                    }
                });
            }
            Op::MulConst(a, k) => acc(*a, &mut |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * k[i];
                }
            }),
            Op::Affine(a, s) => acc(*a, &mut |buf| buf.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::Softmax(a) => {
                let y = &node.value;
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        let (yr, gr) = (&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                        let d = dot(yr, gr);
                        for j in 0..c {
                            buf[i * c + j] += yr[j] * (gr[j] - d);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let gv = &nodes[gamma.0].value;
                acc(*x, &mut |buf| {
                    for i in 0..r {
                        let xh = &xhat[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let mut mean_dy = 0.0;
                        let mut mean_dy_xh = 0.0;
                        for j in 0..c {
                            let dy = gr[j] * gv[j];
                            mean_dy += dy;
                            mean_dy_xh += dy * xh[j];
                        }
                        mean_dy /= c as f64;
                        mean_dy_xh /= c as f64;
                        for j in 0..c {
                            let dy = gr[j] * gv[j];
                            buf[i * c + j] += inv_std[i] * (dy - mean_dy - xh[j] * mean_dy_xh);
                        }
                    }
                });
                acc(*gamma, &mut |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                acc(*beta, &mut |buf| {
                    for row in g.chunks(c) {
                        add_into(buf, row);
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = &nodes[a.0].value;
                acc(*a, &mut |buf| {
                    for i in 0..buf.len() {
                        let x = xv[i];
                        buf[i] += g[i] * (kernels::normal_cdf(x) + x * kernels::normal_pdf(x));
                    }
                });
            }
            Op::Embedding { table, ids } => acc(*table, &mut |buf| {
                for (row, &id) in ids.iter().enumerate() {
                    add_into(&mut buf[id * c..(id + 1) * c], &g[row * c..(row + 1) * c]);
                }
            }),
            Op::Dropout { x, mask } => acc(*x, &mut |buf| {
                for i in 0..buf.len() {
                    buf[i] += g[i] * mask[i];
                }
            }),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |buf| add_into(buf, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = nodes[p.0].cols;
                    acc(*p, &mut |buf| {
                        for i in 0..r {
                            add_into(&mut buf[i * pc..(i + 1) * pc], &g[i * c + offset..i * c + offset + pc]);
                        }
                    });
                    offset += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let xc = nodes[x.0].cols;
                acc(*x, &mut |buf| add_into(&mut buf[start * xc..(start + r) * xc], g));
            }
            Op::SliceCols { x, start } => {
                let xc = nodes[x.0].cols;
                acc(*x, &mut |buf| {
                    for i in 0..r {
                        add_into(&mut buf[i * xc + start..i * xc + start + c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::RowNormalize(a) => {
                let (xv, y) = (&nodes[a.0].value, &node.value);
                acc(*a, &mut |buf| {
                    for i in 0..r {
                        let s: f64 = xv[i * c..(i + 1) * c].iter().sum();
                        let d = dot(&y[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                        for j in 0..c {
                            buf[i * c + j] += (g[i * c + j] - d) / s;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |buf| buf.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |buf| buf.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let (lr, lc) = (nodes[logits.0].rows, nodes[logits.0].cols);
                let scale = g[0] / lr as f64;
                acc(*logits, &mut |buf| {
                    for i in 0..lr {
                        for j in 0..lc {
                            let onehot = if targets[i] == j { 1.0 } else { 0.0 };
                            buf[i * lc + j] += scale * (probs[i * lc + j] - onehot);
                        }
                    }
                });
            }
            Op::SoftCrossEntropy { probs, target, floor } => {
                let pr = nodes[probs.0].rows;
                let qv = &nodes[probs.0].value;
                let scale = g[0] / pr as f64;
                acc(*probs, &mut |buf| {
                    for i in 0..buf.len() {
                        if target[i] != 0.0 && qv[i] > *floor {
                            buf[i] -= scale * target[i] / qv[i];
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
