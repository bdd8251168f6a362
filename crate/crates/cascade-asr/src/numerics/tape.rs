//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Every primitive op pushes one node holding the forward value and
//! the ids of its operands.  Because nodes are appended in evaluation
//! order, the tape is already topologically sorted: `backward` walks
//! it once in reverse, accumulating adjoints additively so fan-out
//! just works.
//!
//! Finite-value policy: NaN and +inf are contract violations
//! everywhere.  -inf is a legal log-probability of zero and is
//! accepted by the log-space ops (`add`, `scale`, `sum`, `index`,
//! `logaddexp`) and by pure data movement; the remaining ops insist on
//! fully finite values so silent -inf leaks out of log space are
//! caught at the op that receives them.

use super::scalar;
use super::tensor::{matmul, Tensor};
use crate::{Error, Result};

/// Handle to a node on the tape.  Shape is cached for ergonomic
/// checks; the tape is append-only so it can never go stale.
#[derive(Debug, Clone, Copy)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn id(&self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    MulBias(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Relu(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Sum(usize),
    Index(usize, usize),
    LogAddExp(usize, usize),
    GatherRows(usize, Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    PadCols(usize),
    Reshape(usize),
    Detach,
    NormalizeRows(usize),
    LayerNormRows(usize, f64),
    OuterAddRows(usize, usize),
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    needs_grad: bool,
    op: Op,
}

/// Append-only record of a differentiable computation.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Adjoints produced by one backward pass, indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of `v`, or None if no gradient flowed to it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Adjoint of `v` as an owned buffer, zeros if none flowed.
    pub fn get_or_zeros(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; v.numel()],
        }
    }
}

fn check_values(data: &[f64], allow_neg_inf: bool, what: &str) -> Result<()> {
    for &x in data {
        if x.is_nan() || x == f64::INFINITY || (!allow_neg_inf && x == f64::NEG_INFINITY) {
            return Err(Error::NonFinite(format!("{what} produced {x}")));
        }
    }
    Ok(())
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        let id = self.nodes.len();
        self.nodes.push(Node { rows, cols, data, needs_grad, op });
        Var { id, rows, cols }
    }

    fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.id].needs_grad
    }

    /// Differentiable input (a parameter or probe point).
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        check_values(t.data(), false, "leaf")?;
        Ok(self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Leaf, true))
    }

    /// Non-differentiable input.  -inf entries are allowed so log-space
    /// recursions can seed impossible states.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        check_values(t.data(), true, "constant")?;
        Ok(self.push(t.rows(), t.cols(), t.data().to_vec(), Op::Const, false))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<Var> {
        self.constant(&Tensor::scalar(v))
    }

    /// Forward value of `v` as a fresh tensor.
    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v.id);
        Tensor::new(n.rows, n.cols, n.data.clone()).expect("tape node shape is consistent")
    }

    /// Borrow the forward buffer of `v`.
    pub fn data(&self, v: Var) -> &[f64] {
        &self.node(v.id).data
    }

    /// Forward value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(v.numel(), 1);
        self.node(v.id).data[0]
    }

    fn same_shape(a: Var, b: Var, what: &str) -> Result<()> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(Error::Shape(format!(
                "{what}: {}x{} vs {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        Ok(())
    }

    /// Elementwise sum.  Log-space tolerant: -inf + x = -inf.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        Self::same_shape(a, b, "add")?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        check_values(&data, true, "add")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(a.rows, a.cols, data, Op::Add(a.id, b.id), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        Self::same_shape(a, b, "sub")?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        check_values(&data, false, "sub")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(a.rows, a.cols, data, Op::Sub(a.id, b.id), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        Self::same_shape(a, b, "mul")?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        check_values(&data, false, "mul")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(a.rows, a.cols, data, Op::Mul(a.id, b.id), ng))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.data(a).iter().map(|x| -x).collect();
        check_values(&data, false, "neg")?;
        let ng = self.needs(a);
        Ok(self.push(a.rows, a.cols, data, Op::Neg(a.id), ng))
    }

    /// Multiply by a finite constant.  Log-space tolerant for c > 0.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite(format!("scale factor {c}")));
        }
        let data: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        check_values(&data, true, "scale")?;
        let ng = self.needs(a);
        Ok(self.push(a.rows, a.cols, data, Op::Scale(a.id, c), ng))
    }

    /// Add a 1xC bias row to every row of an RxC matrix.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        if b.rows != 1 || b.cols != a.cols {
            return Err(Error::Shape(format!(
                "add_bias: bias {}x{} against {}x{}",
                b.rows, b.cols, a.rows, a.cols
            )));
        }
        let bias = self.data(b).to_vec();
        let mut data = self.data(a).to_vec();
        for r in 0..a.rows {
            for c in 0..a.cols {
                data[r * a.cols + c] += bias[c];
            }
        }
        check_values(&data, false, "add_bias")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(a.rows, a.cols, data, Op::AddBias(a.id, b.id), ng))
    }

    /// Multiply every row of an RxC matrix elementwise by a 1xC row.
    pub fn mul_bias(&mut self, a: Var, v: Var) -> Result<Var> {
        if v.rows != 1 || v.cols != a.cols {
            return Err(Error::Shape(format!(
                "mul_bias: vector {}x{} against {}x{}",
                v.rows, v.cols, a.rows, a.cols
            )));
        }
        let w = self.data(v).to_vec();
        let mut data = self.data(a).to_vec();
        for r in 0..a.rows {
            for c in 0..a.cols {
                data[r * a.cols + c] *= w[c];
            }
        }
        check_values(&data, false, "mul_bias")?;
        let ng = self.needs(a) || self.needs(v);
        Ok(self.push(a.rows, a.cols, data, Op::MulBias(a.id, v.id), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} * {}x{}",
                a.rows, a.cols, b.rows, b.cols
            )));
        }
        let data = matmul(self.data(a), a.rows, a.cols, self.data(b), b.cols);
        check_values(&data, false, "matmul")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(a.rows, b.cols, data, Op::MatMul(a.id, b.id), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let src = self.data(a);
        let mut data = vec![0.0; src.len()];
        for r in 0..a.rows {
            for c in 0..a.cols {
                data[c * a.rows + r] = src[r * a.cols + c];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(a.cols, a.rows, data, Op::Transpose(a.id), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        check_values(self.data(a), false, "tanh input")?;
        let data: Vec<f64> = self.data(a).iter().map(|x| x.tanh()).collect();
        let ng = self.needs(a);
        Ok(self.push(a.rows, a.cols, data, Op::Tanh(a.id), ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        check_values(self.data(a), false, "relu input")?;
        let data: Vec<f64> = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let ng = self.needs(a);
        Ok(self.push(a.rows, a.cols, data, Op::Relu(a.id), ng))
    }

    /// Row-wise softmax.  Inputs must be finite; large negative mask
    /// values (e.g. -1e30) are fine and underflow to exactly zero.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        check_values(self.data(a), false, "softmax input")?;
        let mut data = Vec::with_capacity(a.numel());
        for r in 0..a.rows {
            let row = &self.data(a)[r * a.cols..(r + 1) * a.cols];
            let ls = scalar::log_softmax(row)?;
            data.extend(ls.iter().map(|x| x.exp()));
        }
        check_values(&data, false, "softmax")?;
        let ng = self.needs(a);
        Ok(self.push(a.rows, a.cols, data, Op::SoftmaxRows(a.id), ng))
    }

    /// Row-wise log softmax.  Outputs may be extremely negative but
    /// stay finite for finite inputs.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        check_values(self.data(a), false, "log_softmax input")?;
        let mut data = Vec::with_capacity(a.numel());
        for r in 0..a.rows {
            let row = &self.data(a)[r * a.cols..(r + 1) * a.cols];
            data.extend(scalar::log_softmax(row)?);
        }
        check_values(&data, true, "log_softmax")?;
        let ng = self.needs(a);
        Ok(self.push(a.rows, a.cols, data, Op::LogSoftmaxRows(a.id), ng))
    }

    /// Sum of all entries, a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.data(a).iter().sum();
        check_values(&[s], true, "sum")?;
        let ng = self.needs(a);
        Ok(self.push(1, 1, vec![s], Op::Sum(a.id), ng))
    }

    /// Extract the (r, c) entry as a 1x1 node.
    pub fn index(&mut self, a: Var, r: usize, c: usize) -> Result<Var> {
        if r >= a.rows || c >= a.cols {
            return Err(Error::Shape(format!(
                "index ({r},{c}) out of {}x{}",
                a.rows, a.cols
            )));
        }
        let flat = r * a.cols + c;
        let v = self.data(a)[flat];
        check_values(&[v], true, "index")?;
        let ng = self.needs(a);
        Ok(self.push(1, 1, vec![v], Op::Index(a.id, flat), ng))
    }

    /// Elementwise log(exp(a) + exp(b)) with -inf absorbed.
    pub fn logaddexp(&mut self, a: Var, b: Var) -> Result<Var> {
        Self::same_shape(a, b, "logaddexp")?;
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| scalar::logaddexp(x, y))
            .collect();
        check_values(&data, true, "logaddexp")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(a.rows, a.cols, data, Op::LogAddExp(a.id, b.id), ng))
    }

    /// Rows of `a` at `idx`, in order; duplicates allowed (their
    /// adjoints accumulate).  This is also the embedding lookup.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        for &i in idx {
            if i >= a.rows {
                return Err(Error::Shape(format!("gather row {i} out of {}", a.rows)));
            }
        }
        let mut data = Vec::with_capacity(idx.len() * a.cols);
        for &i in idx {
            data.extend_from_slice(&self.data(a)[i * a.cols..(i + 1) * a.cols]);
        }
        let ng = self.needs(a);
        Ok(self.push(idx.len(), a.cols, data, Op::GatherRows(a.id, idx.to_vec()), ng))
    }

    /// Rows r0..r1 (exclusive) of `a`.
    pub fn slice_rows(&mut self, a: Var, r0: usize, r1: usize) -> Result<Var> {
        if r0 >= r1 || r1 > a.rows {
            return Err(Error::Shape(format!(
                "slice_rows {r0}..{r1} out of {}",
                a.rows
            )));
        }
        let data = self.data(a)[r0 * a.cols..r1 * a.cols].to_vec();
        let ng = self.needs(a);
        Ok(self.push(r1 - r0, a.cols, data, Op::SliceRows(a.id, r0), ng))
    }

    /// Columns c0..c1 (exclusive) of `a`.
    pub fn slice_cols(&mut self, a: Var, c0: usize, c1: usize) -> Result<Var> {
        if c0 >= c1 || c1 > a.cols {
            return Err(Error::Shape(format!(
                "slice_cols {c0}..{c1} out of {}",
                a.cols
            )));
        }
        let w = c1 - c0;
        let mut data = Vec::with_capacity(a.rows * w);
        for r in 0..a.rows {
            data.extend_from_slice(&self.data(a)[r * a.cols + c0..r * a.cols + c1]);
        }
        let ng = self.needs(a);
        Ok(self.push(a.rows, w, data, Op::SliceCols(a.id, c0), ng))
    }

    /// Stack matrices with equal widths on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of nothing".into()));
        }
        let cols = parts[0].cols;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.cols != cols {
                return Err(Error::Shape(format!(
                    "concat_rows: width {} vs {}",
                    p.cols, cols
                )));
            }
            rows += p.rows;
            data.extend_from_slice(self.data(*p));
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        let ids = parts.iter().map(|p| p.id).collect();
        Ok(self.push(rows, cols, data, Op::ConcatRows(ids), ng))
    }

    /// Widen with zero columns on the right (used to pad ragged
    /// sequences to a common length before similarity flattening).
    pub fn pad_cols(&mut self, a: Var, new_cols: usize) -> Result<Var> {
        if new_cols < a.cols {
            return Err(Error::Shape(format!(
                "pad_cols to {new_cols} below current {}",
                a.cols
            )));
        }
        let mut data = vec![0.0; a.rows * new_cols];
        for r in 0..a.rows {
            data[r * new_cols..r * new_cols + a.cols]
                .copy_from_slice(&self.data(a)[r * a.cols..(r + 1) * a.cols]);
        }
        let ng = self.needs(a);
        Ok(self.push(a.rows, new_cols, data, Op::PadCols(a.id), ng))
    }

    /// Reinterpret the buffer with a new shape; element count must match.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        if rows * cols != a.numel() {
            return Err(Error::Shape(format!(
                "reshape {}x{} to {rows}x{cols}",
                a.rows, a.cols
            )));
        }
        let data = self.data(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(rows, cols, data, Op::Reshape(a.id), ng))
    }

    /// Forward the value but stop gradients.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).to_vec();
        Ok(self.push(a.rows, a.cols, data, Op::Detach, false))
    }

    /// Scale each row to unit L2 norm; all-zero rows stay zero.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        check_values(self.data(a), false, "normalize_rows input")?;
        let mut data = self.data(a).to_vec();
        for r in 0..a.rows {
            let row = &mut data[r * a.cols..(r + 1) * a.cols];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in row.iter_mut() {
                    *x /= norm;
                }
            }
        }
        check_values(&data, false, "normalize_rows")?;
        let ng = self.needs(a);
        Ok(self.push(a.rows, a.cols, data, Op::NormalizeRows(a.id), ng))
    }

    /// Standardize each row to zero mean, unit variance.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        check_values(self.data(a), false, "layer_norm input")?;
        if a.cols < 1 {
            return Err(Error::Shape("layer_norm on zero-width rows".into()));
        }
        let n = a.cols as f64;
        let mut data = self.data(a).to_vec();
        for r in 0..a.rows {
            let row = &mut data[r * a.cols..(r + 1) * a.cols];
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            let sigma = (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mu) / sigma;
            }
        }
        check_values(&data, false, "layer_norm")?;
        let ng = self.needs(a);
        Ok(self.push(a.rows, a.cols, data, Op::LayerNormRows(a.id, eps), ng))
    }

    /// All pairwise row sums: out[i*Rb + j] = a[i] + b[j].  This is the
    /// broadcast behind the transducer joint lattice.
    pub fn outer_add_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        if a.cols != b.cols {
            return Err(Error::Shape(format!(
                "outer_add_rows: widths {} vs {}",
                a.cols, b.cols
            )));
        }
        let mut data = Vec::with_capacity(a.rows * b.rows * a.cols);
        for i in 0..a.rows {
            let ra = &self.data(a)[i * a.cols..(i + 1) * a.cols];
            for j in 0..b.rows {
                let rb = &self.data(b)[j * b.cols..(j + 1) * b.cols];
                data.extend(ra.iter().zip(rb).map(|(x, y)| x + y));
            }
        }
        check_values(&data, false, "outer_add_rows")?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(a.rows * b.rows, a.cols, data, Op::OuterAddRows(a.id, b.id), ng))
    }

    /// Mean of all entries, a 1x1 node.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let s = self.sum(a)?;
        self.scale(s, 1.0 / a.numel() as f64)
    }

    /// Reverse pass from a scalar root.  Adjoints of every node that
    /// gradient flowed to are retained, so tests can inspect
    /// intermediate sensitivities as well as leaves.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if root.numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar root, got {}x{}",
                root.rows, root.cols
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.node(root.id).needs_grad {
            return Ok(Gradients { grads });
        }
        grads[root.id] = Some(vec![1.0]);

        // Exact reverse of the recording order = reverse topological.
        for id in (0..=root.id).rev() {
            let node = self.node(id);
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].clone() else { continue };
            self.accumulate(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], id: usize, contrib: &[f64]) {
        if !self.node(id).needs_grad {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| vec![0.0; contrib.len()]);
        for (s, c) in slot.iter_mut().zip(contrib) {
            *s += c;
        }
    }

    fn accumulate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = self.node(id);
        match &node.op {
            Op::Leaf | Op::Const | Op::Detach => {}
            Op::Add(a, b) => {
                self.add_into(grads, *a, g);
                self.add_into(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.add_into(grads, *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.add_into(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g.iter().zip(&self.node(*b).data).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.iter().zip(&self.node(*a).data).map(|(x, y)| x * y).collect();
                self.add_into(grads, *a, &ga);
                self.add_into(grads, *b, &gb);
            }
            Op::Neg(a) => {
                let ga: Vec<f64> = g.iter().map(|x| -x).collect();
                self.add_into(grads, *a, &ga);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                self.add_into(grads, *a, &ga);
            }
            Op::AddBias(a, b) => {
                self.add_into(grads, *a, g);
                let cols = node.cols;
                let mut gb = vec![0.0; cols];
                for r in 0..node.rows {
                    for c in 0..cols {
                        gb[c] += g[r * cols + c];
                    }
                }
                self.add_into(grads, *b, &gb);
            }
            Op::MulBias(a, v) => {
                let cols = node.cols;
                let w = &self.node(*v).data;
                let x = &self.node(*a).data;
                let mut ga = vec![0.0; x.len()];
                let mut gv = vec![0.0; cols];
                for r in 0..node.rows {
                    for c in 0..cols {
                        let i = r * cols + c;
                        ga[i] = g[i] * w[c];
                        gv[c] += g[i] * x[i];
                    }
                }
                self.add_into(grads, *a, &ga);
                self.add_into(grads, *v, &gv);
            }
            Op::MatMul(a, b) => {
                let na = self.node(*a);
                let nb = self.node(*b);
                // gA = G * B^T, gB = A^T * G.
                let mut bt = vec![0.0; nb.data.len()];
                for r in 0..nb.rows {
                    for c in 0..nb.cols {
                        bt[c * nb.rows + r] = nb.data[r * nb.cols + c];
                    }
                }
                let ga = matmul(g, na.rows, nb.cols, &bt, nb.rows);
                let mut at = vec![0.0; na.data.len()];
                for r in 0..na.rows {
                    for c in 0..na.cols {
                        at[c * na.rows + r] = na.data[r * na.cols + c];
                    }
                }
                let gb = matmul(&at, na.cols, na.rows, g, nb.cols);
                self.add_into(grads, *a, &ga);
                self.add_into(grads, *b, &gb);
            }
            Op::Transpose(a) => {
                let na = self.node(*a);
                let mut ga = vec![0.0; na.data.len()];
                for r in 0..node.rows {
                    for c in 0..node.cols {
                        ga[c * na.cols + r] = g[r * node.cols + c];
                    }
                }
                self.add_into(grads, *a, &ga);
            }
            Op::Tanh(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(&node.data)
                    .map(|(gi, y)| gi * (1.0 - y * y))
                    .collect();
                self.add_into(grads, *a, &ga);
            }
            Op::Relu(a) => {
                let x = &self.node(*a).data;
                let ga: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.add_into(grads, *a, &ga);
            }
            Op::SoftmaxRows(a) => {
                let cols = node.cols;
                let mut ga = vec![0.0; node.data.len()];
                for r in 0..node.rows {
                    let y = &node.data[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(yi, gi)| yi * gi).sum();
                    for c in 0..cols {
                        ga[r * cols + c] = y[c] * (gr[c] - dot);
                    }
                }
                self.add_into(grads, *a, &ga);
            }
            Op::LogSoftmaxRows(a) => {
                let cols = node.cols;
                let mut ga = vec![0.0; node.data.len()];
                for r in 0..node.rows {
                    let y = &node.data[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..cols {
                        ga[r * cols + c] = gr[c] - y[c].exp() * gsum;
                    }
                }
                self.add_into(grads, *a, &ga);
            }
            Op::Sum(a) => {
                let ga = vec![g[0]; self.node(*a).data.len()];
                self.add_into(grads, *a, &ga);
            }
            Op::Index(a, flat) => {
                let mut ga = vec![0.0; self.node(*a).data.len()];
                ga[*flat] = g[0];
                self.add_into(grads, *a, &ga);
            }
            Op::LogAddExp(a, b) => {
                let xa = &self.node(*a).data;
                let xb = &self.node(*b).data;
                let mut ga = vec![0.0; xa.len()];
                let mut gb = vec![0.0; xb.len()];
                for i in 0..node.data.len() {
                    let out = node.data[i];
                    // No probability mass, no gradient.
                    if out == f64::NEG_INFINITY {
                        continue;
                    }
                    ga[i] = g[i] * (xa[i] - out).exp();
                    gb[i] = g[i] * (xb[i] - out).exp();
                }
                self.add_into(grads, *a, &ga);
                self.add_into(grads, *b, &gb);
            }
            Op::GatherRows(a, idx) => {
                let na = self.node(*a);
                let mut ga = vec![0.0; na.data.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..node.cols {
                        ga[i * na.cols + c] += g[k * node.cols + c];
                    }
                }
                self.add_into(grads, *a, &ga);
            }
            Op::SliceRows(a, r0) => {
                let na = self.node(*a);
                let mut ga = vec![0.0; na.data.len()];
                ga[r0 * na.cols..r0 * na.cols + g.len()].copy_from_slice(g);
                self.add_into(grads, *a, &ga);
            }
            Op::SliceCols(a, c0) => {
                let na = self.node(*a);
                let mut ga = vec![0.0; na.data.len()];
                for r in 0..node.rows {
                    for c in 0..node.cols {
                        ga[r * na.cols + c0 + c] = g[r * node.cols + c];
                    }
                }
                self.add_into(grads, *a, &ga);
            }
            Op::ConcatRows(ids) => {
                let mut offset = 0;
                for &pid in ids {
                    let n = self.node(pid);
                    let len = n.data.len();
                    self.add_into(grads, pid, &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::PadCols(a) => {
                let na = self.node(*a);
                let mut ga = vec![0.0; na.data.len()];
                for r in 0..node.rows {
                    ga[r * na.cols..(r + 1) * na.cols]
                        .copy_from_slice(&g[r * node.cols..r * node.cols + na.cols]);
                }
                self.add_into(grads, *a, &ga);
            }
            Op::Reshape(a) => {
                self.add_into(grads, *a, g);
            }
            Op::NormalizeRows(a) => {
                let na = self.node(*a);
                let cols = node.cols;
                let mut ga = vec![0.0; na.data.len()];
                for r in 0..node.rows {
                    let x = &na.data[r * cols..(r + 1) * cols];
                    let y = &node.data[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let dot: f64 = gr.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                    for c in 0..cols {
                        ga[r * cols + c] = (gr[c] - y[c] * dot) / norm;
                    }
                }
                self.add_into(grads, *a, &ga);
            }
            Op::LayerNormRows(a, eps) => {
                let na = self.node(*a);
                let cols = node.cols;
                let n = cols as f64;
                let mut ga = vec![0.0; na.data.len()];
                for r in 0..node.rows {
                    let x = &na.data[r * cols..(r + 1) * cols];
                    let y = &node.data[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mu = x.iter().sum::<f64>() / n;
                    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                    let sigma = (var + eps).sqrt();
                    let gmean: f64 = gr.iter().sum::<f64>() / n;
                    let gydot: f64 = gr.iter().zip(y).map(|(gi, yi)| gi * yi).sum::<f64>() / n;
                    for c in 0..cols {
                        ga[r * cols + c] = (gr[c] - gmean - y[c] * gydot) / sigma;
                    }
                }
                self.add_into(grads, *a, &ga);
            }
            Op::OuterAddRows(a, b) => {
                let na = self.node(*a);
                let nb = self.node(*b);
                let cols = node.cols;
                let mut ga = vec![0.0; na.data.len()];
                let mut gb = vec![0.0; nb.data.len()];
                for i in 0..na.rows {
                    for j in 0..nb.rows {
                        let gr = &g[(i * nb.rows + j) * cols..(i * nb.rows + j + 1) * cols];
                        for c in 0..cols {
                            ga[i * cols + c] += gr[c];
                            gb[j * cols + c] += gr[c];
                        }
                    }
                }
                self.add_into(grads, *a, &ga);
                self.add_into(grads, *b, &gb);
            }
        }
    }
}
