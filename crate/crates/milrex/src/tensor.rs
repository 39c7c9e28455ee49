//! Dense 2-D tensors with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape of eagerly evaluated operations. Values are
//! computed at insertion time; [`Graph::backward`] walks the tape in
//! reverse and accumulates exact analytic gradients into every node it
//! reaches. Scalars are 1x1 tensors, vectors are 1xN rows.
//!
//! The element type is generic: training runs in `f32`, gradient tests
//! run in `f64`. Softmax and layer normalization are stabilized so no
//! documented operation produces NaN or infinity from finite inputs.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Floating point element type for tensors and graphs.
pub trait Scalar:
    Copy
    + PartialEq
    + PartialOrd
    + std::fmt::Debug
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

/// Layer normalization epsilon.
pub const LN_EPS: f64 = 1e-5;

/// A dense row-major 2-D tensor with an optional gradient buffer.
///
/// This is the persistent container used for model parameters; transient
/// activations live inside a [`Graph`]. Equality compares shape and
/// values; the gradient buffer is scratch state.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: PartialEq> PartialEq for Tensor<T> {
    fn eq(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.data == other.data
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
            grad: None,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                expected: format!("{}x{} ({} values)", rows, cols, rows * cols),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Tensor {
            rows,
            cols,
            data,
            grad: None,
        })
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::from_f64(rng.normal() * std))
            .collect();
        Tensor {
            rows,
            cols,
            data,
            grad: None,
        }
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
            grad: None,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.cols + col] = value;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated to zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [T] {
        if self.grad.is_none() {
            self.grad = Some(vec![T::ZERO; self.data.len()]);
        }
        self.grad.as_mut().unwrap().as_mut_slice()
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(T::ZERO);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// x (n x m) plus a 1 x m row broadcast over rows.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    /// a + c * b, elementwise on same shapes.
    AddScaled(NodeId, NodeId, T),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    /// Row i is a softmax over columns 0..=i, zero beyond (square input).
    CausalSoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<T>,
    },
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceRows {
        x: NodeId,
        start: usize,
    },
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    /// Weighted mean of per-row cross entropies; saves the softmax rows.
    CrossEntropyRows {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// A tape of eagerly evaluated tensor operations.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, rows: usize, cols: usize, values: Vec<T>, op: Op<T>) -> NodeId {
        debug_assert_eq!(values.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            values,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn values(&self, id: NodeId) -> &[T] {
        &self.nodes[id.0].values
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> T {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Insert a leaf holding a copy of the tensor's values.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> NodeId {
        self.push(tensor.rows, tensor.cols, tensor.data.clone(), Op::Leaf)
    }

    pub fn leaf_from(&mut self, rows: usize, cols: usize, values: Vec<T>) -> Result<NodeId> {
        if values.len() != rows * cols {
            return Err(Error::Shape {
                expected: format!("{}x{}", rows, cols),
                got: format!("{} values", values.len()),
            });
        }
        Ok(self.push(rows, cols, values, Op::Leaf))
    }

    pub fn scalar_leaf(&mut self, value: T) -> NodeId {
        self.push(1, 1, vec![value], Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, ka) = self.shape(a);
        let (kb, m) = self.shape(b);
        if ka != kb {
            return Err(Error::Shape {
                expected: format!("inner dims to agree for matmul ({n}x{ka} by {ka}xM)"),
                got: format!("{n}x{ka} by {kb}x{m}"),
            });
        }
        let mut out = vec![T::ZERO; n * m];
        matmul_into(
            &self.nodes[a.0].values,
            &self.nodes[b.0].values,
            &mut out,
            n,
            ka,
            m,
        );
        Ok(self.push(n, m, out, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let (n, m) = self.shape(x);
        let v = &self.nodes[x.0].values;
        let mut out = vec![T::ZERO; n * m];
        for i in 0..n {
            for j in 0..m {
                out[j * n + i] = v[i * m + j];
            }
        }
        self.push(m, n, out, Op::Transpose(x))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            let (ar, ac) = self.shape(a);
            let (br, bc) = self.shape(b);
            return Err(Error::Shape {
                expected: format!("matching shapes for {what} ({ar}x{ac})"),
                got: format!("{br}x{bc}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let (n, m) = self.shape(a);
        let out = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| {
            x + y
        });
        Ok(self.push(n, m, out, Op::Add(a, b)))
    }

    /// Broadcast-add a 1 x m row to every row of an n x m tensor.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        let (rr, rc) = self.shape(row);
        if rr != 1 || rc != m {
            return Err(Error::Shape {
                expected: format!("1x{m} row for add_row over {n}x{m}"),
                got: format!("{rr}x{rc}"),
            });
        }
        let xv = &self.nodes[x.0].values;
        let rv = &self.nodes[row.0].values;
        let mut out = vec![T::ZERO; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = xv[i * m + j] + rv[j];
            }
        }
        Ok(self.push(n, m, out, Op::AddRow(x, row)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let (n, m) = self.shape(a);
        let out = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| {
            x * y
        });
        Ok(self.push(n, m, out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let (n, m) = self.shape(x);
        let out = self.nodes[x.0].values.iter().map(|&v| v * c).collect();
        self.push(n, m, out, Op::Scale(x, c))
    }

    /// a + c * b (same shapes).
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: T) -> Result<NodeId> {
        self.same_shape(a, b, "add_scaled")?;
        let (n, m) = self.shape(a);
        let out = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| {
            x + c * y
        });
        Ok(self.push(n, m, out, Op::AddScaled(a, b, c)))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let (n, m) = self.shape(x);
        let out = self.nodes[x.0].values.iter().map(|&v| gelu(v)).collect();
        self.push(n, m, out, Op::Gelu(x))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let (n, m) = self.shape(x);
        let xv = &self.nodes[x.0].values;
        let mut out = vec![T::ZERO; n * m];
        for i in 0..n {
            softmax_row(&xv[i * m..(i + 1) * m], &mut out[i * m..(i + 1) * m]);
        }
        self.push(n, m, out, Op::SoftmaxRows(x))
    }

    /// Causal row softmax: row i is normalized over columns 0..=i only.
    pub fn causal_softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        if n != m {
            return Err(Error::Shape {
                expected: "square matrix for causal softmax".into(),
                got: format!("{n}x{m}"),
            });
        }
        let xv = &self.nodes[x.0].values;
        let mut out = vec![T::ZERO; n * m];
        for i in 0..n {
            softmax_row(&xv[i * m..i * m + i + 1], &mut out[i * m..i * m + i + 1]);
        }
        Ok(self.push(n, m, out, Op::CausalSoftmaxRows(x)))
    }

    /// Per-row layer normalization followed by elementwise gain and bias
    /// (both 1 x m).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        for (id, what) in [(gain, "gain"), (bias, "bias")] {
            let (r, c) = self.shape(id);
            if r != 1 || c != m {
                return Err(Error::Shape {
                    expected: format!("1x{m} layer_norm {what}"),
                    got: format!("{r}x{c}"),
                });
            }
        }
        let xv = &self.nodes[x.0].values;
        let gv = &self.nodes[gain.0].values;
        let bv = &self.nodes[bias.0].values;
        let inv_m = T::from_f64(1.0 / m as f64);
        let eps = T::from_f64(LN_EPS);
        let mut out = vec![T::ZERO; n * m];
        let mut mean = vec![T::ZERO; n];
        let mut rstd = vec![T::ZERO; n];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let mut mu = T::ZERO;
            for &v in row {
                mu += v;
            }
            mu = mu * inv_m;
            let mut var = T::ZERO;
            for &v in row {
                let d = v - mu;
                var += d * d;
            }
            var = var * inv_m;
            let rs = T::ONE / (var + eps).sqrt();
            mean[i] = mu;
            rstd[i] = rs;
            for j in 0..m {
                out[i * m + j] = (row[j] - mu) * rs * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            n,
            m,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            },
        ))
    }

    /// Inverted dropout: keeps each element with probability 1 - rate and
    /// scales kept elements by 1/(1 - rate). A rate of exactly 0 returns
    /// the input node unchanged and consumes no randomness.
    pub fn dropout(&mut self, x: NodeId, rate: f64, rng: &mut Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Usage(format!("dropout rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let (n, m) = self.shape(x);
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..n * m)
            .map(|_| {
                if rng.bernoulli(rate) {
                    T::ZERO
                } else {
                    keep_scale
                }
            })
            .collect();
        let out = zip_map(&self.nodes[x.0].values, &mask, |v, k| v * k);
        Ok(self.push(n, m, out, Op::Dropout { x, mask }))
    }

    /// Gather rows of a table by index (embedding lookup).
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (rows, m) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Input(format!(
                "gather index {bad} out of range for table with {rows} rows"
            )));
        }
        let tv = &self.nodes[table.0].values;
        let mut out = vec![T::ZERO; ids.len() * m];
        for (i, &r) in ids.iter().enumerate() {
            out[i * m..(i + 1) * m].copy_from_slice(&tv[r * m..(r + 1) * m]);
        }
        Ok(self.push(
            ids.len(),
            m,
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        if start + len > n {
            return Err(Error::Shape {
                expected: format!("row slice within {n} rows"),
                got: format!("rows {start}..{}", start + len),
            });
        }
        let out = self.nodes[x.0].values[start * m..(start + len) * m].to_vec();
        Ok(self.push(len, m, out, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        if start + len > m {
            return Err(Error::Shape {
                expected: format!("column slice within {m} columns"),
                got: format!("columns {start}..{}", start + len),
            });
        }
        let xv = &self.nodes[x.0].values;
        let mut out = vec![T::ZERO; n * len];
        for i in 0..n {
            out[i * len..(i + 1) * len].copy_from_slice(&xv[i * m + start..i * m + start + len]);
        }
        Ok(self.push(n, len, out, Op::SliceCols { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_rows of zero tensors".into()));
        }
        let m = self.shape(parts[0]).1;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != m {
                return Err(Error::Shape {
                    expected: format!("{m} columns in every concat_rows part"),
                    got: format!("{r}x{c}"),
                });
            }
            total += r;
        }
        let mut out = Vec::with_capacity(total * m);
        for &p in parts {
            out.extend_from_slice(&self.nodes[p.0].values);
        }
        Ok(self.push(total, m, out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat_cols of zero tensors".into()));
        }
        let n = self.shape(parts[0]).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != n {
                return Err(Error::Shape {
                    expected: format!("{n} rows in every concat_cols part"),
                    got: format!("{r}x{c}"),
                });
            }
            total += c;
        }
        let mut out = vec![T::ZERO; n * total];
        let mut col = 0;
        for &p in parts {
            let (_, c) = self.shape(p);
            let pv = &self.nodes[p.0].values;
            for i in 0..n {
                out[i * total + col..i * total + col + c]
                    .copy_from_slice(&pv[i * c..(i + 1) * c]);
            }
            col += c;
        }
        Ok(self.push(n, total, out, Op::ConcatCols(parts.to_vec())))
    }

    /// Sum of all elements, as a 1x1 scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let mut s = T::ZERO;
        for &v in &self.nodes[x.0].values {
            s += v;
        }
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    /// Weighted sum of per-row cross entropies:
    /// `sum_i weights[i] * (-log softmax(logits[i])[targets[i]])`.
    /// Callers encode masking and averaging in the weights.
    pub fn cross_entropy_rows(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[T],
    ) -> Result<NodeId> {
        let (n, m) = self.shape(logits);
        if targets.len() != n || weights.len() != n {
            return Err(Error::Shape {
                expected: format!("{n} targets and weights for {n}x{m} logits"),
                got: format!("{} targets, {} weights", targets.len(), weights.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= m) {
            return Err(Error::Input(format!(
                "cross entropy target {bad} out of range for {m} classes"
            )));
        }
        let lv = &self.nodes[logits.0].values;
        let mut probs = vec![T::ZERO; n * m];
        let mut loss = T::ZERO;
        for i in 0..n {
            let row = &lv[i * m..(i + 1) * m];
            let mut max = row[0];
            for &v in row {
                max = max.maximum(v);
            }
            let mut denom = T::ZERO;
            for &v in row {
                denom += (v - max).exp();
            }
            let lse = max + denom.ln();
            for j in 0..m {
                probs[i * m + j] = (row[j] - lse).exp();
            }
            loss += weights[i] * (lse - row[targets[i]]);
        }
        Ok(self.push(
            1,
            1,
            vec![loss],
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        ))
    }

    fn add_grad(&mut self, id: NodeId, contribution: Vec<T>) {
        let node = &mut self.nodes[id.0];
        debug_assert_eq!(contribution.len(), node.values.len());
        match node.grad.as_mut() {
            None => node.grad = Some(contribution),
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
        }
    }

    fn with_grad(&mut self, id: NodeId, f: impl FnOnce(&mut [T])) {
        let node = &mut self.nodes[id.0];
        if node.grad.is_none() {
            node.grad = Some(vec![T::ZERO; node.values.len()]);
        }
        f(node.grad.as_mut().unwrap());
    }

    /// Accumulate d(loss)/d(leaf) into every leaf reachable from `loss`.
    /// Leaf gradients accumulate across repeated calls; interior node
    /// gradients are recomputed per call and reflect the latest pass.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got {r}x{c}"
            )));
        }
        for node in &mut self.nodes[..=loss.0] {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        self.with_grad(loss, |g| g[0] += T::ONE);
        for idx in (0..=loss.0).rev() {
            if self.nodes[idx].grad.is_none() {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            let out_grad = self.nodes[idx].grad.take().unwrap();
            let out_vals = std::mem::take(&mut self.nodes[idx].values);
            let (rows, cols) = (self.nodes[idx].rows, self.nodes[idx].cols);
            self.backprop_op(&op, &out_grad, &out_vals, rows, cols);
            let node = &mut self.nodes[idx];
            node.op = op;
            node.grad = Some(out_grad);
            node.values = out_vals;
        }
        Ok(())
    }

    fn backprop_op(&mut self, op: &Op<T>, out_grad: &[T], out_vals: &[T], rows: usize, cols: usize) {
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = self.shape(*b).1;
                let mut da = vec![T::ZERO; n * k];
                matmul_nt_into(out_grad, &self.nodes[b.0].values, &mut da, n, m, k);
                self.add_grad(*a, da);
                let mut db = vec![T::ZERO; k * m];
                matmul_tn_into(&self.nodes[a.0].values, out_grad, &mut db, n, k, m);
                self.add_grad(*b, db);
            }
            Op::Transpose(x) => {
                // out is cols(x) x rows(x)
                let (n, m) = self.shape(*x);
                let mut dx = vec![T::ZERO; n * m];
                for i in 0..m {
                    for j in 0..n {
                        dx[j * m + i] = out_grad[i * n + j];
                    }
                }
                self.add_grad(*x, dx);
            }
            Op::Add(a, b) => {
                self.add_grad(*a, out_grad.to_vec());
                self.add_grad(*b, out_grad.to_vec());
            }
            Op::AddRow(x, row) => {
                self.add_grad(*x, out_grad.to_vec());
                let mut dr = vec![T::ZERO; cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dr[j] += out_grad[i * cols + j];
                    }
                }
                self.add_grad(*row, dr);
            }
            Op::Mul(a, b) => {
                let da = zip_map(out_grad, &self.nodes[b.0].values, |g, v| g * v);
                self.add_grad(*a, da);
                let db = zip_map(out_grad, &self.nodes[a.0].values, |g, v| g * v);
                self.add_grad(*b, db);
            }
            Op::Scale(x, c) => {
                let dx = out_grad.iter().map(|&g| g * *c).collect();
                self.add_grad(*x, dx);
            }
            Op::AddScaled(a, b, c) => {
                self.add_grad(*a, out_grad.to_vec());
                let db = out_grad.iter().map(|&g| g * *c).collect();
                self.add_grad(*b, db);
            }
            Op::Gelu(x) => {
                let dx = zip_map(out_grad, &self.nodes[x.0].values, |g, v| g * gelu_grad(v));
                self.add_grad(*x, dx);
            }
            Op::SoftmaxRows(x) => {
                let mut dx = vec![T::ZERO; rows * cols];
                for i in 0..rows {
                    softmax_backward_row(
                        &out_vals[i * cols..(i + 1) * cols],
                        &out_grad[i * cols..(i + 1) * cols],
                        &mut dx[i * cols..(i + 1) * cols],
                    );
                }
                self.add_grad(*x, dx);
            }
            Op::CausalSoftmaxRows(x) => {
                let mut dx = vec![T::ZERO; rows * cols];
                for i in 0..rows {
                    softmax_backward_row(
                        &out_vals[i * cols..i * cols + i + 1],
                        &out_grad[i * cols..i * cols + i + 1],
                        &mut dx[i * cols..i * cols + i + 1],
                    );
                }
                self.add_grad(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let m = cols;
                let inv_m = T::from_f64(1.0 / m as f64);
                let xv = &self.nodes[x.0].values;
                let gv = &self.nodes[gain.0].values;
                let mut dx = vec![T::ZERO; rows * m];
                let mut dg = vec![T::ZERO; m];
                let mut db = vec![T::ZERO; m];
                for i in 0..rows {
                    let row = &xv[i * m..(i + 1) * m];
                    let go = &out_grad[i * m..(i + 1) * m];
                    let mut mean_dxhat = T::ZERO;
                    let mut mean_dxhat_xhat = T::ZERO;
                    for j in 0..m {
                        let xhat = (row[j] - mean[i]) * rstd[i];
                        let dxhat = go[j] * gv[j];
                        mean_dxhat += dxhat;
                        mean_dxhat_xhat += dxhat * xhat;
                        dg[j] += go[j] * xhat;
                        db[j] += go[j];
                    }
                    mean_dxhat = mean_dxhat * inv_m;
                    mean_dxhat_xhat = mean_dxhat_xhat * inv_m;
                    for j in 0..m {
                        let xhat = (row[j] - mean[i]) * rstd[i];
                        let dxhat = go[j] * gv[j];
                        dx[i * m + j] = rstd[i] * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                self.add_grad(*x, dx);
                self.add_grad(*gain, dg);
                self.add_grad(*bias, db);
            }
            Op::Dropout { x, mask } => {
                let dx = zip_map(out_grad, mask, |g, k| g * k);
                self.add_grad(*x, dx);
            }
            Op::GatherRows { table, ids } => {
                let m = cols;
                let ids = ids.clone();
                self.with_grad(*table, |g| {
                    for (i, &r) in ids.iter().enumerate() {
                        for j in 0..m {
                            g[r * m + j] += out_grad[i * m + j];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let m = cols;
                let start = *start;
                self.with_grad(*x, |g| {
                    for (i, gi) in out_grad.iter().enumerate() {
                        g[start * m + i] += *gi;
                    }
                });
            }
            Op::SliceCols { x, start } => {
                let full = self.shape(*x).1;
                let start = *start;
                self.with_grad(*x, |g| {
                    for i in 0..rows {
                        for j in 0..cols {
                            g[i * full + start + j] += out_grad[i * cols + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let m = cols;
                let mut row = 0;
                for &p in parts {
                    let (r, _) = self.shape(p);
                    self.add_grad(p, out_grad[row * m..(row + r) * m].to_vec());
                    row += r;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let (_, c) = self.shape(p);
                    let mut dp = vec![T::ZERO; rows * c];
                    for i in 0..rows {
                        dp[i * c..(i + 1) * c]
                            .copy_from_slice(&out_grad[i * cols + col..i * cols + col + c]);
                    }
                    self.add_grad(p, dp);
                    col += c;
                }
            }
            Op::Sum(x) => {
                let (n, m) = self.shape(*x);
                let g = out_grad[0];
                self.add_grad(*x, vec![g; n * m]);
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                weights,
                probs,
            } => {
                let (n, m) = self.shape(*logits);
                let g = out_grad[0];
                let mut dl = vec![T::ZERO; n * m];
                for i in 0..n {
                    let w = weights[i] * g;
                    for j in 0..m {
                        dl[i * m + j] = w * probs[i * m + j];
                    }
                    dl[i * m + targets[i]] += -w;
                }
                self.add_grad(*logits, dl);
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// out += a (n x k) * b (k x m)
fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::ZERO {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] += aip * brow[j];
            }
        }
    }
}

/// out += a (n x m) * b^T where b is (k x m)  ->  (n x k)
fn matmul_nt_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            let mut s = T::ZERO;
            for j in 0..m {
                s += arow[j] * brow[j];
            }
            out[i * k + p] += s;
        }
    }
}

/// out += a^T * b where a is (n x k), b is (n x m)  ->  (k x m)
fn matmul_tn_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let aip = arow[p];
            if aip == T::ZERO {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for j in 0..m {
                orow[j] += aip * brow[j];
            }
        }
    }
}

/// Max-subtracted softmax over one slice.
fn softmax_row<T: Scalar>(input: &[T], out: &mut [T]) {
    let mut max = input[0];
    for &v in input {
        max = max.maximum(v);
    }
    let mut denom = T::ZERO;
    for (o, &v) in out.iter_mut().zip(input) {
        let e = (v - max).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o = *o / denom;
    }
}

/// dx = y * (dy - sum(dy * y)) over one slice.
fn softmax_backward_row<T: Scalar>(y: &[T], dy: &[T], dx: &mut [T]) {
    let mut dot = T::ZERO;
    for (yi, di) in y.iter().zip(dy) {
        dot += *yi * *di;
    }
    for ((o, yi), di) in dx.iter_mut().zip(y).zip(dy) {
        *o = *yi * (*di - dot);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (T::ONE + u.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * a * x * x)
}
