//! Dense float64 tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during one forward pass. Values
//! are stored row-major as `[rows, cols]` matrices; vectors are `[1, n]` rows.
//! Trainable parameters live in a [`ParamStore`] and enter a graph through
//! [`Graph::param`]; [`Graph::backward`] accumulates their gradients back into
//! the store.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    /// Xavier/Glorot uniform initialisation over the last two dimensions.
    pub fn xavier<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let (fan_in, fan_out) = match shape {
            [] => (1, 1),
            [n] => (*n, 1),
            dims => (dims[dims.len() - 2], dims[dims.len() - 1]),
        };
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
        Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    fn accumulate_grad(&mut self, g: &[f64]) {
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Interpret the shape as a matrix: scalars and vectors become single rows.
    fn as_matrix(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            dims => {
                let cols = dims[dims.len() - 1];
                (self.data.len() / cols.max(1), cols)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        let id = ParamId(self.tensors.len());
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// L2 norm of all accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for t in &mut self.tensors {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var, Option<Rc<[bool]>>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding(Var, Rc<[usize]>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Pick(Var, usize),
    Sum(Var),
    BceWithLogits(Var, f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding(..) => "embedding",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::Pick(..) => "pick",
            Op::Sum(_) => "sum",
            Op::BceWithLogits(..) => "bce_with_logits",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; all zeros when unreachable.
    pub fn get(&self, var: Var) -> &[f64] {
        &self.grads[var.0]
    }
}

/// Computation graph for a single forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and every input id is smaller than its consumer's.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        let n = &self.nodes[v.0];
        [n.rows, n.cols]
    }

    /// First element of a node's value, convenient for `[1, 1]` results.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        TensorError::ShapeMismatch {
            op,
            lhs: vec![ar, ac],
            rhs: vec![br, bc],
        }
    }

    /// Constant input.
    pub fn input(&mut self, tensor: &Tensor) -> Var {
        let (r, c) = tensor.as_matrix();
        self.push(Op::Leaf, r, c, tensor.data.clone())
    }

    pub fn input_row(&mut self, data: &[f64]) -> Var {
        self.push(Op::Leaf, 1, data.len(), data.to_vec())
    }

    /// Trainable parameter read from `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        let (r, c) = t.as_matrix();
        self.push(Op::Param(id), r, c, t.data.clone())
    }

    /// `a · b` for `[m, k] × [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(&self.nodes[a.0].value, &self.nodes[b.0].value, &mut out, m, k, n);
        Ok(self.push(Op::MatMul(a, b), m, n, out))
    }

    /// `a · bᵀ` for `[m, k] × [n, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(self.mismatch("matmul_t", a, b));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(arow, &bv[j * k..(j + 1) * k]);
            }
        }
        Ok(self.push(Op::MatMulT(a, b), m, n, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(self.mismatch("add", a, b));
        }
        let (r, c) = self.dims(a);
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), r, c, out))
    }

    /// Adds the `[1, n]` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.dims(bias) != (1, c) {
            return Err(self.mismatch("add_row", a, bias));
        }
        let bv = &self.nodes[bias.0].value;
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(bv).for_each(|(x, b)| *x += b);
        }
        Ok(self.push(Op::AddRow(a, bias), r, c, out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let (r, c) = self.dims(a);
        let out = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Mul(a, b), r, c, out))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.nodes[a.0].value.iter().map(|x| x * factor).collect();
        self.push(Op::Scale(a, factor), r, c, out)
    }

    /// Multiplies every element of `a` by the `[1, 1]` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.dims(s) != (1, 1) {
            return Err(self.mismatch("scale_by", a, s));
        }
        let (r, c) = self.dims(a);
        let f = self.nodes[s.0].value[0];
        let out = self.nodes[a.0].value.iter().map(|x| x * f).collect();
        Ok(self.push(Op::ScaleBy(a, s), r, c, out))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.dims(a);
        let out = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(op, r, c, out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), |x| {
            0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
        })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(Op::SoftmaxRows(a), r, c, out)
    }

    /// Row-wise log-softmax. When `mask` is given (one flag per column, `true`
    /// = allowed) masked columns are excluded from the normaliser and hold
    /// `-inf`.
    pub fn log_softmax_rows(&mut self, a: Var, mask: Option<Rc<[bool]>>) -> Result<Var> {
        let (r, c) = self.dims(a);
        if let Some(m) = &mask {
            if m.len() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "log_softmax_rows",
                    lhs: vec![r, c],
                    rhs: vec![m.len()],
                });
            }
            if !m.iter().any(|&x| x) {
                return Err(TensorError::Invalid {
                    op: "log_softmax_rows",
                    msg: "mask excludes every column".into(),
                });
            }
        }
        let mut out = self.nodes[a.0].value.clone();
        for row in out.chunks_mut(c) {
            let allowed = |j: usize| mask.as_ref().map_or(true, |m| m[j]);
            let max = (0..c)
                .filter(|&j| allowed(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let lse = (0..c)
                .filter(|&j| allowed(j))
                .map(|j| (row[j] - max).exp())
                .sum::<f64>()
                .ln()
                + max;
            for (j, x) in row.iter_mut().enumerate() {
                *x = if allowed(j) { *x - lse } else { f64::NEG_INFINITY };
            }
        }
        Ok(self.push(Op::LogSoftmaxRows(a, mask), r, c, out))
    }

    /// Row-wise layer normalisation with `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.dims(bias) != (1, c) {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gain.0].value;
        let bv = &self.nodes[bias.0].value;
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            r,
            c,
            out,
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::Invalid {
                op: "embedding",
                msg: format!("id {bad} out of range for table with {vocab} rows"),
            });
        }
        let tv = &self.nodes[table.0].value;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(Op::Embedding(table, ids.into()), ids.len(), d, out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(TensorError::Invalid {
                op: "concat_cols",
                msg: "no inputs".into(),
            });
        };
        let rows = self.dims(first).0;
        for &p in parts {
            if self.dims(p).0 != rows {
                return Err(self.mismatch("concat_cols", first, p));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                let pc = self.dims(p).1;
                out.extend_from_slice(&self.nodes[p.0].value[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), rows, cols, out))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > c || len == 0 {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of {c}", start + len),
            });
        }
        let av = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Op::SliceCols(a, start), r, len, out))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if start + len > r || len == 0 {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of {r}", start + len),
            });
        }
        let out = self.nodes[a.0].value[start * c..(start + len) * c].to_vec();
        Ok(self.push(Op::SliceRows(a, start), len, c, out))
    }

    /// Selects one element (flat row-major index) as a `[1, 1]` node.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let n = self.nodes[a.0].value.len();
        if index >= n {
            return Err(TensorError::Invalid {
                op: "pick",
                msg: format!("index {index} out of {n}"),
            });
        }
        let v = self.nodes[a.0].value[index];
        Ok(self.push(Op::Pick(a, index), 1, 1, vec![v]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(Op::Sum(a), 1, 1, vec![s])
    }

    /// Binary cross-entropy of `sigmoid(z)` against target `y`, from logits.
    pub fn bce_with_logits(&mut self, z: Var, y: f64) -> Result<Var> {
        if self.dims(z) != (1, 1) {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: vec![self.dims(z).0, self.dims(z).1],
                rhs: vec![1, 1],
            });
        }
        let x = self.nodes[z.0].value[0];
        let loss = x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        Ok(self.push(Op::BceWithLogits(z, y), 1, 1, vec![loss]))
    }

    /// Sum of several `[1, 1]` nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Option<Var>> {
        let mut it = terms.iter();
        let Some(&first) = it.next() else {
            return Ok(None);
        };
        let mut acc = first;
        for &t in it {
            acc = self.add(acc, t)?;
        }
        Ok(Some(acc))
    }

    /// Reverse pass from the scalar `loss`. Parameter gradients are added into
    /// `store`, so calling this twice without resetting doubles them.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(TensorError::NonScalarLoss(vec![r, c]));
        }
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .take(loss.0 + 1)
            .map(|_| Vec::new())
            .collect();
        grads[loss.0] = vec![1.0];

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads, store);
            grads[idx] = g;
        }
        let total = self.nodes.len();
        grads.resize_with(total, Vec::new);
        for (i, g) in grads.iter_mut().enumerate() {
            if g.is_empty() {
                *g = vec![0.0; self.nodes[i].value.len()];
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Vec<f64>],
        store: &mut ParamStore,
    ) {
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.get_mut(*id).accumulate_grad(g),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.cols;
                // dA = dC · Bᵀ
                let bv = val(*b);
                let ga = grad_buf(grads, *a, m * k);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        ga[i * k + p] += dot(grow, &bv[p * n..(p + 1) * n]);
                    }
                }
                // dB = Aᵀ · dC
                let av = val(*a);
                let gb = grad_buf(grads, *b, k * n);
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let s = av[i * k + p];
                        if s != 0.0 {
                            axpy(s, grow, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = node.cols;
                let bv = val(*b);
                let ga = grad_buf(grads, *a, m * k);
                for i in 0..m {
                    for j in 0..n {
                        let s = g[i * n + j];
                        if s != 0.0 {
                            axpy(s, &bv[j * k..(j + 1) * k], &mut ga[i * k..(i + 1) * k]);
                        }
                    }
                }
                let av = val(*a);
                let gb = grad_buf(grads, *b, n * k);
                for i in 0..m {
                    for j in 0..n {
                        let s = g[i * n + j];
                        if s != 0.0 {
                            axpy(s, &av[i * k..(i + 1) * k], &mut gb[j * k..(j + 1) * k]);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(grad_buf(grads, *a, g.len()), g);
                add_into(grad_buf(grads, *b, g.len()), g);
            }
            Op::AddRow(a, bias) => {
                add_into(grad_buf(grads, *a, g.len()), g);
                let c = node.cols;
                let gb = grad_buf(grads, *bias, c);
                for row in g.chunks(c) {
                    add_into(gb, row);
                }
            }
            Op::Mul(a, b) => {
                let bv = val(*b);
                let ga = grad_buf(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * bv[i];
                }
                let av = val(*a);
                let gb = grad_buf(grads, *b, g.len());
                for i in 0..g.len() {
                    gb[i] += g[i] * av[i];
                }
            }
            Op::Scale(a, f) => axpy(*f, g, grad_buf(grads, *a, g.len())),
            Op::ScaleBy(a, s) => {
                let f = val(*s)[0];
                axpy(f, g, grad_buf(grads, *a, g.len()));
                let ds = dot(g, val(*a));
                grad_buf(grads, *s, 1)[0] += ds;
            }
            Op::Sigmoid(a) => {
                let ga = grad_buf(grads, *a, g.len());
                for (i, y) in node.value.iter().enumerate() {
                    ga[i] += g[i] * y * (1.0 - y);
                }
            }
            Op::Tanh(a) => {
                let ga = grad_buf(grads, *a, g.len());
                for (i, y) in node.value.iter().enumerate() {
                    ga[i] += g[i] * (1.0 - y * y);
                }
            }
            Op::Gelu(a) => {
                let av = val(*a);
                let ga = grad_buf(grads, *a, g.len());
                for (i, &x) in av.iter().enumerate() {
                    let u = GELU_C * (x + 0.044715 * x * x * x);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    ga[i] += g[i] * d;
                }
            }
            Op::SoftmaxRows(a) => {
                let c = node.cols;
                let ga = grad_buf(grads, *a, g.len());
                for (r, (yrow, grow)) in node.value.chunks(c).zip(g.chunks(c)).enumerate() {
                    let s = dot(yrow, grow);
                    for j in 0..c {
                        ga[r * c + j] += yrow[j] * (grow[j] - s);
                    }
                }
            }
            Op::LogSoftmaxRows(a, mask) => {
                let c = node.cols;
                let ga = grad_buf(grads, *a, g.len());
                for (r, (yrow, grow)) in node.value.chunks(c).zip(g.chunks(c)).enumerate() {
                    let allowed = |j: usize| mask.as_ref().map_or(true, |m| m[j]);
                    let s: f64 = (0..c).filter(|&j| allowed(j)).map(|j| grow[j]).sum();
                    for j in (0..c).filter(|&j| allowed(j)) {
                        ga[r * c + j] += grow[j] - yrow[j].exp() * s;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.cols;
                let gv = val(*gain);
                {
                    let gg = grad_buf(grads, *gain, c);
                    for (hrow, grow) in xhat.chunks(c).zip(g.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                {
                    let gb = grad_buf(grads, *bias, c);
                    for grow in g.chunks(c) {
                        add_into(gb, grow);
                    }
                }
                let gx = grad_buf(grads, *x, g.len());
                let n = c as f64;
                let mut dxhat = vec![0.0; c];
                for (r, (hrow, grow)) in xhat.chunks(c).zip(g.chunks(c)).enumerate() {
                    for j in 0..c {
                        dxhat[j] = grow[j] * gv[j];
                    }
                    let sum_d: f64 = dxhat.iter().sum();
                    let sum_dh = dot(&dxhat, hrow);
                    for j in 0..c {
                        gx[r * c + j] += rstd[r] / n * (n * dxhat[j] - sum_d - hrow[j] * sum_dh);
                    }
                }
            }
            Op::Embedding(table, ids) => {
                let d = node.cols;
                let total = self.nodes[table.0].value.len();
                let gt = grad_buf(grads, *table, total);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.rows;
                let c = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    let gp = grad_buf(grads, p, rows * pc);
                    for i in 0..rows {
                        add_into(
                            &mut gp[i * pc..(i + 1) * pc],
                            &g[i * c + offset..i * c + offset + pc],
                        );
                    }
                    offset += pc;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.dims(*a);
                let len = node.cols;
                let ga = grad_buf(grads, *a, r * c);
                for i in 0..r {
                    add_into(
                        &mut ga[i * c + start..i * c + start + len],
                        &g[i * len..(i + 1) * len],
                    );
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.dims(*a);
                let ga = grad_buf(grads, *a, r * c);
                add_into(&mut ga[start * c..start * c + g.len()], g);
            }
            Op::Pick(a, index) => {
                let n = self.nodes[a.0].value.len();
                grad_buf(grads, *a, n)[*index] += g[0];
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.len();
                grad_buf(grads, *a, n).iter_mut().for_each(|x| *x += g[0]);
            }
            Op::BceWithLogits(z, y) => {
                let x = val(*z)[0];
                grad_buf(grads, *z, 1)[0] += g[0] * (sigmoid(x) - y);
            }
        }
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }
}

fn grad_buf(grads: &mut [Vec<f64>], v: Var, len: usize) -> &mut [f64] {
    let buf = &mut grads[v.0];
    if buf.is_empty() {
        *buf = vec![0.0; len];
    }
    buf
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s != 0.0 {
                axpy(s, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// Compares analytic gradients against central finite differences.
///
/// `build` constructs the scalar loss from the current parameter values.
/// Returns the maximum over all checked parameter elements of
/// `|analytic - numeric| / max(1, |numeric|)`. With `max_per_param` set, only
/// that many evenly spaced elements of each parameter are perturbed.
pub fn grad_check<F>(
    build: F,
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    max_per_param: Option<usize>,
) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::Invalid {
            op: "grad_check",
            msg: format!("eps {eps} outside (0, 1e-2]"),
        });
    }
    store.zero_grads();
    let mut graph = Graph::new();
    let loss = build(&mut graph, store)?;
    if !graph.scalar(loss).is_finite() {
        return Err(TensorError::NonFinite("loss".into()));
    }
    graph.backward(loss, store)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let l = build(&mut g, store)?;
        let v = g.scalar(l);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(TensorError::NonFinite("perturbed loss".into()))
        }
    };

    let mut worst: f64 = 0.0;
    for &id in params {
        let n = store.get(id).len();
        let analytic = store
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let step = match max_per_param {
            Some(k) if k > 0 && k < n => n.div_ceil(k),
            _ => 1,
        };
        for i in (0..n).step_by(step) {
            let orig = store.get(id).data[i];
            store.get_mut(id).data[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).data[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).data[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            if !analytic[i].is_finite() {
                return Err(TensorError::NonFinite(format!(
                    "analytic gradient of {}",
                    store.name(id)
                )));
            }
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
