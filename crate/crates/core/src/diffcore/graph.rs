use super::{DiffError, Real, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate gradient corruption, used to prove the gradient checker bites.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    ConvKernelGrad,
}

#[derive(Debug, Clone, Copy)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Neg,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Silu,
    Log,
    Exp,
    Abs,
    Clamp(f64, f64),
    Square,
    Sqrt,
    Tanh,
    Softplus,
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    h: usize,
    w: usize,
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

#[derive(Debug, Clone, Copy)]
struct FieldGeom {
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        map_a: Option<Vec<usize>>,
        map_b: Option<Vec<usize>>,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Affine {
        x: Var,
        mul: F,
    },
    Sum {
        x: Var,
    },
    SumLast {
        x: Var,
        last: usize,
    },
    MaxLast {
        x: Var,
        last: usize,
        argmax: Vec<usize>,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Reshape {
        x: Var,
    },
    Narrow {
        x: Var,
        offset: usize,
    },
    NarrowLast {
        x: Var,
        start: usize,
        len: usize,
        last: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<Option<usize>>,
        row: usize,
    },
    ConcatLast {
        parts: Vec<(Var, usize)>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    SoftmaxLast {
        x: Var,
        last: usize,
    },
    Bilinear {
        field: Var,
        xy: Var,
        frames: Vec<usize>,
        geom: FieldGeom,
    },
    L2NormLast {
        x: Var,
        last: usize,
        norms: Vec<F>,
    },
    HuberNorm {
        diff: Var,
        last: usize,
        knee: F,
    },
    Bce {
        logits: Var,
        targets: Var,
    },
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Unary { x, .. }
            | Op::Affine { x, .. }
            | Op::Sum { x }
            | Op::SumLast { x, .. }
            | Op::MaxLast { x, .. }
            | Op::Transpose { x, .. }
            | Op::Reshape { x }
            | Op::Narrow { x, .. }
            | Op::NarrowLast { x, .. }
            | Op::GatherRows { x, .. }
            | Op::SoftmaxLast { x, .. }
            | Op::L2NormLast { x, .. } => vec![*x],
            Op::ConcatLast { parts } => parts.iter().map(|p| p.0).collect(),
            Op::ConcatRows { parts } => parts.clone(),
            Op::Conv2d { input, kernel, .. } => vec![*input, *kernel],
            Op::Bilinear { field, xy, .. } => vec![*field, *xy],
            Op::HuberNorm { diff, .. } => vec![*diff],
            Op::Bce { logits, targets } => vec![*logits, *targets],
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Gradients of a scalar loss with respect to the graph's leaves.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient for `var`, or `None` when it does not require gradients or is
    /// not reachable from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zero-filled when unreachable.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> Tensor<F> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Operation tape. Nodes are appended in topological order; the graph is
/// acyclic by construction.
#[derive(Debug, Default)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    fault: Option<Fault>,
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Flat-index map from a broadcast output back into an input, or `None` when
/// the shapes are identical.
fn broadcast_map(out: &[usize], inp: &[usize]) -> Option<Vec<usize>> {
    if out == inp {
        return None;
    }
    let n: usize = out.iter().product();
    let in_n: usize = inp.iter().product();
    // suffix broadcast: input repeats along leading axes
    let offset = out.len() - inp.len();
    if inp.iter().zip(&out[offset..]).all(|(a, b)| a == b) {
        return Some((0..n).map(|i| i % in_n).collect());
    }
    let rank = out.len();
    let mut in_strides = vec![0usize; rank];
    let mut stride = 1;
    for i in (0..rank).rev() {
        let d = if i < offset { 1 } else { inp[i - offset] };
        in_strides[i] = if d == 1 { 0 } else { stride };
        stride *= d;
    }
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    for _ in 0..n {
        map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Some(map)
}

fn reduce_into<F: Real>(grad: &[F], map: &Option<Vec<usize>>, len: usize) -> Vec<F> {
    match map {
        None => grad.to_vec(),
        Some(m) => {
            let mut out = vec![F::zero(); len];
            for (g, &j) in grad.iter().zip(m) {
                out[j] += *g;
            }
            out
        }
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Graph whose backward pass deliberately corrupts one gradient.
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    /// Leaf node; differentiable when the tensor's `requires_grad` flag is set.
    pub fn leaf(&mut self, t: Tensor<F>) -> Result<Var, DiffError> {
        if !t.is_finite() {
            return Err(DiffError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, t: Tensor<F>) -> Result<Var, DiffError> {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Result<Var, DiffError> {
        self.leaf(t.with_requires_grad(false))
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x).clone();
        self.constant(t)
    }

    /// True when gradients of `output` can reach `leaf` through differentiable
    /// nodes.
    pub fn depends_on(&self, output: Var, leaf: Var) -> bool {
        if !self.requires_grad(output) || !self.requires_grad(leaf) {
            return false;
        }
        let mut seen = vec![false; output.0 + 1];
        let mut stack = vec![output];
        while let Some(v) = stack.pop() {
            if v == leaf {
                return true;
            }
            if v.0 < leaf.0 || seen[v.0] {
                continue;
            }
            seen[v.0] = true;
            for i in self.nodes[v.0].op.inputs() {
                if self.requires_grad(i) {
                    stack.push(i);
                }
            }
        }
        false
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<F>, op: Op<F>) -> Result<Var, DiffError> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: op_name });
        }
        let requires_grad = op.inputs().iter().any(|&i| self.requires_grad(i));
        let value = Tensor::new(shape, data)?.with_requires_grad(requires_grad);
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, name: &'static str, kind: BinaryKind, a: Var, b: Var) -> Result<Var, DiffError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out = broadcast_shape(&sa, &sb).ok_or(DiffError::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let map_a = broadcast_map(&out, &sa);
        let map_b = broadcast_map(&out, &sb);
        let n: usize = out.iter().product();
        let da = self.value(a).data();
        let db = self.value(b).data();
        let f = |x: F, y: F| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<F> = match (&map_a, &map_b) {
            (None, None) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n)
                .map(|i| {
                    let ia = map_a.as_ref().map_or(i, |m| m[i]);
                    let ib = map_b.as_ref().map_or(i, |m| m[i]);
                    f(da[ia], db[ib])
                })
                .collect(),
        };
        self.push(name, out, data, Op::Binary { kind, a, b, map_a, map_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("add", BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("sub", BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("mul", BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary("div", BinaryKind::Div, a, b)
    }

    fn unary(&mut self, name: &'static str, kind: UnaryKind, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let data = t
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Neg => -v,
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Relu => v.max(F::zero()),
                UnaryKind::LeakyRelu(a) => {
                    if v > F::zero() {
                        v
                    } else {
                        v * F::of(a)
                    }
                }
                UnaryKind::Silu => v * sigmoid(v),
                UnaryKind::Log => v.ln(),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Abs => v.abs(),
                UnaryKind::Clamp(lo, hi) => v.max(F::of(lo)).min(F::of(hi)),
                UnaryKind::Square => v * v,
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Softplus => softplus(v),
            })
            .collect();
        self.push(name, shape, data, Op::Unary { kind, x })
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("neg", UnaryKind::Neg, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("sigmoid", UnaryKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("relu", UnaryKind::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, DiffError> {
        self.unary("leaky_relu", UnaryKind::LeakyRelu(slope), x)
    }

    /// `x * sigmoid(x)`, the smooth member of the relu family.
    pub fn silu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("silu", UnaryKind::Silu, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("log", UnaryKind::Log, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("exp", UnaryKind::Exp, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("abs", UnaryKind::Abs, x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, DiffError> {
        self.unary("clamp", UnaryKind::Clamp(lo, hi), x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("square", UnaryKind::Square, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("sqrt", UnaryKind::Sqrt, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("tanh", UnaryKind::Tanh, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary("softplus", UnaryKind::Softplus, x)
    }

    /// `x * c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, DiffError> {
        let t = self.value(x);
        let mul = F::of(c);
        let shape = t.shape().to_vec();
        let data = t.data().iter().map(|&v| v * mul).collect();
        self.push("scale", shape, data, Op::Affine { x, mul })
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var, DiffError> {
        let s: F = self.value(x).data().iter().copied().sum();
        self.push("sum", vec![1], vec![s], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, DiffError> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let last = t.last_dim();
        let shape = t.leading_shape();
        let data = t.data().chunks(last).map(|r| r.iter().copied().sum()).collect();
        self.push("sum_last", shape, data, Op::SumLast { x, last })
    }

    pub fn mean_last(&mut self, x: Var) -> Result<Var, DiffError> {
        let last = self.value(x).last_dim();
        let s = self.sum_last(x)?;
        self.scale(s, 1.0 / last as f64)
    }

    /// Maximum over the last axis; the gradient goes to the first maximiser.
    pub fn max_last(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let last = t.last_dim();
        let shape = t.leading_shape();
        let mut argmax = Vec::with_capacity(t.numel() / last);
        let mut data = Vec::with_capacity(t.numel() / last);
        for row in t.data().chunks(last) {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            argmax.push(best);
            data.push(row[best]);
        }
        self.push("max_last", shape, data, Op::MaxLast { x, last, argmax })
    }

    // ---- linear algebra and layout -------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let da = self.value(a).data();
        let db = self.value(b).data();
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = da[i * k + p];
                let brow = &db[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.push("matmul", vec![m, n], out, Op::MatMul { a, b, m, k, n })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(DiffError::InvalidArgument {
                op: "transpose",
                msg: format!("expected rank 2, got {:?}", t.shape()),
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = d[r * cols + c];
            }
        }
        self.push("transpose", vec![cols, rows], out, Op::Transpose { x, rows, cols })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() || shape.iter().any(|&d| d == 0) {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = t.data().to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape { x })
    }

    /// Slice `len` entries of the first axis starting at `start`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let t = self.value(x);
        let rows = t.shape()[0];
        if len == 0 || start + len > rows {
            return Err(DiffError::InvalidArgument {
                op: "narrow",
                msg: format!("range {start}..{} outside axis of {rows}", start + len),
            });
        }
        let row: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let data = t.data()[start * row..(start + len) * row].to_vec();
        self.push("narrow", shape, data, Op::Narrow { x, offset: start * row })
    }

    /// Slice `len` entries of the last axis starting at `start`.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var, DiffError> {
        let t = self.value(x);
        let last = t.last_dim();
        if len == 0 || start + len > last {
            return Err(DiffError::InvalidArgument {
                op: "narrow_last",
                msg: format!("range {start}..{} outside axis of {last}", start + len),
            });
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let data = t
            .data()
            .chunks(last)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        self.push("narrow_last", shape, data, Op::NarrowLast { x, start, len, last })
    }

    /// Select rows along the first axis; `None` produces a zero row.
    pub fn gather_rows(&mut self, x: Var, idx: &[Option<usize>]) -> Result<Var, DiffError> {
        let t = self.value(x);
        let rows = t.shape()[0];
        if idx.is_empty() || idx.iter().flatten().any(|&i| i >= rows) {
            return Err(DiffError::InvalidArgument {
                op: "gather_rows",
                msg: format!("index out of range for {rows} rows"),
            });
        }
        let row: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let d = t.data();
        let mut data = Vec::with_capacity(idx.len() * row);
        for i in idx {
            match i {
                Some(i) => data.extend_from_slice(&d[i * row..(i + 1) * row]),
                None => data.extend(std::iter::repeat(F::zero()).take(row)),
            }
        }
        self.push(
            "gather_rows",
            shape,
            data,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
                row,
            },
        )
    }

    /// Concatenate along the last axis; leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let lead = self.value(parts[0]).leading_shape();
        let rows: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.leading_shape() != lead {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_last",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push((p, t.last_dim()));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, w) in &widths {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = self.shape(parts[0]).to_vec();
        if shape.len() == 1 {
            shape = vec![rows, total];
            if rows == 1 {
                shape = vec![total];
            }
        } else {
            *shape.last_mut().unwrap() = total;
        }
        self.push("concat_last", shape, data, Op::ConcatLast { parts: widths })
    }

    /// Concatenate along the first axis; trailing shapes must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != tail[..] {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        self.push(
            "concat_rows",
            shape,
            data,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        )
    }

    // ---- spatial --------------------------------------------------------

    /// 2-D convolution of a `[H, W, Cin]` (or batched `[B, H, W, Cin]`) input
    /// with a `[k, k, Cin, Cout]` kernel, odd `k`, zero padding `k / 2`.
    /// Output spatial size is `ceil(H / stride) x ceil(W / stride)`; output
    /// cell `(i, j)` is centered on input pixel `(i * stride, j * stride)`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize) -> Result<Var, DiffError> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernel).to_vec();
        let (batch, h, w, cin) = match si.len() {
            3 => (1, si[0], si[1], si[2]),
            4 => (si[0], si[1], si[2], si[3]),
            _ => {
                return Err(DiffError::InvalidArgument {
                    op: "conv2d",
                    msg: format!("input must be [H,W,C] or [B,H,W,C], got {si:?}"),
                })
            }
        };
        if sk.len() != 4 || sk[0] != sk[1] || sk[0] % 2 == 0 || stride == 0 {
            return Err(DiffError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel must be [k,k,Cin,Cout] with odd k, got {sk:?} stride {stride}"),
            });
        }
        if sk[2] != cin {
            return Err(DiffError::ShapeMismatch {
                op: "conv2d channels",
                lhs: si,
                rhs: sk,
            });
        }
        let (k, cout) = (sk[0], sk[3]);
        let oh = (h + stride - 1) / stride;
        let ow = (w + stride - 1) / stride;
        let geom = ConvGeom {
            batch,
            h,
            w,
            cin,
            cout,
            k,
            stride,
            oh,
            ow,
        };
        let x = self.value(input).data();
        let kd = self.value(kernel).data();
        let mut out = vec![F::zero(); batch * oh * ow * cout];
        let pad = (k / 2) as isize;
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let obase = ((b * oh + oy) * ow + ox) * cout;
                    let orow = &mut out[obase..obase + cout];
                    for ky in 0..k {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ibase = ((b * h + iy as usize) * w + ix as usize) * cin;
                            for ci in 0..cin {
                                let v = x[ibase + ci];
                                let kbase = ((ky * k + kx) * cin + ci) * cout;
                                for (o, &kv) in orow.iter_mut().zip(&kd[kbase..kbase + cout]) {
                                    *o += v * kv;
                                }
                            }
                        }
                    }
                }
            }
        }
        let shape = if si.len() == 3 {
            vec![oh, ow, cout]
        } else {
            vec![batch, oh, ow, cout]
        };
        self.push("conv2d", shape, out, Op::Conv2d { input, kernel, geom })
    }

    /// Numerically stabilised softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let last = t.last_dim();
        let shape = t.shape().to_vec();
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(last) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let start = data.len();
            let mut z = F::zero();
            for &v in row {
                let e = (v - m).exp();
                z += e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v = *v / z;
            }
        }
        self.push("softmax", shape, data, Op::SoftmaxLast { x, last })
    }

    /// Softmax over all cells of an `[H, W]` map.
    pub fn softmax2d(&mut self, logits: Var) -> Result<Var, DiffError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(DiffError::InvalidArgument {
                op: "softmax2d",
                msg: format!("expected [H,W], got {shape:?}"),
            });
        }
        let flat = self.reshape(logits, &[1, shape[0] * shape[1]])?;
        let p = self.softmax_last(flat)?;
        self.reshape(p, &shape)
    }

    /// Bilinear lookup of an `[H, W, C]` field at `[N, 2]` pixel-center
    /// coordinates `(x, y)`; returns `[N, C]`. Out-of-bounds taps read 0.
    pub fn bilinear_sample(&mut self, field: Var, xy: Var) -> Result<Var, DiffError> {
        let n = self.shape(xy)[0];
        self.bilinear_sample_frames(field, xy, &vec![0; n])
    }

    /// Batched form: `field` is `[B, H, W, C]` (or `[H, W, C]` with every
    /// frame index 0) and point `i` reads frame `frames[i]`.
    pub fn bilinear_sample_frames(&mut self, field: Var, xy: Var, frames: &[usize]) -> Result<Var, DiffError> {
        let sf = self.shape(field).to_vec();
        let geom = match sf.len() {
            3 => FieldGeom {
                batch: 1,
                h: sf[0],
                w: sf[1],
                c: sf[2],
            },
            4 => FieldGeom {
                batch: sf[0],
                h: sf[1],
                w: sf[2],
                c: sf[3],
            },
            _ => {
                return Err(DiffError::InvalidArgument {
                    op: "bilinear_sample",
                    msg: format!("field must be [H,W,C] or [B,H,W,C], got {sf:?}"),
                })
            }
        };
        let sx = self.shape(xy).to_vec();
        if sx.len() != 2 || sx[1] != 2 || sx[0] != frames.len() {
            return Err(DiffError::ShapeMismatch {
                op: "bilinear_sample",
                lhs: sx,
                rhs: vec![frames.len(), 2],
            });
        }
        if frames.iter().any(|&f| f >= geom.batch) {
            return Err(DiffError::InvalidArgument {
                op: "bilinear_sample",
                msg: "frame index out of range".into(),
            });
        }
        let fd = self.value(field).data();
        let pd = self.value(xy).data();
        let c = geom.c;
        let mut out = vec![F::zero(); frames.len() * c];
        for (i, &fr) in frames.iter().enumerate() {
            let orow = &mut out[i * c..(i + 1) * c];
            for_each_tap(&geom, fr, pd[2 * i], pd[2 * i + 1], |base, wgt, _, _| {
                for (o, &v) in orow.iter_mut().zip(&fd[base..base + c]) {
                    *o += wgt * v;
                }
            });
        }
        self.push(
            "bilinear_sample",
            vec![frames.len(), c],
            out,
            Op::Bilinear {
                field,
                xy,
                frames: frames.to_vec(),
                geom,
            },
        )
    }

    // ---- fused losses and normalisation ---------------------------------

    /// `x / sqrt(sum(x^2) + eps)` along the last axis.
    pub fn l2_normalize_last(&mut self, x: Var, eps: f64) -> Result<Var, DiffError> {
        let t = self.value(x);
        let last = t.last_dim();
        let shape = t.shape().to_vec();
        let e = F::of(eps);
        let mut norms = Vec::with_capacity(t.numel() / last);
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(last) {
            let n = (row.iter().map(|&v| v * v).sum::<F>() + e).sqrt();
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        self.push("l2_normalize", shape, data, Op::L2NormLast { x, last, norms })
    }

    /// Huber penalty on the Euclidean norm of each last-axis vector:
    /// `0.5 d^2` for `d <= knee`, `knee * (d - 0.5 knee)` beyond.
    pub fn huber_norm(&mut self, diff: Var, knee: f64) -> Result<Var, DiffError> {
        let t = self.value(diff);
        let last = t.last_dim();
        let shape = t.leading_shape();
        let kf = F::of(knee);
        let half = F::of(0.5);
        let data = t
            .data()
            .chunks(last)
            .map(|r| {
                let d2: F = r.iter().map(|&v| v * v).sum();
                let d = d2.sqrt();
                if d <= kf {
                    half * d2
                } else {
                    kf * (d - half * kf)
                }
            })
            .collect();
        self.push("huber", shape, data, Op::HuberNorm { diff, last, knee: kf })
    }

    /// Sigmoid binary cross-entropy with logits, elementwise.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Var) -> Result<Var, DiffError> {
        let sl = self.shape(logits).to_vec();
        let st = self.shape(targets).to_vec();
        if sl != st {
            return Err(DiffError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: sl,
                rhs: st,
            });
        }
        let data = self
            .value(logits)
            .data()
            .iter()
            .zip(self.value(targets).data())
            .map(|(&x, &y)| softplus(x) - x * y)
            .collect();
        self.push("bce_with_logits", sl, data, Op::Bce { logits, targets })
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Each node is visited once, in
    /// reverse recording order, so the result is deterministic.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, DiffError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(DiffError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !lt.requires_grad() {
            return Ok(Gradients { grads: leaves });
        }
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.requires_grad() {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves[i] = Some(Tensor::from_vec(node.value.shape(), g));
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, map_a, map_b } => {
                let da = self.value(*a).data();
                let db = self.value(*b).data();
                let at = |i: usize| da[map_a.as_ref().map_or(i, |m| m[i])];
                let bt = |i: usize| db[map_b.as_ref().map_or(i, |m| m[i])];
                let n = g.len();
                let (ga, gb): (Vec<F>, Vec<F>) = match kind {
                    BinaryKind::Add => (g.to_vec(), g.to_vec()),
                    BinaryKind::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
                    BinaryKind::Mul => ((0..n).map(|i| g[i] * bt(i)).collect(), (0..n).map(|i| g[i] * at(i)).collect()),
                    BinaryKind::Div => (
                        (0..n).map(|i| g[i] / bt(i)).collect(),
                        (0..n).map(|i| -g[i] * at(i) / (bt(i) * bt(i))).collect(),
                    ),
                };
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, reduce_into(&ga, map_a, da.len()));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, reduce_into(&gb, map_b, db.len()));
                }
            }
            Op::Unary { kind, x } => {
                let xd = self.value(*x).data();
                let gx = g
                    .iter()
                    .zip(xd)
                    .zip(y)
                    .map(|((&g, &x), &y)| {
                        g * match *kind {
                            UnaryKind::Neg => -F::one(),
                            UnaryKind::Sigmoid => y * (F::one() - y),
                            UnaryKind::Relu => {
                                if x > F::zero() {
                                    F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            UnaryKind::LeakyRelu(a) => {
                                if x > F::zero() {
                                    F::one()
                                } else {
                                    F::of(a)
                                }
                            }
                            UnaryKind::Silu => {
                                let s = sigmoid(x);
                                s * (F::one() + x * (F::one() - s))
                            }
                            UnaryKind::Log => F::one() / x,
                            UnaryKind::Exp => y,
                            UnaryKind::Abs => x.signum(),
                            UnaryKind::Clamp(lo, hi) => {
                                if x >= F::of(lo) && x <= F::of(hi) {
                                    F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            UnaryKind::Square => F::of(2.0) * x,
                            UnaryKind::Sqrt => F::of(0.5) / y,
                            UnaryKind::Tanh => F::one() - y * y,
                            UnaryKind::Softplus => sigmoid(x),
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Affine { x, mul } => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *mul).collect());
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SumLast { x, last } => {
                let gx = g.iter().flat_map(|&v| std::iter::repeat(v).take(*last)).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::MaxLast { x, last, argmax } => {
                let mut gx = vec![F::zero(); g.len() * last];
                for (r, (&gv, &j)) in g.iter().zip(argmax).enumerate() {
                    gx[r * last + j] = gv;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.requires_grad(*a) {
                    let db = self.value(*b).data();
                    let mut ga = vec![F::zero(); m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &db[p * n..(p + 1) * n];
                            ga[i * k + p] = dot(grow, brow);
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let da = self.value(*a).data();
                    let mut gb = vec![F::zero(); k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = da[i * k + p];
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose { x, rows, cols } => {
                let mut gx = vec![F::zero(); rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        gx[r * cols + c] = g[c * rows + r];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::Narrow { x, offset } => {
                let mut gx = vec![F::zero(); self.value(*x).numel()];
                gx[*offset..*offset + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, gx);
            }
            Op::NarrowLast { x, start, len, last } => {
                let rows = g.len() / len;
                let mut gx = vec![F::zero(); rows * last];
                for r in 0..rows {
                    gx[r * last + start..r * last + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, idx, row } => {
                let mut gx = vec![F::zero(); self.value(*x).numel()];
                for (o, i) in idx.iter().enumerate() {
                    if let Some(i) = i {
                        for (a, &b) in gx[i * row..(i + 1) * row].iter_mut().zip(&g[o * row..(o + 1) * row]) {
                            *a += b;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatLast { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = g.len() / total;
                let mut off = 0;
                for &(p, w) in parts {
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::Conv2d { input, kernel, geom } => self.conv_backward(*input, *kernel, geom, g, grads),
            Op::SoftmaxLast { x, last } => {
                let mut gx = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(*last).zip(y.chunks(*last)) {
                    let gy: F = dot(gr, yr);
                    gx.extend(gr.iter().zip(yr).map(|(&a, &b)| b * (a - gy)));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Bilinear { field, xy, frames, geom } => {
                let c = geom.c;
                let fd = self.value(*field).data();
                let pd = self.value(*xy).data();
                let want_f = self.requires_grad(*field);
                let want_p = self.requires_grad(*xy);
                let mut gf = if want_f { vec![F::zero(); fd.len()] } else { Vec::new() };
                let mut gp = vec![F::zero(); pd.len()];
                for (i, &fr) in frames.iter().enumerate() {
                    let grow = &g[i * c..(i + 1) * c];
                    let (x, y) = (pd[2 * i], pd[2 * i + 1]);
                    let fx = x - x.floor();
                    let fy = y - y.floor();
                    for_each_tap(geom, fr, x, y, |base, wgt, dx, dy| {
                        let vals = &fd[base..base + c];
                        if want_f {
                            for (o, &gv) in gf[base..base + c].iter_mut().zip(grow) {
                                *o += wgt * gv;
                            }
                        }
                        if want_p {
                            let s: F = dot(grow, vals);
                            // d(weight)/dx and d(weight)/dy for this tap
                            let wy = if dy { fy } else { F::one() - fy };
                            let wx = if dx { fx } else { F::one() - fx };
                            let sx = if dx { F::one() } else { -F::one() };
                            let sy = if dy { F::one() } else { -F::one() };
                            gp[2 * i] += s * sx * wy;
                            gp[2 * i + 1] += s * sy * wx;
                        }
                    });
                }
                if want_f {
                    self.accumulate(grads, *field, gf);
                }
                if want_p {
                    self.accumulate(grads, *xy, gp);
                }
            }
            Op::L2NormLast { x, last, norms } => {
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), &n) in g.chunks(*last).zip(y.chunks(*last)).zip(norms) {
                    let gy: F = dot(gr, yr);
                    gx.extend(gr.iter().zip(yr).map(|(&a, &b)| (a - b * gy) / n));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::HuberNorm { diff, last, knee } => {
                let dd = self.value(*diff).data();
                let mut gx = Vec::with_capacity(dd.len());
                for (r, &gv) in dd.chunks(*last).zip(g) {
                    let d = r.iter().map(|&v| v * v).sum::<F>().sqrt();
                    if d <= *knee {
                        gx.extend(r.iter().map(|&v| gv * v));
                    } else {
                        gx.extend(r.iter().map(|&v| gv * *knee * v / d));
                    }
                }
                self.accumulate(grads, *diff, gx);
            }
            Op::Bce { logits, targets } => {
                let xl = self.value(*logits).data();
                let yt = self.value(*targets).data();
                if self.requires_grad(*logits) {
                    let gl = g.iter().zip(xl).zip(yt).map(|((&g, &x), &t)| g * (sigmoid(x) - t)).collect();
                    self.accumulate(grads, *logits, gl);
                }
                if self.requires_grad(*targets) {
                    let gt = g.iter().zip(xl).map(|(&g, &x)| -g * x).collect();
                    self.accumulate(grads, *targets, gt);
                }
            }
        }
    }

    fn conv_backward(&self, input: Var, kernel: Var, geom: &ConvGeom, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let ConvGeom {
            batch,
            h,
            w,
            cin,
            cout,
            k,
            stride,
            oh,
            ow,
        } = *geom;
        let x = self.value(input).data();
        let kd = self.value(kernel).data();
        let want_i = self.requires_grad(input);
        let want_k = self.requires_grad(kernel);
        let mut gi = if want_i { vec![F::zero(); x.len()] } else { Vec::new() };
        let mut gk = if want_k { vec![F::zero(); kd.len()] } else { Vec::new() };
        let pad = (k / 2) as isize;
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let obase = ((b * oh + oy) * ow + ox) * cout;
                    let grow = &g[obase..obase + cout];
                    for ky in 0..k {
                        let iy = (oy * stride) as isize + ky as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride) as isize + kx as isize - pad;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ibase = ((b * h + iy as usize) * w + ix as usize) * cin;
                            for ci in 0..cin {
                                let kbase = ((ky * k + kx) * cin + ci) * cout;
                                if want_i {
                                    gi[ibase + ci] += dot(grow, &kd[kbase..kbase + cout]);
                                }
                                if want_k {
                                    let v = x[ibase + ci];
                                    for (o, &gv) in gk[kbase..kbase + cout].iter_mut().zip(grow) {
                                        *o += v * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if want_i {
            self.accumulate(grads, input, gi);
        }
        if want_k {
            if self.fault == Some(Fault::ConvKernelGrad) {
                for v in &mut gk {
                    *v *= F::of(1.5);
                }
            }
            self.accumulate(grads, kernel, gk);
        }
    }
}

/// Dot product with eight independent partial sums, so the compiler can
/// vectorize it; the summation order is fixed, so results stay deterministic.
#[inline]
fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [F::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Visit the (up to four) in-bounds bilinear taps of point `(x, y)` in frame
/// `frame`: `f(base_offset, weight, is_right_tap, is_lower_tap)`.
#[inline]
fn for_each_tap<F: Real>(geom: &FieldGeom, frame: usize, x: F, y: F, mut f: impl FnMut(usize, F, bool, bool)) {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (Some(xi), Some(yi)) = (x0.to_i64(), y0.to_i64()) else {
        return;
    };
    for (dy, wy) in [(false, F::one() - fy), (true, fy)] {
        let yy = yi + dy as i64;
        if yy < 0 || yy >= geom.h as i64 {
            continue;
        }
        for (dx, wx) in [(false, F::one() - fx), (true, fx)] {
            let xx = xi + dx as i64;
            if xx < 0 || xx >= geom.w as i64 {
                continue;
            }
            let base = ((frame * geom.h + yy as usize) * geom.w + xx as usize) * geom.c;
            f(base, wx * wy, dx, dy);
        }
    }
}
