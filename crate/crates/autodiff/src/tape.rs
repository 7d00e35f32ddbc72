use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::kernels::{self, gemm};
use crate::{AutodiffError, Result, Shape};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// A dense row-major tensor value, detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != data.len() {
            return Err(AutodiffError::InvalidShape(dims.to_vec()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            data: vec![0.0; shape.numel()],
            shape,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![v],
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Hand-written backward for a node recorded with [`Tape::custom`].
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients for each input (same order and lengths as `inputs`), given
    /// the gradient of the output.
    fn backward(&self, inputs: &[&[f64]], output: &[f64], grad_output: &[f64]) -> Vec<Vec<f64>>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Gelu,
    Square,
    Exp,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Square(usize),
    Exp(usize),
    AddRow(usize, usize),
    ScaleRows(usize, Vec<f64>),
    MulScalar(usize, usize),
    RmsNorm {
        x: usize,
        gain: usize,
        inv_rms: Vec<f64>,
    },
    GatherRows(usize, Vec<usize>),
    ConcatRows(usize, usize),
    SliceRows(usize, usize),
    MeanRows(usize),
    Sum(usize),
    Mean(usize),
    SoftmaxRows(usize),
    Nll {
        probs: usize,
        targets: Vec<usize>,
        eps: f64,
    },
    Custom(Vec<usize>, Box<dyn CustomOp>),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Square(_) => "square",
            Op::Exp(_) => "exp",
            Op::AddRow(..) => "add_row",
            Op::ScaleRows(..) => "scale_rows",
            Op::MulScalar(..) => "mul_scalar",
            Op::RmsNorm { .. } => "rms_norm",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::MeanRows(_) => "mean_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Nll { .. } => "nll",
            Op::Custom(_, op) => op.name(),
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Square(a)
            | Op::Exp(a)
            | Op::ScaleRows(a, _)
            | Op::GatherRows(a, _)
            | Op::SliceRows(a, _)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SoftmaxRows(a) => vec![*a],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b)
            | Op::ConcatRows(a, b) => vec![*a, *b],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::Nll { probs, .. } => vec![*probs],
            Op::Custom(inputs, _) => inputs.clone(),
        }
    }
}

struct Node {
    shape: Shape,
    value: Arc<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a computation. Parents always precede children.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(AutodiffError::ForeignVar {
                expected: self.id,
                found: v.tape,
            });
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        let i = self.check(v)?;
        Ok(&self.nodes[i])
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.numel(), value.len());
        let requires_grad = op.parents().iter().any(|&p| self.nodes[p].requires_grad);
        self.push_arc(shape, Arc::new(value), requires_grad, op)
    }

    fn push_arc(&mut self, shape: Shape, value: Arc<Vec<f64>>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    // ---- leaves -------------------------------------------------------

    /// A trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push_arc(t.shape, Arc::new(t.data.clone()), true, Op::Leaf)
    }

    /// A trainable leaf sharing its storage with the caller.
    pub fn param_shared(&mut self, shape: Shape, data: Arc<Vec<f64>>) -> Result<Var> {
        if shape.numel() != data.len() {
            return Err(AutodiffError::InvalidShape(shape.dims().to_vec()));
        }
        Ok(self.push_arc(shape, data, true, Op::Leaf))
    }

    /// A constant leaf; never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push_arc(t.shape, Arc::new(t.data.clone()), false, Op::Leaf)
    }

    pub fn constant_from(&mut self, dims: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(dims, data)?;
        Ok(self.push_arc(t.shape, Arc::new(t.data), false, Op::Leaf))
    }

    // ---- inspection ---------------------------------------------------

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).expect("var from another tape").value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.node(v).expect("var from another tape").shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v).expect("var from another tape");
        Tensor {
            shape: n.shape,
            data: n.value.as_ref().clone(),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).map(|n| n.requires_grad).unwrap_or(false)
    }

    pub fn op_kind(&self, v: Var) -> &'static str {
        self.node(v).expect("var from another tape").op.kind()
    }

    pub fn parents(&self, v: Var) -> Vec<Var> {
        self.node(v)
            .expect("var from another tape")
            .op
            .parents()
            .into_iter()
            .map(|index| Var {
                tape: self.id,
                index,
            })
            .collect()
    }

    /// Gradient of the last `backward` root with respect to `v`.
    ///
    /// `None` before any backward pass, or for nodes that do not require a
    /// gradient. Requires-grad nodes that are not ancestors of the root get
    /// an all-zero gradient.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        let i = self.check(v).ok()?;
        self.grads.get(i)?.as_deref()
    }

    // ---- primitive operations ----------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.shape, self.node(b)?.shape);
        let ((m, k), (k2, n)) = match (sa.as_matrix(), sb.as_matrix()) {
            (Some(x), Some(y)) if x.1 == y.0 => (x, y),
            _ => {
                return Err(AutodiffError::Dimension {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        debug_assert_eq!(k, k2);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        Ok(self.push(Shape::matrix(m, n), out, Op::MatMul(a.index, b.index)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.shape;
        let (r, c) = s.as_matrix().ok_or(AutodiffError::Dimension {
            op: "transpose",
            lhs: s,
            rhs: s,
        })?;
        let src = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Shape::matrix(c, r), out, Op::Transpose(a.index)))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let s = self.node(a)?.shape;
        let target = Shape::new(dims)?;
        if target.numel() != s.numel() {
            return Err(AutodiffError::Dimension {
                op: "reshape",
                lhs: s,
                rhs: target,
            });
        }
        let value = self.nodes[a.index].value.clone();
        let rg = self.nodes[a.index].requires_grad;
        Ok(self.push_arc(target, value, rg, Op::Reshape(a.index)))
    }

    /// Dispatch over the elementwise family. Binary kinds require `b`.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || AutodiffError::contract("elementwise", format!("{kind:?} needs two operands"));
        match kind {
            ElementwiseKind::Add => self.add(a, b.ok_or_else(need_b)?),
            ElementwiseKind::Sub => self.sub(a, b.ok_or_else(need_b)?),
            ElementwiseKind::Mul => self.mul(a, b.ok_or_else(need_b)?),
            ElementwiseKind::Scale(c) => self.scale(a, c),
            ElementwiseKind::Gelu => self.gelu(a),
            ElementwiseKind::Square => self.square(a),
            ElementwiseKind::Exp => self.exp(a),
        }
    }

    fn binary_shapes(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.node(a)?.shape, self.node(b)?.shape);
        if sa != sb {
            return Err(AutodiffError::Dimension { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.value(a).iter().map(|&x| f(x)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.binary_shapes("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(s, out, Op::Add(a.index, b.index)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.binary_shapes("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(s, out, Op::Sub(a.index, b.index)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.binary_shapes("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(s, out, Op::Mul(a.index, b.index)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.node(a)?.shape;
        let out = self.map(a, |x| c * x);
        Ok(self.push(s, out, Op::Scale(a.index, c)))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.shape;
        let out = self.map(a, kernels::gelu);
        Ok(self.push(s, out, Op::Gelu(a.index)))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.shape;
        let out = self.map(a, |x| x * x);
        Ok(self.push(s, out, Op::Square(a.index)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.shape;
        let out = self.map(a, f64::exp);
        Ok(self.push(s, out, Op::Exp(a.index)))
    }

    /// `x + b` with `b` broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.node(x)?.shape, self.node(b)?.shape);
        let d = sx.last();
        if sb.numel() != d {
            return Err(AutodiffError::Dimension {
                op: "add_row",
                lhs: sx,
                rhs: sb,
            });
        }
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(d) {
            row.iter_mut().zip(bias).for_each(|(o, v)| *o += v);
        }
        Ok(self.push(sx, out, Op::AddRow(x.index, b.index)))
    }

    /// Row `i` of `x` multiplied by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var> {
        let sx = self.node(x)?.shape;
        if sx.rows() != factors.len() {
            return Err(AutodiffError::Dimension {
                op: "scale_rows",
                lhs: sx,
                rhs: Shape::vector(factors.len()),
            });
        }
        let d = sx.last();
        let mut out = self.value(x).to_vec();
        for (row, f) in out.chunks_exact_mut(d).zip(factors) {
            row.iter_mut().for_each(|v| *v *= f);
        }
        Ok(self.push(sx, out, Op::ScaleRows(x.index, factors.to_vec())))
    }

    /// `x · s` for a single-element `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let (sx, ss) = (self.node(x)?.shape, self.node(s)?.shape);
        if !ss.is_scalar() {
            return Err(AutodiffError::Dimension {
                op: "mul_scalar",
                lhs: sx,
                rhs: ss,
            });
        }
        let c = self.value(s)[0];
        let out = self.map(x, |v| v * c);
        Ok(self.push(sx, out, Op::MulScalar(x.index, s.index)))
    }

    /// Each row divided by `sqrt(mean(row²) + eps)` then scaled by `gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (sx, sg) = (self.node(x)?.shape, self.node(gain)?.shape);
        let d = sx.last();
        if d == 0 || sg.numel() != d {
            return Err(AutodiffError::Dimension {
                op: "rms_norm",
                lhs: sx,
                rhs: sg,
            });
        }
        let g = self.value(gain);
        let xs = self.value(x);
        let mut out = vec![0.0; xs.len()];
        let mut inv_rms = Vec::with_capacity(sx.rows());
        for (row, orow) in xs.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            for ((o, v), gj) in orow.iter_mut().zip(row).zip(g) {
                *o = v * r * gj;
            }
            inv_rms.push(r);
        }
        Ok(self.push(
            sx,
            out,
            Op::RmsNorm {
                x: x.index,
                gain: gain.index,
                inv_rms,
            },
        ))
    }

    /// Rows of a rank-2 `x` picked by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let sx = self.node(x)?.shape;
        let (n, d) = sx.as_matrix().ok_or(AutodiffError::Dimension {
            op: "gather_rows",
            lhs: sx,
            rhs: Shape::vector(idx.len()),
        })?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(AutodiffError::contract(
                "gather_rows",
                format!("row {bad} out of range for {sx}"),
            ));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(Shape::matrix(idx.len(), d), out, Op::GatherRows(x.index, idx.to_vec())))
    }

    /// `[a; b]` stacked along rows.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.node(a)?.shape, self.node(b)?.shape);
        match (sa.as_matrix(), sb.as_matrix()) {
            (Some((na, da)), Some((nb, db))) if da == db => {
                let mut out = Vec::with_capacity((na + nb) * da);
                out.extend_from_slice(self.value(a));
                out.extend_from_slice(self.value(b));
                Ok(self.push(Shape::matrix(na + nb, da), out, Op::ConcatRows(a.index, b.index)))
            }
            _ => Err(AutodiffError::Dimension {
                op: "concat_rows",
                lhs: sa,
                rhs: sb,
            }),
        }
    }

    /// Rows `start..start + len` of a rank-2 `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.node(x)?.shape;
        let (n, d) = sx.as_matrix().ok_or(AutodiffError::Dimension {
            op: "slice_rows",
            lhs: sx,
            rhs: sx,
        })?;
        if start + len > n {
            return Err(AutodiffError::contract(
                "slice_rows",
                format!("rows {start}..{} out of range for {sx}", start + len),
            ));
        }
        let out = self.value(x)[start * d..(start + len) * d].to_vec();
        Ok(self.push(Shape::matrix(len, d), out, Op::SliceRows(x.index, start)))
    }

    /// Column means of a rank-2 `x`, as a `1×d` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.node(x)?.shape;
        let (n, d) = match sx.as_matrix() {
            Some((n, d)) if n > 0 => (n, d),
            _ => {
                return Err(AutodiffError::contract(
                    "mean_rows",
                    format!("needs a non-empty matrix, got {sx}"),
                ))
            }
        };
        let mut out = vec![0.0; d];
        for row in self.value(x).chunks_exact(d) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        Ok(self.push(Shape::matrix(1, d), out, Op::MeanRows(x.index)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.node(x)?;
        let s: f64 = self.value(x).iter().sum();
        Ok(self.push(Shape::scalar(), vec![s], Op::Sum(x.index)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?.shape.numel();
        if n == 0 {
            return Err(AutodiffError::contract("mean", "empty tensor"));
        }
        let s: f64 = self.value(x).iter().sum::<f64>() / n as f64;
        Ok(self.push(Shape::scalar(), vec![s], Op::Mean(x.index)))
    }

    /// Softmax over the trailing axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.node(x)?.shape;
        let d = sx.last();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(d) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(self.push(sx, out, Op::SoftmaxRows(x.index)))
    }

    /// `−mean_i log(max(probs[i, targets[i]], eps))`.
    pub fn nll(&mut self, probs: Var, targets: &[usize], eps: f64) -> Result<Var> {
        let sp = self.node(probs)?.shape;
        let c = sp.last();
        if sp.rows() != targets.len() || targets.is_empty() {
            return Err(AutodiffError::Dimension {
                op: "nll",
                lhs: sp,
                rhs: Shape::vector(targets.len()),
            });
        }
        let p = self.value(probs);
        if let Some(bad) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AutodiffError::contract(
                "nll",
                format!("probability {bad} outside [0, 1]"),
            ));
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(AutodiffError::contract(
                    "nll",
                    format!("target class {t} out of range for {c} classes"),
                ));
            }
            total -= p[i * c + t].max(eps).ln();
        }
        let loss = total / targets.len() as f64;
        Ok(self.push(
            Shape::scalar(),
            vec![loss],
            Op::Nll {
                probs: probs.index,
                targets: targets.to_vec(),
                eps,
            },
        ))
    }

    /// Record a node whose value was computed by the caller and whose
    /// gradient is supplied by `op`.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        shape: Shape,
        value: Vec<f64>,
        op: Box<dyn CustomOp>,
    ) -> Result<Var> {
        if shape.numel() != value.len() {
            return Err(AutodiffError::InvalidShape(shape.dims().to_vec()));
        }
        let idx = inputs
            .iter()
            .map(|&v| self.check(v))
            .collect::<Result<Vec<_>>>()?;
        Ok(self.push(shape, value, Op::Custom(idx, op)))
    }

    // ---- reverse pass -------------------------------------------------

    /// Populate gradients of the scalar `root` with respect to every node.
    ///
    /// Repeated calls recompute from scratch and give identical results.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let r = self.check(root)?;
        let rs = self.nodes[r].shape;
        if !rs.is_scalar() {
            return Err(AutodiffError::contract(
                "backward",
                format!("root must be a scalar, got {rs}"),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[r].requires_grad {
            grads[r] = Some(vec![1.0]);
        }
        for i in (0..=r).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.shape.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        // Accumulate `f(buffer)` into the gradient slot of node `p`.
        let mut acc = |p: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[p].requires_grad {
                return;
            }
            let slot = grads[p].get_or_insert_with(|| vec![0.0; nodes[p].shape.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[*a].shape.as_matrix().unwrap();
                let n = nodes[*b].shape.as_matrix().unwrap().1;
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                // dA = G · Bᵀ, dB = Aᵀ · G
                acc(*a, &mut |s| gemm(m, n, k, g, false, bv, true, s, true));
                acc(*b, &mut |s| gemm(k, m, n, av, true, g, false, s, true));
            }
            Op::Transpose(a) => {
                let (r, c) = nodes[*a].shape.as_matrix().unwrap();
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                acc(*a, &mut |s| {
                    for ((o, gv), y) in s.iter_mut().zip(g).zip(bv.iter()) {
                        *o += gv * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((o, gv), x) in s.iter_mut().zip(g).zip(av.iter()) {
                        *o += gv * x;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| kernels::axpy(*c, g, s)),
            Op::Gelu(a) => {
                let x = &nodes[*a].value;
                acc(*a, &mut |s| {
                    for ((o, gv), xv) in s.iter_mut().zip(g).zip(x.iter()) {
                        *o += gv * kernels::gelu_grad(*xv);
                    }
                });
            }
            Op::Square(a) => {
                let x = &nodes[*a].value;
                acc(*a, &mut |s| {
                    for ((o, gv), xv) in s.iter_mut().zip(g).zip(x.iter()) {
                        *o += 2.0 * xv * gv;
                    }
                });
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, &mut |s| {
                    for ((o, gv), yv) in s.iter_mut().zip(g).zip(y.iter()) {
                        *o += gv * yv;
                    }
                });
            }
            Op::AddRow(x, b) => {
                let d = nodes[*x].shape.last();
                acc(*x, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    for row in g.chunks_exact(d) {
                        add_into(s, row);
                    }
                });
            }
            Op::ScaleRows(x, factors) => {
                let d = nodes[*x].shape.last();
                acc(*x, &mut |s| {
                    for ((srow, grow), f) in s.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(factors) {
                        kernels::axpy(*f, grow, srow);
                    }
                });
            }
            Op::MulScalar(x, sv) => {
                let c = nodes[*sv].value[0];
                let xv = &nodes[*x].value;
                acc(*x, &mut |s| kernels::axpy(c, g, s));
                acc(*sv, &mut |s| s[0] += kernels::dot(g, xv));
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let d = nodes[*x].shape.last();
                let xv = &nodes[*x].value;
                let gv = &nodes[*gain].value;
                acc(*x, &mut |s| {
                    for (((srow, grow), xrow), r) in s
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(xv.chunks_exact(d))
                        .zip(inv_rms)
                    {
                        let proj: f64 = grow
                            .iter()
                            .zip(gv.iter())
                            .zip(xrow)
                            .map(|((dy, gj), xj)| dy * gj * xj)
                            .sum();
                        let coef = r * r * r * proj / d as f64;
                        for j in 0..d {
                            srow[j] += r * gv[j] * grow[j] - coef * xrow[j];
                        }
                    }
                });
                acc(*gain, &mut |s| {
                    for ((grow, xrow), r) in g.chunks_exact(d).zip(xv.chunks_exact(d)).zip(inv_rms) {
                        for j in 0..d {
                            s[j] += grow[j] * xrow[j] * r;
                        }
                    }
                });
            }
            Op::GatherRows(x, idx) => {
                let d = nodes[*x].shape.last();
                acc(*x, &mut |s| {
                    for (grow, &i) in g.chunks_exact(d).zip(idx) {
                        add_into(&mut s[i * d..(i + 1) * d], grow);
                    }
                });
            }
            Op::ConcatRows(a, b) => {
                let na = nodes[*a].shape.numel();
                acc(*a, &mut |s| add_into(s, &g[..na]));
                acc(*b, &mut |s| add_into(s, &g[na..]));
            }
            Op::SliceRows(x, start) => {
                let d = nodes[*x].shape.last();
                let off = start * d;
                acc(*x, &mut |s| add_into(&mut s[off..off + g.len()], g));
            }
            Op::MeanRows(x) => {
                let n = nodes[*x].shape.rows() as f64;
                acc(*x, &mut |s| {
                    for row in s.chunks_exact_mut(g.len()) {
                        kernels::axpy(1.0 / n, g, row);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(x) => {
                let n = nodes[*x].shape.numel() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|v| *v += g[0] / n));
            }
            Op::SoftmaxRows(x) => {
                let d = nodes[*x].shape.last();
                let y = &node.value;
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in s.chunks_exact_mut(d).zip(g.chunks_exact(d)).zip(y.chunks_exact(d)) {
                        let inner = kernels::dot(grow, yrow);
                        for j in 0..d {
                            srow[j] += yrow[j] * (grow[j] - inner);
                        }
                    }
                });
            }
            Op::Nll { probs, targets, eps } => {
                let c = nodes[*probs].shape.last();
                let p = &nodes[*probs].value;
                let n = targets.len() as f64;
                acc(*probs, &mut |s| {
                    for (i, &t) in targets.iter().enumerate() {
                        let pv = p[i * c + t];
                        if pv > *eps {
                            s[i * c + t] -= g[0] / (n * pv);
                        }
                    }
                });
            }
            Op::Custom(inputs, op) => {
                let ins: Vec<&[f64]> = inputs.iter().map(|&p| nodes[p].value.as_slice()).collect();
                let local = op.backward(&ins, &node.value, g);
                debug_assert_eq!(local.len(), inputs.len());
                for (&p, lg) in inputs.iter().zip(&local) {
                    acc(p, &mut |s| add_into(s, lg));
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
