//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its output values and a backward
//! rule. Inputs always precede outputs, so the reverse of insertion order is a
//! valid topological order and `backward` visits each node once.

use super::gemm::{gemm, Operand};
use super::{NumericsError, Result, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero padding applied before and after each spatial axis of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub before: usize,
    pub after: usize,
}

impl Padding {
    pub fn same(p: usize) -> Self {
        Self { before: p, after: p }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Relu,
    Exp,
    Log,
    Sigmoid,
    Abs,
    Softplus,
    Square,
    Clamp,
    Sum,
    SumLast,
    Reshape,
    SliceCols,
    Concat,
    ConcatCols,
    GatherRows,
    GatherFlat,
    Softmax,
    LogSoftmax,
    LayerNorm,
    Conv2d,
    Upsample,
    Downsample,
    SampleBilinear,
    InterpRows,
    MaskFill,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: Padding,
    h_out: usize,
    w_out: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Abs(Var),
    Softplus(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumLast(Var),
    Reshape(Var),
    SliceCols { src: Var, start: usize },
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { src: Var, idx: Vec<usize> },
    GatherFlat { src: Var, idx: Vec<usize> },
    Softmax { src: Var, axis: usize },
    LogSoftmax { src: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, cols: Vec<f64>, geom: ConvGeom },
    Upsample { src: Var, factor: usize },
    Downsample { src: Var, factor: usize },
    SampleBilinear { map: Var, points: Var, taps: Vec<BilinearTap> },
    InterpRows { table: Var, pos: Var, taps: Vec<RowTap> },
    MaskFill { src: Var, mask: Vec<bool> },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(..) => OpKind::AddScalar,
            Op::Relu(..) => OpKind::Relu,
            Op::Exp(..) => OpKind::Exp,
            Op::Log(..) => OpKind::Log,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Abs(..) => OpKind::Abs,
            Op::Softplus(..) => OpKind::Softplus,
            Op::Square(..) => OpKind::Square,
            Op::Clamp(..) => OpKind::Clamp,
            Op::Sum(..) => OpKind::Sum,
            Op::SumLast(..) => OpKind::SumLast,
            Op::Reshape(..) => OpKind::Reshape,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Concat(..) => OpKind::Concat,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::GatherFlat { .. } => OpKind::GatherFlat,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::Downsample { .. } => OpKind::Downsample,
            Op::SampleBilinear { .. } => OpKind::SampleBilinear,
            Op::InterpRows { .. } => OpKind::InterpRows,
            Op::MaskFill { .. } => OpKind::MaskFill,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct BilinearTap {
    idx: [usize; 4],
    fx: f64,
    fy: f64,
    // d(grid coordinate)/d(normalized coordinate), zero when clamped
    sx: f64,
    sy: f64,
}

#[derive(Clone, Copy, Debug)]
struct RowTap {
    r0: usize,
    r1: usize,
    frac: f64,
    live: bool,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation and replays it backwards.
///
/// A tape is single-threaded; build one per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    fault: Option<(OpKind, f64)>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scales every input gradient produced by operations of `kind` by
    /// `factor`. Used to confirm that gradient checking detects a broken rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite { op: format!("{:?}", op.kind()) });
        }
        self.nodes.push(Node { shape, value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_values(), Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_values(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        self.constant(Tensor::new(shape, values)?)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var> {
        self.constant(Tensor::scalar(value))
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let n = self.node(v);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn value(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::dimension("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            Operand::new(self.values(a), m, k),
            Operand::new(self.values(b), k, n),
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        self.push(vec![m, n], out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::dimension("transpose", format!("{s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.values(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(vec![n, m], out, Op::Transpose(a), rg)
    }

    // ---- elementwise ---------------------------------------------------

    fn broadcast_len(&self, op: &str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let suffix = sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb;
        if suffix || numel(sb) == 1 {
            Ok(numel(sb))
        } else {
            Err(NumericsError::dimension(op, format!("cannot broadcast {sb:?} onto {sa:?}")))
        }
    }

    fn binary(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let blen = self.broadcast_len(name, a, b)?;
        let (va, vb) = (self.values(a), self.values(b));
        let out: Vec<f64> = va.iter().enumerate().map(|(i, &x)| f(x, vb[i % blen])).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(shape, out, op, rg)
    }

    /// `a + b`, with `b` broadcast over the leading dimensions of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out: Vec<f64> = self.values(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    /// `c - a`.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Result<Var> {
        let n = self.neg(a)?;
        self.add_scalar(n, c)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Clamp into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Replaces masked entries by `fill`; their gradient is dropped.
    pub fn mask_fill(&mut self, a: Var, mask: Vec<bool>, fill: f64) -> Result<Var> {
        if mask.len() != self.values(a).len() {
            return Err(NumericsError::dimension("mask_fill", "mask length"));
        }
        let out: Vec<f64> = self
            .values(a)
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| if m { fill } else { x })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::MaskFill { src: a, mask }, rg)
    }

    // ---- reductions and shape ------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.values(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.values(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last axis: `[..., n] -> [...]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some((&n, lead)) = shape.split_last() else {
            return Err(NumericsError::dimension("sum_last", "scalar input"));
        };
        let out: Vec<f64> = self.values(a).chunks(n).map(|c| c.iter().sum()).collect();
        let rg = self.rg(&[a]);
        self.push(lead.to_vec(), out, Op::SumLast(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.values(a).len() {
            return Err(NumericsError::dimension(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let out = self.values(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(shape.to_vec(), out, Op::Reshape(a), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start + len > s[1] || len == 0 {
            return Err(NumericsError::dimension("slice_cols", format!("{s:?}[{start}..+{len}]")));
        }
        let src = self.values(a);
        let out: Vec<f64> = src
            .chunks(s[1])
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(&[a]);
        self.push(vec![s[0], len], out, Op::SliceCols { src: a, start }, rg)
    }

    /// Concatenation along axis 0; trailing shapes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| NumericsError::dimension("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(NumericsError::dimension("concat", format!("{s:?} vs [_, {tail:?}]")));
            }
            lead += s[0];
            out.extend_from_slice(self.values(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.rg(parts);
        self.push(shape, out, Op::Concat(parts.to_vec()), rg)
    }

    /// Concatenation of 2-D tensors along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| NumericsError::dimension("concat_cols", "no inputs"))?;
        let rows = self.shape(*first)[0];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(NumericsError::dimension("concat_cols", format!("{s:?}")));
            }
            total += s[1];
        }
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let w = self.shape(p)[1];
            let src = self.values(p);
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Selects rows of a 2-D tensor (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || idx.iter().any(|&i| i >= s[0]) || idx.is_empty() {
            return Err(NumericsError::dimension("gather_rows", format!("{s:?} at {idx:?}")));
        }
        let src = self.values(a);
        let out: Vec<f64> = idx
            .iter()
            .flat_map(|&i| src[i * s[1]..(i + 1) * s[1]].iter().copied())
            .collect();
        let rg = self.rg(&[a]);
        self.push(vec![idx.len(), s[1]], out, Op::GatherRows { src: a, idx: idx.to_vec() }, rg)
    }

    /// Selects entries by flat index, producing a 1-D tensor.
    pub fn gather_flat(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = self.values(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= src.len()) {
            return Err(NumericsError::dimension("gather_flat", "index out of range"));
        }
        let out: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[a]);
        self.push(vec![idx.len()], out, Op::GatherFlat { src: a, idx: idx.to_vec() }, rg)
    }

    // ---- normalisation ---------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::dimension("softmax", format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.values(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::Softmax { src: a, axis }, rg)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(NumericsError::dimension("log_softmax", format!("axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.values(a);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (src[at(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[at(j)] = src[at(j)] - lse;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(shape, out, Op::LogSoftmax { src: a, axis }, rg)
    }

    /// Normalises each slice along the last axis, then applies `gain` and
    /// `bias` (both of length `C`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| NumericsError::dimension("layer_norm", "scalar"))?;
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(NumericsError::dimension("layer_norm", "affine parameters must be [C]"));
        }
        let (src, g, b) = (self.values(x), self.values(gain), self.values(bias));
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = Vec::with_capacity(src.len() / c);
        let mut out = vec![0.0; src.len()];
        for (row, chunk) in src.chunks(c).enumerate() {
            let mean = chunk.iter().sum::<f64>() / c as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd.push(r);
            for j in 0..c {
                let h = (chunk[j] - mean) * r;
                xhat[row * c + j] = h;
                out[row * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        self.push(shape, out, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    // ---- convolution and resampling ---------------------------------------

    /// Cross-correlation of `x: [C_in, H, W]` with `w: [C_out, C_in, K, K]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: Padding) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || stride == 0 {
            return Err(NumericsError::dimension("conv2d", format!("input {sx:?}, kernels {sw:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(NumericsError::dimension("conv2d", "bias must be [C_out]"));
            }
        }
        let (c_in, h, wd, c_out, k) = (sx[0], sx[1], sx[2], sw[0], sw[2]);
        let out_extent = |len: usize| -> Result<usize> {
            let padded = len + pad.before + pad.after;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(NumericsError::dimension(
                    "conv2d",
                    format!("extent {len} with kernel {k}, stride {stride}, padding {pad:?} is not integral"),
                ));
            }
            Ok((padded - k) / stride + 1)
        };
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
            h_out: out_extent(h)?,
            w_out: out_extent(wd)?,
        };
        let cols = im2col(self.values(x), &geom);
        let p = geom.h_out * geom.w_out;
        let r = c_in * k * k;
        let mut out = vec![0.0; c_out * p];
        gemm(Operand::new(self.values(w), c_out, r), Operand::new(&cols, r, p), &mut out, false);
        if let Some(b) = b {
            let bv = self.values(b);
            for (co, row) in out.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += bv[co]);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        self.push(vec![c_out, geom.h_out, geom.w_out], out, Op::Conv2d { x, w, b, cols, geom }, rg)
    }

    /// Nearest-neighbour upsampling of `[C, H, W]` by an integer factor.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || !factor.is_power_of_two() {
            return Err(NumericsError::dimension("upsample_nearest", format!("{s:?} by {factor}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h * factor, w * factor);
        let src = self.values(a);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    out[(ch * ho + y) * wo + x] = src[(ch * h + y / factor) * w + x / factor];
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(vec![c, ho, wo], out, Op::Upsample { src: a, factor }, rg)
    }

    /// Nearest-neighbour downsampling: output `(y, x)` reads input `(y·f, x·f)`.
    pub fn downsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || !factor.is_power_of_two() || !s[1].is_multiple_of(factor) || !s[2].is_multiple_of(factor) {
            return Err(NumericsError::dimension("downsample_nearest", format!("{s:?} by {factor}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / factor, w / factor);
        let src = self.values(a);
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    out[(ch * ho + y) * wo + x] = src[(ch * h + y * factor) * w + x * factor];
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(vec![c, ho, wo], out, Op::Downsample { src: a, factor }, rg)
    }

    /// Bilinear lookup into `map: [H, W]` at normalised points `[P, 2]`
    /// holding `(x, y)` in `[0, 1]`. Cell `(i, j)` sits at
    /// `((j + 0.5) / W, (i + 0.5) / H)`; lookups outside the cell-centre hull
    /// clamp to the border.
    pub fn sample_bilinear(&mut self, map: Var, points: Var) -> Result<Var> {
        let (sm, sp) = (self.shape(map).to_vec(), self.shape(points).to_vec());
        if sm.len() != 2 || sp.len() != 2 || sp[1] != 2 {
            return Err(NumericsError::dimension("sample_bilinear", format!("{sm:?} at {sp:?}")));
        }
        let (h, w) = (sm[0], sm[1]);
        let m = self.values(map);
        let pts = self.values(points);
        let axis = |u: f64, len: usize| -> (usize, usize, f64, f64) {
            let g = u * len as f64 - 0.5;
            let hi = (len - 1) as f64;
            let (gc, slope) = if g <= 0.0 {
                (0.0, 0.0)
            } else if g >= hi {
                (hi, 0.0)
            } else {
                (g, len as f64)
            };
            let i0 = (gc.floor() as usize).min(len.saturating_sub(2));
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, gc - i0 as f64, slope)
        };
        let mut taps = Vec::with_capacity(sp[0]);
        let mut out = Vec::with_capacity(sp[0]);
        for p in pts.chunks(2) {
            let (x0, x1, fx, sx) = axis(p[0], w);
            let (y0, y1, fy, sy) = axis(p[1], h);
            let idx = [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1];
            let v = (1.0 - fy) * ((1.0 - fx) * m[idx[0]] + fx * m[idx[1]])
                + fy * ((1.0 - fx) * m[idx[2]] + fx * m[idx[3]]);
            out.push(v);
            taps.push(BilinearTap { idx, fx, fy, sx, sy });
        }
        let rg = self.rg(&[map, points]);
        self.push(vec![sp[0]], out, Op::SampleBilinear { map, points, taps }, rg)
    }

    /// Linear interpolation between rows of `table: [R, C]` at fractional
    /// row positions `pos: [P]`; positions outside `[0, R-1]` clamp.
    pub fn interp_rows(&mut self, table: Var, pos: Var) -> Result<Var> {
        let (st, sp) = (self.shape(table).to_vec(), self.shape(pos).to_vec());
        if st.len() != 2 || sp.len() != 1 {
            return Err(NumericsError::dimension("interp_rows", format!("{st:?} at {sp:?}")));
        }
        let (r, c) = (st[0], st[1]);
        let t = self.values(table);
        let hi = (r - 1) as f64;
        let mut taps = Vec::with_capacity(sp[0]);
        let mut out = Vec::with_capacity(sp[0] * c);
        for &p in self.values(pos) {
            let live = p > 0.0 && p < hi;
            let pc = p.clamp(0.0, hi);
            let r0 = pc.floor() as usize;
            let r1 = (r0 + 1).min(r - 1);
            let frac = pc - r0 as f64;
            for j in 0..c {
                out.push((1.0 - frac) * t[r0 * c + j] + frac * t[r1 * c + j]);
            }
            taps.push(RowTap { r0, r1, frac, live });
        }
        let rg = self.rg(&[table, pos]);
        self.push(vec![sp[0], c], out, Op::InterpRows { table, pos, taps }, rg)
    }

    // ---- reverse pass ------------------------------------------------------

    /// Accumulates d`loss`/d`leaf` into every differentiable leaf. Calling it
    /// again without [`Tape::zero_grad`] adds to the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.node(loss).shape.is_empty() && self.node(loss).value.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                if self.leaf_grads.len() < self.nodes.len() {
                    self.leaf_grads.resize(self.nodes.len(), None);
                }
                match &mut self.leaf_grads[idx] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                    slot => *slot = Some(g),
                }
                continue;
            }
            let contributions = self.local_grads(idx, &g);
            let scale = match self.fault {
                Some((kind, f)) if kind == self.nodes[idx].op.kind() => f,
                _ => 1.0,
            };
            for (v, mut d) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                if scale != 1.0 {
                    d.iter_mut().for_each(|x| *x *= scale);
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&d).for_each(|(a, x)| *a += x),
                    slot => *slot = Some(d),
                }
            }
        }
        Ok(())
    }

    fn broadcast_reduce(&self, b: Var, full: impl Iterator<Item = f64>) -> Vec<f64> {
        let blen = self.values(b).len();
        let mut gb = vec![0.0; blen];
        for (i, v) in full.enumerate() {
            gb[i % blen] += v;
        }
        gb
    }

    fn local_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let unary = |a: Var, f: &dyn Fn(f64, f64) -> f64| -> Vec<(Var, Vec<f64>)> {
            let x = self.values(a);
            vec![(a, x.iter().zip(y).zip(g).map(|((&xi, &yi), &gi)| gi * f(xi, yi)).collect())]
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let mut out = Vec::new();
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(Operand::new(g, m, n), Operand::new(self.values(*b), k, n).t(), &mut ga, false);
                    out.push((*a, ga));
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(Operand::new(self.values(*a), m, k).t(), Operand::new(g, m, n), &mut gb, false);
                    out.push((*b, gb));
                }
                out
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                vec![(*a, ga)]
            }
            Op::Add(a, b) => {
                vec![(*a, g.to_vec()), (*b, self.broadcast_reduce(*b, g.iter().copied()))]
            }
            Op::Sub(a, b) => {
                vec![(*a, g.to_vec()), (*b, self.broadcast_reduce(*b, g.iter().map(|v| -v)))]
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.values(*a), self.values(*b));
                let blen = vb.len();
                let ga = g.iter().enumerate().map(|(i, gi)| gi * vb[i % blen]).collect();
                let gb = self.broadcast_reduce(*b, g.iter().zip(va).map(|(gi, ai)| gi * ai));
                vec![(*a, ga), (*b, gb)]
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.values(*a), self.values(*b));
                let blen = vb.len();
                let ga = g.iter().enumerate().map(|(i, gi)| gi / vb[i % blen]).collect();
                let gb = self.broadcast_reduce(
                    *b,
                    g.iter().enumerate().map(|(i, gi)| -gi * va[i] / (vb[i % blen] * vb[i % blen])),
                );
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
            Op::AddScalar(a) | Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Relu(a) => unary(*a, &|x, _| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::Exp(a) => unary(*a, &|_, y| y),
            Op::Log(a) => unary(*a, &|x, _| 1.0 / x),
            Op::Sigmoid(a) => unary(*a, &|_, y| y * (1.0 - y)),
            Op::Abs(a) => unary(*a, &|x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 }),
            Op::Softplus(a) => unary(*a, &|x, _| sigmoid(x)),
            Op::Square(a) => unary(*a, &|x, _| 2.0 * x),
            Op::Clamp(a, lo, hi) => unary(*a, &|x, _| if x >= *lo && x <= *hi { 1.0 } else { 0.0 }),
            Op::MaskFill { src, mask } => {
                vec![(*src, g.iter().zip(mask).map(|(&gi, &m)| if m { 0.0 } else { gi }).collect())]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.values(*a).len()])],
            Op::SumLast(a) => {
                let n = *self.shape(*a).last().expect("non-scalar");
                vec![(*a, g.iter().flat_map(|&gi| std::iter::repeat_n(gi, n)).collect())]
            }
            Op::SliceCols { src, start } => {
                let (m, n) = (self.shape(*src)[0], self.shape(*src)[1]);
                let len = node.shape[1];
                let mut gs = vec![0.0; m * n];
                for r in 0..m {
                    gs[r * n + start..r * n + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![(*src, gs)]
            }
            Op::Concat(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.values(p).len();
                        let part = g[off..off + n].to_vec();
                        off += n;
                        (p, part)
                    })
                    .collect()
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.shape[0], node.shape[1]);
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = self.shape(p)[1];
                        let mut gp = vec![0.0; rows * w];
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w].copy_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        off += w;
                        (p, gp)
                    })
                    .collect()
            }
            Op::GatherRows { src, idx } => {
                let n = self.shape(*src)[1];
                let mut gs = vec![0.0; self.values(*src).len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        gs[i * n + j] += g[k * n + j];
                    }
                }
                vec![(*src, gs)]
            }
            Op::GatherFlat { src, idx } => {
                let mut gs = vec![0.0; self.values(*src).len()];
                for (k, &i) in idx.iter().enumerate() {
                    gs[i] += g[k];
                }
                vec![(*src, gs)]
            }
            Op::Softmax { src, axis } => {
                let (outer, n, inner) = axis_split(&node.shape, *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![(*src, gx)]
            }
            Op::LogSoftmax { src, axis } => {
                let (outer, n, inner) = axis_split(&node.shape, *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * n + j) * inner + i;
                        let total: f64 = (0..n).map(|j| g[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = g[at(j)] - y[at(j)].exp() * total;
                        }
                    }
                }
                vec![(*src, gx)]
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let c = self.values(*gain).len();
                let gv = self.values(*gain);
                let mut gx = vec![0.0; xhat.len()];
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                for (row, r) in rstd.iter().enumerate() {
                    let base = row * c;
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let gi = g[base + j];
                        let d = gi * gv[j];
                        mean_d += d;
                        mean_dx += d * xhat[base + j];
                        ggain[j] += gi * xhat[base + j];
                        gbias[j] += gi;
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let d = g[base + j] * gv[j];
                        gx[base + j] = r * (d - mean_d - xhat[base + j] * mean_dx);
                    }
                }
                vec![(*x, gx), (*gain, ggain), (*bias, gbias)]
            }
            Op::Conv2d { x, w, b, cols, geom } => {
                let p = geom.h_out * geom.w_out;
                let r = geom.c_in * geom.k * geom.k;
                let mut out = Vec::new();
                if self.requires_grad(*w) {
                    let mut gw = vec![0.0; geom.c_out * r];
                    gemm(Operand::new(g, geom.c_out, p), Operand::new(cols, r, p).t(), &mut gw, false);
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    out.push((*b, g.chunks(p).map(|row| row.iter().sum()).collect()));
                }
                if self.requires_grad(*x) {
                    let mut gcols = vec![0.0; r * p];
                    gemm(
                        Operand::new(self.values(*w), geom.c_out, r).t(),
                        Operand::new(g, geom.c_out, p),
                        &mut gcols,
                        false,
                    );
                    out.push((*x, col2im(&gcols, geom)));
                }
                out
            }
            Op::Upsample { src, factor } => {
                let (c, h, w) = (self.shape(*src)[0], self.shape(*src)[1], self.shape(*src)[2]);
                let (ho, wo) = (h * factor, w * factor);
                let mut gs = vec![0.0; c * h * w];
                for ch in 0..c {
                    for yy in 0..ho {
                        for xx in 0..wo {
                            gs[(ch * h + yy / factor) * w + xx / factor] += g[(ch * ho + yy) * wo + xx];
                        }
                    }
                }
                vec![(*src, gs)]
            }
            Op::Downsample { src, factor } => {
                let (c, h, w) = (self.shape(*src)[0], self.shape(*src)[1], self.shape(*src)[2]);
                let (ho, wo) = (h / factor, w / factor);
                let mut gs = vec![0.0; c * h * w];
                for ch in 0..c {
                    for yy in 0..ho {
                        for xx in 0..wo {
                            gs[(ch * h + yy * factor) * w + xx * factor] += g[(ch * ho + yy) * wo + xx];
                        }
                    }
                }
                vec![(*src, gs)]
            }
            Op::SampleBilinear { map, points, taps } => {
                let m = self.values(*map);
                let mut gm = vec![0.0; m.len()];
                let mut gp = vec![0.0; taps.len() * 2];
                for (k, t) in taps.iter().enumerate() {
                    let gi = g[k];
                    let (fx, fy) = (t.fx, t.fy);
                    gm[t.idx[0]] += gi * (1.0 - fy) * (1.0 - fx);
                    gm[t.idx[1]] += gi * (1.0 - fy) * fx;
                    gm[t.idx[2]] += gi * fy * (1.0 - fx);
                    gm[t.idx[3]] += gi * fy * fx;
                    let [a, b, c, d] = t.idx.map(|i| m[i]);
                    let dfx = (1.0 - fy) * (b - a) + fy * (d - c);
                    let dfy = (1.0 - fx) * (c - a) + fx * (d - b);
                    gp[2 * k] = gi * dfx * t.sx;
                    gp[2 * k + 1] = gi * dfy * t.sy;
                }
                vec![(*map, gm), (*points, gp)]
            }
            Op::InterpRows { table, pos, taps } => {
                let c = self.shape(*table)[1];
                let t = self.values(*table);
                let mut gt = vec![0.0; t.len()];
                let mut gp = vec![0.0; taps.len()];
                for (k, tap) in taps.iter().enumerate() {
                    let mut dpos = 0.0;
                    for j in 0..c {
                        let gi = g[k * c + j];
                        gt[tap.r0 * c + j] += gi * (1.0 - tap.frac);
                        gt[tap.r1 * c + j] += gi * tap.frac;
                        dpos += gi * (t[tap.r1 * c + j] - t[tap.r0 * c + j]);
                    }
                    if tap.live {
                        gp[k] = dpos;
                    }
                }
                vec![(*table, gt), (*pos, gp)]
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

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.h_out * g.w_out;
    let mut cols = vec![0.0; g.c_in * g.k * g.k * p];
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad.before as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..(ci * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad.before as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.w_out + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.h_out * g.w_out;
    let mut x = vec![0.0; g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.pad.before as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ci * g.h + iy as usize) * g.w;
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.pad.before as isize;
                        if ix >= 0 && ix < g.w as isize {
                            x[base + ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
    x
}
