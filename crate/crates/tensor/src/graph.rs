//! Define-by-run computation graph.
//!
//! Every op evaluates eagerly, appends a node, and keeps whatever it needs for
//! the backward pass. `backward` walks the nodes in exact reverse order of
//! creation; fan-out accumulates gradients additively.

use std::rc::Rc;

use crate::error::{invalid, Result, TensorError};
use crate::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marker stored in gather index maps for positions that read as zero.
pub const PAD: usize = usize::MAX;

/// A differentiable operation implemented outside the built-in op set.
///
/// The caller computes the forward value itself and hands it to
/// [`Graph::custom`]; the op only has to supply the vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order. `None` means the
    /// input receives no gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    /// rhs matches the trailing axes of lhs; rhs repeats every `period` values.
    Trailing,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Max(Var, Var),
    Min(Var, Var),
    Affine(Var, f64),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Gelu(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather(Var, Rc<[usize]>),
    Concat {
        parts: Vec<Var>,
        rows: usize,
        widths: Vec<usize>,
    },
    ScaleRows(Var, Var),
    CausalConv1d(Var, Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Max(..) => "max",
            Op::Min(..) => "min",
            Op::Affine(..) => "affine",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Abs(..) => "abs",
            Op::Sigmoid(..) => "sigmoid",
            Op::Silu(..) => "silu",
            Op::Softplus(..) => "softplus",
            Op::Gelu(..) => "gelu",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather(..) => "gather",
            Op::Concat { .. } => "concat",
            Op::ScaleRows(..) => "scale_rows",
            Op::CausalConv1d(..) => "causal_conv1d",
            Op::Custom(op, _) => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One graph per forward/backward; graphs are not reused.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    nonfinite: Option<String>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

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

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First op that produced a NaN or infinity, if any.
    pub fn check_finite(&self) -> Result<()> {
        match &self.nonfinite {
            Some(op) => Err(TensorError::NonFinite { op: op.clone() }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.nonfinite.is_none() && !value.is_finite() {
            self.nonfinite = Some(format!("{} (node {})", op.name(), self.nodes.len()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// `x · w + b` for `x[L×in]`, `w[in×out]`, `b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return invalid("transpose", format!("rank-2 tensor required, got {s:?}"));
        }
        let (r, c) = (s[0], s[1]);
        let mut idx = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                idx.push(i * c + j);
            }
        }
        self.gather(x, vec![c, r], idx.into())
    }

    // ---- elementwise binary ----

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Bcast::Same)
        } else if self.value(b).numel() == 1 {
            Ok(Bcast::Scalar)
        } else if sb.len() < sa.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(Bcast::Trailing)
        } else {
            Err(TensorError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: impl Fn(Var, Var, Bcast) -> Op,
    ) -> Result<Var> {
        let bc = self.bcast(name, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let out: Vec<f64> = match bc {
            Bcast::Same => av.data().iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => av.data().iter().map(|&x| f(x, bv[0])).collect(),
            Bcast::Trailing => {
                let p = bv.len();
                av.data().iter().enumerate().map(|(i, &x)| f(x, bv[i % p])).collect()
            }
        };
        let shape = av.shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_vec(shape, out), mk(a, b, bc), rg))
    }

    /// Elementwise sum. `b` may be a scalar or match the trailing axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div)
    }

    /// Elementwise maximum of equal-shape tensors; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let out = zip_map(self.value(a), self.value(b), f64::max);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Max(a, b), rg))
    }

    /// Elementwise minimum of equal-shape tensors; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let out = zip_map(self.value(a), self.value(b), f64::min);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Min(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise unary ----

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let v = self.value(x);
        let out = Tensor::from_vec(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect());
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    /// `c · x`
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |a| c * a, Op::Affine(x, c))
    }

    /// `c · x + d`
    pub fn affine(&mut self, x: Var, c: f64, d: f64) -> Var {
        self.unary(x, |a| c * a + d, Op::Affine(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, |a| a * sigmoid(a), Op::Silu(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    /// Clamp into `[lo, hi]`. Also reports whether any value was clamped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> (Var, bool) {
        let clamped = self.value(x).data().iter().any(|&a| a < lo || a > hi);
        (self.unary(x, |a| a.clamp(lo, hi), Op::Clamp(x, lo, hi)), clamped)
    }

    // ---- reductions and normalizations ----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return invalid("softmax", format!("axis {axis} out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * len * inner + k * inner + i;
                let mx = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (src[at(k)] - mx).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(shape, out), Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias` (both of
    /// that axis' length).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return invalid("layer_norm", "eps must be positive");
        }
        let (rows, cols) = self.value(x).rows_cols();
        for p in [gain, bias] {
            if self.value(p).numel() != cols {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let xh = (row[c] - mean) * rs;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = xh * g[c] + b[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_vec(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- indexing and layout ----

    /// Output element `i` reads input element `idx[i]`, or zero for [`PAD`].
    pub fn gather(&mut self, x: Var, shape: Vec<usize>, idx: Rc<[usize]>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != idx.len() || n == 0 {
            return invalid("gather", format!("index map of {} for shape {shape:?}", idx.len()));
        }
        let src = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i != PAD && i >= src.len()) {
            return invalid("gather", format!("index {bad} out of range {}", src.len()));
        }
        let out = idx.iter().map(|&i| if i == PAD { 0.0 } else { src[i] }).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(shape, out), Op::Gather(x, idx), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != n {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape,
            });
        }
        self.gather(x, shape, (0..n).collect::<Vec<_>>().into())
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if start >= end || end > rows {
            return invalid("slice_rows", format!("{start}..{end} of {rows} rows"));
        }
        let idx: Vec<usize> = (start * cols..end * cols).collect();
        self.gather(x, vec![end - start, cols], idx.into())
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if start >= end || end > cols {
            return invalid("slice_cols", format!("{start}..{end} of {cols} columns"));
        }
        let w = end - start;
        let mut idx = Vec::with_capacity(rows * w);
        for r in 0..rows {
            idx.extend(r * cols + start..r * cols + end);
        }
        self.gather(x, vec![rows, w], idx.into())
    }

    /// Flat elements at `positions`, as a 1-D tensor.
    pub fn select(&mut self, x: Var, positions: &[usize]) -> Result<Var> {
        self.gather(x, vec![positions.len()], positions.to_vec().into())
    }

    /// Patch extraction on a channels-last grid `x[(h·w)×c]`.
    ///
    /// Output row `(oy·ow + ox)` holds the `k×k×c` window whose top-left corner
    /// is `(oy·stride − pad, ox·stride − pad)`, laid out as `(ky, kx, c)`.
    /// Positions outside the grid read as zero.
    pub fn unfold2d(&mut self, x: Var, h: usize, w: usize, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let (rows, c) = self.value(x).rows_cols();
        if rows != h * w || kernel == 0 || stride == 0 || h + 2 * pad < kernel || w + 2 * pad < kernel {
            return invalid("unfold2d", format!("grid {h}x{w} rows {rows} kernel {kernel}"));
        }
        let idx = unfold_index(h, w, c, kernel, stride, pad);
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (w + 2 * pad - kernel) / stride + 1;
        self.gather(x, vec![oh * ow, kernel * kernel * c], idx)
    }

    fn concat(&mut self, parts: &[Var], by_rows: bool) -> Result<Var> {
        let op = if by_rows { "concat_rows" } else { "concat_cols" };
        if parts.is_empty() {
            return invalid(op, "no inputs");
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.value(p).rows_cols()).collect();
        if by_rows {
            let cols = dims[0].1;
            if dims.iter().any(|d| d.1 != cols) {
                return invalid(op, format!("column counts differ: {dims:?}"));
            }
            let rows = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(rows * cols);
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
            let rg = self.rg(parts);
            // Row concatenation is column concatenation of the transposed layout;
            // the backward pass for both walks contiguous blocks.
            let widths = dims.iter().map(|d| d.0 * cols).collect();
            Ok(self.push(
                Tensor::from_vec(vec![rows, cols], out),
                Op::Concat {
                    parts: parts.to_vec(),
                    rows: 1,
                    widths,
                },
                rg,
            ))
        } else {
            let rows = dims[0].0;
            if dims.iter().any(|d| d.0 != rows) {
                return invalid(op, format!("row counts differ: {dims:?}"));
            }
            let widths: Vec<usize> = dims.iter().map(|d| d.1).collect();
            let cols: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for (&p, &wd) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&self.value(p).data()[r * wd..(r + 1) * wd]);
                }
            }
            let rg = self.rg(parts);
            Ok(self.push(
                Tensor::from_vec(vec![rows, cols], out),
                Op::Concat {
                    parts: parts.to_vec(),
                    rows,
                    widths,
                },
                rg,
            ))
        }
    }

    /// Stack rank-2 tensors with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, true)
    }

    /// Join rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, false)
    }

    /// `y[r, c] = x[r, c] · s[r]` for `x[R×C]` and `s` holding `R` values.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).rows_cols();
        if self.value(s).numel() != rows {
            return Err(TensorError::Shape {
                op: "scale_rows",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let ss = self.value(s).data();
        let out = (0..rows * cols).map(|i| xs[i] * ss[i / cols]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, s]);
        Ok(self.push(Tensor::from_vec(shape, out), Op::ScaleRows(x, s), rg))
    }

    /// Per-channel causal convolution: `y[t, c] = Σ_j kernel[j, c] · x[t − j, c]`,
    /// with `x` zero for negative positions. Tap 0 is the current step.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (len, ch) = self.value(x).rows_cols();
        let (taps, kch) = self.value(kernel).rows_cols();
        if ch != kch || self.value(kernel).rank() != 2 {
            return Err(TensorError::Shape {
                op: "causal_conv1d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(kernel).to_vec(),
            });
        }
        let xs = self.value(x).data();
        let ks = self.value(kernel).data();
        let mut out = vec![0.0; len * ch];
        for t in 0..len {
            for j in 0..taps.min(t + 1) {
                let src = &xs[(t - j) * ch..(t - j + 1) * ch];
                let k = &ks[j * ch..(j + 1) * ch];
                for c in 0..ch {
                    out[t * ch + c] += k[c] * src[c];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, kernel]);
        Ok(self.push(Tensor::from_vec(shape, out), Op::CausalConv1d(x, kernel), rg))
    }

    /// Record an externally computed op.
    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Var {
        let rg = self.rg(inputs);
        self.push(output, Op::Custom(op, inputs.to_vec()), rg)
    }

    // ---- backward ----

    /// Reverse pass from a single-element `root`. Gradients are then available
    /// through [`Graph::grad`].
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check_finite()?;
        if self.value(root).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(root).to_vec()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Accumulated gradient of the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_vec(self.shape(v).to_vec(), g.clone()))
    }

    fn acc(&mut self, v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn reduce_bcast(&self, g: Vec<f64>, b: Var, bc: Bcast) -> Vec<f64> {
        match bc {
            Bcast::Same => g,
            Bcast::Scalar => vec![g.iter().sum()],
            Bcast::Trailing => {
                let p = self.value(b).numel();
                let mut out = vec![0.0; p];
                for (i, v) in g.iter().enumerate() {
                    out[i % p] += v;
                }
                out
            }
        }
    }

    fn rhs_at(&self, b: Var, bc: Bcast, i: usize) -> f64 {
        let d = self.value(b).data();
        match bc {
            Bcast::Same => d[i],
            Bcast::Scalar => d[0],
            Bcast::Trailing => d[i % d.len()],
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Temporarily take the op so `self` stays borrowable for accumulation.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_bt_raw(g, self.value(*b).data(), m, n, k, &mut da);
                    self.acc(*a, da);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_at_raw(self.value(*a).data(), g, m, k, n, &mut db);
                    self.acc(*b, db);
                }
            }
            Op::Add(a, b, bc) => {
                self.acc(*a, g.to_vec());
                let db = self.reduce_bcast(g.to_vec(), *b, *bc);
                self.acc(*b, db);
            }
            Op::Sub(a, b, bc) => {
                self.acc(*a, g.to_vec());
                let neg = g.iter().map(|v| -v).collect();
                let db = self.reduce_bcast(neg, *b, *bc);
                self.acc(*b, db);
            }
            Op::Mul(a, b, bc) => {
                let da = (0..g.len()).map(|j| g[j] * self.rhs_at(*b, *bc, j)).collect();
                let av = self.value(*a).data();
                let db = g.iter().zip(av).map(|(x, y)| x * y).collect();
                let db = self.reduce_bcast(db, *b, *bc);
                self.acc(*a, da);
                self.acc(*b, db);
            }
            Op::Div(a, b, bc) => {
                let av = self.value(*a).data();
                let da = (0..g.len()).map(|j| g[j] / self.rhs_at(*b, *bc, j)).collect();
                let db = (0..g.len())
                    .map(|j| {
                        let bv = self.rhs_at(*b, *bc, j);
                        -g[j] * av[j] / (bv * bv)
                    })
                    .collect();
                let db = self.reduce_bcast(db, *b, *bc);
                self.acc(*a, da);
                self.acc(*b, db);
            }
            Op::Max(a, b) | Op::Min(a, b) => {
                let is_max = matches!(op, Op::Max(..));
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut da = vec![0.0; g.len()];
                let mut db = vec![0.0; g.len()];
                for j in 0..g.len() {
                    let pick_a = if is_max { av[j] >= bv[j] } else { av[j] <= bv[j] };
                    if pick_a {
                        da[j] = g[j];
                    } else {
                        db[j] = g[j];
                    }
                }
                self.acc(*a, da);
                self.acc(*b, db);
            }
            Op::Affine(x, c) => {
                let dx = g.iter().map(|v| v * c).collect();
                self.acc(*x, dx);
            }
            Op::Exp(x) => {
                let y = self.nodes[i].value.data();
                let dx = g.iter().zip(y).map(|(a, b)| a * b).collect();
                self.acc(*x, dx);
            }
            Op::Ln(x) => {
                let xv = self.value(*x).data();
                let dx = g.iter().zip(xv).map(|(a, b)| a / b).collect();
                self.acc(*x, dx);
            }
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(a, &b)| {
                        if b > 0.0 {
                            *a
                        } else if b < 0.0 {
                            -a
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.acc(*x, dx);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data();
                let dx = g.iter().zip(y).map(|(a, s)| a * s * (1.0 - s)).collect();
                self.acc(*x, dx);
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(a, &v)| {
                        let s = sigmoid(v);
                        a * s * (1.0 + v * (1.0 - s))
                    })
                    .collect();
                self.acc(*x, dx);
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                let dx = g.iter().zip(xv).map(|(a, &v)| a * sigmoid(v)).collect();
                self.acc(*x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let dx = g.iter().zip(xv).map(|(a, &v)| a * gelu_grad(v)).collect();
                self.acc(*x, dx);
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(a, &v)| if v < *lo || v > *hi { 0.0 } else { *a })
                    .collect();
                self.acc(*x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.acc(*x, vec![g[0]; n]);
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = self.nodes[i].value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for q in 0..*inner {
                        let at = |k: usize| o * len * inner + k * inner + q;
                        let dot: f64 = (0..*len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..*len {
                            dx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                self.acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = self.value(*gain).numel();
                let rows = rstd.len();
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; rows * cols];
                let mut dg = vec![0.0; cols];
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..cols {
                        let j = r * cols + c;
                        let d = g[j] * gv[c];
                        mean_d += d;
                        mean_dx += d * xhat[j];
                        dg[c] += g[j] * xhat[j];
                        db[c] += g[j];
                    }
                    mean_d /= cols as f64;
                    mean_dx /= cols as f64;
                    for c in 0..cols {
                        let j = r * cols + c;
                        dx[j] = rstd[r] * (g[j] * gv[c] - mean_d - xhat[j] * mean_dx);
                    }
                }
                self.acc(*x, dx);
                self.acc(*gain, dg);
                self.acc(*bias, db);
            }
            Op::Gather(x, idx) => {
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; self.value(*x).numel()];
                    for (j, &s) in idx.iter().enumerate() {
                        if s != PAD {
                            dx[s] += g[j];
                        }
                    }
                    self.acc(*x, dx);
                }
            }
            Op::Concat { parts, rows, widths } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &wd) in parts.iter().zip(widths) {
                    let mut dp = Vec::with_capacity(rows * wd);
                    for r in 0..*rows {
                        dp.extend_from_slice(&g[r * total + offset..r * total + offset + wd]);
                    }
                    self.acc(p, dp);
                    offset += wd;
                }
            }
            Op::ScaleRows(x, s) => {
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                let cols = xv.len() / sv.len();
                let dx = (0..g.len()).map(|j| g[j] * sv[j / cols]).collect();
                let mut ds = vec![0.0; sv.len()];
                for j in 0..g.len() {
                    ds[j / cols] += g[j] * xv[j];
                }
                self.acc(*x, dx);
                self.acc(*s, ds);
            }
            Op::CausalConv1d(x, kernel) => {
                let (len, ch) = self.value(*x).rows_cols();
                let taps = self.value(*kernel).rows_cols().0;
                let xs = self.value(*x).data();
                let ks = self.value(*kernel).data();
                let mut dx = vec![0.0; len * ch];
                let mut dk = vec![0.0; taps * ch];
                for t in 0..len {
                    for j in 0..taps.min(t + 1) {
                        for c in 0..ch {
                            let go = g[t * ch + c];
                            dx[(t - j) * ch + c] += go * ks[j * ch + c];
                            dk[j * ch + c] += go * xs[(t - j) * ch + c];
                        }
                    }
                }
                self.acc(*x, dx);
                self.acc(*kernel, dk);
            }
            Op::Custom(custom, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let out = &self.nodes[i].value;
                let grads = custom.backward(&ins, out, g);
                for (&v, gv) in inputs.iter().zip(grads) {
                    if let Some(gv) = gv {
                        self.acc(v, gv);
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape().to_vec(), data)
}

fn unfold_index(h: usize, w: usize, c: usize, k: usize, stride: usize, pad: usize) -> Rc<[usize]> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut idx = Vec::with_capacity(oh * ow * k * k * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..k {
                for kx in 0..k {
                    let y = (oy * stride + ky) as isize - pad as isize;
                    let x = (ox * stride + kx) as isize - pad as isize;
                    let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
                    for ch in 0..c {
                        idx.push(if inside {
                            ((y as usize) * w + x as usize) * c + ch
                        } else {
                            PAD
                        });
                    }
                }
            }
        }
    }
    idx.into()
}
