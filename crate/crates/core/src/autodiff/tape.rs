use std::fmt;

use super::conv::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for ops whose forward pass is computed outside the tape.
///
/// `needs[i]` tells whether input `i` needs a gradient; implementations may
/// return `None` for any input that does not.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Softplus,
    Sigmoid,
    Tanh,
    Exp,
    Square,
}

impl Unary {
    fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Silu => x * sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Square => x * x,
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Square => 2.0 * x,
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

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulScalar(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Unary(Var, Unary),
    Sum(Var),
    Mean(Var),
    Dot(Var, Var),
    Norm(Var),
    SqNorm(Var),
    L2Normalize(Var),
    NormalizeRows {
        x: Var,
        scale: Vec<f64>,
    },
    Div(Var, Var),
    Softmax(Var),
    Transpose(Var),
    Reshape(Var),
    Slice {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    ReverseRows(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
    },
    GlobalAvgPool(Var),
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulScalar(a, b)
            | Op::Dot(a, b)
            | Op::Div(a, b) => vec![*a, *b],
            Op::Affine(a, _)
            | Op::Unary(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Norm(a)
            | Op::SqNorm(a)
            | Op::L2Normalize(a)
            | Op::Softmax(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::ReverseRows(a)
            | Op::GlobalAvgPool(a) => vec![*a],
            Op::Slice { x, .. } | Op::NormalizeRows { x, .. } => vec![*x],
            Op::Concat(xs) => xs.clone(),
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => vec![*x, *w, *b],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulScalar(..) => "mul_scalar",
            Op::Linear { .. } => "linear",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Unary(_, u) => match u {
                Unary::Silu => "silu",
                Unary::Softplus => "softplus",
                Unary::Sigmoid => "sigmoid",
                Unary::Tanh => "tanh",
                Unary::Exp => "exp",
                Unary::Square => "square",
            },
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Dot(..) => "dot",
            Op::Norm(_) => "norm",
            Op::SqNorm(_) => "sq_norm",
            Op::L2Normalize(_) => "l2_normalize",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::Div(..) => "div",
            Op::Softmax(_) => "softmax",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat(_) => "concat",
            Op::ReverseRows(_) => "reverse_rows",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// Every op checks its result for NaN/Inf and fails with [`Error::Numeric`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    last_backward_order: Vec<usize>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf, honoring `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad;
        self.push_raw(tensor, Op::Leaf, needs)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, tensor: &Tensor) -> Var {
        let mut t = tensor.clone();
        t.requires_grad = true;
        t.grad = None;
        self.leaf(t)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor) -> Var {
        let mut t = tensor.clone();
        t.requires_grad = false;
        t.grad = None;
        self.leaf(t)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(&Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into a leaf by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Node indices in the order the last backward pass visited them.
    pub fn last_backward_order(&self) -> &[usize] {
        &self.last_backward_order
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, mut value: Tensor, op: Op) -> Result<Var> {
        value.ensure_finite(op.name())?;
        value.requires_grad = false;
        value.grad = None;
        let needs = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs))
    }

    fn v(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.v(a), self.v(b))?;
        let out = self.v(a).add(self.v(b))?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.v(a), self.v(b))?;
        let out = self.v(a).sub(self.v(b))?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.v(a), self.v(b))?;
        let out = self.v(a).zip_with(self.v(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.v(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        self.affine(x, k, 0.0)
    }

    /// Adds a `[C]` vector to every trailing-axis row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xt, rt) = (self.v(x), self.v(row));
        let c = xt.last_dim();
        if rt.rank() != 1 || rt.numel() != c {
            return Err(Error::dim(format!(
                "add_row: row {:?} vs trailing axis of {:?}",
                rt.shape(),
                xt.shape()
            )));
        }
        let mut data = xt.data().to_vec();
        for chunk in data.chunks_mut(c) {
            chunk.iter_mut().zip(rt.data()).for_each(|(a, b)| *a += b);
        }
        let out = Tensor::new(xt.shape(), data)?;
        self.push(out, Op::AddRow(x, row))
    }

    /// Multiplies every trailing-axis row of `x` by a `[C]` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (xt, rt) = (self.v(x), self.v(row));
        let c = xt.last_dim();
        if rt.rank() != 1 || rt.numel() != c {
            return Err(Error::dim(format!(
                "mul_row: row {:?} vs trailing axis of {:?}",
                rt.shape(),
                xt.shape()
            )));
        }
        let mut data = xt.data().to_vec();
        for chunk in data.chunks_mut(c) {
            chunk.iter_mut().zip(rt.data()).for_each(|(a, b)| *a *= b);
        }
        let out = Tensor::new(xt.shape(), data)?;
        self.push(out, Op::MulRow(x, row))
    }

    /// Tensor times a single-element tensor.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.v(s).is_scalar() {
            return Err(Error::dim(format!(
                "mul_scalar: {:?} is not a scalar",
                self.v(s).shape()
            )));
        }
        let k = self.v(s).data()[0];
        let out = self.v(x).scale(k);
        self.push(out, Op::MulScalar(x, s))
    }

    /// Scalar quotient `a / b`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if !self.v(a).is_scalar() || !self.v(b).is_scalar() {
            return Err(Error::dim("div: both operands must be scalars"));
        }
        let (x, y) = (self.v(a).data()[0], self.v(b).data()[0]);
        if y == 0.0 {
            return Err(Error::Numeric("div: zero denominator".into()));
        }
        self.push(Tensor::scalar(x / y), Op::Div(a, b))
    }

    pub fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let out = self.v(x).map(|v| kind.eval(v));
        self.push(out, Op::Unary(x, kind))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.v(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.v(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.v(a).dot(self.v(b))?;
        self.push(Tensor::scalar(d), Op::Dot(a, b))
    }

    /// Euclidean norm. The gradient at the origin is taken as zero.
    pub fn norm(&mut self, x: Var) -> Result<Var> {
        let n = self.v(x).norm();
        self.push(Tensor::scalar(n), Op::Norm(x))
    }

    pub fn sq_norm(&mut self, x: Var) -> Result<Var> {
        let n = self.v(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(n), Op::SqNorm(x))
    }

    /// Unit-L2 rescaling of the whole tensor; a zero vector is rejected.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let out = self.v(x).l2_normalized()?;
        self.push(out, Op::L2Normalize(x))
    }

    /// Divides each trailing-axis row by `sqrt(|row|^2 + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Input(format!("normalize_rows eps must be > 0, got {eps}")));
        }
        let xt = self.v(x);
        let c = xt.last_dim();
        let mut out = xt.data().to_vec();
        let mut scale = Vec::with_capacity(out.len() / c);
        for row in out.chunks_mut(c) {
            let s = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            row.iter_mut().for_each(|v| *v /= s);
            scale.push(s);
        }
        let out = Tensor::new(xt.shape(), out)?;
        self.push(out, Op::NormalizeRows { x, scale })
    }

    // ---- linear algebra ---------------------------------------------------

    /// `y = x W + b` over the trailing axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.v(x), self.v(w));
        if wt.rank() != 2 {
            return Err(Error::dim(format!("linear: weight shape {:?}", wt.shape())));
        }
        let (n_in, n_out) = (wt.shape()[0], wt.shape()[1]);
        if xt.last_dim() != n_in || xt.rank() == 0 {
            return Err(Error::dim(format!(
                "linear: input {:?} does not match weight {:?}",
                xt.shape(),
                wt.shape()
            )));
        }
        if let Some(b) = b {
            let bt = self.v(b);
            if bt.rank() != 1 || bt.numel() != n_out {
                return Err(Error::dim(format!(
                    "linear: bias {:?} for {} outputs",
                    bt.shape(),
                    n_out
                )));
            }
        }
        let rows = xt.numel() / n_in;
        let mut out = vec![0.0; rows * n_out];
        let (xd, wd) = (xt.data(), wt.data());
        for r in 0..rows {
            let o = &mut out[r * n_out..(r + 1) * n_out];
            if let Some(b) = b {
                o.copy_from_slice(self.nodes[b.0].value.data());
            }
            for (i, &xv) in xd[r * n_in..(r + 1) * n_in].iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (acc, &wv) in o.iter_mut().zip(&wd[i * n_out..(i + 1) * n_out]) {
                    *acc += xv * wv;
                }
            }
        }
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = n_out;
        let out = Tensor::new(&shape, out)?;
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.linear(x, w, None)
    }

    /// Standardizes each trailing-axis vector, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xt = self.v(x);
        let c = xt.last_dim();
        if xt.rank() == 0 || c < 2 {
            return Err(Error::dim(format!(
                "layer_norm needs a trailing axis of at least 2, got {:?}",
                xt.shape()
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::Input(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (gt, bt) = (self.v(gain), self.v(bias));
        if gt.shape() != [c] || bt.shape() != [c] {
            return Err(Error::dim(format!(
                "layer_norm affine {:?}/{:?} for width {c}",
                gt.shape(),
                bt.shape()
            )));
        }
        let rows = xt.numel() / c;
        let mut xhat = vec![0.0; xt.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xt.numel()];
        for r in 0..rows {
            let row = &xt.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for k in 0..c {
                let h = (row[k] - mean) * rs;
                xhat[r * c + k] = h;
                out[r * c + k] = h * gt.data()[k] + bt.data()[k];
            }
        }
        let out = Tensor::new(xt.shape(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.v(x);
        let c = xt.last_dim();
        let mut out = xt.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(xt.shape(), out)?;
        self.push(out, Op::Softmax(x))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xt = self.v(x);
        if xt.rank() != 2 {
            return Err(Error::dim(format!("transpose of {:?}", xt.shape())));
        }
        let (r, c) = (xt.shape()[0], xt.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xt.data()[i * c + j];
            }
        }
        let out = Tensor::new(&[c, r], out)?;
        self.push(out, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.v(x).reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    /// Contiguous `len`-element window of the flattened tensor, returned as a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.v(x);
        if len == 0 || start + len > xt.numel() {
            return Err(Error::dim(format!(
                "slice [{start}, {}) of {} elements",
                start + len,
                xt.numel()
            )));
        }
        let out = Tensor::from_vec(xt.data()[start..start + len].to_vec());
        self.push(out, Op::Slice { x, start })
    }

    /// Flattened concatenation into a vector.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::dim("concat of nothing"));
        }
        let data: Vec<f64> = xs.iter().flat_map(|v| self.v(*v).data().iter().copied()).collect();
        self.push(Tensor::from_vec(data), Op::Concat(xs.to_vec()))
    }

    /// Reverses the order of the leading axis.
    pub fn reverse_rows(&mut self, x: Var) -> Result<Var> {
        let xt = self.v(x);
        if xt.rank() == 0 {
            return Err(Error::dim("reverse_rows of a scalar"));
        }
        let c = xt.numel() / xt.shape()[0];
        let data: Vec<f64> = xt.data().chunks(c).rev().flatten().copied().collect();
        let out = Tensor::new(xt.shape(), data)?;
        self.push(out, Op::ReverseRows(x))
    }

    // ---- convolution ------------------------------------------------------

    fn conv_geometry(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<ConvGeometry> {
        let (xt, wt, bt) = (self.v(x), self.v(w), self.v(b));
        if xt.rank() != 3 || wt.rank() != 4 {
            return Err(Error::dim(format!(
                "conv: input {:?} / weight {:?}",
                xt.shape(),
                wt.shape()
            )));
        }
        let ws = wt.shape();
        if ws[0] != ws[1] || ws[2] != xt.shape()[2] || bt.shape() != [ws[3]] {
            return Err(Error::dim(format!(
                "conv: weight {:?} / bias {:?} incompatible with input {:?}",
                ws,
                bt.shape(),
                xt.shape()
            )));
        }
        Ok(ConvGeometry {
            in_h: xt.shape()[0],
            in_w: xt.shape()[1],
            c_in: ws[2],
            c_out: ws[3],
            kernel: ws[0],
            stride,
            pad,
        })
    }

    /// `x: [H, W, Cin]`, `w: [k, k, Cin, Cout]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geometry(x, w, b, stride, pad)?;
        let (oh, ow) = geom
            .conv_out()
            .ok_or_else(|| Error::dim(format!("conv2d: kernel larger than padded input {geom:?}")))?;
        let data = conv::conv2d_forward(&geom, self.v(x).data(), self.v(w).data(), self.v(b).data());
        let out = Tensor::new(&[oh, ow, geom.c_out], data)?;
        self.push(out, Op::Conv2d { x, w, b, geom })
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = self.conv_geometry(x, w, b, stride, pad)?;
        let (oh, ow) = geom
            .transpose_out()
            .ok_or_else(|| Error::dim(format!("conv_transpose2d: empty output {geom:?}")))?;
        let data = conv::conv_transpose2d_forward(&geom, self.v(x).data(), self.v(w).data(), self.v(b).data());
        let out = Tensor::new(&[oh, ow, geom.c_out], data)?;
        self.push(out, Op::ConvTranspose2d { x, w, b, geom })
    }

    /// Mean over the spatial axes of `[H, W, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xt = self.v(x);
        if xt.rank() != 3 {
            return Err(Error::dim(format!("global_avg_pool of {:?}", xt.shape())));
        }
        let c = xt.shape()[2];
        let hw = (xt.numel() / c) as f64;
        let mut out = vec![0.0; c];
        for row in xt.data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        out.iter_mut().for_each(|v| *v /= hw);
        self.push(Tensor::from_vec(out), Op::GlobalAvgPool(x))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates d`loss`/d`leaf` into every leaf registered with `requires_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        self.last_backward_order.clear();

        for idx in (0..=loss.0).rev() {
            self.last_backward_order.push(idx);
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let t = &mut self.nodes[idx].value;
                if t.requires_grad {
                    accumulate(&mut t.grad, g);
                }
                continue;
            }
            for (input, ig) in self.vjp(idx, &g) {
                if self.nodes[input.0].needs_grad {
                    if let Some(ig) = ig {
                        accumulate(&mut grads[input.0], ig);
                    }
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, idx: usize, g: &[f64]) -> Vec<(Var, Option<Vec<f64>>)> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let need = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, Some(g.to_vec())), (*b, Some(g.to_vec()))],
            Op::Sub(a, b) => vec![(*a, Some(g.to_vec())), (*b, Some(g.iter().map(|v| -v).collect()))],
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, need(*a).then(|| g.iter().zip(bd).map(|(g, b)| g * b).collect())),
                    (*b, need(*b).then(|| g.iter().zip(ad).map(|(g, a)| g * a).collect())),
                ]
            }
            Op::Affine(x, k) => vec![(*x, Some(g.iter().map(|v| v * k).collect()))],
            Op::AddRow(x, r) => {
                let c = val(*r).numel();
                let mut gr = vec![0.0; c];
                for chunk in g.chunks(c) {
                    gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
                vec![(*x, Some(g.to_vec())), (*r, Some(gr))]
            }
            Op::MulRow(x, r) => {
                let rd = val(*r).data();
                let xd = val(*x).data();
                let c = rd.len();
                let gx = need(*x).then(|| {
                    g.chunks(c)
                        .flat_map(|chunk| chunk.iter().zip(rd).map(|(g, r)| g * r))
                        .collect()
                });
                let gr = need(*r).then(|| {
                    let mut gr = vec![0.0; c];
                    for (gc, xc) in g.chunks(c).zip(xd.chunks(c)) {
                        for k in 0..c {
                            gr[k] += gc[k] * xc[k];
                        }
                    }
                    gr
                });
                vec![(*x, gx), (*r, gr)]
            }
            Op::MulScalar(x, s) => {
                let k = val(*s).data()[0];
                let gx = need(*x).then(|| g.iter().map(|v| v * k).collect());
                let gs = need(*s).then(|| vec![g.iter().zip(val(*x).data()).map(|(g, x)| g * x).sum()]);
                vec![(*x, gx), (*s, gs)]
            }
            Op::Linear { x, w, b } => {
                let (xt, wt) = (val(*x), val(*w));
                let (n_in, n_out) = (wt.shape()[0], wt.shape()[1]);
                let rows = xt.numel() / n_in;
                let (xd, wd) = (xt.data(), wt.data());
                let gx = need(*x).then(|| {
                    let mut gx = vec![0.0; xd.len()];
                    for r in 0..rows {
                        let gr = &g[r * n_out..(r + 1) * n_out];
                        for i in 0..n_in {
                            let wr = &wd[i * n_out..(i + 1) * n_out];
                            gx[r * n_in + i] = gr.iter().zip(wr).map(|(a, b)| a * b).sum();
                        }
                    }
                    gx
                });
                let gw = need(*w).then(|| {
                    let mut gw = vec![0.0; wd.len()];
                    for r in 0..rows {
                        let gr = &g[r * n_out..(r + 1) * n_out];
                        for i in 0..n_in {
                            let xv = xd[r * n_in + i];
                            if xv == 0.0 {
                                continue;
                            }
                            gw[i * n_out..(i + 1) * n_out]
                                .iter_mut()
                                .zip(gr)
                                .for_each(|(a, b)| *a += xv * b);
                        }
                    }
                    gw
                });
                let mut res = vec![(*x, gx), (*w, gw)];
                if let Some(b) = b {
                    let mut gb = vec![0.0; n_out];
                    for chunk in g.chunks(n_out) {
                        gb.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                    res.push((*b, Some(gb)));
                }
                res
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gd = val(*gain).data();
                let c = gd.len();
                let mut gx = vec![0.0; xhat.len()];
                let mut ggain = vec![0.0; c];
                let mut gbias = vec![0.0; c];
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut mean_gh = 0.0;
                    let mut mean_ghh = 0.0;
                    for k in 0..c {
                        let gh = gr[k] * gd[k];
                        mean_gh += gh;
                        mean_ghh += gh * hr[k];
                        ggain[k] += gr[k] * hr[k];
                        gbias[k] += gr[k];
                    }
                    mean_gh /= c as f64;
                    mean_ghh /= c as f64;
                    for k in 0..c {
                        gx[r * c + k] = rs * (gr[k] * gd[k] - mean_gh - hr[k] * mean_ghh);
                    }
                }
                vec![(*x, Some(gx)), (*gain, Some(ggain)), (*bias, Some(gbias))]
            }
            Op::Unary(x, kind) => {
                let xd = val(*x).data();
                let gx = g
                    .iter()
                    .zip(xd.iter().zip(out.data()))
                    .map(|(g, (&x, &y))| g * kind.derivative(x, y))
                    .collect();
                vec![(*x, Some(gx))]
            }
            Op::Sum(x) => vec![(*x, Some(vec![g[0]; val(*x).numel()]))],
            Op::Mean(x) => {
                let n = val(*x).numel();
                vec![(*x, Some(vec![g[0] / n as f64; n]))]
            }
            Op::Dot(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                vec![
                    (*a, need(*a).then(|| bd.iter().map(|v| v * g[0]).collect())),
                    (*b, need(*b).then(|| ad.iter().map(|v| v * g[0]).collect())),
                ]
            }
            Op::Norm(x) => {
                let n = out.data()[0];
                let xd = val(*x).data();
                let gx = if n == 0.0 {
                    vec![0.0; xd.len()]
                } else {
                    xd.iter().map(|v| g[0] * v / n).collect()
                };
                vec![(*x, Some(gx))]
            }
            Op::SqNorm(x) => vec![(*x, Some(val(*x).data().iter().map(|v| 2.0 * g[0] * v).collect()))],
            Op::L2Normalize(x) => {
                let n = val(*x).norm();
                let y = out.data();
                let gy: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                let gx = g.iter().zip(y).map(|(g, y)| (g - y * gy) / n).collect();
                vec![(*x, Some(gx))]
            }
            Op::NormalizeRows { x, scale } => {
                let c = out.last_dim();
                let mut gx = vec![0.0; g.len()];
                for (((gr, yr), gxr), s) in g.chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)).zip(scale) {
                    let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        gxr[k] = (gr[k] - yr[k] * gy) / s;
                    }
                }
                vec![(*x, Some(gx))]
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a).data()[0], val(*b).data()[0]);
                vec![(*a, Some(vec![g[0] / y])), (*b, Some(vec![-g[0] * x / (y * y)]))]
            }
            Op::Softmax(x) => {
                let c = out.last_dim();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), gxr) in g.chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        gxr[k] = yr[k] * (gr[k] - s);
                    }
                }
                vec![(*x, Some(gx))]
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![(*x, Some(gx))]
            }
            Op::Reshape(x) => vec![(*x, Some(g.to_vec()))],
            Op::Slice { x, start } => {
                let mut gx = vec![0.0; val(*x).numel()];
                gx[*start..*start + g.len()].copy_from_slice(g);
                vec![(*x, Some(gx))]
            }
            Op::Concat(xs) => {
                let mut off = 0;
                xs.iter()
                    .map(|v| {
                        let n = val(*v).numel();
                        let part = g[off..off + n].to_vec();
                        off += n;
                        (*v, Some(part))
                    })
                    .collect()
            }
            Op::ReverseRows(x) => {
                let c = out.numel() / out.shape()[0];
                let gx = g.chunks(c).rev().flatten().copied().collect();
                vec![(*x, Some(gx))]
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gb) = conv::conv2d_backward(geom, val(*x).data(), val(*w).data(), g);
                vec![(*x, Some(gx)), (*w, Some(gw)), (*b, Some(gb))]
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (gx, gw, gb) = conv::conv_transpose2d_backward(geom, val(*x).data(), val(*w).data(), g);
                vec![(*x, Some(gx)), (*w, Some(gw)), (*b, Some(gb))]
            }
            Op::GlobalAvgPool(x) => {
                let xt = val(*x);
                let c = xt.shape()[2];
                let hw = (xt.numel() / c) as f64;
                let gx = (0..xt.numel()).map(|i| g[i % c] / hw).collect();
                vec![(*x, Some(gx))]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| need(*v)).collect();
                let gs = op.backward(&ins, out, g, &needs);
                inputs.iter().copied().zip(gs).collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_gradients, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(&t(&[2], &[1.0, 0.0]));
        let w = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(&Tensor::zeros(&[2]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);

        let x = tape.constant(&t(&[2], &[1.0, 2.0]));
        let w = tape.constant(&t(&[2, 1], &[1.0, 1.0]));
        let b = tape.constant(&t(&[1], &[3.0]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn linear_rejects_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[3, 4]));
        let w = tape.constant(&Tensor::zeros(&[3, 2]));
        assert!(matches!(tape.linear(x, w, None), Err(Error::Dimension(_))));
    }

    #[test]
    fn layer_norm_edge_cases() {
        let mut tape = Tape::new();
        let g = tape.constant(&Tensor::ones(&[4]));
        let b = tape.constant(&Tensor::zeros(&[4]));
        let x = tape.constant(&Tensor::full(&[4], 3.7));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));

        let g2 = tape.constant(&Tensor::ones(&[2]));
        let b2 = tape.constant(&Tensor::zeros(&[2]));
        let x = tape.constant(&t(&[2], &[1.0, -1.0]));
        let y = tape.layer_norm(x, g2, b2, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-9 && (d[1] + 1.0).abs() < 1e-9);

        let g1 = tape.constant(&Tensor::ones(&[1]));
        let b1 = tape.constant(&Tensor::zeros(&[1]));
        let x = tape.constant(&Tensor::ones(&[3, 1]));
        assert!(matches!(tape.layer_norm(x, g1, b1, 1e-5), Err(Error::Dimension(_))));
    }

    #[test]
    fn pointwise_anchors() {
        let mut tape = Tape::new();
        let z = tape.constant(&Tensor::scalar(0.0));
        let s = tape.silu(z).unwrap();
        assert_eq!(tape.item(s), 0.0);
        let sp = tape.softplus(z).unwrap();
        assert!((tape.item(sp) - std::f64::consts::LN_2).abs() < 1e-15);
        let v = tape.constant(&t(&[2], &[3.0, 4.0]));
        let n = tape.l2_normalize(v).unwrap();
        assert_eq!(tape.value(n).data(), &[0.6, 0.8]);
        let zero = tape.constant(&Tensor::zeros(&[3]));
        assert!(matches!(tape.l2_normalize(zero), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn backward_simple_losses() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::full(&[2, 3], 0.3));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.param(&t(&[2], &[1.0, 2.0]));
        let l = tape.sq_norm(x).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::ones(&[3]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_visits_in_reverse_and_skips_frozen() {
        let mut tape = Tape::new();
        let frozen = Tensor::full(&[3], 0.25);
        let x = tape.param(&Tensor::ones(&[3]));
        let c = tape.constant(&frozen);
        let y = tape.mul(x, c).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        let order = tape.last_backward_order().to_vec();
        assert_eq!(order, vec![3, 2, 1, 0]);
        assert!(tape.grad(c).is_none());
        assert!(tape.value(c).bitwise_eq(&frozen));
        assert_eq!(tape.grad(x).unwrap(), &[0.25; 3]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::scalar(1000.0));
        assert!(matches!(tape.exp(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn deterministic_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.constant(&x);
            let wv = tape.constant(&w);
            let y = tape.linear(xv, wv, None).unwrap();
            let y = tape.silu(y).unwrap();
            tape.value(y).clone()
        };
        assert!(run().bitwise_eq(&run()));
    }

    #[test]
    fn linear_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let b = Tensor::randn(&[2], 1.0, &mut rng);
        let r = check_gradients(
            &[x, w, b],
            |tape, v| tape.linear(v[0], v[1], Some(v[2])),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn composed_linear_layer_norm_sum_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inputs = vec![
            Tensor::randn(&[3, 4], 1.0, &mut rng),
            Tensor::randn(&[4, 5], 1.0, &mut rng),
            Tensor::randn(&[5], 1.0, &mut rng),
            Tensor::uniform(&[5], 0.5, 1.5, &mut rng),
            Tensor::randn(&[5], 1.0, &mut rng),
        ];
        let r = check_gradients(
            &inputs,
            |tape, v| {
                let y = tape.linear(v[0], v[1], Some(v[2]))?;
                let y = tape.layer_norm(y, v[3], v[4], 1e-5)?;
                tape.sum(y)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
