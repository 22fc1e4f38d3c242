//! Dynamic reverse-mode tape.
//!
//! Every forward op appends a node holding its output value and enough
//! information to replay the chain rule. `backward` walks the nodes in exact
//! reverse order and accumulates gradients additively.

use crate::autodiff::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool { input: Var, window: usize },
    Upsample { input: Var, factor: usize },
    Unfold { input: Var },
    Fold { input: Var, patch: usize },
    SoftmaxChannels { input: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale { input: Var, k: f64 },
    AddScalar { input: Var },
    LeakyRelu { input: Var, slope: f64 },
    Sigmoid { input: Var },
    Tanh { input: Var },
    LogSigmoid { input: Var },
    Abs { input: Var },
    Sqrt { input: Var },
    Sum { input: Var },
    Mean { input: Var },
    RowSum { input: Var },
    Concat { inputs: Vec<Var>, sizes: Vec<usize> },
    Slice { input: Var, start: usize },
    Reshape { input: Var },
    Matmul(Var, Var),
    ChannelBias { input: Var, bias: Var },
    Gram { input: Var },
    GatherRows { input: Var, rows: Vec<usize> },
    GatherCodes { codes: Var, indices: Vec<usize> },
    StopGradient,
    StraightThrough { input: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor4,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed ops.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor4>>,
    dims: Vec<Dims>,
}

impl Gradients {
    /// Total derivative for `v`; zeros if `v` is not on any path to the loss.
    pub fn get(&self, v: Var) -> Tensor4 {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor4::zeros(self.dims[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor4 {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor4::zeros(self.dims[v.0]))
    }
}

fn elementwise(a: &Tensor4, b: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Tensor4 {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor4::new(a.dims(), data).expect("same dims")
}

fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Tensor4 {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> Dims {
        self.nodes[v.0].value.dims()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor4, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor4, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Branch taken by every element of every non-smooth op (leaky ReLU, abs), in tape order.
    /// Two inputs with equal patterns lie on the same smooth piece.
    pub fn branch_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::LeakyRelu { input, .. } => out.extend(self.value(input).data().iter().map(|&x| x > 0.0)),
                Op::Abs { input } => out.extend(self.value(input).data().iter().map(|&x| x >= 0.0)),
                _ => {}
            }
        }
        out
    }

    pub fn constant(&mut self, value: Tensor4) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeom { stride, pad };
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let ng = self.ng(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
            ng,
        ))
    }

    pub fn avg_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let out = kernels::avg_pool_forward(self.value(input), window)?;
        let ng = self.ng(&[input]);
        Ok(self.push(out, Op::AvgPool { input, window }, ng))
    }

    pub fn upsample_nearest(&mut self, input: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::arg("upsample_nearest", "factor must be at least 1"));
        }
        let out = kernels::upsample_forward(self.value(input), factor);
        let ng = self.ng(&[input]);
        Ok(self.push(out, Op::Upsample { input, factor }, ng))
    }

    pub fn unfold(&mut self, input: Var, patch: usize) -> Result<Var> {
        let out = kernels::unfold_forward(self.value(input), patch)?;
        let ng = self.ng(&[input]);
        Ok(self.push(out, Op::Unfold { input }, ng))
    }

    pub fn fold(&mut self, input: Var, batch: usize, h: usize, w: usize) -> Result<Var> {
        let out = kernels::fold_forward(self.value(input), batch, h, w)?;
        let patch = self.dims(input)[2];
        let ng = self.ng(&[input]);
        Ok(self.push(out, Op::Fold { input, patch }, ng))
    }

    pub fn softmax_channels(&mut self, input: Var) -> Var {
        let out = kernels::softmax_channels(self.value(input));
        let ng = self.ng(&[input]);
        self.push(out, Op::SoftmaxChannels { input }, ng)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.value(a).same_dims(self.value(b), name)?;
        let out = elementwise(self.value(a), self.value(b), f);
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(input).map(f);
        let ng = self.ng(&[input]);
        self.push(out, op, ng)
    }

    pub fn scale(&mut self, input: Var, k: f64) -> Var {
        self.unary(input, |x| k * x, Op::Scale { input, k })
    }

    pub fn add_scalar(&mut self, input: Var, k: f64) -> Var {
        self.unary(input, |x| x + k, Op::AddScalar { input })
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        self.unary(
            input,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu { input, slope },
        )
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.leaky_relu(input, 0.0)
    }

    pub fn square(&mut self, input: Var) -> Var {
        self.mul(input, input).expect("same var")
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, sigmoid, Op::Sigmoid { input })
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.unary(input, f64::tanh, Op::Tanh { input })
    }

    /// Numerically stable `ln(sigmoid(x))`.
    pub fn log_sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, log_sigmoid, Op::LogSigmoid { input })
    }

    pub fn abs(&mut self, input: Var) -> Var {
        self.unary(input, f64::abs, Op::Abs { input })
    }

    pub fn sqrt(&mut self, input: Var) -> Var {
        self.unary(input, f64::sqrt, Op::Sqrt { input })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).sum();
        let ng = self.ng(&[input]);
        self.push(Tensor4::scalar(s), Op::Sum { input }, ng)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let s = self.value(input).mean();
        let ng = self.ng(&[input]);
        self.push(Tensor4::scalar(s), Op::Mean { input }, ng)
    }

    /// Sum over every axis except the leading one: `(N, ..) -> (N, 1, 1, 1)`.
    pub fn row_sum(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let n = t.dims()[0];
        let per = t.len() / n.max(1);
        let data = (0..n)
            .map(|r| t.data()[r * per..(r + 1) * per].iter().sum())
            .collect();
        let out = Tensor4::new([n, 1, 1, 1], data).expect("row count");
        let ng = self.ng(&[input]);
        self.push(out, Op::RowSum { input }, ng)
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::arg("concat_channels", "no inputs"))?;
        let [b, _, h, w] = self.dims(first);
        let mut sizes = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let d = self.dims(v);
            if d[0] != b || d[2] != h || d[3] != w {
                return Err(Error::shape("concat_channels", &self.dims(first), &d));
            }
            sizes.push(d[1]);
        }
        let c_total: usize = sizes.iter().sum();
        let mut data = Vec::with_capacity(b * c_total * h * w);
        for bi in 0..b {
            for (&v, &c) in inputs.iter().zip(&sizes) {
                let src = self.value(v).data();
                data.extend_from_slice(&src[bi * c * h * w..(bi + 1) * c * h * w]);
            }
        }
        let out = Tensor4::new([b, c_total, h, w], data)?;
        let ng = self.ng(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                sizes,
            },
            ng,
        ))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let [b, c, h, w] = self.dims(input);
        if start + len > c || len == 0 {
            return Err(Error::shape("slice_channels", &[b, c, h, w], &[start, len]));
        }
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(b * len * h * w);
        for bi in 0..b {
            let off = (bi * c + start) * h * w;
            data.extend_from_slice(&src[off..off + len * h * w]);
        }
        let out = Tensor4::new([b, len, h, w], data)?;
        let ng = self.ng(&[input]);
        Ok(self.push(out, Op::Slice { input, start }, ng))
    }

    pub fn reshape(&mut self, input: Var, dims: Dims) -> Result<Var> {
        let out = self.value(input).reshape(dims)?;
        let ng = self.ng(&[input]);
        Ok(self.push(out, Op::Reshape { input }, ng))
    }

    /// Matrix product of the 2-D views `(d0, d1*d2*d3)`; output `(n, m, 1, 1)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.dims()[0];
        let k = ta.len() / n.max(1);
        let kb = tb.dims()[0];
        if k != kb {
            return Err(Error::shape("matmul", &ta.dims(), &tb.dims()));
        }
        let m = tb.len() / kb.max(1);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &ta.data()[i * k..(i + 1) * k];
            let dst = &mut out[i * m..(i + 1) * m];
            for (p, &av) in row.iter().enumerate() {
                let brow = &tb.data()[p * m..(p + 1) * m];
                for (d, &bv) in dst.iter_mut().zip(brow) {
                    *d += av * bv;
                }
            }
        }
        let out = Tensor4::new([n, m, 1, 1], out)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::Matmul(a, b), ng))
    }

    /// Adds `bias[c]` (shape `(C, 1, 1, 1)`) at every position of channel `c`.
    pub fn add_channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let [b, c, h, w] = self.dims(input);
        if self.value(bias).len() != c {
            return Err(Error::shape(
                "add_channel_bias",
                &[b, c, h, w],
                &self.dims(bias),
            ));
        }
        let bv = self.value(bias).data().to_vec();
        let mut out = self.value(input).clone();
        let hw = h * w;
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv[(i / hw) % c];
        }
        let ng = self.ng(&[input, bias]);
        Ok(self.push(out, Op::ChannelBias { input, bias }, ng))
    }

    /// Per-item Gram matrix `(B, C, H, W) -> (B, 1, C, C)`.
    pub fn gram(&mut self, input: Var) -> Var {
        let out = kernels::gram_forward(self.value(input));
        let ng = self.ng(&[input]);
        self.push(out, Op::Gram { input }, ng)
    }

    /// Select rows along the leading axis.
    pub fn gather_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(input);
        let [n, c, h, w] = t.dims();
        let per = c * h * w;
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            if r >= n {
                return Err(Error::arg("gather_rows", format!("row {r} out of range {n}")));
            }
            data.extend_from_slice(&t.data()[r * per..(r + 1) * per]);
        }
        let out = Tensor4::new([rows.len(), c, h, w], data)?;
        let ng = self.ng(&[input]);
        Ok(self.push(
            out,
            Op::GatherRows {
                input,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Lay out code vectors `codes[(N, d, 1, 1)]` on a `(B, d, h, w)` grid.
    pub fn gather_codes(&mut self, codes: Var, indices: &[usize], dims: Dims) -> Result<Var> {
        let t = self.value(codes);
        let n = t.dims()[0];
        let d = t.len() / n.max(1);
        let [b, c, h, w] = dims;
        if c != d || indices.len() != b * h * w {
            return Err(Error::shape("gather_codes", &t.dims(), &dims));
        }
        let mut out = Tensor4::zeros(dims);
        for bi in 0..b {
            for p in 0..h * w {
                let k = indices[bi * h * w + p];
                if k >= n {
                    return Err(Error::Corruption(format!("code index {k} >= {n}")));
                }
                for ci in 0..c {
                    out.data_mut()[(bi * c + ci) * h * w + p] = t.data()[k * d + ci];
                }
            }
        }
        let ng = self.ng(&[codes]);
        Ok(self.push(
            out,
            Op::GatherCodes {
                codes,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Forward identity; contributes nothing to the input's gradient.
    pub fn stop_gradient(&mut self, input: Var) -> Var {
        let out = self.value(input).clone();
        self.push(out, Op::StopGradient, false)
    }

    /// Emits `value` in the forward pass and copies the gradient to `input` unchanged.
    pub fn straight_through(&mut self, input: Var, value: Tensor4) -> Result<Var> {
        self.value(input).same_dims(&value, "straight_through")?;
        let ng = self.ng(&[input]);
        Ok(self.push(value, Op::StraightThrough { input }, ng))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_dims = self.dims(loss);
        if loss_dims != [1, 1, 1, 1] {
            return Err(Error::arg(
                "backward",
                format!("loss must be scalar, got {loss_dims:?}"),
            ));
        }
        let mut grads: Vec<Option<Tensor4>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor4::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            dims: self.nodes.iter().map(|n| n.value.dims()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &Tensor4, grads: &mut [Option<Tensor4>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let mut acc = |v: Var, d: Tensor4| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let ng = |v: Var| self.nodes[v.0].needs_grad;

        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let (d_in, d_k, d_b) =
                    kernels::conv2d_backward(val(*input), val(*kernel), g, *geom, ng(*input), ng(*kernel));
                if let Some(d) = d_in {
                    acc(*input, d);
                }
                if let Some(d) = d_k {
                    acc(*kernel, d);
                }
                if let Some(b) = bias {
                    let d_b = d_b.reshape(val(*b).dims()).expect("bias len");
                    acc(*b, d_b);
                }
            }
            Op::AvgPool { input, window } => {
                acc(*input, kernels::avg_pool_backward(val(*input).dims(), g, *window));
            }
            Op::Upsample { input, factor } => {
                acc(*input, kernels::upsample_backward(val(*input).dims(), g, *factor));
            }
            Op::Unfold { input } => {
                let [b, _, h, w] = val(*input).dims();
                acc(*input, kernels::fold_forward(g, b, h, w).expect("unfold dims"));
            }
            Op::Fold { input, patch } => {
                acc(*input, kernels::unfold_forward(g, *patch).expect("fold dims"));
            }
            Op::SoftmaxChannels { input } => {
                let [b, c, h, w] = out.dims();
                let mut d = Tensor4::zeros(out.dims());
                for bi in 0..b {
                    for y in 0..h {
                        for x in 0..w {
                            let dot: f64 =
                                (0..c).map(|ci| g.at(bi, ci, y, x) * out.at(bi, ci, y, x)).sum();
                            for ci in 0..c {
                                let s = out.at(bi, ci, y, x);
                                d.set(bi, ci, y, x, s * (g.at(bi, ci, y, x) - dot));
                            }
                        }
                    }
                }
                acc(*input, d);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if ng(*a) {
                    acc(*a, elementwise(g, val(*b), |x, y| x * y));
                }
                if ng(*b) {
                    acc(*b, elementwise(g, val(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if ng(*a) {
                    acc(*a, elementwise(g, bv, |x, y| x / y));
                }
                if ng(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = elementwise(out, bv, |q, y| -q / y);
                    acc(*b, elementwise(g, &t, |x, y| x * y));
                }
            }
            Op::Scale { input, k } => acc(*input, g.map(|v| v * k)),
            Op::AddScalar { input } | Op::Reshape { input } | Op::StraightThrough { input } => {
                let d = g.reshape(val(*input).dims()).expect("same numel");
                acc(*input, d);
            }
            Op::LeakyRelu { input, slope } => {
                let d = elementwise(g, val(*input), |gv, x| if x > 0.0 { gv } else { slope * gv });
                acc(*input, d);
            }
            Op::Sigmoid { input } => {
                acc(*input, elementwise(g, out, |gv, s| gv * s * (1.0 - s)));
            }
            Op::Tanh { input } => {
                acc(*input, elementwise(g, out, |gv, t| gv * (1.0 - t * t)));
            }
            Op::LogSigmoid { input } => {
                acc(*input, elementwise(g, val(*input), |gv, x| gv * sigmoid(-x)));
            }
            Op::Abs { input } => {
                let d = elementwise(g, val(*input), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                acc(*input, d);
            }
            Op::Sqrt { input } => {
                acc(*input, elementwise(g, out, |gv, s| 0.5 * gv / s));
            }
            Op::Sum { input } => {
                acc(*input, Tensor4::full(val(*input).dims(), g.data()[0]));
            }
            Op::Mean { input } => {
                let n = val(*input).len() as f64;
                acc(*input, Tensor4::full(val(*input).dims(), g.data()[0] / n));
            }
            Op::RowSum { input } => {
                let dims = val(*input).dims();
                let per = val(*input).len() / dims[0].max(1);
                let data = (0..val(*input).len()).map(|i| g.data()[i / per]).collect();
                acc(*input, Tensor4::new(dims, data).expect("dims"));
            }
            Op::Concat { inputs, sizes } => {
                let [b, c_total, h, w] = out.dims();
                let mut offset = 0;
                for (&v, &c) in inputs.iter().zip(sizes) {
                    if ng(v) {
                        let mut data = Vec::with_capacity(b * c * h * w);
                        for bi in 0..b {
                            let o = (bi * c_total + offset) * h * w;
                            data.extend_from_slice(&g.data()[o..o + c * h * w]);
                        }
                        acc(v, Tensor4::new([b, c, h, w], data).expect("dims"));
                    }
                    offset += c;
                }
            }
            Op::Slice { input, start } => {
                let [b, c, h, w] = val(*input).dims();
                let len = out.dims()[1];
                let mut d = Tensor4::zeros([b, c, h, w]);
                for bi in 0..b {
                    let o = (bi * c + start) * h * w;
                    let src = &g.data()[bi * len * h * w..(bi + 1) * len * h * w];
                    d.data_mut()[o..o + len * h * w].copy_from_slice(src);
                }
                acc(*input, d);
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let n = ta.dims()[0];
                let k = ta.len() / n;
                let m = tb.len() / k;
                let gd = g.data();
                if ng(*a) {
                    let mut d = vec![0.0; n * k];
                    for i in 0..n {
                        for p in 0..k {
                            let brow = &tb.data()[p * m..(p + 1) * m];
                            let grow = &gd[i * m..(i + 1) * m];
                            d[i * k + p] = brow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*a, Tensor4::new(ta.dims(), d).expect("dims"));
                }
                if ng(*b) {
                    let mut d = vec![0.0; k * m];
                    for i in 0..n {
                        let grow = &gd[i * m..(i + 1) * m];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            for (dv, gv) in d[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *dv += av * gv;
                            }
                        }
                    }
                    acc(*b, Tensor4::new(tb.dims(), d).expect("dims"));
                }
            }
            Op::ChannelBias { input, bias } => {
                acc(*input, g.clone());
                if ng(*bias) {
                    let [_, c, h, w] = g.dims();
                    let hw = h * w;
                    let mut d = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        d[(i / hw) % c] += v;
                    }
                    acc(*bias, Tensor4::new(val(*bias).dims(), d).expect("dims"));
                }
            }
            Op::Gram { input } => {
                acc(*input, kernels::gram_backward(val(*input), g));
            }
            Op::GatherRows { input, rows } => {
                let t = val(*input);
                let per = t.len() / t.dims()[0];
                let mut d = Tensor4::zeros(t.dims());
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..per {
                        d.data_mut()[r * per + j] += g.data()[i * per + j];
                    }
                }
                acc(*input, d);
            }
            Op::GatherCodes { codes, indices } => {
                let t = val(*codes);
                let d_code = t.len() / t.dims()[0];
                let [b, c, h, w] = out.dims();
                let mut d = Tensor4::zeros(t.dims());
                for bi in 0..b {
                    for p in 0..h * w {
                        let k = indices[bi * h * w + p];
                        for ci in 0..c {
                            d.data_mut()[k * d_code + ci] += g.data()[(bi * c + ci) * h * w + p];
                        }
                    }
                }
                acc(*codes, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor4::zeros([1, 1, 2, 2]), true);
        assert!(matches!(t.backward(x), Err(Error::Argument { .. })));
    }

    #[test]
    fn sum_gives_all_ones() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor4::full([1, 2, 3, 3], 0.7), true);
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert!(g.get(x).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_sum_gives_twice_x() {
        let mut t = Tape::new();
        let xv = Tensor4::from_fn([1, 1, 2, 3], |[_, _, y, x]| y as f64 - 0.5 * x as f64);
        let x = t.leaf(xv.clone(), true);
        let sq = t.square(x);
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        for (gv, xv) in g.get(x).data().iter().zip(xv.data()) {
            assert_eq!(*gv, 2.0 * xv);
        }
    }

    #[test]
    fn off_path_leaf_gets_zero() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor4::full([1, 1, 1, 2], 3.0), true);
        let y = t.leaf(Tensor4::full([1, 1, 1, 2], 1.0), true);
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(y), Tensor4::zeros([1, 1, 1, 2]));
    }

    #[test]
    fn stop_gradient_one_sided_product() {
        let mut t = Tape::new();
        let xv = Tensor4::from_fn([1, 1, 2, 2], |[_, _, y, x]| 1.0 + y as f64 + 2.0 * x as f64);
        let x = t.leaf(xv.clone(), true);
        let y = t.stop_gradient(x);
        assert_eq!(t.value(y), &xv);
        let p = t.mul(y, x).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x), xv);
    }

    #[test]
    fn stop_gradient_fully_blocked() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor4::full([2, 1, 1, 1], 4.0), true);
        let y = t.stop_gradient(x);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x), Tensor4::zeros([2, 1, 1, 1]));
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
    }
}
