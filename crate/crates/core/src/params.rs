//! Named parameter containers and the small layers built on them.

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Dims, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor4,
}

/// Ordered parameter tensors of one trainable group plus its freeze flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub name: String,
    params: Vec<Param>,
    pub frozen: bool,
}

/// Tape handles for every tensor of a [`ParamSet`], in the same order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            params: Vec::new(),
            frozen: false,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor4) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, idx: usize) -> &Tensor4 {
        &self.params[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor4 {
        &mut self.params[idx].value
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Register every tensor as a tape leaf; frozen sets do not request gradients.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, !self.frozen)
    }

    /// Register every tensor as a constant leaf.
    pub fn bind_const(&self, tape: &mut Tape) -> Bound {
        self.bind_with(tape, false)
    }

    /// Constant binding except tensor `idx`, which is taken from `var`.
    pub fn bind_replacing(&self, tape: &mut Tape, idx: usize, var: Var) -> Result<Bound> {
        if tape.dims(var) != self.get(idx).dims() {
            return Err(Error::shape("bind_replacing", &self.get(idx).dims(), &tape.dims(var)));
        }
        let mut b = self.bind_const(tape);
        b.vars[idx] = var;
        Ok(b)
    }

    fn bind_with(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad))
            .collect();
        Bound { vars }
    }

    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients) -> Vec<Tensor4> {
        bound.vars.iter().map(|&v| grads.take(v)).collect()
    }

    /// `(qualified name, tensor)` pairs for checkpointing.
    pub fn export(&self) -> Vec<(String, Tensor4)> {
        self.params
            .iter()
            .map(|p| (format!("{}.{}", self.name, p.name), p.value.clone()))
            .collect()
    }

    /// Overwrite values from `(qualified name, tensor)` pairs; every tensor must be present.
    pub fn import(&mut self, entries: &[(String, Tensor4)]) -> Result<()> {
        for p in &mut self.params {
            let key = format!("{}.{}", self.name, p.name);
            let (_, t) = entries
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| Error::Compatibility(format!("missing tensor `{key}`")))?;
            if t.dims() != p.value.dims() {
                return Err(Error::Compatibility(format!(
                    "tensor `{key}` has dims {:?}, expected {:?}",
                    t.dims(),
                    p.value.dims()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    /// Bitwise equality of every tensor.
    pub fn bit_identical(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.value.dims() == b.value.dims()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

/// Fan-in scaled uniform init with variance `1 / fan_in`.
pub fn fan_in_uniform<R: Rng + ?Sized>(dims: Dims, fan_in: usize, rng: &mut R) -> Tensor4 {
    let bound = (3.0 / fan_in as f64).sqrt();
    Tensor4::uniform(dims, -bound, bound, rng)
}

/// 2-D convolution layer referencing a kernel and bias in a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub kernel: usize,
    pub bias: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let kernel = set.push(
            format!("{name}.weight"),
            fan_in_uniform([out_ch, in_ch, k, k], in_ch * k * k, rng),
        );
        let bias = set.push(format!("{name}.bias"), Tensor4::zeros([out_ch, 1, 1, 1]));
        Self {
            kernel,
            bias,
            stride,
            pad: k / 2,
        }
    }

    /// Kernel initialised to zero.
    pub fn zeroed(set: &mut ParamSet, name: &str, in_ch: usize, out_ch: usize, k: usize) -> Self {
        let kernel = set.push(format!("{name}.weight"), Tensor4::zeros([out_ch, in_ch, k, k]));
        let bias = set.push(format!("{name}.bias"), Tensor4::zeros([out_ch, 1, 1, 1]));
        Self {
            kernel,
            bias,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, b.var(self.kernel), Some(b.var(self.bias)), self.stride, self.pad)
    }
}

/// `skip + conv2(act(conv1(x)))`; `conv1` may reduce channels so that `x`
/// can carry extra context concatenated onto `skip`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub slope: f64,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        in_ch: usize,
        ch: usize,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            conv1: Conv::new(set, &format!("{name}.conv1"), in_ch, ch, 3, 1, rng),
            conv2: Conv::new(set, &format!("{name}.conv2"), ch, ch, 3, 1, rng),
            slope,
        }
    }

    /// Residual branch starts at zero so the block is an identity at init.
    pub fn new_identity<R: Rng + ?Sized>(
        set: &mut ParamSet,
        name: &str,
        in_ch: usize,
        ch: usize,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        Self {
            conv1: Conv::new(set, &format!("{name}.conv1"), in_ch, ch, 3, 1, rng),
            conv2: Conv::zeroed(set, &format!("{name}.conv2"), ch, ch, 3),
            slope,
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        self.forward_with_skip(tape, b, x, x)
    }

    pub fn forward_with_skip(&self, tape: &mut Tape, b: &Bound, x: Var, skip: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, b, x)?;
        let h = tape.leaky_relu(h, self.slope);
        let h = self.conv2.forward(tape, b, h)?;
        tape.add(skip, h)
    }
}
