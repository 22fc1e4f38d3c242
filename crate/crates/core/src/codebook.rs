//! Learnable codebook, nearest-code matching, and code-usage diagnostics.

use std::io::Write;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor4;

/// `N x d` code vectors stored as a single `(N, d, 1, 1)` parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub params: ParamSet,
    n_codes: usize,
    dim: usize,
    usage: Vec<u64>,
}

/// Quantized grid and the chosen code at every position.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub quantized: Tensor4,
    /// Row-major `(batch, h, w)` code indices.
    pub indices: Vec<usize>,
    pub grid: [usize; 3],
}

impl QuantizeResult {
    pub fn index(&self, b: usize, y: usize, x: usize) -> usize {
        let [_, h, w] = self.grid;
        self.indices[(b * h + y) * w + x]
    }
}

impl Codebook {
    /// Codes drawn i.i.d. from `U[-1/N, 1/N]`.
    pub fn new<R: Rng + ?Sized>(n_codes: usize, dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / n_codes as f64;
        let codes = Tensor4::uniform([n_codes, dim, 1, 1], -bound, bound, rng);
        Self::from_codes(codes).expect("fresh codebook")
    }

    /// Codebook from an explicit `(N, d, 1, 1)` or `(N, d)`-shaped tensor.
    pub fn from_codes(codes: Tensor4) -> Result<Self> {
        let [n, d, h, w] = codes.dims();
        if n == 0 || d == 0 || h * w != 1 {
            return Err(Error::arg("Codebook", format!("bad code dims {:?}", codes.dims())));
        }
        let mut params = ParamSet::new("codebook");
        params.push("codes", codes);
        Ok(Self {
            params,
            n_codes: n,
            dim: d,
            usage: vec![0; n],
        })
    }

    pub fn n_codes(&self) -> usize {
        self.n_codes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn codes(&self) -> &Tensor4 {
        self.params.get(0)
    }

    pub fn code(&self, k: usize) -> &[f64] {
        &self.codes().data()[k * self.dim..(k + 1) * self.dim]
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    /// Index of the code with the smallest squared distance; ties go to the lowest index.
    pub fn nearest(&self, z: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.n_codes {
            let d: f64 = self
                .code(k)
                .iter()
                .zip(z)
                .map(|(c, v)| (v - c) * (v - c))
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Nearest-code matching without touching usage counters.
    pub fn lookup(&self, z: &Tensor4) -> Result<QuantizeResult> {
        let [b, c, h, w] = z.dims();
        if c != self.dim {
            return Err(Error::shape("quantize_nearest", &z.dims(), &self.codes().dims()));
        }
        let hw = h * w;
        let mut indices = Vec::with_capacity(b * hw);
        let mut quantized = Tensor4::zeros(z.dims());
        let mut col = vec![0.0; c];
        for bi in 0..b {
            for p in 0..hw {
                for (ci, v) in col.iter_mut().enumerate() {
                    *v = z.data()[(bi * c + ci) * hw + p];
                }
                let k = self.nearest(&col);
                indices.push(k);
                let code = self.code(k);
                for ci in 0..c {
                    quantized.data_mut()[(bi * c + ci) * hw + p] = code[ci];
                }
            }
        }
        Ok(QuantizeResult {
            quantized,
            indices,
            grid: [b, h, w],
        })
    }
}

/// Replace every spatial vector of `z` by its nearest code and count usage.
pub fn quantize_nearest(z: &Tensor4, codebook: &mut Codebook) -> Result<QuantizeResult> {
    let res = codebook.lookup(z)?;
    for &k in &res.indices {
        codebook.usage[k] += 1;
    }
    Ok(res)
}

/// Tape handles produced by [`quantize_on_tape`].
#[derive(Debug, Clone)]
pub struct QuantizedVars {
    /// Quantized values with straight-through gradient to the encoder output.
    pub straight_through: Var,
    /// Quantized values gathered from the code parameter (gradient to codes only).
    pub from_codes: Var,
    pub result: QuantizeResult,
}

/// Quantize `z` on the tape.
pub fn quantize_on_tape(
    tape: &mut Tape,
    z: Var,
    codebook: &mut Codebook,
    bound: &Bound,
) -> Result<QuantizedVars> {
    let result = quantize_nearest(tape.value(z), codebook)?;
    let from_codes = tape.gather_codes(bound.var(0), &result.indices, tape.dims(z))?;
    let straight_through = tape.straight_through(z, result.quantized.clone())?;
    Ok(QuantizedVars {
        straight_through,
        from_codes,
        result,
    })
}

/// `sigma * mean((z - sg(zq))^2) + mean((sg(z) - zq)^2)`.
pub fn codebook_matching_loss(tape: &mut Tape, z: Var, zq: Var, sigma: f64) -> Result<Var> {
    tape.value(z).same_dims(tape.value(zq), "codebook_matching_loss")?;
    let zq_sg = tape.stop_gradient(zq);
    let z_sg = tape.stop_gradient(z);
    let d1 = tape.sub(z, zq_sg)?;
    let d1 = tape.square(d1);
    let commit = tape.mean(d1);
    let commit = tape.scale(commit, sigma);
    let d2 = tape.sub(z_sg, zq)?;
    let d2 = tape.square(d2);
    let embed = tape.mean(d2);
    tape.add(commit, embed)
}

/// Per-code counts over a list of quantization results.
pub fn activation_histogram(results: &[QuantizeResult], n_codes: usize) -> Result<Vec<u64>> {
    let mut counts = vec![0u64; n_codes];
    for r in results {
        for &k in &r.indices {
            let slot = counts
                .get_mut(k)
                .ok_or_else(|| Error::Corruption(format!("code index {k} >= {n_codes}")))?;
            *slot += 1;
        }
    }
    Ok(counts)
}

/// L1 distance between the normalized frequency vectors (in `[0, 2]`).
pub fn histogram_distance(h1: &[u64], h2: &[u64]) -> Result<f64> {
    if h1.len() != h2.len() {
        return Err(Error::shape("histogram_distance", &[h1.len()], &[h2.len()]));
    }
    let s1: u64 = h1.iter().sum();
    let s2: u64 = h2.iter().sum();
    if s1 == 0 || s2 == 0 {
        return Err(Error::arg("histogram_distance", "histogram sums to zero"));
    }
    Ok(h1
        .iter()
        .zip(h2)
        .map(|(&a, &b)| (a as f64 / s1 as f64 - b as f64 / s2 as f64).abs())
        .sum())
}

/// The `k` most used codes, by descending count then ascending index.
pub fn top_k_codes(counts: &[u64], k: usize) -> Result<Vec<(usize, u64)>> {
    if k > counts.len() {
        return Err(Error::arg(
            "top_k_codes",
            format!("k = {k} exceeds codebook size {}", counts.len()),
        ));
    }
    let mut ranked: Vec<(usize, u64)> = counts.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

/// `index,count` CSV with a header line.
pub fn write_histogram_csv<W: Write>(counts: &[u64], mut out: W) -> Result<()> {
    writeln!(out, "index,count")?;
    for (i, c) in counts.iter().enumerate() {
        writeln!(out, "{i},{c}")?;
    }
    Ok(())
}
