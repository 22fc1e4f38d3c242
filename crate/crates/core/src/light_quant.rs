//! Light quantization: Gram matrices of encoder features, a small trainable
//! map from Gram matrices to light factors, the pairwise contrastive loss
//! that separates lighting conditions and the light consistency loss.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Bound, ParamSet};
use crate::tensor::Tensor4;

/// Hidden width of every level map.
pub const LQM_HIDDEN: usize = 32;

/// `G = a aᵀ` for one feature map, `a` being the `c x (h*w)` flattening.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub channels: usize,
    pub values: Vec<f64>,
    pub n_spatial: usize,
}

impl GramMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.channels + j]
    }

    /// Largest `|G_ij - G_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let c = self.channels;
        let mut worst = 0.0f64;
        for i in 0..c {
            for j in i + 1..c {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    /// `vᵀ G v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let c = self.channels;
        (0..c)
            .map(|i| v[i] * (0..c).map(|j| self.get(i, j) * v[j]).sum::<f64>())
            .sum()
    }

    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::new([1, 1, self.channels, self.channels], self.values.clone()).expect("square")
    }
}

/// One Gram matrix per batch item.
pub fn gram_matrices(f: &Tensor4) -> Vec<GramMatrix> {
    let [b, c, h, w] = f.dims();
    let g = crate::autodiff::kernels::gram_forward(f);
    (0..b)
        .map(|i| GramMatrix {
            channels: c,
            values: g.data()[i * c * c..(i + 1) * c * c].to_vec(),
            n_spatial: h * w,
        })
        .collect()
}

/// Gram matrix of a single-item feature map.
pub fn gram_matrix(f: &Tensor4) -> Result<GramMatrix> {
    if f.dims()[0] != 1 {
        return Err(Error::shape("gram_matrix", &f.dims(), &[1]));
    }
    Ok(gram_matrices(f).remove(0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightFactor {
    pub values: Vec<f64>,
    pub level: usize,
    pub n_l: usize,
    pub d_l: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LqmLevel {
    pub channels: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Per-level maps `flatten(G) -> affine -> leaky -> affine -> factor`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqmState {
    pub params: ParamSet,
    pub levels: Vec<LqmLevel>,
    pub d_l: usize,
    pub slope: f64,
}

impl LqmState {
    pub fn new<R: Rng + ?Sized>(channels: &[usize], d_l: usize, slope: f64, rng: &mut R) -> Result<Self> {
        if d_l == 0 || channels.is_empty() || channels.contains(&0) {
            return Err(Error::arg("lqm", "d_l and level channels must be positive"));
        }
        let mut params = ParamSet::new("lqm");
        let levels = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| {
                let fan = c * c;
                LqmLevel {
                    channels: c,
                    w1: params.push(format!("level{l}.w1"), fan_in_uniform([fan, LQM_HIDDEN, 1, 1], fan, rng)),
                    b1: params.push(format!("level{l}.b1"), Tensor4::zeros([LQM_HIDDEN, 1, 1, 1])),
                    w2: params.push(
                        format!("level{l}.w2"),
                        fan_in_uniform([LQM_HIDDEN, d_l, 1, 1], LQM_HIDDEN, rng),
                    ),
                    b2: params.push(format!("level{l}.b2"), Tensor4::zeros([d_l, 1, 1, 1])),
                }
            })
            .collect();
        Ok(Self {
            params,
            levels,
            d_l,
            slope,
        })
    }

    /// Factors `(B, d_l, 1, 1)` from per-item Gram matrices `(B, 1, C, C)`.
    pub fn factors_on_tape(&self, tape: &mut Tape, b: &Bound, level: usize, gram: Var) -> Result<Var> {
        let lv = self
            .levels
            .get(level)
            .ok_or_else(|| Error::arg("extract_light_factor", format!("no level {level}")))?;
        let [n, one, c1, c2] = tape.dims(gram);
        if one != 1 || c1 != lv.channels || c2 != lv.channels {
            return Err(Error::shape("extract_light_factor", &tape.dims(gram), &[lv.channels, lv.channels]));
        }
        let flat = tape.reshape(gram, [n, c1 * c2, 1, 1])?;
        let h = tape.matmul(flat, b.var(lv.w1))?;
        let h = tape.add_channel_bias(h, b.var(lv.b1))?;
        let h = tape.leaky_relu(h, self.slope);
        let f = tape.matmul(h, b.var(lv.w2))?;
        tape.add_channel_bias(f, b.var(lv.b2))
    }
}

/// Value-level factor extraction for one Gram matrix at `level`.
pub fn extract_light_factor(g: &GramMatrix, lqm: &LqmState, level: usize) -> Result<LightFactor> {
    let mut tape = Tape::new();
    let b = lqm.params.bind_const(&mut tape);
    let gv = tape.constant(g.to_tensor());
    let f = lqm.factors_on_tape(&mut tape, &b, level, gv)?;
    Ok(LightFactor {
        values: tape.value(f).data().to_vec(),
        level,
        n_l: g.n_spatial,
        d_l: lqm.d_l,
    })
}

/// Sum over unordered pairs of `[d - m]₊²` (same label) or `[m - d]₊²`
/// (different label), `d = 1 - cos`. `factors` is `(K, d_l, 1, 1)`.
pub fn contrastive_on_tape(tape: &mut Tape, factors: Var, labels: &[i64], margin: f64) -> Result<Var> {
    let k = tape.dims(factors)[0];
    if labels.len() != k {
        return Err(Error::shape("lqm_contrastive_loss", &[k], &[labels.len()]));
    }
    if k < 2 {
        return Err(Error::arg("lqm_contrastive_loss", "need at least two factors"));
    }
    let per = tape.value(factors).len() / k;
    for r in 0..k {
        let row = &tape.value(factors).data()[r * per..(r + 1) * per];
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate {
                op: "lqm_contrastive_loss",
                msg: format!("factor {r} has zero norm"),
            });
        }
    }
    let mut ia = Vec::new();
    let mut ib = Vec::new();
    let mut sign = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            ia.push(i);
            ib.push(j);
            sign.push(if labels[i] == labels[j] { 1.0 } else { -1.0 });
        }
    }
    let p = ia.len();
    let a = tape.gather_rows(factors, &ia)?;
    let bb = tape.gather_rows(factors, &ib)?;
    let ab = tape.mul(a, bb)?;
    let dot = tape.row_sum(ab);
    let a2 = tape.square(a);
    let na = tape.row_sum(a2);
    let b2 = tape.square(bb);
    let nb = tape.row_sum(b2);
    let nn = tape.mul(na, nb)?;
    let denom = tape.sqrt(nn);
    let cos = tape.div(dot, denom)?;
    let neg = tape.scale(cos, -1.0);
    let dist = tape.add_scalar(neg, 1.0 - margin);
    let s = tape.constant(Tensor4::new([p, 1, 1, 1], sign)?);
    let signed = tape.mul(dist, s)?;
    let hinge = tape.relu(signed);
    let sq = tape.square(hinge);
    Ok(tape.sum(sq))
}

/// Value-level contrastive loss over `(factor, light label)` entries.
pub fn lqm_contrastive_loss(factors: &[(LightFactor, i64)], margin: f64) -> Result<f64> {
    let first = factors
        .first()
        .ok_or_else(|| Error::arg("lqm_contrastive_loss", "need at least two factors"))?;
    let d = first.0.d_l;
    let mut data = Vec::with_capacity(factors.len() * d);
    for (f, _) in factors {
        if f.values.len() != d {
            return Err(Error::shape("lqm_contrastive_loss", &[d], &[f.values.len()]));
        }
        data.extend_from_slice(&f.values);
    }
    let labels: Vec<i64> = factors.iter().map(|(_, l)| *l).collect();
    let mut tape = Tape::new();
    let fv = tape.constant(Tensor4::new([factors.len(), d, 1, 1], data)?);
    let loss = contrastive_on_tape(&mut tape, fv, &labels, margin)?;
    Ok(tape.value(loss).data()[0])
}

/// Mean over batch items of `Σ (fa - fb)² / (4 d_l² n_l²)`; inputs `(B, d_l, 1, 1)`.
pub fn consistency_on_tape(tape: &mut Tape, fa: Var, fb: Var, n_l: usize) -> Result<Var> {
    let [b, d_l, _, _] = tape.dims(fa);
    if tape.dims(fb) != tape.dims(fa) {
        return Err(Error::shape("light_consistency_loss", &tape.dims(fa), &tape.dims(fb)));
    }
    let diff = tape.sub(fa, fb)?;
    let sq = tape.square(diff);
    let total = tape.sum(sq);
    let norm = 4.0 * (d_l * d_l) as f64 * (n_l * n_l) as f64 * b as f64;
    Ok(tape.scale(total, 1.0 / norm))
}

pub fn light_consistency_loss(fa: &LightFactor, fb: &LightFactor) -> Result<f64> {
    if fa.d_l != fb.d_l || fa.n_l != fb.n_l || fa.level != fb.level || fa.values.len() != fb.values.len() {
        return Err(Error::shape(
            "light_consistency_loss",
            &[fa.level, fa.d_l, fa.n_l],
            &[fb.level, fb.d_l, fb.n_l],
        ));
    }
    let mut tape = Tape::new();
    let a = tape.constant(Tensor4::new([1, fa.values.len(), 1, 1], fa.values.clone())?);
    let b = tape.constant(Tensor4::new([1, fb.values.len(), 1, 1], fb.values.clone())?);
    let l = consistency_on_tape(&mut tape, a, b, fa.n_l)?;
    Ok(tape.value(l).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn factor(values: Vec<f64>) -> LightFactor {
        LightFactor {
            d_l: values.len(),
            values,
            level: 0,
            n_l: 1,
        }
    }

    #[test]
    fn gram_sum_of_squares() {
        let f = Tensor4::new([1, 1, 1, 3], vec![1.0, 2.0, 2.0]).unwrap();
        let g = gram_matrix(&f).unwrap();
        assert_eq!(g.values, vec![9.0]);
        assert_eq!(g.n_spatial, 3);
    }

    #[test]
    fn gram_orthogonal_rows() {
        let f = Tensor4::new([1, 2, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(gram_matrix(&f).unwrap().values, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn zero_gram_zero_bias_gives_zero_factor() {
        let lqm = LqmState::new(&[3], 16, 0.2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let g = GramMatrix {
            channels: 3,
            values: vec![0.0; 9],
            n_spatial: 4,
        };
        let f = extract_light_factor(&g, &lqm, 0).unwrap();
        assert_eq!(f.values, vec![0.0; 16]);
        assert_eq!(f.n_l, 4);
    }

    #[test]
    fn wrong_gram_size_is_shape_error() {
        let lqm = LqmState::new(&[3], 16, 0.2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let g = GramMatrix {
            channels: 2,
            values: vec![1.0; 4],
            n_spatial: 4,
        };
        assert!(matches!(extract_light_factor(&g, &lqm, 0), Err(Error::Shape { .. })));
    }

    #[test]
    fn contrastive_hinge_cases() {
        let same = [(factor(vec![1.0, 2.0]), 0), (factor(vec![1.0, 2.0]), 0)];
        assert_eq!(lqm_contrastive_loss(&same, 0.1).unwrap(), 0.0);
        let diff = [(factor(vec![1.0, 0.0]), 0), (factor(vec![0.0, 1.0]), 1)];
        assert_eq!(lqm_contrastive_loss(&diff, 0.1).unwrap(), 0.0);
        let half = [
            (factor(vec![1.0, 0.0]), 3),
            (factor(vec![0.5, 0.75f64.sqrt()]), 3),
        ];
        assert!((lqm_contrastive_loss(&half, 0.1).unwrap() - 0.16).abs() < 1e-12);
    }

    #[test]
    fn contrastive_zero_norm_is_degenerate() {
        let f = [(factor(vec![0.0, 0.0]), 0), (factor(vec![1.0, 0.0]), 1)];
        assert!(matches!(lqm_contrastive_loss(&f, 0.1), Err(Error::Degenerate { .. })));
    }

    #[test]
    fn consistency_cases() {
        let a = factor(vec![1.0, -2.0, 0.5]);
        assert_eq!(light_consistency_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(light_consistency_loss(&factor(vec![2.0]), &factor(vec![0.0])).unwrap(), 1.0);
        let mut b = a.clone();
        b.n_l = 2;
        assert!(matches!(light_consistency_loss(&a, &b), Err(Error::Shape { .. })));
    }
}
