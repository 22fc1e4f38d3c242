//! Light-aware prompt module.
//!
//! A bank of learnable prompt vectors is mixed per spatial patch with softmax
//! weights predicted from pooled local encoder features. The mixed prompt map
//! is refined by a 3x3 convolution and merged channel-wise into the features
//! at the injection site through a residual block.

use std::io::Write;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, ParamSet, ResBlock};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub params: ParamSet,
    n_prompts: usize,
    dim: usize,
    prompts: usize,
    pub shrink: Conv,
    pub compose: Conv,
    pub inject: ResBlock,
}

/// Per-patch prompt weights, `(batch * gh * gw, n_prompts, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptWeights {
    pub weights: Tensor4,
    pub batch: usize,
    pub grid: (usize, usize),
}

impl PromptWeights {
    pub fn n_patches(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn n_prompts(&self) -> usize {
        self.weights.dims()[1]
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let n = self.n_prompts();
        &self.weights.data()[i * n..(i + 1) * n]
    }

    /// Largest `|sum(w) - 1|` over patches.
    pub fn max_sum_error(&self) -> f64 {
        (0..self.n_patches())
            .map(|i| (self.patch(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Patch side for an injection site: a 4x4 patch grid, never below 1 pixel.
pub fn patch_size(site_dim: usize) -> usize {
    (site_dim / 4).max(1)
}

impl PromptBank {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        n_prompts: usize,
        dim: usize,
        slope: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_prompts == 0 || dim == 0 {
            return Err(Error::arg("PromptBank", "need at least one prompt and one channel"));
        }
        let mut params = ParamSet::new(name);
        let prompts = params.push("prompts", Tensor4::normal([n_prompts, dim, 1, 1], 0.02, rng));
        let shrink = Conv::new(&mut params, "shrink", dim, n_prompts, 1, 1, rng);
        let compose = Conv::new(&mut params, "compose", dim, dim, 3, 1, rng);
        let inject = ResBlock::new_identity(&mut params, "inject", 2 * dim, dim, slope, rng);
        Ok(Self {
            params,
            n_prompts,
            dim,
            prompts,
            shrink,
            compose,
            inject,
        })
    }

    pub fn n_prompts(&self) -> usize {
        self.n_prompts
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prompts_index(&self) -> usize {
        self.prompts
    }

    pub fn prompt(&self, n: usize) -> &[f64] {
        &self.params.get(self.prompts).data()[n * self.dim..(n + 1) * self.dim]
    }

    /// Softmax weights over prompts for every patch of `features`.
    pub fn weights_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bound,
        features: Var,
        patch: usize,
    ) -> Result<Var> {
        let [_, c, _, _] = tape.dims(features);
        if c != self.dim {
            return Err(Error::shape("prompt_weights", &tape.dims(features), &[self.dim]));
        }
        let local = tape.unfold(features, patch)?;
        let pooled = tape.avg_pool2d(local, patch)?;
        let logits = self.shrink.forward(tape, b, pooled)?;
        Ok(tape.softmax_channels(logits))
    }

    /// Weighted prompt sum per patch, tiled to `(batch, dim, h, w)`, then the 3x3 conv.
    #[allow(clippy::too_many_arguments)]
    pub fn compose_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bound,
        weights: Var,
        batch: usize,
        grid: (usize, usize),
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let [n, k, _, _] = tape.dims(weights);
        let (gh, gw) = grid;
        let bad = || Error::shape("compose_prompt", &[n, k], &[batch, gh, gw, h, w]);
        if k != self.n_prompts {
            return Err(Error::shape("compose_prompt", &tape.dims(weights), &[self.n_prompts]));
        }
        if n != batch * gh * gw || gh == 0 || gw == 0 || !h.is_multiple_of(gh) || !w.is_multiple_of(gw) || h / gh != w / gw {
            return Err(bad());
        }
        let mixed = tape.matmul(weights, b.var(self.prompts))?;
        let grid = tape.fold(mixed, batch, gh, gw)?;
        let tiled = tape.upsample_nearest(grid, h / gh)?;
        self.compose.forward(tape, b, tiled)
    }

    /// Concatenate `p` onto `features` and merge through the residual block.
    pub fn inject_on_tape(&self, tape: &mut Tape, b: &Bound, features: Var, p: Var) -> Result<Var> {
        if tape.dims(features) != tape.dims(p) {
            return Err(Error::shape("inject_prompt", &tape.dims(features), &tape.dims(p)));
        }
        let cat = tape.concat_channels(&[features, p])?;
        self.inject.forward_with_skip(tape, b, cat, features)
    }

    /// Full module at one site: weights from `features`, composition, injection into `site`.
    pub fn apply_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bound,
        features: Var,
        site: Var,
    ) -> Result<(Var, Var)> {
        let [batch, _, h, w] = tape.dims(site);
        let patch = patch_size(h.min(w));
        let weights = self.weights_on_tape(tape, b, features, patch)?;
        let p = self.compose_on_tape(tape, b, weights, batch, (h / patch, w / patch), h, w)?;
        let out = self.inject_on_tape(tape, b, site, p)?;
        Ok((out, weights))
    }
}

/// Value-level prompt weights for a feature map.
pub fn prompt_weights(features: &Tensor4, bank: &PromptBank, patch: usize) -> Result<PromptWeights> {
    let [batch, _, h, w] = features.dims();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape("prompt_weights", &features.dims(), &[patch]));
    }
    let mut tape = Tape::new();
    let b = bank.params.bind_const(&mut tape);
    let f = tape.constant(features.clone());
    let wv = bank.weights_on_tape(&mut tape, &b, f, patch)?;
    Ok(PromptWeights {
        weights: tape.value(wv).clone(),
        batch,
        grid: (h / patch, w / patch),
    })
}

/// Value-level prompt composition on an `(h, w)` site.
pub fn compose_prompt(weights: &PromptWeights, bank: &PromptBank, h: usize, w: usize) -> Result<Tensor4> {
    let mut tape = Tape::new();
    let b = bank.params.bind_const(&mut tape);
    let wv = tape.constant(weights.weights.clone());
    let p = bank.compose_on_tape(&mut tape, &b, wv, weights.batch, weights.grid, h, w)?;
    Ok(tape.value(p).clone())
}

/// Value-level prompt injection.
pub fn inject_prompt(features: &Tensor4, p: &Tensor4, bank: &PromptBank) -> Result<Tensor4> {
    let mut tape = Tape::new();
    let b = bank.params.bind_const(&mut tape);
    let f = tape.constant(features.clone());
    let pv = tape.constant(p.clone());
    let out = bank.inject_on_tape(&mut tape, &b, f, pv)?;
    Ok(tape.value(out).clone())
}

/// Mean weight per prompt across every patch of every entry.
pub fn mean_prompt_weights(all: &[PromptWeights]) -> Result<Vec<f64>> {
    Ok(prompt_weight_stats(all)?.into_iter().map(|s| s.mean).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PromptWeightStat {
    pub index: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

pub fn prompt_weight_stats(all: &[PromptWeights]) -> Result<Vec<PromptWeightStat>> {
    let first = all
        .first()
        .ok_or_else(|| Error::arg("mean_prompt_weights", "no prompt weights"))?;
    let k = first.n_prompts();
    let mut sum = vec![0.0; k];
    let mut min = vec![f64::INFINITY; k];
    let mut max = vec![f64::NEG_INFINITY; k];
    let mut count = 0usize;
    for pw in all {
        if pw.n_prompts() != k {
            return Err(Error::shape("mean_prompt_weights", &[k], &[pw.n_prompts()]));
        }
        for i in 0..pw.n_patches() {
            for (j, &v) in pw.patch(i).iter().enumerate() {
                sum[j] += v;
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
            count += 1;
        }
    }
    Ok((0..k)
        .map(|j| PromptWeightStat {
            index: j,
            mean: sum[j] / count as f64,
            min: min[j],
            max: max[j],
        })
        .collect())
}

/// `prompt_index,mean_weight,min_weight,max_weight` CSV.
pub fn write_prompt_report<W: Write>(stats: &[PromptWeightStat], mut out: W) -> Result<()> {
    writeln!(out, "prompt_index,mean_weight,min_weight,max_weight")?;
    for s in stats {
        writeln!(out, "{},{},{},{}", s.index, s.mean, s.min, s.max)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(n: usize, dim: usize) -> PromptBank {
        PromptBank::new("p", n, dim, 0.2, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    fn zero_shrink(b: &mut PromptBank) {
        let k = b.shrink.kernel;
        let d = b.params.get(k).dims();
        *b.params.get_mut(k) = Tensor4::zeros(d);
    }

    fn identity_compose(b: &mut PromptBank) {
        let k = b.compose.kernel;
        let [o, i, kh, kw] = b.params.get(k).dims();
        *b.params.get_mut(k) = Tensor4::from_fn([o, i, kh, kw], |[oc, ic, y, x]| {
            if oc == ic && y == kh / 2 && x == kw / 2 {
                1.0
            } else {
                0.0
            }
        });
    }

    #[test]
    fn patch_size_clamps() {
        assert_eq!(patch_size(16), 4);
        assert_eq!(patch_size(4), 1);
        assert_eq!(patch_size(2), 1);
    }

    #[test]
    fn zero_shrink_gives_uniform_weights() {
        let mut b = bank(5, 3);
        zero_shrink(&mut b);
        let f = Tensor4::uniform([2, 3, 8, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let w = prompt_weights(&f, &b, 2).unwrap();
        assert_eq!(w.n_patches(), 2 * 16);
        for i in 0..w.n_patches() {
            for &v in w.patch(i) {
                assert!((v - 0.2).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_features_give_identical_patches() {
        let b = bank(4, 3);
        let f = Tensor4::full([1, 3, 8, 8], 0.7);
        let w = prompt_weights(&f, &b, 4).unwrap();
        for i in 1..w.n_patches() {
            assert_eq!(w.patch(i), w.patch(0));
        }
        assert!(w.max_sum_error() < 1e-12);
    }

    #[test]
    fn indivisible_patch_is_shape_error() {
        let b = bank(2, 3);
        let f = Tensor4::zeros([1, 3, 6, 6]);
        assert!(matches!(prompt_weights(&f, &b, 4), Err(Error::Shape { .. })));
    }

    #[test]
    fn one_hot_selects_prompt() {
        let mut b = bank(3, 2);
        identity_compose(&mut b);
        let mut w = Tensor4::zeros([4, 3, 1, 1]);
        for i in 0..4 {
            w.set(i, 1, 0, 0, 1.0);
        }
        let pw = PromptWeights {
            weights: w,
            batch: 1,
            grid: (2, 2),
        };
        let p = compose_prompt(&pw, &b, 4, 4).unwrap();
        for c in 0..2 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(p.at(0, c, y, x), b.prompt(1)[c]);
                }
            }
        }
    }

    #[test]
    fn half_half_is_average() {
        let mut b = bank(2, 2);
        identity_compose(&mut b);
        let pw = PromptWeights {
            weights: Tensor4::full([1, 2, 1, 1], 0.5),
            batch: 1,
            grid: (1, 1),
        };
        let p = compose_prompt(&pw, &b, 2, 2).unwrap();
        for c in 0..2 {
            let want = 0.5 * b.prompt(0)[c] + 0.5 * b.prompt(1)[c];
            assert!((p.at(0, c, 1, 1) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_prompt_zero_block_is_identity() {
        let mut b = bank(2, 3);
        for idx in [b.inject.conv1.kernel, b.inject.conv1.bias, b.inject.conv2.kernel, b.inject.conv2.bias] {
            let d = b.params.get(idx).dims();
            *b.params.get_mut(idx) = Tensor4::zeros(d);
        }
        let f = Tensor4::uniform([1, 3, 4, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let out = inject_prompt(&f, &Tensor4::zeros([1, 3, 4, 4]), &b).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn inject_shape_mismatch() {
        let b = bank(2, 3);
        let f = Tensor4::zeros([1, 3, 4, 4]);
        let p = Tensor4::zeros([1, 3, 2, 2]);
        assert!(matches!(inject_prompt(&f, &p, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn mean_weights_cases() {
        let uni = PromptWeights {
            weights: Tensor4::full([4, 4, 1, 1], 0.25),
            batch: 1,
            grid: (2, 2),
        };
        assert_eq!(mean_prompt_weights(&[uni]).unwrap(), vec![0.25; 4]);
        let hot = |k: usize| PromptWeights {
            weights: Tensor4::from_fn([1, 3, 1, 1], |[_, c, _, _]| if c == k { 1.0 } else { 0.0 }),
            batch: 1,
            grid: (1, 1),
        };
        assert_eq!(mean_prompt_weights(&[hot(0), hot(1)]).unwrap(), vec![0.5, 0.5, 0.0]);
        assert!(matches!(mean_prompt_weights(&[]), Err(Error::Argument { .. })));
    }
}
