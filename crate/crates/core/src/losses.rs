//! Training objectives. All norms are reduced by mean.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, ParamSet};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub sigma: f64,
    pub gamma: f64,
    pub lambda_lcl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sigma: 0.25,
            gamma: 0.1,
            lambda_lcl: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma", self.sigma), ("gamma", self.gamma), ("lambda", self.lambda_lcl)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::arg("loss weights", format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Mean absolute difference.
pub fn l1_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d);
    Ok(tape.mean(d))
}

fn mse_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.square(d);
    Ok(tape.mean(d))
}

pub fn l1_loss(a: &Tensor4, b: &Tensor4) -> Result<f64> {
    a.same_dims(b, "l1_loss")?;
    let mut tape = Tape::new();
    let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let l = l1_on_tape(&mut tape, x, y)?;
    Ok(tape.value(l).data()[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdvSide {
    /// `gamma * -mean log σ(fake)`, to be minimised by the generator.
    Generator,
    /// `gamma * mean log σ(real) + mean log(1 - σ(fake))`, to be maximised.
    Discriminator,
}

/// Adversarial term; `real` is only read on the discriminator side.
pub fn adversarial_on_tape(tape: &mut Tape, real: Option<Var>, fake: Var, gamma: f64, side: AdvSide) -> Result<Var> {
    match side {
        AdvSide::Generator => {
            let ls = tape.log_sigmoid(fake);
            let m = tape.mean(ls);
            Ok(tape.scale(m, -gamma))
        }
        AdvSide::Discriminator => {
            let real = real.ok_or_else(|| Error::arg("adversarial_loss", "discriminator side needs real logits"))?;
            let lr = tape.log_sigmoid(real);
            let lr = tape.mean(lr);
            let lr = tape.scale(lr, gamma);
            let neg = tape.scale(fake, -1.0);
            let lf = tape.log_sigmoid(neg);
            let lf = tape.mean(lf);
            tape.add(lr, lf)
        }
    }
}

pub fn adversarial_loss(real: &Tensor4, fake: &Tensor4, gamma: f64, side: AdvSide) -> Result<f64> {
    let mut tape = Tape::new();
    let r = tape.constant(real.clone());
    let f = tape.constant(fake.clone());
    let l = adversarial_on_tape(&mut tape, Some(r), f, gamma, side)?;
    Ok(tape.value(l).data()[0])
}

/// `sigma * mean((z - sg(zq))²) + mean((G(z) - G(sg(zq)))²)` with per-item Gram matrices.
pub fn feature_matching_on_tape(tape: &mut Tape, z: Var, zq: Var, sigma: f64) -> Result<Var> {
    tape.value(z).same_dims(tape.value(zq), "feature_matching_loss")?;
    let target = tape.stop_gradient(zq);
    let feat = mse_on_tape(tape, z, target)?;
    let feat = tape.scale(feat, sigma);
    let gz = tape.gram(z);
    let gt = tape.gram(target);
    let gram = mse_on_tape(tape, gz, gt)?;
    tape.add(feat, gram)
}

pub fn feature_matching_loss(z: &Tensor4, zq: &Tensor4, sigma: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(z.clone());
    let b = tape.constant(zq.clone());
    let l = feature_matching_on_tape(&mut tape, a, b, sigma)?;
    Ok(tape.value(l).data()[0])
}

/// Fixed random conv pyramid used as a perceptual feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptualExtractor {
    pub params: ParamSet,
    convs: [Conv; 3],
    slope: f64,
}

impl PerceptualExtractor {
    pub fn new(seed: u64, image_channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new("perceptual");
        let convs = [
            Conv::new(&mut params, "stage0", image_channels, 8, 3, 1, &mut rng),
            Conv::new(&mut params, "stage1", 8, 16, 3, 2, &mut rng),
            Conv::new(&mut params, "stage2", 16, 16, 3, 2, &mut rng),
        ];
        params.frozen = true;
        Self {
            params,
            convs,
            slope: 0.2,
        }
    }

    pub fn features_on_tape(&self, tape: &mut Tape, b: &Bound, image: Var) -> Result<Vec<Var>> {
        let mut h = image;
        let mut out = Vec::with_capacity(3);
        for conv in &self.convs {
            h = conv.forward(tape, b, h)?;
            h = tape.leaky_relu(h, self.slope);
            out.push(h);
        }
        Ok(out)
    }

    pub fn features(&self, image: &Tensor4) -> Result<Vec<Tensor4>> {
        let mut tape = Tape::new();
        let b = self.params.bind_const(&mut tape);
        let x = tape.constant(image.clone());
        let f = self.features_on_tape(&mut tape, &b, x)?;
        Ok(f.iter().map(|&v| tape.value(v).clone()).collect())
    }
}

/// `l1(target, rec) + Σ_stages mean((φ(rec) - φ(target))²)`, the target side held constant.
pub fn reconstruction_on_tape(
    tape: &mut Tape,
    px: &PerceptualExtractor,
    px_bound: &Bound,
    rec: Var,
    target: &Tensor4,
) -> Result<Var> {
    tape.value(rec).same_dims(target, "reconstruction_loss")?;
    let t = tape.constant(target.clone());
    let mut total = l1_on_tape(tape, t, rec)?;
    let fr = px.features_on_tape(tape, px_bound, rec)?;
    let ft = px.features(target)?;
    for (r, tv) in fr.into_iter().zip(ft) {
        let tv = tape.constant(tv);
        let m = mse_on_tape(tape, r, tv)?;
        total = tape.add(total, m)?;
    }
    Ok(total)
}

pub fn reconstruction_loss(rec: &Tensor4, target: &Tensor4, px: &PerceptualExtractor) -> Result<f64> {
    let mut tape = Tape::new();
    let b = px.params.bind_const(&mut tape);
    let r = tape.constant(rec.clone());
    let l = reconstruction_on_tape(&mut tape, px, &b, r, target)?;
    Ok(tape.value(l).data()[0])
}

/// Stage-2 loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub adv: f64,
    pub fml: f64,
    pub rec: f64,
    pub lcl: f64,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_nan() || v.is_infinite() {
        return Err(Error::Divergence {
            component: name.to_string(),
            step: 0,
        });
    }
    Ok(v)
}

/// `adv + fml + rec + lambda * lcl`.
pub fn total_loss(parts: &LossParts, lambda: f64) -> Result<f64> {
    let adv = finite("l_adv", parts.adv)?;
    let fml = finite("l_fml", parts.fml)?;
    let rec = finite("l_rec", parts.rec)?;
    let lcl = finite("l_lcl", parts.lcl)?;
    Ok(adv + fml + rec + lambda * lcl)
}

/// Stage-1 `mae + cma + adv`.
pub fn vq_total_loss(mae: f64, cma: f64, adv: f64) -> Result<f64> {
    Ok(finite("l_mae", mae)? + finite("l_cma", cma)? + finite("l_adv", adv)?)
}

/// Tape form of [`total_loss`]; components must already be finite.
pub fn total_on_tape(tape: &mut Tape, adv: Var, fml: Var, rec: Var, lcl: Var, lambda: f64) -> Result<Var> {
    let s = tape.add(adv, fml)?;
    let s = tape.add(s, rec)?;
    let l = tape.scale(lcl, lambda);
    tape.add(s, l)
}

/// Fails with a divergence error naming the first non-finite component.
pub fn check_parts(parts: &[(&str, f64)], step: usize) -> Result<()> {
    for &(name, v) in parts {
        finite(name, v).map_err(|_| Error::Divergence {
            component: name.to_string(),
            step,
        })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_cases() {
        let a = Tensor4::full([1, 3, 2, 2], 1.0);
        let b = Tensor4::zeros([1, 3, 2, 2]);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_loss(&a, &b).unwrap(), 1.0);
        assert!(matches!(l1_loss(&a, &Tensor4::zeros([1, 3, 2, 1])), Err(Error::Shape { .. })));
    }

    #[test]
    fn adversarial_zero_logits() {
        let z = Tensor4::zeros([1, 1, 2, 2]);
        let j = adversarial_loss(&z, &z, 0.1, AdvSide::Discriminator).unwrap();
        assert!((j - 1.1 * 0.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn adversarial_perfect_discriminator() {
        let real = Tensor4::full([1, 1, 2, 2], 1e3);
        let fake = Tensor4::full([1, 1, 2, 2], -1e3);
        let j = adversarial_loss(&real, &fake, 0.1, AdvSide::Discriminator).unwrap();
        assert!(j.abs() < 1e-300);
    }

    #[test]
    fn feature_matching_zero_on_equal() {
        let z = Tensor4::from_fn([1, 2, 2, 2], |[_, c, y, x]| (c + y + x) as f64);
        assert_eq!(feature_matching_loss(&z, &z, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn reconstruction_identical_and_shifted() {
        let px = PerceptualExtractor::new(1, 3);
        let a = Tensor4::from_fn([1, 3, 8, 8], |[_, c, y, x]| ((c + 2 * y + 3 * x) % 7) as f64 / 7.0);
        assert_eq!(reconstruction_loss(&a, &a, &px).unwrap(), 0.0);
        let shifted = Tensor4::from_fn([1, 3, 8, 8], |[_, c, y, x]| ((c + 2 * y + 3 * x + 3) % 7) as f64 / 7.0);
        assert!(reconstruction_loss(&shifted, &a, &px).unwrap() > 0.0);
    }

    #[test]
    fn total_arithmetic_and_divergence() {
        let zero = LossParts {
            adv: 0.0,
            fml: 0.0,
            rec: 0.0,
            lcl: 0.0,
        };
        assert_eq!(total_loss(&zero, 0.5).unwrap(), 0.0);
        let p = LossParts {
            adv: 1.0,
            fml: 1.0,
            rec: 1.0,
            lcl: 2.0,
        };
        assert_eq!(total_loss(&p, 0.5).unwrap(), 4.0);
        let bad = LossParts { fml: f64::NAN, ..p };
        match total_loss(&bad, 0.5) {
            Err(Error::Divergence { component, .. }) => assert_eq!(component, "l_fml"),
            other => panic!("{other:?}"),
        }
    }
}
