//! Toy-scale encoder, decoder, patch discriminator and the affine skip fusion.
//!
//! Encoder stage `k` is a stride-2 3x3 conv, a leaky activation and a
//! residual block; its output is kept as skip `k`. A 1x1 conv maps the last
//! stage to the code dimension. The decoder mirrors it with nearest-neighbour
//! upsampling and ends in a logistic squashing to `[0, 1]`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Conv, ParamSet, ResBlock};
use crate::prompt::PromptBank;
use crate::tensor::{Dims, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub n_down: usize,
    pub code_dim: usize,
    pub image_channels: usize,
    pub negative_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            n_down: 3,
            code_dim: 32,
            image_channels: 3,
            negative_slope: 0.2,
        }
    }
}

impl NetworkConfig {
    /// Channels of encoder stage `k` (and of decoder level `k`).
    pub fn stage_channels(&self, k: usize) -> usize {
        self.base_channels << k.min(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_down == 0 || self.base_channels == 0 || self.code_dim == 0 || self.image_channels == 0 {
            return Err(Error::arg("network config", "channel counts and n_down must be positive"));
        }
        if !(self.negative_slope.is_finite() && self.negative_slope >= 0.0) {
            return Err(Error::arg("network config", "negative_slope must be finite and non-negative"));
        }
        Ok(())
    }

    /// Shape check for an input image batch.
    pub fn check_image(&self, dims: Dims, op: &'static str) -> Result<()> {
        let f = 1usize << self.n_down;
        let [_, c, h, w] = dims;
        if c != self.image_channels || h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::shape(op, &dims, &[self.image_channels, f, f]));
        }
        Ok(())
    }

    /// Skip dims for an image of `dims`.
    pub fn skip_dims(&self, dims: Dims) -> Vec<Dims> {
        let [b, _, h, w] = dims;
        (0..self.n_down)
            .map(|k| [b, self.stage_channels(k), h >> (k + 1), w >> (k + 1)])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub params: ParamSet,
    pub config: NetworkConfig,
    stages: Vec<(Conv, ResBlock)>,
    to_code: Conv,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(name: &str, config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new(name);
        let slope = config.negative_slope;
        let mut stages = Vec::with_capacity(config.n_down);
        let mut prev = config.image_channels;
        for k in 0..config.n_down {
            let ch = config.stage_channels(k);
            let down = Conv::new(&mut params, &format!("down{k}"), prev, ch, 3, 2, rng);
            let res = ResBlock::new(&mut params, &format!("res{k}"), ch, ch, slope, rng);
            stages.push((down, res));
            prev = ch;
        }
        let to_code = Conv::new(&mut params, "to_code", prev, config.code_dim, 1, 1, rng);
        Ok(Self {
            params,
            config,
            stages,
            to_code,
        })
    }

    /// Latent `Z` and the per-stage skip features, finest first.
    pub fn encode_on_tape(&self, tape: &mut Tape, b: &Bound, image: Var) -> Result<(Var, Vec<Var>)> {
        self.config.check_image(tape.dims(image), "encode")?;
        let slope = self.config.negative_slope;
        let mut h = image;
        let mut skips = Vec::with_capacity(self.stages.len());
        for (down, res) in &self.stages {
            h = down.forward(tape, b, h)?;
            h = tape.leaky_relu(h, slope);
            h = res.forward(tape, b, h)?;
            skips.push(h);
        }
        let z = self.to_code.forward(tape, b, h)?;
        Ok((z, skips))
    }

    pub fn encode(&self, image: &Tensor4) -> Result<(Tensor4, Vec<Tensor4>)> {
        let mut tape = Tape::new();
        let b = self.params.bind_const(&mut tape);
        let x = tape.constant(image.clone());
        let (z, skips) = self.encode_on_tape(&mut tape, &b, x)?;
        Ok((
            tape.value(z).clone(),
            skips.iter().map(|&s| tape.value(s).clone()).collect(),
        ))
    }
}

/// `alpha * F_d + beta` with `[alpha, beta]` from a 3x3 conv over `[F_d, F_e]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkipFusion {
    pub conv: Conv,
    pub channels: usize,
}

impl SkipFusion {
    /// Small random kernel with alpha bias 1 and beta bias 0, so the map starts near identity.
    pub fn new<R: Rng + ?Sized>(set: &mut ParamSet, name: &str, channels: usize, rng: &mut R) -> Self {
        let conv = Conv::new(set, name, 2 * channels, 2 * channels, 3, 1, rng);
        for v in set.get_mut(conv.kernel).data_mut() {
            *v *= 0.1;
        }
        set.get_mut(conv.bias).data_mut()[..channels].fill(1.0);
        Self { conv, channels }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Bound, fd: Var, fe: Var) -> Result<Var> {
        if tape.dims(fd) != tape.dims(fe) {
            return Err(Error::shape("skip_fusion", &tape.dims(fd), &tape.dims(fe)));
        }
        if tape.dims(fd)[1] != self.channels {
            return Err(Error::shape("skip_fusion", &tape.dims(fd), &[self.channels]));
        }
        let cat = tape.concat_channels(&[fd, fe])?;
        let ab = self.conv.forward(tape, b, cat)?;
        let alpha = tape.slice_channels(ab, 0, self.channels)?;
        let beta = tape.slice_channels(ab, self.channels, self.channels)?;
        let scaled = tape.mul(alpha, fd)?;
        tape.add(scaled, beta)
    }
}

/// One fusion block per decoder level.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionSet {
    pub params: ParamSet,
    pub levels: Vec<SkipFusion>,
}

impl FusionSet {
    pub fn new<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Self {
        let mut params = ParamSet::new("fusion");
        let levels = (0..config.n_down)
            .map(|k| SkipFusion::new(&mut params, &format!("level{k}"), config.stage_channels(k), rng))
            .collect();
        Self { params, levels }
    }
}

/// Value-level skip fusion.
pub fn skip_fusion(fd: &Tensor4, fe: &Tensor4, set: &ParamSet, fusion: &SkipFusion) -> Result<Tensor4> {
    let mut tape = Tape::new();
    let b = set.bind_const(&mut tape);
    let d = tape.constant(fd.clone());
    let e = tape.constant(fe.clone());
    let out = fusion.forward(&mut tape, &b, d, e)?;
    Ok(tape.value(out).clone())
}

/// Value-level residual block.
pub fn resnet_block(f: &Tensor4, set: &ParamSet, block: &ResBlock) -> Result<Tensor4> {
    let mut tape = Tape::new();
    let b = set.bind_const(&mut tape);
    let x = tape.constant(f.clone());
    let out = block.forward(&mut tape, &b, x)?;
    Ok(tape.value(out).clone())
}

/// Optional stage-2 modules threaded through the decoder.
#[derive(Clone, Copy, Default)]
pub struct DecoderExtras<'a> {
    /// Encoder skips, finest first.
    pub skips: &'a [Var],
    pub fusion: Option<(&'a FusionSet, &'a Bound)>,
    /// One prompt bank per level, finest first.
    pub prompts: Option<(&'a [PromptBank], &'a [Bound])>,
}

/// Prompt weights emitted at one decoder level.
#[derive(Debug, Clone, Copy)]
pub struct LevelWeights {
    pub level: usize,
    pub weights: Var,
    pub batch: usize,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub params: ParamSet,
    pub config: NetworkConfig,
    from_code: Conv,
    from_code_res: ResBlock,
    /// Indexed by level `k`: upsample then conv to the next finer width.
    ups: Vec<Conv>,
    res: Vec<Option<ResBlock>>,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(name: &str, config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new(name);
        let slope = config.negative_slope;
        let top = config.stage_channels(config.n_down - 1);
        let from_code = Conv::new(&mut params, "from_code", config.code_dim, top, 3, 1, rng);
        let from_code_res = ResBlock::new(&mut params, "from_code_res", top, top, slope, rng);
        let mut ups = Vec::with_capacity(config.n_down);
        let mut res = Vec::with_capacity(config.n_down);
        for k in 0..config.n_down {
            let out = if k == 0 {
                config.image_channels
            } else {
                config.stage_channels(k - 1)
            };
            ups.push(Conv::new(&mut params, &format!("up{k}"), config.stage_channels(k), out, 3, 1, rng));
            res.push((k > 0).then(|| ResBlock::new(&mut params, &format!("res{k}"), out, out, slope, rng)));
        }
        Ok(Self {
            params,
            config,
            from_code,
            from_code_res,
            ups,
            res,
        })
    }

    /// Image in `[0, 1]` plus prompt weights from every level that used a bank.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape,
        b: &Bound,
        zq: Var,
        extras: DecoderExtras<'_>,
    ) -> Result<(Var, Vec<LevelWeights>)> {
        let cfg = &self.config;
        let [batch, c, zh, zw] = tape.dims(zq);
        if c != cfg.code_dim {
            return Err(Error::shape("decode", &tape.dims(zq), &[cfg.code_dim]));
        }
        let uses_skips = extras.fusion.is_some() || extras.prompts.is_some();
        if uses_skips {
            let image = [batch, cfg.image_channels, zh << cfg.n_down, zw << cfg.n_down];
            let want = cfg.skip_dims(image);
            let got: Vec<Dims> = extras.skips.iter().map(|&s| tape.dims(s)).collect();
            if got != want {
                let flat = |v: &[Dims]| v.iter().flatten().copied().collect::<Vec<_>>();
                return Err(Error::shape("decode skips", &flat(&got), &flat(&want)));
            }
        }
        if let Some((fs, _)) = extras.fusion {
            if fs.levels.len() != cfg.n_down {
                return Err(Error::shape("decode fusion", &[fs.levels.len()], &[cfg.n_down]));
            }
        }
        if let Some((banks, bounds)) = extras.prompts {
            if banks.len() != cfg.n_down || bounds.len() != cfg.n_down {
                return Err(Error::shape("decode prompts", &[banks.len(), bounds.len()], &[cfg.n_down]));
            }
        }

        let slope = cfg.negative_slope;
        let mut h = self.from_code.forward(tape, b, zq)?;
        h = tape.leaky_relu(h, slope);
        h = self.from_code_res.forward(tape, b, h)?;
        let mut all_weights = Vec::new();
        for k in (0..cfg.n_down).rev() {
            if let Some((fs, fb)) = extras.fusion {
                h = fs.levels[k].forward(tape, fb, h, extras.skips[k])?;
            }
            if let Some((banks, bounds)) = extras.prompts {
                let (out, weights) = banks[k].apply_on_tape(tape, &bounds[k], extras.skips[k], h)?;
                let [_, _, sh, sw] = tape.dims(h);
                let p = crate::prompt::patch_size(sh.min(sw));
                all_weights.push(LevelWeights {
                    level: k,
                    weights,
                    batch,
                    grid: (sh / p, sw / p),
                });
                h = out;
            }
            h = tape.upsample_nearest(h, 2)?;
            h = self.ups[k].forward(tape, b, h)?;
            if let Some(res) = &self.res[k] {
                h = tape.leaky_relu(h, slope);
                h = res.forward(tape, b, h)?;
            }
        }
        Ok((tape.sigmoid(h), all_weights))
    }

    /// Plain decode without skips or prompts.
    pub fn decode(&self, zq: &Tensor4) -> Result<Tensor4> {
        let mut tape = Tape::new();
        let b = self.params.bind_const(&mut tape);
        let z = tape.constant(zq.clone());
        let (out, _) = self.decode_on_tape(&mut tape, &b, z, DecoderExtras::default())?;
        Ok(tape.value(out).clone())
    }
}

/// Three-layer strided patch discriminator producing raw logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub params: ParamSet,
    convs: [Conv; 3],
    slope: f64,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(config: &NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new("discriminator");
        let c = config.base_channels;
        let convs = [
            Conv::new(&mut params, "conv0", config.image_channels, c, 3, 2, rng),
            Conv::new(&mut params, "conv1", c, 2 * c, 3, 2, rng),
            Conv::new(&mut params, "conv2", 2 * c, 1, 3, 1, rng),
        ];
        Ok(Self {
            params,
            convs,
            slope: config.negative_slope,
        })
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, b: &Bound, image: Var) -> Result<Var> {
        let mut h = self.convs[0].forward(tape, b, image)?;
        h = tape.leaky_relu(h, self.slope);
        h = self.convs[1].forward(tape, b, h)?;
        h = tape.leaky_relu(h, self.slope);
        self.convs[2].forward(tape, b, h)
    }

    pub fn discriminate(&self, image: &Tensor4) -> Result<Tensor4> {
        let mut tape = Tape::new();
        let b = self.params.bind_const(&mut tape);
        let x = tape.constant(image.clone());
        let out = self.forward_on_tape(&mut tape, &b, x)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn encode_shapes() {
        let cfg = NetworkConfig::default();
        let enc = Encoder::new("encoder", cfg, &mut rng(1)).unwrap();
        let x = Tensor4::uniform([1, 3, 32, 32], 0.0, 1.0, &mut rng(2));
        let (z, skips) = enc.encode(&x).unwrap();
        assert_eq!(z.dims(), [1, 32, 4, 4]);
        assert_eq!(skips.len(), 3);
        assert_eq!(skips[0].dims(), [1, 8, 16, 16]);
        assert_eq!(skips[2].dims(), [1, 32, 4, 4]);
    }

    #[test]
    fn indivisible_input_is_shape_error() {
        let enc = Encoder::new("encoder", NetworkConfig::default(), &mut rng(1)).unwrap();
        let x = Tensor4::zeros([1, 3, 30, 32]);
        assert!(matches!(enc.encode(&x), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_latent() {
        let enc = Encoder::new("encoder", NetworkConfig::default(), &mut rng(1)).unwrap();
        let (z, _) = enc.encode(&Tensor4::zeros([1, 3, 16, 16])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn decode_restores_image_shape() {
        let cfg = NetworkConfig::default();
        let enc = Encoder::new("encoder", cfg, &mut rng(1)).unwrap();
        let dec = Decoder::new("decoder", cfg, &mut rng(2)).unwrap();
        let x = Tensor4::uniform([2, 3, 16, 24], 0.0, 1.0, &mut rng(3));
        let (z, _) = enc.encode(&x).unwrap();
        let y = dec.decode(&z).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn skip_mismatch_is_shape_error() {
        let cfg = NetworkConfig::default();
        let dec = Decoder::new("decoder", cfg, &mut rng(2)).unwrap();
        let fusion = FusionSet::new(&cfg, &mut rng(4));
        let mut tape = Tape::new();
        let b = dec.params.bind_const(&mut tape);
        let fb = fusion.params.bind_const(&mut tape);
        let z = tape.constant(Tensor4::zeros([1, 32, 4, 4]));
        let s = tape.constant(Tensor4::zeros([1, 8, 16, 16]));
        let extras = DecoderExtras {
            skips: &[s],
            fusion: Some((&fusion, &fb)),
            prompts: None,
        };
        assert!(matches!(
            dec.decode_on_tape(&mut tape, &b, z, extras),
            Err(Error::Shape { .. })
        ));
    }

    fn fusion_with(alpha: f64, beta: f64) -> (ParamSet, SkipFusion) {
        let mut set = ParamSet::new("f");
        let f = SkipFusion::new(&mut set, "l", 2, &mut rng(5));
        set.get_mut(f.conv.kernel).data_mut().fill(0.0);
        let bias = set.get_mut(f.conv.bias).data_mut();
        bias[..2].fill(alpha);
        bias[2..].fill(beta);
        (set, f)
    }

    #[test]
    fn identity_affine_returns_decoder_features() {
        let (set, f) = fusion_with(1.0, 0.0);
        let fd = Tensor4::normal([1, 2, 4, 4], 1.0, &mut rng(6));
        let fe = Tensor4::normal([1, 2, 4, 4], 1.0, &mut rng(7));
        assert_eq!(skip_fusion(&fd, &fe, &set, &f).unwrap(), fd);
    }

    #[test]
    fn zero_alpha_returns_beta() {
        let (set, f) = fusion_with(0.0, 0.3);
        let fd = Tensor4::normal([1, 2, 4, 4], 1.0, &mut rng(6));
        let fe = Tensor4::normal([1, 2, 4, 4], 1.0, &mut rng(7));
        let out = skip_fusion(&fd, &fe, &set, &f).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.3));
    }

    #[test]
    fn fusion_gradient_to_encoder_features() {
        let mut set = ParamSet::new("f");
        let f = SkipFusion::new(&mut set, "l", 2, &mut rng(5));
        let fd = Tensor4::normal([1, 2, 4, 4], 1.0, &mut rng(6));
        let fe = Tensor4::normal([1, 2, 4, 4], 1.0, &mut rng(7));
        let err = check_gradients(
            |tape, x| {
                let b = set.bind_const(tape);
                let d = tape.constant(fd.clone());
                let out = f.forward(tape, &b, d, x)?;
                let sq = tape.square(out);
                Ok(tape.sum(sq))
            },
            &fe,
            1e-5,
        )
        .unwrap()
        .max_rel_error;
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_block_is_identity() {
        let mut set = ParamSet::new("r");
        let block = ResBlock::new(&mut set, "b", 3, 3, 0.2, &mut rng(8));
        for i in 0..set.len() {
            set.get_mut(i).data_mut().fill(0.0);
        }
        let x = Tensor4::normal([1, 3, 5, 5], 1.0, &mut rng(9));
        assert_eq!(resnet_block(&x, &set, &block).unwrap(), x);
    }

    #[test]
    fn linear_block_is_exactly_linear() {
        let mut set = ParamSet::new("r");
        let block = ResBlock::new(&mut set, "b", 3, 3, 1.0, &mut rng(8));
        let x = Tensor4::from_fn([1, 3, 4, 4], |[_, c, y, x]| (c * 16 + y * 4 + x) as f64 / 8.0);
        let x2 = x.map(|v| 2.0 * v);
        let a = resnet_block(&x2, &set, &block).unwrap();
        let b = resnet_block(&x, &set, &block).unwrap();
        let worst = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - 2.0 * q).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn discriminator_shapes_and_zero_params() {
        let cfg = NetworkConfig::default();
        let mut d = Discriminator::new(&cfg, &mut rng(10)).unwrap();
        let x = Tensor4::uniform([1, 3, 32, 32], 0.0, 1.0, &mut rng(11));
        assert_eq!(d.discriminate(&x).unwrap().dims(), [1, 1, 8, 8]);
        for i in 0..d.params.len() {
            d.params.get_mut(i).data_mut().fill(0.0);
        }
        assert!(d.discriminate(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
