//! Stage-1 VQ-GAN pretraining and stage-2 enhancer training.
//!
//! Stage 2 freezes the codebook and decoder from stage 1 and, per batch,
//! runs one LQM update, then one enhancer update with the refreshed (and
//! frozen) LQM, then one discriminator update.

use std::io::Write;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::kernels::gram_forward;
use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::codebook::{codebook_matching_loss, quantize_on_tape, Codebook, QuantizeResult};
use crate::config::TrainConfig;
use crate::data::{derive_seed, ImagePair};
use crate::error::{Error, Result};
use crate::light_quant::{consistency_on_tape, contrastive_on_tape, LqmState};
use crate::losses::{
    adversarial_on_tape, check_parts, feature_matching_on_tape, l1_on_tape, reconstruction_on_tape, total_on_tape,
    AdvSide, PerceptualExtractor,
};
use crate::metrics::{finite_mean, psnr, ssim, MetricRow};
use crate::networks::{Decoder, DecoderExtras, Discriminator, Encoder, FusionSet, LevelWeights};
use crate::optim::Adam;
use crate::params::{Bound, ParamSet};
use crate::prompt::{PromptBank, PromptWeights};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub l_adv: f64,
    pub l_fml: f64,
    pub l_rec: f64,
    pub l_lcl: f64,
    pub l_total: f64,
}

/// `step,l_adv,l_fml,l_rec,l_lcl,l_total` CSV.
pub fn write_loss_log<W: Write>(rows: &[LossRow], mut out: W) -> Result<()> {
    writeln!(out, "step,l_adv,l_fml,l_rec,l_lcl,l_total")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{},{}", r.step, r.l_adv, r.l_fml, r.l_rec, r.l_lcl, r.l_total)?;
    }
    Ok(())
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

/// Random aligned crops of a training set.
#[derive(Debug, Clone)]
struct Sampler {
    rng: ChaCha8Rng,
    crop: usize,
}

impl Sampler {
    fn new(seed: u64, crop: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            crop,
        }
    }

    /// `(item, y0, x0)` for `batch` draws over `n` items of spatial size `(h, w)`.
    fn draw(&mut self, n: usize, batch: usize, h: usize, w: usize) -> Result<Vec<(usize, usize, usize)>> {
        if h < self.crop || w < self.crop {
            return Err(Error::shape("crop", &[h, w], &[self.crop]));
        }
        Ok((0..batch)
            .map(|_| {
                let i = self.rng.random_range(0..n);
                let y = self.rng.random_range(0..=h - self.crop);
                let x = self.rng.random_range(0..=w - self.crop);
                (i, y, x)
            })
            .collect())
    }
}

fn crop(t: &Tensor4, y0: usize, x0: usize, size: usize) -> Tensor4 {
    let [_, c, _, _] = t.dims();
    Tensor4::from_fn([1, c, size, size], |[_, ch, y, x]| t.at(0, ch, y0 + y, x0 + x))
}

fn batch_of(images: &[&Tensor4], draws: &[(usize, usize, usize)], size: usize) -> Result<Tensor4> {
    let items: Vec<Tensor4> = draws.iter().map(|&(i, y, x)| crop(images[i], y, x, size)).collect();
    Tensor4::stack(&items)
}

fn check_dataset(images: &[&Tensor4], cfg: &TrainConfig, op: &'static str) -> Result<(usize, usize)> {
    let first = images.first().ok_or_else(|| Error::arg(op, "empty training set"))?;
    let [_, _, h, w] = first.dims();
    for im in images {
        let d = im.dims();
        if d != [1, 3, h, w] {
            return Err(Error::shape(op, &[1, 3, h, w], &d));
        }
        if im.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::arg(op, "pixel values must lie in [0, 1]"));
        }
    }
    if h < cfg.crop_size || w < cfg.crop_size {
        return Err(Error::shape(op, &[h, w], &[cfg.crop_size]));
    }
    Ok((h, w))
}

/// Stage-1 encoder, codebook, decoder and discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Model {
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub codebook: Codebook,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
}

impl Stage1Model {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let net = config.network();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x51));
        Ok(Self {
            config,
            encoder: Encoder::new("encoder", net, &mut rng)?,
            codebook: Codebook::new(config.codebook_size, config.code_dim, &mut rng),
            decoder: Decoder::new("decoder", net, &mut rng)?,
            discriminator: Discriminator::new(&net, &mut rng)?,
        })
    }

    fn write_sets(&self, ck: &mut Checkpoint) {
        ck.insert_set(&self.encoder.params);
        ck.insert_set(&self.codebook.params);
        ck.insert_set(&self.decoder.params);
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert_scalar("config.stage", 1.0);
        self.config.write_to(&mut ck);
        self.write_sets(&mut ck);
        ck.insert_set(&self.discriminator.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::read_from(ck)?;
        let mut m = Self::new(config)?;
        ck.load_set(&mut m.encoder.params)?;
        ck.load_set(&mut m.codebook.params)?;
        ck.load_set(&mut m.decoder.params)?;
        ck.load_set(&mut m.discriminator.params)?;
        Ok(m)
    }

    /// Encoder output snapped to the codebook.
    pub fn quantize(&self, image: &Tensor4) -> Result<QuantizeResult> {
        let (z, _) = self.encoder.encode(image)?;
        self.codebook.lookup(&z)
    }

    pub fn reconstruct(&self, image: &Tensor4) -> Result<Tensor4> {
        self.decoder.decode(&self.quantize(image)?.quantized)
    }
}

fn require_stage(ck: &Checkpoint, stage: f64) -> Result<()> {
    let got = ck.scalar("config.stage")?;
    if got != stage {
        return Err(Error::Compatibility(format!(
            "expected a stage-{stage} checkpoint, found stage {got}"
        )));
    }
    Ok(())
}

/// Load a stage-1 checkpoint (a stage-2 checkpoint also carries the stage-1 parts).
pub fn load_stage1(ck: &Checkpoint) -> Result<Stage1Model> {
    Stage1Model::from_checkpoint(ck)
}

pub struct Stage1Trainer<'a> {
    pub model: Stage1Model,
    images: Vec<&'a Tensor4>,
    dims: (usize, usize),
    opt_enc: Adam,
    opt_cb: Adam,
    opt_dec: Adam,
    opt_disc: Adam,
    sampler: Sampler,
    step: usize,
    pub log: Vec<LossRow>,
}

impl<'a> Stage1Trainer<'a> {
    pub fn new(model: Stage1Model, images: Vec<&'a Tensor4>) -> Result<Self> {
        let cfg = model.config;
        let dims = check_dataset(&images, &cfg, "pretrain_vqgan")?;
        let adam = cfg.adam();
        Ok(Self {
            opt_enc: Adam::new(&model.encoder.params, adam),
            opt_cb: Adam::new(&model.codebook.params, adam),
            opt_dec: Adam::new(&model.decoder.params, adam),
            opt_disc: Adam::new(&model.discriminator.params, adam),
            sampler: Sampler::new(derive_seed(cfg.seed, 0x52), cfg.crop_size),
            model,
            images,
            dims,
            step: 0,
            log: Vec::new(),
        })
    }

    pub fn step(&mut self) -> Result<LossRow> {
        let cfg = self.model.config;
        let draws = self
            .sampler
            .draw(self.images.len(), cfg.batch_size, self.dims.0, self.dims.1)?;
        let batch = batch_of(&self.images, &draws, cfg.crop_size)?;
        let m = &mut self.model;

        let mut tape = Tape::new();
        let eb = m.encoder.params.bind(&mut tape);
        let cb = m.codebook.params.bind(&mut tape);
        let db = m.decoder.params.bind(&mut tape);
        let sb = m.discriminator.params.bind_const(&mut tape);
        let x = tape.constant(batch.clone());
        let (z, _) = m.encoder.encode_on_tape(&mut tape, &eb, x)?;
        let q = quantize_on_tape(&mut tape, z, &mut m.codebook, &cb)?;
        let cma = codebook_matching_loss(&mut tape, z, q.from_codes, cfg.weights.sigma)?;
        let (rec, _) = m
            .decoder
            .decode_on_tape(&mut tape, &db, q.straight_through, DecoderExtras::default())?;
        let mae = l1_on_tape(&mut tape, x, rec)?;
        let fake = m.discriminator.forward_on_tape(&mut tape, &sb, rec)?;
        let adv = adversarial_on_tape(&mut tape, None, fake, cfg.weights.gamma, AdvSide::Generator)?;
        let s = tape.add(mae, cma)?;
        let total = tape.add(s, adv)?;
        let row = LossRow {
            step: self.step,
            l_adv: scalar(&tape, adv),
            l_fml: scalar(&tape, cma),
            l_rec: scalar(&tape, mae),
            l_lcl: 0.0,
            l_total: scalar(&tape, total),
        };
        check_parts(
            &[("l_mae", row.l_rec), ("l_cma", row.l_fml), ("l_adv", row.l_adv), ("l_vq", row.l_total)],
            self.step,
        )?;
        let mut grads = tape.backward(total)?;
        let ge = m.encoder.params.collect_grads(&eb, &mut grads);
        let gc = m.codebook.params.collect_grads(&cb, &mut grads);
        let gd = m.decoder.params.collect_grads(&db, &mut grads);
        let rec_value = tape.value(rec).clone();
        drop(tape);
        self.opt_enc.step(&mut m.encoder.params, &ge)?;
        self.opt_cb.step(&mut m.codebook.params, &gc)?;
        self.opt_dec.step(&mut m.decoder.params, &gd)?;

        discriminator_step(
            &mut m.discriminator,
            &mut self.opt_disc,
            &batch,
            &rec_value,
            cfg.weights.gamma,
            self.step,
        )?;
        self.log.push(row);
        self.step += 1;
        Ok(row)
    }

    pub fn run(mut self, iters: usize) -> Result<(Stage1Model, Vec<LossRow>)> {
        for i in 0..iters {
            let row = self.step()?;
            if i % 100 == 0 || i + 1 == iters {
                info!(
                    "stage1 step {i}: mae {:.5} cma {:.5} adv {:.5}",
                    row.l_rec, row.l_fml, row.l_adv
                );
            }
        }
        Ok((self.model, self.log))
    }
}

/// One ascent step on `gamma * log σ(D(real)) + log(1 - σ(D(fake)))`.
fn discriminator_step(
    disc: &mut Discriminator,
    opt: &mut Adam,
    real: &Tensor4,
    fake: &Tensor4,
    gamma: f64,
    step: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let b = disc.params.bind(&mut tape);
    let r = tape.constant(real.clone());
    let f = tape.constant(fake.clone());
    let lr = disc.forward_on_tape(&mut tape, &b, r)?;
    let lf = disc.forward_on_tape(&mut tape, &b, f)?;
    let j = adversarial_on_tape(&mut tape, Some(lr), lf, gamma, AdvSide::Discriminator)?;
    let loss = tape.scale(j, -1.0);
    let v = scalar(&tape, loss);
    check_parts(&[("l_disc", v)], step)?;
    let mut grads = tape.backward(loss)?;
    let g = disc.params.collect_grads(&b, &mut grads);
    opt.step(&mut disc.params, &g)?;
    Ok(v)
}

/// Train the stage-1 model on clean images.
pub fn pretrain_vqgan(images: &[Tensor4], cfg: &TrainConfig) -> Result<(Stage1Model, Vec<LossRow>)> {
    let model = Stage1Model::new(*cfg)?;
    Stage1Trainer::new(model, images.iter().collect())?.run(cfg.stage1_iters)
}

/// Stage-2 model: frozen stage-1 prior plus the trainable enhancer modules.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Model {
    pub config: TrainConfig,
    /// Frozen stage-1 encoder, used for normal-light targets only.
    pub prior_encoder: Encoder,
    pub codebook: Codebook,
    pub decoder: Decoder,
    pub enhancer: Encoder,
    pub fusion: Option<FusionSet>,
    pub prompts: Option<Vec<PromptBank>>,
    pub lqm: Option<LqmState>,
    pub discriminator: Discriminator,
}

/// Tape handles for one stage-2 forward pass.
struct Bound2 {
    dec: Bound,
    enh: Bound,
    fusion: Option<Bound>,
    prompts: Vec<Bound>,
}

struct Forward2 {
    z: Var,
    skips: Vec<Var>,
    codes: QuantizeResult,
    image: Var,
    weights: Vec<LevelWeights>,
}

/// Output of a single enhancement pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceOutput {
    pub image: Tensor4,
    pub codes: QuantizeResult,
    /// One entry per decoder level carrying a prompt bank, coarsest first.
    pub prompt_weights: Vec<PromptWeights>,
}

impl Stage2Model {
    /// Build from a stage-1 model; `cfg` must agree on the network, code size and codebook size.
    pub fn from_stage1(stage1: &Stage1Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let s = &stage1.config;
        if s.network() != cfg.network() || s.codebook_size != cfg.codebook_size {
            return Err(Error::Compatibility(format!(
                "stage-1 model has code_dim {} / codebook {} / base {} / n_down {}, config asks for {} / {} / {} / {}",
                s.code_dim,
                s.codebook_size,
                s.base_channels,
                s.n_down,
                cfg.code_dim,
                cfg.codebook_size,
                cfg.base_channels,
                cfg.n_down
            )));
        }
        let net = cfg.network();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x53));
        let mut prior_encoder = stage1.encoder.clone();
        prior_encoder.params.frozen = true;
        let mut codebook = stage1.codebook.clone();
        codebook.params.frozen = true;
        codebook.reset_usage();
        let mut decoder = stage1.decoder.clone();
        decoder.params.frozen = true;
        let mut enhancer = stage1.encoder.clone();
        enhancer.params.name = "enhancer".into();
        enhancer.params.frozen = false;
        let fusion = cfg.use_fusion.then(|| FusionSet::new(&net, &mut rng));
        let prompts = if cfg.use_lapm {
            Some(
                (0..net.n_down)
                    .map(|k| {
                        PromptBank::new(
                            &format!("prompt{k}"),
                            cfg.n_prompts,
                            net.stage_channels(k),
                            net.negative_slope,
                            &mut rng,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let channels: Vec<usize> = (0..net.n_down).map(|k| net.stage_channels(k)).collect();
        let lqm = if cfg.use_lqm {
            Some(LqmState::new(&channels, cfg.light_dim, net.negative_slope, &mut rng)?)
        } else {
            None
        };
        let mut discriminator = stage1.discriminator.clone();
        discriminator.params.frozen = false;
        Ok(Self {
            config: *cfg,
            prior_encoder,
            codebook,
            decoder,
            enhancer,
            fusion,
            prompts,
            lqm,
            discriminator,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert_scalar("config.stage", 2.0);
        self.config.write_to(&mut ck);
        for set in self.param_sets() {
            ck.insert_set(set);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        require_stage(ck, 2.0)?;
        let stage1 = Stage1Model::from_checkpoint(ck)?;
        let mut m = Self::from_stage1(&stage1, &stage1.config)?;
        ck.load_set(&mut m.enhancer.params)?;
        if let Some(f) = &mut m.fusion {
            ck.load_set(&mut f.params)?;
        }
        if let Some(banks) = &mut m.prompts {
            for b in banks {
                ck.load_set(&mut b.params)?;
            }
        }
        if let Some(l) = &mut m.lqm {
            ck.load_set(&mut l.params)?;
        }
        Ok(m)
    }

    /// Every parameter set, frozen ones first.
    pub fn param_sets(&self) -> Vec<&ParamSet> {
        let mut v = vec![
            &self.prior_encoder.params,
            &self.codebook.params,
            &self.decoder.params,
            &self.enhancer.params,
        ];
        if let Some(f) = &self.fusion {
            v.push(&f.params);
        }
        if let Some(banks) = &self.prompts {
            v.extend(banks.iter().map(|b| &b.params));
        }
        if let Some(l) = &self.lqm {
            v.push(&l.params);
        }
        v.push(&self.discriminator.params);
        v
    }

    /// Enhancer-side trainable sets: encoder, fusion and prompt banks.
    pub fn enhancer_sets(&self) -> Vec<&ParamSet> {
        let mut v = vec![&self.enhancer.params];
        if let Some(f) = &self.fusion {
            v.push(&f.params);
        }
        if let Some(banks) = &self.prompts {
            v.extend(banks.iter().map(|b| &b.params));
        }
        v
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound2 {
        let pick = |set: &ParamSet, tape: &mut Tape| {
            if trainable {
                set.bind(tape)
            } else {
                set.bind_const(tape)
            }
        };
        Bound2 {
            dec: self.decoder.params.bind(tape),
            enh: pick(&self.enhancer.params, tape),
            fusion: self.fusion.as_ref().map(|f| pick(&f.params, tape)),
            prompts: self
                .prompts
                .iter()
                .flatten()
                .map(|b| pick(&b.params, tape))
                .collect(),
        }
    }

    fn forward(&self, tape: &mut Tape, b: &Bound2, image: Var) -> Result<Forward2> {
        let (z, skips) = self.enhancer.encode_on_tape(tape, &b.enh, image)?;
        let codes = self.codebook.lookup(tape.value(z))?;
        let zq = tape.straight_through(z, codes.quantized.clone())?;
        let extras = DecoderExtras {
            skips: &skips,
            fusion: self.fusion.as_ref().zip(b.fusion.as_ref()),
            prompts: self.prompts.as_deref().map(|p| (p, b.prompts.as_slice())),
        };
        let (out, weights) = self.decoder.decode_on_tape(tape, &b.dec, zq, extras)?;
        Ok(Forward2 {
            z,
            skips,
            codes,
            image: out,
            weights,
        })
    }

    /// Single forward pass; the LQM is not evaluated.
    pub fn enhance(&self, image: &Tensor4) -> Result<EnhanceOutput> {
        self.config.network().check_image(image.dims(), "enhance")?;
        let mut tape = Tape::new();
        let b = self.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let f = self.forward(&mut tape, &b, x)?;
        Ok(EnhanceOutput {
            image: tape.value(f.image).clone(),
            codes: f.codes,
            prompt_weights: f
                .weights
                .iter()
                .map(|w| PromptWeights {
                    weights: tape.value(w.weights).clone(),
                    batch: w.batch,
                    grid: w.grid,
                })
                .collect(),
        })
    }

    /// Codes of the enhancer encoder for `image`.
    pub fn enhancer_codes(&self, image: &Tensor4) -> Result<QuantizeResult> {
        let (z, _) = self.enhancer.encode(image)?;
        self.codebook.lookup(&z)
    }
}

/// Which update of a stage-2 iteration has just been applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Lqm,
    Enhancer,
    Discriminator,
}

/// Per-level normal-light targets computed through the frozen stage-1 path.
struct Targets {
    zq: Tensor4,
    grams: Vec<Tensor4>,
}

pub struct Stage2Trainer<'a> {
    pub model: Stage2Model,
    pairs: Vec<&'a ImagePair>,
    dims: (usize, usize),
    px: PerceptualExtractor,
    opt_enh: Adam,
    opt_fusion: Option<Adam>,
    opt_prompts: Vec<Adam>,
    opt_lqm: Option<Adam>,
    opt_disc: Adam,
    sampler: Sampler,
    step: usize,
    pub log: Vec<LossRow>,
    /// Largest `|Σω - 1|` seen over every prompt weight vector so far.
    pub max_prompt_sum_error: f64,
    /// LQM contrastive loss per step (0 when the LQM is disabled).
    pub lqm_log: Vec<f64>,
}

impl<'a> Stage2Trainer<'a> {
    pub fn new(model: Stage2Model, pairs: Vec<&'a ImagePair>) -> Result<Self> {
        let cfg = model.config;
        let lows: Vec<&Tensor4> = pairs.iter().map(|p| &p.low).collect();
        let normals: Vec<&Tensor4> = pairs.iter().map(|p| &p.normal).collect();
        let dims = check_dataset(&lows, &cfg, "train_enhancer")?;
        if check_dataset(&normals, &cfg, "train_enhancer")? != dims {
            return Err(Error::arg("train_enhancer", "low and normal images differ in size"));
        }
        let adam = cfg.adam();
        Ok(Self {
            px: PerceptualExtractor::new(derive_seed(cfg.seed, 0x50), 3),
            opt_enh: Adam::new(&model.enhancer.params, adam),
            opt_fusion: model.fusion.as_ref().map(|f| Adam::new(&f.params, adam)),
            opt_prompts: model
                .prompts
                .iter()
                .flatten()
                .map(|b| Adam::new(&b.params, adam))
                .collect(),
            opt_lqm: model.lqm.as_ref().map(|l| Adam::new(&l.params, adam)),
            opt_disc: Adam::new(&model.discriminator.params, adam),
            sampler: Sampler::new(derive_seed(cfg.seed, 0x54), cfg.crop_size),
            model,
            pairs,
            dims,
            step: 0,
            log: Vec::new(),
            max_prompt_sum_error: 0.0,
            lqm_log: Vec::new(),
        })
    }

    fn targets(&self, normal: &Tensor4) -> Result<Targets> {
        let (z, skips) = self.model.prior_encoder.encode(normal)?;
        Ok(Targets {
            zq: self.model.codebook.lookup(&z)?.quantized,
            grams: skips.iter().map(gram_forward).collect(),
        })
    }

    pub fn step(&mut self) -> Result<LossRow> {
        self.step_observed(&mut |_, _| {})
    }

    /// One iteration; `observe` runs after each of the three updates.
    pub fn step_observed(&mut self, observe: &mut dyn FnMut(Phase, &Stage2Model)) -> Result<LossRow> {
        let cfg = self.model.config;
        let step = self.step;
        let draws = self
            .sampler
            .draw(self.pairs.len(), cfg.batch_size, self.dims.0, self.dims.1)?;
        let lows: Vec<&Tensor4> = self.pairs.iter().map(|p| &p.low).collect();
        let normals: Vec<&Tensor4> = self.pairs.iter().map(|p| &p.normal).collect();
        let low = batch_of(&lows, &draws, cfg.crop_size)?;
        let normal = batch_of(&normals, &draws, cfg.crop_size)?;
        let labels_low: Vec<i64> = draws.iter().map(|&(i, _, _)| self.pairs[i].light_label_low).collect();
        let labels_normal: Vec<i64> = draws
            .iter()
            .map(|&(i, _, _)| self.pairs[i].light_label_normal)
            .collect();
        let targets = self.targets(&normal)?;

        let mut tape = Tape::new();
        let b = self.model.bind(&mut tape, true);
        let x = tape.constant(low);
        let fwd = self.model.forward(&mut tape, &b, x)?;
        for w in &fwd.weights {
            let pw = PromptWeights {
                weights: tape.value(w.weights).clone(),
                batch: w.batch,
                grid: w.grid,
            };
            self.max_prompt_sum_error = self.max_prompt_sum_error.max(pw.max_sum_error());
        }

        // LQM update on detached Gram matrices.
        let mut l_lqm = 0.0;
        if let (Some(lqm), Some(opt)) = (self.model.lqm.as_mut(), self.opt_lqm.as_mut()) {
            let mut lt = Tape::new();
            let lb = lqm.params.bind(&mut lt);
            let labels: Vec<i64> = labels_low.iter().chain(&labels_normal).copied().collect();
            let mut total: Option<Var> = None;
            for (l, &s) in fwd.skips.iter().enumerate() {
                let g_ll = gram_forward(tape.value(s));
                let both = Tensor4::stack(&[g_ll, targets.grams[l].clone()])?;
                let g = lt.constant(both);
                let f = lqm.factors_on_tape(&mut lt, &lb, l, g)?;
                let loss = contrastive_on_tape(&mut lt, f, &labels, cfg.margin)?;
                total = Some(match total {
                    Some(t) => lt.add(t, loss)?,
                    None => loss,
                });
            }
            let total = total.ok_or_else(|| Error::arg("lqm", "no encoder levels"))?;
            l_lqm = scalar(&lt, total);
            check_parts(&[("l_lqm", l_lqm)], step)?;
            let mut grads = lt.backward(total)?;
            let g = lqm.params.collect_grads(&lb, &mut grads);
            opt.step(&mut lqm.params, &g)?;
            observe(Phase::Lqm, &self.model);
        }
        self.lqm_log.push(l_lqm);

        // Enhancer update with the LQM held fixed.
        let zq_h = tape.constant(targets.zq.clone());
        let fml = feature_matching_on_tape(&mut tape, fwd.z, zq_h, cfg.weights.sigma)?;
        let pxb = self.px.params.bind_const(&mut tape);
        let rec = reconstruction_on_tape(&mut tape, &self.px, &pxb, fwd.image, &normal)?;
        let sb = self.model.discriminator.params.bind_const(&mut tape);
        let fake = self.model.discriminator.forward_on_tape(&mut tape, &sb, fwd.image)?;
        let adv = adversarial_on_tape(&mut tape, None, fake, cfg.weights.gamma, AdvSide::Generator)?;
        let lcl = match &self.model.lqm {
            Some(lqm) => {
                let lb = lqm.params.bind_const(&mut tape);
                let mut acc: Option<Var> = None;
                for (l, &s) in fwd.skips.iter().enumerate() {
                    let [_, _, h, w] = tape.dims(s);
                    let g = tape.gram(s);
                    let f_ll = lqm.factors_on_tape(&mut tape, &lb, l, g)?;
                    let g_nl = tape.constant(targets.grams[l].clone());
                    let f_nl = lqm.factors_on_tape(&mut tape, &lb, l, g_nl)?;
                    let f_nl = tape.stop_gradient(f_nl);
                    let term = consistency_on_tape(&mut tape, f_ll, f_nl, h * w)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, term)?,
                        None => term,
                    });
                }
                acc.ok_or_else(|| Error::arg("lqm", "no encoder levels"))?
            }
            None => tape.constant(Tensor4::scalar(0.0)),
        };
        let total = total_on_tape(&mut tape, adv, fml, rec, lcl, cfg.weights.lambda_lcl)?;
        let row = LossRow {
            step,
            l_adv: scalar(&tape, adv),
            l_fml: scalar(&tape, fml),
            l_rec: scalar(&tape, rec),
            l_lcl: scalar(&tape, lcl),
            l_total: scalar(&tape, total),
        };
        check_parts(
            &[
                ("l_adv", row.l_adv),
                ("l_fml", row.l_fml),
                ("l_rec", row.l_rec),
                ("l_lcl", row.l_lcl),
                ("l_total", row.l_total),
            ],
            step,
        )?;
        let mut grads = tape.backward(total)?;
        let ge = self.model.enhancer.params.collect_grads(&b.enh, &mut grads);
        let gf = match (&self.model.fusion, &b.fusion) {
            (Some(f), Some(fb)) => Some(f.params.collect_grads(fb, &mut grads)),
            _ => None,
        };
        let gp: Vec<Vec<Tensor4>> = self
            .model
            .prompts
            .iter()
            .flatten()
            .zip(&b.prompts)
            .map(|(bank, pb)| bank.params.collect_grads(pb, &mut grads))
            .collect();
        let fake_value = tape.value(fwd.image).clone();
        drop(tape);
        self.opt_enh.step(&mut self.model.enhancer.params, &ge)?;
        if let (Some(f), Some(opt), Some(g)) = (self.model.fusion.as_mut(), self.opt_fusion.as_mut(), gf) {
            opt.step(&mut f.params, &g)?;
        }
        if let Some(banks) = self.model.prompts.as_mut() {
            for ((bank, opt), g) in banks.iter_mut().zip(&mut self.opt_prompts).zip(&gp) {
                opt.step(&mut bank.params, g)?;
            }
        }
        observe(Phase::Enhancer, &self.model);

        discriminator_step(
            &mut self.model.discriminator,
            &mut self.opt_disc,
            &normal,
            &fake_value,
            cfg.weights.gamma,
            step,
        )?;
        observe(Phase::Discriminator, &self.model);

        debug!("stage2 step {step}: lqm {l_lqm:.5} total {:.5}", row.l_total);
        self.log.push(row);
        self.step += 1;
        Ok(row)
    }

    pub fn run(mut self, iters: usize) -> Result<Stage2Run> {
        for i in 0..iters {
            let row = self.step()?;
            if i % 100 == 0 || i + 1 == iters {
                info!(
                    "stage2 step {i}: fml {:.5} rec {:.5} adv {:.5} lcl {:.3e}",
                    row.l_fml, row.l_rec, row.l_adv, row.l_lcl
                );
            }
        }
        Ok(Stage2Run {
            model: self.model,
            log: self.log,
            lqm_log: self.lqm_log,
            max_prompt_sum_error: self.max_prompt_sum_error,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Stage2Run {
    pub model: Stage2Model,
    pub log: Vec<LossRow>,
    pub lqm_log: Vec<f64>,
    pub max_prompt_sum_error: f64,
}

/// Train the enhancer against a stage-1 model.
pub fn train_enhancer(pairs: &[ImagePair], stage1: &Stage1Model, cfg: &TrainConfig) -> Result<Stage2Run> {
    let model = Stage2Model::from_stage1(stage1, cfg)?;
    Stage2Trainer::new(model, pairs.iter().collect())?.run(cfg.stage2_iters)
}

/// Train-set / held-out split; the last `holdout` pairs are held out.
pub fn split_pairs(pairs: &[ImagePair], holdout: usize) -> Result<(&[ImagePair], &[ImagePair])> {
    if holdout >= pairs.len() {
        return Err(Error::arg("split", format!("holdout {holdout} leaves no training pairs")));
    }
    Ok(pairs.split_at(pairs.len() - holdout))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub rows: Vec<MetricRow>,
    pub psnr_enhanced: f64,
    pub ssim_enhanced: f64,
    pub psnr_low: f64,
    pub ssim_low: f64,
}

/// Held-out metrics of enhanced and raw low-light images against the normal-light references.
pub fn evaluate(model: &Stage2Model, pairs: &[ImagePair]) -> Result<EvalSummary> {
    if pairs.is_empty() {
        return Err(Error::arg("evaluate", "no pairs"));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    let mut low_p = Vec::new();
    let mut low_s = Vec::new();
    for p in pairs {
        let out = model.enhance(&p.low)?;
        rows.push(MetricRow {
            image_id: format!("scene_{:04}", p.scene_id),
            psnr: psnr(&out.image, &p.normal, 1.0)?,
            ssim: ssim(&out.image, &p.normal)?,
        });
        low_p.push(psnr(&p.low, &p.normal, 1.0)?);
        low_s.push(ssim(&p.low, &p.normal)?);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(EvalSummary {
        psnr_enhanced: finite_mean(rows.iter().map(|r| r.psnr)).unwrap_or(f64::INFINITY),
        ssim_enhanced: rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64,
        psnr_low: finite_mean(low_p.iter().copied()).unwrap_or(f64::INFINITY),
        ssim_low: mean(&low_s),
        rows,
    })
}
