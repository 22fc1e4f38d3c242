//! Toy-scale experiment drivers: component ablation, λ and prompt-count
//! sweeps, code-activation analysis and the per-level prompt report.

use std::io::Write;

use log::info;

use crate::codebook::{activation_histogram, histogram_distance};
use crate::config::TrainConfig;
use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::prompt::{prompt_weight_stats, PromptWeightStat};
use crate::train::{evaluate, train_enhancer, Stage1Model, Stage2Model, Stage2Run};

/// `(variant, fusion, lqm, lapm)` in table order.
pub const ABLATION_GRID: [(&str, bool, bool, bool); 5] = [
    ("baseline", false, false, false),
    ("+FF", true, false, false),
    ("+FF+LQM", true, true, false),
    ("+FF+LAPM", true, false, true),
    ("+FF+LQM+LAPM", true, true, true),
];

pub const LAMBDA_GRID: [f64; 3] = [1.0, 0.5, 0.001];
pub const PROMPT_GRID: [usize; 4] = [3, 4, 5, 6];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub use_fusion: bool,
    pub use_lqm: bool,
    pub use_lapm: bool,
    pub psnr: f64,
    pub ssim: f64,
}

pub struct Ablation {
    pub rows: Vec<AblationRow>,
    /// Run of the last row (every component enabled).
    pub full: Stage2Run,
}

/// One stage-2 run per grid row on the same split and seed, all from `stage1`.
pub fn run_ablation(
    train: &[ImagePair],
    held: &[ImagePair],
    stage1: &Stage1Model,
    cfg: &TrainConfig,
) -> Result<Ablation> {
    let mut rows = Vec::with_capacity(ABLATION_GRID.len());
    let mut full = None;
    for &(variant, use_fusion, use_lqm, use_lapm) in &ABLATION_GRID {
        let c = TrainConfig {
            use_fusion,
            use_lqm,
            use_lapm,
            ..*cfg
        };
        let run = train_enhancer(train, stage1, &c)?;
        let ev = evaluate(&run.model, held)?;
        info!("ablation {variant}: psnr {:.3} ssim {:.4}", ev.psnr_enhanced, ev.ssim_enhanced);
        rows.push(AblationRow {
            variant,
            use_fusion,
            use_lqm,
            use_lapm,
            psnr: ev.psnr_enhanced,
            ssim: ev.ssim_enhanced,
        });
        full = Some(run);
    }
    Ok(Ablation {
        rows,
        full: full.expect("grid is non-empty"),
    })
}

pub fn write_ablation_csv<W: Write>(rows: &[AblationRow], mut out: W) -> Result<()> {
    writeln!(out, "variant,fusion,lqm,lapm,psnr,ssim")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.variant, r.use_fusion as u8, r.use_lqm as u8, r.use_lapm as u8, r.psnr, r.ssim
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param: &'static str,
    pub value: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub final_total: f64,
}

/// λ over [`LAMBDA_GRID`] then N_p over [`PROMPT_GRID`], each a stage-2
/// run of `iters` steps from `stage1`.
pub fn run_sweeps(
    train: &[ImagePair],
    held: &[ImagePair],
    stage1: &Stage1Model,
    cfg: &TrainConfig,
    iters: usize,
) -> Result<Vec<SweepRow>> {
    let mut configs: Vec<(&'static str, f64, TrainConfig)> = Vec::new();
    for &l in &LAMBDA_GRID {
        let mut c = *cfg;
        c.weights.lambda_lcl = l;
        configs.push(("lambda", l, c));
    }
    for &n in &PROMPT_GRID {
        let c = TrainConfig { n_prompts: n, ..*cfg };
        configs.push(("n_prompts", n as f64, c));
    }
    configs
        .into_iter()
        .map(|(param, value, mut c)| {
            c.stage2_iters = iters;
            let run = train_enhancer(train, stage1, &c)?;
            let ev = evaluate(&run.model, held)?;
            info!("sweep {param}={value}: psnr {:.3}", ev.psnr_enhanced);
            Ok(SweepRow {
                param,
                value,
                psnr: ev.psnr_enhanced,
                ssim: ev.ssim_enhanced,
                final_total: run.log.last().map_or(f64::NAN, |r| r.l_total),
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "param,value,psnr,ssim,final_total")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.param, r.value, r.psnr, r.ssim, r.final_total)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodeAnalysis {
    /// Normal-light images through the stage-1 encoder.
    pub gt_stage1: Vec<u64>,
    /// Low-light images through the stage-1 encoder.
    pub ll_stage1: Vec<u64>,
    /// Low-light images through the trained enhancer.
    pub ll_enhancer: Vec<u64>,
    pub distance_stage1: f64,
    pub distance_enhancer: f64,
}

/// Histograms over `pairs`; the stage-1 encoder is the model's frozen prior encoder.
pub fn code_activation_analysis(model: &Stage2Model, pairs: &[ImagePair]) -> Result<CodeAnalysis> {
    if pairs.is_empty() {
        return Err(Error::arg("code_activation_analysis", "no pairs"));
    }
    let n = model.codebook.n_codes();
    let prior = |x| -> Result<_> { model.codebook.lookup(&model.prior_encoder.encode(x)?.0) };
    let mut gt = Vec::with_capacity(pairs.len());
    let mut ll = Vec::with_capacity(pairs.len());
    let mut en = Vec::with_capacity(pairs.len());
    for p in pairs {
        gt.push(prior(&p.normal)?);
        ll.push(prior(&p.low)?);
        en.push(model.enhancer_codes(&p.low)?);
    }
    let gt_stage1 = activation_histogram(&gt, n)?;
    let ll_stage1 = activation_histogram(&ll, n)?;
    let ll_enhancer = activation_histogram(&en, n)?;
    Ok(CodeAnalysis {
        distance_stage1: histogram_distance(&ll_stage1, &gt_stage1)?,
        distance_enhancer: histogram_distance(&ll_enhancer, &gt_stage1)?,
        gt_stage1,
        ll_stage1,
        ll_enhancer,
    })
}

/// `index,gt_stage1,ll_stage1,ll_enhancer` CSV.
pub fn write_code_analysis_csv<W: Write>(a: &CodeAnalysis, mut out: W) -> Result<()> {
    writeln!(out, "index,gt_stage1,ll_stage1,ll_enhancer")?;
    for i in 0..a.gt_stage1.len() {
        writeln!(out, "{i},{},{},{}", a.gt_stage1[i], a.ll_stage1[i], a.ll_enhancer[i])?;
    }
    Ok(())
}

pub struct PromptReport {
    /// Over every patch of every level.
    pub pooled: Vec<PromptWeightStat>,
    /// One entry per decoder level, coarsest first.
    pub levels: Vec<Vec<PromptWeightStat>>,
}

/// Prompt-weight statistics over the low-light inputs of `pairs`.
pub fn prompt_report(model: &Stage2Model, pairs: &[ImagePair]) -> Result<PromptReport> {
    let mut per_level: Vec<Vec<_>> = Vec::new();
    for p in pairs {
        let out = model.enhance(&p.low)?;
        if per_level.is_empty() {
            per_level.resize(out.prompt_weights.len(), Vec::new());
        }
        for (l, w) in out.prompt_weights.into_iter().enumerate() {
            per_level[l].push(w);
        }
    }
    if per_level.is_empty() {
        return Err(Error::arg("prompt_report", "model has no prompt banks or no images"));
    }
    let all: Vec<_> = per_level.iter().flatten().cloned().collect();
    Ok(PromptReport {
        pooled: prompt_weight_stats(&all)?,
        levels: per_level.iter().map(|w| prompt_weight_stats(w)).collect::<Result<_>>()?,
    })
}

/// `level,prompt_index,mean_weight,min_weight,max_weight` CSV.
pub fn write_level_prompt_report<W: Write>(levels: &[Vec<PromptWeightStat>], mut out: W) -> Result<()> {
    writeln!(out, "level,prompt_index,mean_weight,min_weight,max_weight")?;
    for (l, stats) in levels.iter().enumerate() {
        for s in stats {
            writeln!(out, "{l},{},{},{},{}", s.index, s.mean, s.min, s.max)?;
        }
    }
    Ok(())
}
