//! `lumiq` command line. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, LevelFilter};

use crate::checkpoint::Checkpoint;
use crate::codebook::{activation_histogram, write_histogram_csv};
use crate::config::TrainConfig;
use crate::data::{load_dataset, read_image, synth_dataset, write_dataset, write_image, ImagePair};
use crate::error::Error;
use crate::experiments::{
    code_activation_analysis, prompt_report, run_ablation, run_sweeps, write_ablation_csv, write_code_analysis_csv,
    write_level_prompt_report, write_sweep_csv,
};
use crate::gradsuite::gradient_suite;
use crate::metrics::{psnr, ssim, write_metrics_csv, MetricRow};
use crate::prompt::write_prompt_report;
use crate::train::{
    evaluate, load_stage1, pretrain_vqgan, split_pairs, write_loss_log, Stage1Model, Stage2Model, Stage2Trainer,
};

pub const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser, Debug)]
#[command(name = "lumiq", version, about = "Toy low-light enhancement with quantized light factors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct Overrides {
    /// Iteration count of the stage being run.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Prompts per bank.
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    codebook_size: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write synthetic low/normal PPM pairs and a manifest.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Stage 1: train the VQ autoencoder on the normal-light training images.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: Overrides,
        #[arg(long)]
        images: PathBuf,
    },
    /// Stage 2: train the enhancer against a stage-1 checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: Overrides,
        #[arg(long)]
        images: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Enhance a PPM file or every low-light image of a dataset directory.
    Enhance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        images: PathBuf,
        /// Stage-2 checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Code activation histograms of a checkpoint over a dataset.
    AnalyzeCodes {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Finite-difference check of every differentiable op and loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Random instances per case.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
    /// Ablation grid, λ and prompt-count sweeps, code analysis and prompt report.
    Report {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        over: Overrides,
        #[arg(long)]
        images: PathBuf,
        /// Stage-1 checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        /// Stage-2 iterations per sweep run (default: a tenth of the stage-2 budget).
        #[arg(long)]
        sweep_iters: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn init_logging() -> std::result::Result<(), String> {
    let level = match std::env::var("LUMIQ_LOG_LEVEL").as_deref() {
        Err(_) | Ok("info") => LevelFilter::Info,
        Ok("quiet") => LevelFilter::Off,
        Ok("debug") => LevelFilter::Debug,
        Ok(other) => return Err(format!("LUMIQ_LOG_LEVEL must be quiet, info or debug, got `{other}`")),
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();
    log::set_max_level(level);
    Ok(())
}

/// Parse `argv` (program name first) and run; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(msg) = init_logging() {
        eprintln!("error: {msg}");
        return 1;
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// Defaults, then `base` (a checkpoint's config), then the config file, then flags.
fn resolve(common: &Common, over: &Overrides, base: Option<TrainConfig>, stage: u8) -> CliResult<TrainConfig> {
    let mut cfg = base.unwrap_or_default();
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("config {}: {e}", path.display()))))?;
        cfg.apply_text(&text)
            .map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(n) = over.iters {
        match stage {
            1 => cfg.stage1_iters = n,
            _ => cfg.stage2_iters = n,
        }
    }
    if let Some(l) = over.lambda {
        cfg.weights.lambda_lcl = l;
    }
    if let Some(p) = over.prompts {
        cfg.n_prompts = p;
    }
    if let Some(n) = over.codebook_size {
        cfg.codebook_size = n;
    }
    if let Some(m) = over.margin {
        cfg.margin = m;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn print_config(cfg: &TrainConfig) {
    println!("seed: {}", cfg.seed);
    print!("{}", cfg.to_text());
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn load_pairs(dir: &Path) -> CliResult<Vec<ImagePair>> {
    if !dir.join("manifest.csv").is_file() {
        let msg = format!("load_dataset: {} has no manifest.csv", dir.display());
        return Err(Error::Io(std::io::Error::new(std::io::ErrorKind::NotFound, msg)).into());
    }
    Ok(load_dataset(dir)?)
}

fn read_ckpt(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn stage_of(ck: &Checkpoint) -> CliResult<u8> {
    match ck.scalar("config.stage")? {
        s if s == 1.0 => Ok(1),
        s if s == 2.0 => Ok(2),
        s => Err(Error::Compatibility(format!("unknown checkpoint stage {s}")).into()),
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::SynthData { common, n, size } => {
            let cfg = resolve(&common, &Overrides::default(), None, 1)?;
            if n == 0 || size == 0 || size % (1 << cfg.n_down) != 0 {
                return Err(Failure::Usage(format!(
                    "--n must be positive and --size a positive multiple of {}",
                    1 << cfg.n_down
                )));
            }
            print_config(&cfg);
            println!("n: {n}\nsize: {size}");
            let pairs = synth_dataset(cfg.seed, n, size);
            let manifest = write_dataset(&common.out, &pairs)?;
            info!("wrote {} pairs and {}", pairs.len(), manifest.display());
        }
        Command::Pretrain { common, over, images } => {
            let cfg = resolve(&common, &over, None, 1)?;
            print_config(&cfg);
            let pairs = load_pairs(&images)?;
            let (train, _) = split_pairs(&pairs, cfg.holdout)?;
            let normals: Vec<_> = train.iter().map(|p| p.normal.clone()).collect();
            let (model, log) = pretrain_vqgan(&normals, &cfg)?;
            fs::create_dir_all(&common.out)?;
            model.to_checkpoint().save(&common.out.join("stage1.ckpt"))?;
            let mut w = create(&common.out.join("stage1_loss.csv"))?;
            write_loss_log(&log, &mut w)?;
            w.flush()?;
        }
        Command::Train {
            common,
            over,
            images,
            ckpt,
        } => {
            let ck = read_ckpt(&ckpt)?;
            let stage1 = load_stage1(&ck)?;
            let cfg = resolve(&common, &over, Some(stage1.config), 2)?;
            print_config(&cfg);
            let pairs = load_pairs(&images)?;
            let (train, held) = split_pairs(&pairs, cfg.holdout)?;
            let model = Stage2Model::from_stage1(&stage1, &cfg)?;
            let run = Stage2Trainer::new(model, train.iter().collect())?.run(cfg.stage2_iters)?;
            fs::create_dir_all(&common.out)?;
            run.model.to_checkpoint().save(&common.out.join("stage2.ckpt"))?;
            let mut w = create(&common.out.join("stage2_loss.csv"))?;
            write_loss_log(&run.log, &mut w)?;
            w.flush()?;
            if !held.is_empty() {
                let ev = evaluate(&run.model, held)?;
                let mut w = create(&common.out.join("metrics.csv"))?;
                write_metrics_csv(&ev.rows, &mut w)?;
                w.flush()?;
                println!(
                    "held-out psnr {:.3} (low-light {:.3}), ssim {:.4} (low-light {:.4})",
                    ev.psnr_enhanced, ev.psnr_low, ev.ssim_enhanced, ev.ssim_low
                );
            }
        }
        Command::Enhance { common, images, ckpt } => {
            let ck = read_ckpt(&ckpt)?;
            let model = Stage2Model::from_checkpoint(&ck)?;
            print_config(&model.config);
            fs::create_dir_all(&common.out)?;
            if images.is_file() {
                let img = read_image(&images)?;
                let out = model.enhance(&img)?;
                let stem = images.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                write_image(&common.out.join(format!("{stem}_enhanced.ppm")), &out.image)?;
            } else {
                let pairs = load_pairs(&images)?;
                let mut rows = Vec::with_capacity(pairs.len());
                for p in &pairs {
                    let out = model.enhance(&p.low)?;
                    let id = format!("scene_{:04}", p.scene_id);
                    write_image(&common.out.join(format!("{id}_enhanced.ppm")), &out.image)?;
                    rows.push(MetricRow {
                        psnr: psnr(&out.image, &p.normal, 1.0)?,
                        ssim: ssim(&out.image, &p.normal)?,
                        image_id: id,
                    });
                }
                let mut w = create(&common.out.join("metrics.csv"))?;
                write_metrics_csv(&rows, &mut w)?;
                w.flush()?;
            }
        }
        Command::AnalyzeCodes { common, images, ckpt } => {
            let ck = read_ckpt(&ckpt)?;
            let pairs = load_pairs(&images)?;
            fs::create_dir_all(&common.out)?;
            if stage_of(&ck)? == 2 {
                let model = Stage2Model::from_checkpoint(&ck)?;
                print_config(&model.config);
                let a = code_activation_analysis(&model, &pairs)?;
                let mut w = create(&common.out.join("code_histogram.csv"))?;
                write_code_analysis_csv(&a, &mut w)?;
                w.flush()?;
                println!(
                    "distance to gt histogram: low-light via stage 1 {:.6}, via enhancer {:.6}",
                    a.distance_stage1, a.distance_enhancer
                );
            } else {
                let model = Stage1Model::from_checkpoint(&ck)?;
                print_config(&model.config);
                let codes = pairs
                    .iter()
                    .map(|p| model.quantize(&p.normal))
                    .collect::<crate::Result<Vec<_>>>()?;
                let counts = activation_histogram(&codes, model.codebook.n_codes())?;
                let mut w = create(&common.out.join("code_histogram.csv"))?;
                write_histogram_csv(&counts, &mut w)?;
                w.flush()?;
            }
        }
        Command::Gradcheck { common, instances } => {
            let cfg = resolve(&common, &Overrides::default(), None, 1)?;
            print_config(&cfg);
            if instances == 0 {
                return Err(Failure::Usage("--instances must be positive".into()));
            }
            let cases = gradient_suite(cfg.seed, instances)?;
            fs::create_dir_all(&common.out)?;
            let mut w = create(&common.out.join("gradcheck.csv"))?;
            writeln!(w, "case,max_rel_error,normwise_error,checked,skipped")?;
            let mut worst = 0.0f64;
            for c in &cases {
                writeln!(
                    w,
                    "{},{:e},{:e},{},{}",
                    c.name, c.max_rel_error, c.normwise_error, c.checked, c.skipped
                )?;
                println!("{:<34} {:.3e} ({} skipped)", c.name, c.max_rel_error, c.skipped);
                worst = if c.max_rel_error.is_nan() { f64::NAN } else { worst.max(c.max_rel_error) };
            }
            w.flush()?;
            println!("max relative error: {worst:.3e}");
            if !(worst < GRADCHECK_TOL) {
                return Err(Error::Degenerate {
                    op: "gradcheck",
                    msg: format!("max relative error {worst:e} exceeds {GRADCHECK_TOL:e}"),
                }
                .into());
            }
        }
        Command::Report {
            common,
            over,
            images,
            ckpt,
            sweep_iters,
        } => {
            let ck = read_ckpt(&ckpt)?;
            let stage1 = load_stage1(&ck)?;
            let cfg = resolve(&common, &over, Some(stage1.config), 2)?;
            let sweep_iters = sweep_iters.unwrap_or((cfg.stage2_iters / 10).max(1));
            print_config(&cfg);
            println!("sweep_iters: {sweep_iters}");
            let pairs = load_pairs(&images)?;
            let (train, held) = split_pairs(&pairs, cfg.holdout)?;
            if held.is_empty() {
                return Err(Failure::Usage("report needs held-out pairs (holdout > 0)".into()));
            }
            fs::create_dir_all(&common.out)?;
            let ablation = run_ablation(train, held, &stage1, &cfg)?;
            let rows = ablation.rows;
            let mut w = create(&common.out.join("ablation.csv"))?;
            write_ablation_csv(&rows, &mut w)?;
            w.flush()?;
            let sweeps = run_sweeps(train, held, &stage1, &cfg, sweep_iters)?;
            let mut w = create(&common.out.join("sweep.csv"))?;
            write_sweep_csv(&sweeps, &mut w)?;
            w.flush()?;
            let full = ablation.full.model;
            let a = code_activation_analysis(&full, held)?;
            let mut w = create(&common.out.join("code_histogram.csv"))?;
            write_code_analysis_csv(&a, &mut w)?;
            w.flush()?;
            if full.prompts.is_some() {
                let report = prompt_report(&full, held)?;
                let mut w = create(&common.out.join("prompt_report.csv"))?;
                write_prompt_report(&report.pooled, &mut w)?;
                w.flush()?;
                let mut w = create(&common.out.join("prompt_report_levels.csv"))?;
                write_level_prompt_report(&report.levels, &mut w)?;
                w.flush()?;
            }
            for r in &rows {
                println!("{:<14} psnr {:.3} ssim {:.4}", r.variant, r.psnr, r.ssim);
            }
        }
    }
    Ok(())
}
