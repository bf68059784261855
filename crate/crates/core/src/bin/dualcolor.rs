use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dualcolor::ablation::{run_ablation, Ablation};
use dualcolor::colorspace::{lab_to_rgb, RgbImage};
use dualcolor::config::TrainConfig;
use dualcolor::data::{list_images, load_rgb, save_rgb_png, Dataset};
use dualcolor::metrics::{
    colorfulness_score, delta_cf, embed_statistics, frechet_distance, psnr_images, PsnrPeak, RandomEmbedder, PSNR_CAP,
};
use dualcolor::train::{load_generator, Trainer};
use dualcolor::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_FATAL: u8 = 3;

/// Dual-decoder automatic image colorization.
///
/// Exit codes: 0 success, 1 usage error, 2 partial failure, 3 fatal error.
#[derive(Parser)]
#[command(name = "dualcolor", version)]
struct Cli {
    /// Log verbosity: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus a step log.
    Train(TrainArgs),
    /// Colorize one image or every image under a directory.
    Colorize(ColorizeArgs),
    /// Compare generated images with ground truth, matched by file name.
    Metrics(MetricsArgs),
    /// Write one activation heatmap per color query, plus the colorized image.
    VisualizeQueries(VisualizeArgs),
    /// Train every variant of an ablation sweep and report colorfulness.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for checkpoints and `train.log`.
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint; its stored config is used.
    #[arg(long, conflicts_with_all = ["config", "overrides"])]
    resume: Option<PathBuf>,
    /// Iteration to stop at, overriding `train.iters`.
    #[arg(long)]
    until: Option<u64>,
}

#[derive(Args)]
struct ColorizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a directory searched recursively.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// Also write float32 `H x W x 3` RGB arrays as `.npy`.
    #[arg(long)]
    npy: bool,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    generated: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    /// PSNR convention: 255 rounds to 8-bit values, 1 uses floats in [0, 1].
    #[arg(long, default_value = "255")]
    peak: String,
    /// Embedding width for the Fréchet distance; 0 disables it.
    #[arg(long, default_value_t = 0)]
    embedder_dim: usize,
    #[arg(long, default_value_t = 0)]
    embedder_seed: u64,
    /// Also write the report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// color_decoder_on_off, colorfulness_on_off, scales, decoder_order or query_count.
    #[arg(long)]
    name: String,
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of dataset images scored after training.
    #[arg(long, default_value_t = 32)]
    eval_count: usize,
    /// Write the full report, including loss traces, as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Fatal(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Fatal(e)
    }
}

type Outcome = std::result::Result<bool, Failure>;

fn require(path: &Path, what: &str) -> std::result::Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("{what} {} does not exist", path.display())))
    }
}

fn create_dir(path: &Path) -> std::result::Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| {
        Failure::Fatal(Error::Io {
            path: path.into(),
            source: e,
        })
    })
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| {
        Failure::Fatal(Error::Io {
            path: path.into(),
            source: e,
        })
    }
}

fn load_config(args: &ConfigArgs) -> std::result::Result<TrainConfig, Failure> {
    let mut cfg = match &args.config {
        Some(p) => {
            require(p, "config")?;
            TrainConfig::load(p).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => TrainConfig::default(),
    };
    for o in &args.overrides {
        cfg.apply_override(o).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Outcome {
    let mut trainer = match &args.resume {
        Some(p) => {
            require(p, "checkpoint")?;
            Trainer::load_checkpoint(p)?
        }
        None => Trainer::new(&load_config(&args.config)?)?,
    };
    create_dir(&args.out)?;
    let cfg = trainer.config().clone();
    fs::write(args.out.join("config.txt"), cfg.to_kv_text()).map_err(io(&args.out))?;
    let dataset = Dataset::build(&cfg.data)?;
    let until = args.until.unwrap_or(cfg.iters);
    let log_path = args.out.join("train.log");
    let mut log_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io(&log_path))?;
    log::info!(
        "training {} images from iteration {} to {until}",
        dataset.len(),
        trainer.iteration()
    );
    let last = args.out.join("last.safetensors");
    let result = trainer.run(&dataset, until, |t, s| {
        writeln!(
            log_file,
            "{}, {:e}, {:.6}, {:.6}, {:.6}, {:.6}, {:.6}",
            s.iter, s.lr, s.pixel, s.perceptual, s.adversarial, s.colorfulness, s.total
        )
        .map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
        if s.iter % cfg.log_every.max(1) == 0 {
            log::info!(
                "iter {} lr {:e} total {:.4} disc {:.4}",
                s.iter,
                s.lr,
                s.total,
                s.discriminator
            );
        }
        let done = s.iter + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            t.save_checkpoint(&args.out.join(format!("checkpoint_{done:08}.safetensors")))?;
        }
        Ok(())
    });
    if let Err(e) = result {
        if matches!(e, Error::NonFiniteLoss { .. }) {
            trainer.save_checkpoint(&last)?;
            log::error!("kept the last good state in {}", last.display());
        }
        return Err(e.into());
    }
    trainer.save_checkpoint(&last)?;
    log::info!("wrote {}", last.display());
    Ok(true)
}

fn write_npy(img: &RgbImage, path: &Path) -> dualcolor::Result<()> {
    let arr = ndarray::Array3::from_shape_vec((img.height(), img.width(), 3), img.pixels().to_vec())
        .map_err(|e| Error::Input(e.to_string()))?;
    ndarray_npy::write_npy(path, &arr).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

fn cmd_colorize(args: ColorizeArgs) -> Outcome {
    require(&args.checkpoint, "checkpoint")?;
    require(&args.input, "input")?;
    let inputs = if args.input.is_dir() {
        list_images(&args.input, None)?
    } else {
        vec![args.input.clone()]
    };
    if inputs.is_empty() {
        return Err(Failure::Usage(format!("no images under {}", args.input.display())));
    }
    let generator = load_generator(&args.checkpoint)?;
    create_dir(&args.output)?;
    let mut ok = true;
    for path in &inputs {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        let result = load_rgb(path).and_then(|img| {
            let rgb = lab_to_rgb(&generator.colorize(&img)?);
            save_rgb_png(&rgb, &args.output.join(format!("{stem}.png")))?;
            if args.npy {
                write_npy(&rgb, &args.output.join(format!("{stem}.npy")))?;
            }
            Ok(())
        });
        match result {
            Ok(()) => log::info!("colorized {}", path.display()),
            Err(e) => {
                log::error!("skipping {}: {e}", path.display());
                ok = false;
            }
        }
    }
    Ok(ok)
}

fn relative_names(dir: &Path) -> dualcolor::Result<BTreeMap<String, PathBuf>> {
    Ok(list_images(dir, None)?
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap_or(&p).to_string_lossy().to_string(), p))
        .collect())
}

fn cmd_metrics(args: MetricsArgs) -> Outcome {
    require(&args.generated, "generated directory")?;
    require(&args.ground_truth, "ground-truth directory")?;
    let peak = PsnrPeak::parse(&args.peak).map_err(|e| Failure::Usage(e.to_string()))?;
    let generated = relative_names(&args.generated)?;
    let truth = relative_names(&args.ground_truth)?;
    let mut ok = true;
    for name in generated.keys().filter(|k| !truth.contains_key(*k)) {
        log::warn!("excluded {name}: no ground truth");
        ok = false;
    }
    for name in truth.keys().filter(|k| !generated.contains_key(*k)) {
        log::warn!("excluded {name}: no generated image");
        ok = false;
    }
    let (mut gen_imgs, mut gt_imgs, mut gen_cf, mut gt_cf, mut psnrs) = (vec![], vec![], vec![], vec![], vec![]);
    for (name, gen_path) in &generated {
        let Some(gt_path) = truth.get(name) else { continue };
        let pair = load_rgb(gen_path).and_then(|g| {
            let t = load_rgb(gt_path)?;
            let p = psnr_images(&g, &t, peak)?;
            Ok((colorfulness_score(&g)?, colorfulness_score(&t)?, p, g, t))
        });
        match pair {
            Ok((cg, ct, p, g, t)) => {
                gen_cf.push(cg);
                gt_cf.push(ct);
                psnrs.push(p);
                gen_imgs.push(g);
                gt_imgs.push(t);
            }
            Err(e) => {
                log::warn!("excluded {name}: {e}");
                ok = false;
            }
        }
    }
    if psnrs.is_empty() {
        return Err(Failure::Fatal(Error::Input("no image pairs to compare".into())));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut report = serde_json::Map::new();
    report.insert("pairs".into(), psnrs.len().into());
    report.insert("cf_generated".into(), mean(&gen_cf).into());
    report.insert("cf_ground_truth".into(), mean(&gt_cf).into());
    report.insert("delta_cf".into(), delta_cf(&gen_cf, &gt_cf)?.into());
    report.insert("psnr".into(), mean(&psnrs).into());
    report.insert("psnr_peak".into(), peak.value().into());
    report.insert("psnr_cap".into(), PSNR_CAP.into());
    if args.embedder_dim > 0 {
        let embedder = RandomEmbedder::new(args.embedder_dim, args.embedder_seed);
        let fd = frechet_distance(
            &embed_statistics(&gen_imgs, &embedder)?,
            &embed_statistics(&gt_imgs, &embedder)?,
        )?;
        report.insert("frechet".into(), fd.into());
    }
    for (k, v) in &report {
        println!("{k}={v}");
    }
    if let Some(path) = &args.report {
        let text = serde_json::to_string_pretty(&report).expect("plain json values");
        fs::write(path, text).map_err(io(path))?;
    }
    Ok(ok)
}

/// Maps `[0, 1]` to a black-red-yellow-white ramp.
fn heat(v: f32) -> [f32; 3] {
    let t = v.clamp(0.0, 1.0) * 3.0;
    [t.min(1.0), (t - 1.0).clamp(0.0, 1.0), (t - 2.0).clamp(0.0, 1.0)]
}

fn cmd_visualize(args: VisualizeArgs) -> Outcome {
    require(&args.checkpoint, "checkpoint")?;
    require(&args.image, "image")?;
    let generator = load_generator(&args.checkpoint)?;
    let img = load_rgb(&args.image)?;
    let (lab, maps) = generator.colorize_with_query_maps(&img)?;
    create_dir(&args.output)?;
    save_rgb_png(&lab_to_rgb(&lab), &args.output.join("colorized.png"))?;
    let (k, h, w) = maps.dims3().map_err(Error::from)?;
    let values = maps
        .flatten_all()
        .and_then(|m| m.to_vec1::<f32>())
        .map_err(Error::from)?;
    for (q, plane) in values.chunks(h * w).enumerate() {
        let px: Vec<f32> = plane.iter().flat_map(|&v| heat(v)).collect();
        save_rgb_png(
            &RgbImage::new(h, w, px)?,
            &args.output.join(format!("query_{q:03}.png")),
        )?;
    }
    log::info!("wrote {k} query maps to {}", args.output.display());
    Ok(true)
}

fn cmd_ablate(args: AblateArgs) -> Outcome {
    let ablation: Ablation = args.name.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    let cfg = load_config(&args.config)?;
    let report = run_ablation(ablation, &cfg, args.eval_count)?;
    let mut ok = true;
    for v in &report.variants {
        println!(
            "variant={} iterations={} output_cf={:.4} ground_truth_cf={:.4} delta_cf={:.4} final_total={:.6} finite={}",
            v.label, v.iterations, v.output_cf, v.ground_truth_cf, v.delta_cf, v.final_total, v.finite
        );
        ok &= v.finite;
    }
    if let Some(path) = &args.report {
        let text = serde_json::to_string_pretty(&report).expect("report serialises");
        fs::write(path, text).map_err(io(path))?;
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Colorize(a) => cmd_colorize(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::VisualizeQueries(a) => cmd_visualize(a),
        Command::Ablate(a) => cmd_ablate(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_PARTIAL),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Fatal(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
