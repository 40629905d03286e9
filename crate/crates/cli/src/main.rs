//! `erasenet`: patch extraction, training, denoising, evaluation and the
//! gradient-check suite.

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use erasenet_core::autograd::GradCheck;
use erasenet_core::data::{
    crop_to, extract_patches, list_images, load_grayscale, load_samples, pad_to_multiple,
    resize_bilinear, save_image, scan_pairs, InputMode, Split, SplitSpec, PAGE_COLS, PAGE_ROWS,
    PATCH_SIZE,
};
use erasenet_core::metrics::{
    denoise_page, denoise_tiled, orientation_average, psnr, sharpen, MetricReport, Range,
};
use erasenet_core::train::{load_checkpoint, restore_model, to_samples, TrainConfig, Trainer};
use erasenet_core::verify::{gradient_suite, SUITE_HEADER};
use erasenet_core::{CheckpointError, EraseNet, Error, ImageBuffer, Variant};

use crate::config::{ConfigFile, SEED_ENV};

/// Failure with its process exit code: 1 input/data error, 2 numerical
/// halt, 3 checkpoint mismatch.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn input(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::NumericalHalt { .. } => 2,
            Error::Checkpoint(
                CheckpointError::VariantMismatch { .. }
                | CheckpointError::UnknownParameter(_)
                | CheckpointError::MissingParameter(_)
                | CheckpointError::ParameterShape { .. },
            ) => 3,
            _ => 1,
        };
        let msg = match &e {
            Error::NumericalHalt { last_good: Some(p), .. } => {
                format!("{e}; last good checkpoint: {}", p.display())
            }
            Error::NumericalHalt { last_good: None, .. } => format!("{e}; no checkpoint was written"),
            _ => e.to_string(),
        };
        Self { code, msg }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

#[derive(Parser, Debug)]
#[command(name = "erasenet", version, about = "EraseNet document image denoising")]
struct Cli {
    /// `key = value` file supplying defaults for the flags below.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cut every page into twelve 256x256 patches.
    ExtractPatches(ExtractArgs),
    /// Train a model on `<data>/noisy` and `<data>/clean`.
    Train(TrainArgs),
    /// Clean images with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long = "in", value_name = "DIR")]
    input: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// 3 or 4.
    #[arg(long)]
    variant: Option<Variant>,
    /// Multiplier on every filter count.
    #[arg(long)]
    width_scale: Option<f64>,
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// patch or page.
    #[arg(long)]
    input_mode: Option<TrainInput>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Output directory for checkpoints and the loss log.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DenoiseArgs {
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Image file or directory of images.
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// page or patch.
    #[arg(long)]
    mode: Option<DenoiseMode>,
    #[arg(long)]
    sharpen: bool,
    #[arg(long)]
    orient_avg: bool,
    /// Refuse checkpoints of any other variant.
    #[arg(long)]
    variant: Option<Variant>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_name = "DIR", required_unless_present = "from_mse")]
    pred: Option<PathBuf>,
    #[arg(long, value_name = "DIR", required_unless_present = "from_mse")]
    truth: Option<PathBuf>,
    /// unit or 8bit.
    #[arg(long)]
    range: Option<Range>,
    /// Report file.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Convert recorded MSE values to PSNR instead of scoring images.
    #[arg(long, value_delimiter = ',', value_name = "MSE,...", conflicts_with_all = ["pred", "truth"])]
    from_mse: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Corrupt every analytic gradient by 1% (harness self-test).
    #[arg(long, hide = true)]
    inject_fault: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum TrainInput {
    Patch,
    Page,
}

impl FromStr for TrainInput {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "patch" => Ok(Self::Patch),
            "page" => Ok(Self::Page),
            _ => Err(format!("expected `patch` or `page`, got `{s}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum DenoiseMode {
    Page,
    Patch,
}

impl FromStr for DenoiseMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "page" => Ok(Self::Page),
            "patch" => Ok(Self::Patch),
            _ => Err(format!("expected `page` or `patch`, got `{s}`")),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::input(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn extract(args: ExtractArgs) -> CliResult {
    info!("extract-patches: in={} out={}", args.input.display(), args.out.display());
    let images = list_images(&args.input)?;
    if images.is_empty() {
        warn!("{}: no images found", args.input.display());
        return Ok(());
    }
    create_dir(&args.out)?;
    let mut manifest = String::from("patch,source,row,col\n");
    let mut failures = Vec::new();
    for (base, path) in &images {
        let result = load_grayscale(path)
            .and_then(|img| extract_patches(&resize_bilinear(&img, PAGE_ROWS, PAGE_COLS)));
        let set = match result {
            Ok(s) => s,
            Err(e) => {
                error!("{e}");
                failures.push(path.clone());
                continue;
            }
        };
        for (i, (patch, (r, c))) in set.patches.iter().zip(&set.origins).enumerate() {
            let name = format!("{base}_p{i:02}.pgm");
            save_image(patch, args.out.join(&name))?;
            manifest.push_str(&format!("{name},{},{r},{c}\n", path.display()));
        }
    }
    let mpath = args.out.join("manifest.csv");
    fs::write(&mpath, manifest).map_err(|e| io_err(&mpath, e))?;
    info!("{} page(s) -> {} patch(es)", images.len() - failures.len(), 12 * (images.len() - failures.len()));
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::input(format!("{} file(s) failed", failures.len())))
    }
}

fn train(args: TrainArgs, file: &ConfigFile) -> CliResult {
    let defaults = TrainConfig::default();
    let data = file
        .opt::<PathBuf>("data", args.data)?
        .ok_or_else(|| Failure::input("--data is required"))?;
    let out = file
        .opt::<PathBuf>("out", args.out)?
        .ok_or_else(|| Failure::input("--out is required"))?;
    let env_seed = std::env::var(SEED_ENV).ok();
    let input_mode = match file.pick("input-mode", args.input_mode, TrainInput::Patch)? {
        TrainInput::Patch => InputMode::Patch,
        TrainInput::Page => InputMode::Page,
    };
    let config = TrainConfig {
        variant: file.pick("variant", args.variant, defaults.variant)?,
        width_scale: file.pick("width-scale", args.width_scale, defaults.width_scale)?,
        epochs: file.pick("epochs", args.epochs, defaults.epochs)?,
        batch_size: file.pick("batch-size", args.batch_size, defaults.batch_size)?,
        lr: file.pick("lr", args.lr, defaults.lr)?,
        seed: file.seed(args.seed, env_seed.as_deref())?,
        input_mode,
        checkpoint_every: file.pick("checkpoint-every", args.checkpoint_every, defaults.checkpoint_every)?,
        out_dir: Some(out),
    };
    let val_fraction = file.pick("val-fraction", args.val_fraction, SplitSpec::default().val_fraction)?;
    config.validate()?;
    info!(
        "train: variant={} width-scale={} epochs={} batch-size={} lr={:e} seed={} input-mode={:?} checkpoint-every={} val-fraction={} data={} out={}",
        config.variant,
        config.width_scale,
        config.epochs,
        config.batch_size,
        config.lr,
        config.seed,
        config.input_mode,
        config.checkpoint_every,
        val_fraction,
        data.display(),
        config.out_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
    );

    let split = SplitSpec { val_fraction, test_fraction: 0.0, seed: config.seed };
    let manifest = scan_pairs(data.join("noisy"), data.join("clean"), split)?;
    if manifest.is_empty() {
        return Err(Failure::input(format!("{}: no noisy/clean pairs", data.display())));
    }
    let train_set = to_samples(&load_samples(&manifest, Split::Train, config.input_mode)?);
    let val_set = to_samples(&load_samples(&manifest, Split::Val, config.input_mode)?);
    if train_set.is_empty() {
        return Err(Failure::input("the training split is empty"));
    }
    info!("{} training and {} validation sample(s)", train_set.len(), val_set.len());

    let mut trainer = match &args.resume {
        Some(p) => Trainer::resume(config, &load_checkpoint(p)?)?,
        None => Trainer::new(config)?,
    };
    trainer.fit(&train_set, &val_set)?;
    Ok(())
}

fn collect_inputs(input: &Path) -> CliResult<Vec<(String, PathBuf)>> {
    if input.is_dir() {
        Ok(list_images(input)?.into_iter().collect())
    } else if input.is_file() {
        let stem = input
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        Ok(vec![(stem, input.to_path_buf())])
    } else {
        Err(Failure::input(format!("{}: no such file or directory", input.display())))
    }
}

fn denoise_one(
    model: &EraseNet<f32>,
    img: &ImageBuffer,
    mode: DenoiseMode,
    sharpen_out: bool,
    orient: bool,
) -> Result<ImageBuffer, Error> {
    let run = |x: &ImageBuffer| -> Result<ImageBuffer, Error> {
        let y = match mode {
            DenoiseMode::Page => denoise_page(model, x)?,
            DenoiseMode::Patch => {
                let (padded, dims) = pad_to_multiple(x, PATCH_SIZE);
                crop_to(&denoise_tiled(model, &padded, PATCH_SIZE)?, dims)?
            }
        };
        Ok(if sharpen_out { sharpen(&y) } else { y })
    };
    if orient {
        orientation_average(img, run)
    } else {
        run(img)
    }
}

fn denoise(args: DenoiseArgs, file: &ConfigFile) -> CliResult {
    let mode = file.pick("mode", args.mode, DenoiseMode::Page)?;
    let sharpen_out = file.switch("sharpen", args.sharpen)?;
    let orient = file.switch("orient-avg", args.orient_avg)?;
    let out = file
        .opt::<PathBuf>("out", args.out)?
        .ok_or_else(|| Failure::input("--out is required"))?;
    info!(
        "denoise: ckpt={} in={} out={} mode={mode:?} sharpen={sharpen_out} orient-avg={orient}",
        args.ckpt.display(),
        args.input.display(),
        out.display()
    );
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = restore_model(&ckpt, args.variant)?;
    info!("loaded {} at width {}", ckpt.variant, model.width_scale());
    let inputs = collect_inputs(&args.input)?;
    if inputs.is_empty() {
        warn!("{}: no images found", args.input.display());
        return Ok(());
    }
    create_dir(&out)?;
    for (stem, path) in inputs {
        let img = load_grayscale(&path)?;
        let y = denoise_one(&model, &img, mode, sharpen_out, orient)?;
        let dest = out.join(format!("{stem}.png"));
        save_image(&y, &dest)?;
        info!("{} -> {}", path.display(), dest.display());
    }
    Ok(())
}

fn eval(args: EvalArgs, file: &ConfigFile) -> CliResult {
    let range = file.pick("range", args.range, Range::Unit)?;
    let out = file
        .opt::<PathBuf>("out", args.out)?
        .ok_or_else(|| Failure::input("--out is required"))?;
    if let Some(mses) = args.from_mse {
        let mut text = String::from("mse,psnr_db\n");
        for m in mses {
            let p = psnr(m, range.max_value())?;
            info!("mse {m:e} -> psnr {p} (MAX {})", range.max_value());
            text.push_str(&format!("{m:e},{p}\n"));
        }
        return emit(&out, &text);
    }
    let (pred, truth) = (args.pred.expect("required"), args.truth.expect("required"));
    info!("eval: pred={} truth={} range={range:?}", pred.display(), truth.display());
    let preds = list_images(&pred)?;
    let truths = list_images(&truth)?;
    let mut report = MetricReport::new(range);
    for (name, p) in &preds {
        match truths.get(name) {
            Some(t) => report.add(name.clone(), &load_grayscale(p)?, &load_grayscale(t)?)?,
            None => warn!("{}: no ground truth", p.display()),
        }
    }
    if report.is_empty() {
        return Err(Failure::input("no prediction/ground-truth pairs"));
    }
    info!(
        "{} pair(s): mean mse {:e}, psnr {}, ssim {:.6}",
        report.len(),
        report.mean_mse(),
        report.mean_psnr(),
        report.mean_ssim()
    );
    emit(&out, &report.to_string())
}

fn emit(out: &Path, text: &str) -> CliResult {
    fs::write(out, text).map_err(|e| io_err(out, e))?;
    info!("report written to {}", out.display());
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> CliResult {
    let check = GradCheck {
        analytic_scale: if args.inject_fault { 1.01 } else { 1.0 },
        ..GradCheck::default()
    };
    info!("gradcheck: step {:e}, tolerance {:e}", check.step, check.tolerance);
    let rows = gradient_suite(&check)?;
    println!("{SUITE_HEADER}");
    for r in &rows {
        println!("{r}");
    }
    let failed = rows.iter().filter(|r| !r.report.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::input(format!("{failed} of {} check(s) failed", rows.len())))
    }
}

fn run(cli: Cli) -> CliResult {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::ExtractPatches(a) => extract(a),
        Command::Train(a) => train(a, &file),
        Command::Denoise(a) => denoise(a, &file),
        Command::Eval(a) => eval(a, &file),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            error!("{f}");
            ExitCode::from(f.code)
        }
    }
}
