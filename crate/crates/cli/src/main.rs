mod lock;
mod overlay;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use selfir::config::{load_config, resolve_seed, LoadedConfig, RunConfig};
use selfir::dataset::{load_dataset, load_record, read_manifest, write_dataset, Sample};
use selfir::evalreport::{compare_runs, evaluate, to_srgb, EvalReport, NetworkRestorer, Restorer};
use selfir::imaging::{load_image, load_sirt_unclamped, save_png, ColorSpace, Image};
use selfir::model::Checkpoint;
use selfir::noise::NoiseModel;
use selfir::sharpmask::{box_smooth, sharp_mask};
use selfir::train::{final_checkpoint_path, run_ablation, train, AblationSuite, Mode, TrainOptions};

use lock::RunLock;

#[derive(Parser)]
#[command(
    name = "selfir",
    version,
    about = "Self-supervised joint deblurring and denoising from blurry/noisy pairs",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset of (clean, blurry, noisy) triplets.
    Synth(SynthArgs),
    /// Train a restoration network.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out pairs of a dataset.
    Eval(EvalArgs),
    /// Rank evaluation reports by PSNR.
    Compare(CompareArgs),
    /// Write a patch-grid overlay of the sharp-region mask for one pair.
    MaskDebug(MaskDebugArgs),
    /// Train and evaluate every row of an ablation suite.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Run config file (TOML, or JSON by extension); its [synth] section is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training pairs.
    #[arg(long)]
    scenes: Option<usize>,
    /// Held-out test pairs.
    #[arg(long)]
    test: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Square canvas size in pixels.
    #[arg(long)]
    canvas: Option<usize>,
    #[arg(long, value_parser = parse_noise)]
    noise: Option<NoiseModel>,
    /// Gaussian std range in 8-bit units.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    sigma_range: Option<Vec<f64>>,
    /// Poisson / shot-noise lambda range.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    lambda_range: Option<Vec<f64>>,
    /// Std of the noise added to the blurry image, 8-bit units.
    #[arg(long)]
    blur_noise: Option<f64>,
    #[arg(long, value_parser = parse_space)]
    space: Option<ColorSpace>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Accepted for compatibility; training is always deterministic.
    #[arg(long)]
    deterministic: bool,
    /// Desk-scale profile: 64 px crops, batch 8, small network, 3000 steps.
    #[arg(long)]
    toy: bool,
    /// Resume despite a config-hash mismatch, or overwrite a finished run.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    crop_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda_reg: Option<f64>,
    #[arg(long)]
    lambda_aux: Option<f64>,
    /// Disable random flips.
    #[arg(long)]
    no_flips: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate the final checkpoint into <out>/eval.json.
    #[arg(long)]
    eval: bool,
    /// Print progress every N steps (0 = quiet).
    #[arg(long, default_value_t = 100)]
    progress: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Defaults to the run directory name.
    #[arg(long)]
    run_id: Option<String>,
    /// Clamp outputs to [0, 1] before scoring.
    #[arg(long)]
    clamp: bool,
    #[arg(long)]
    ssim_tile: Option<usize>,
}

#[derive(Args)]
struct CompareArgs {
    /// Evaluation reports (JSON).
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    md: Option<PathBuf>,
}

#[derive(Args)]
struct MaskDebugArgs {
    /// Dataset manifest; pick the pair with --id.
    #[arg(long, requires = "id", conflicts_with_all = ["blurry", "noisy"])]
    data: Option<PathBuf>,
    #[arg(long)]
    id: Option<usize>,
    #[arg(long, requires = "noisy")]
    blurry: Option<PathBuf>,
    #[arg(long, requires = "blurry")]
    noisy: Option<PathBuf>,
    /// Color space of --blurry/--noisy.
    #[arg(long, value_parser = parse_space, default_value = "srgb")]
    space: ColorSpace,
    /// Restore the noisy image with this checkpoint instead of a 3x3 box filter.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    patch: usize,
    #[arg(long, default_value_t = 0.99)]
    eps_s: f64,
    #[arg(long, default_value_t = 1e-5)]
    eps_v: f64,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_suite)]
    suite: AblationSuite,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long)]
    toy: bool,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    progress: u64,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: selfir::Error| e.to_string())
}

fn parse_suite(s: &str) -> Result<AblationSuite, String> {
    s.parse().map_err(|e: selfir::Error| e.to_string())
}

fn parse_noise(s: &str) -> Result<NoiseModel, String> {
    match s.to_ascii_lowercase().as_str() {
        "gaussian" => Ok(NoiseModel::Gaussian),
        "poisson" => Ok(NoiseModel::Poisson),
        "sensor" => Ok(NoiseModel::Sensor),
        _ => Err(format!("unknown noise model {s:?} (gaussian|poisson|sensor)")),
    }
}

fn parse_space(s: &str) -> Result<ColorSpace, String> {
    match s.to_ascii_lowercase().as_str() {
        "srgb" => Ok(ColorSpace::Srgb),
        "linear" => Ok(ColorSpace::Linear),
        _ => Err(format!("unknown color space {s:?} (srgb|linear)")),
    }
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<selfir::Error> for Failure {
    fn from(e: selfir::Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn runtime(msg: String) -> Failure {
    Failure::Runtime(msg)
}

fn load_file(path: Option<&Path>) -> Result<LoadedConfig, Failure> {
    Ok(match path {
        Some(p) => load_config(p)?,
        None => LoadedConfig::default(),
    })
}

fn pair<T: Copy>(v: &Option<Vec<T>>) -> Option<[T; 2]> {
    v.as_ref().map(|v| [v[0], v[1]])
}

fn synth(args: SynthArgs) -> Outcome {
    let loaded = load_file(args.config.as_deref())?;
    let mut run = loaded.config;
    let s = &mut run.synth;
    if let Some(v) = args.scenes {
        s.n_scenes = v;
    }
    if let Some(v) = args.test {
        s.n_test = v;
    }
    if let Some(v) = args.frames {
        s.n_frames = v;
    }
    if let Some(v) = args.canvas {
        s.scene.canvas = v;
    }
    if let Some(v) = args.noise {
        s.noise.model = v;
        if v == NoiseModel::Sensor && args.space.is_none() {
            s.space = ColorSpace::Linear;
        }
    }
    if let Some(v) = pair(&args.sigma_range) {
        s.noise.sigma_range = v;
    }
    if let Some(v) = pair(&args.lambda_range) {
        s.noise.lambda_range = v;
    }
    if let Some(v) = args.blur_noise {
        s.noise.blur_noise_sigma = v;
    }
    if let Some(v) = args.space {
        s.space = v;
    }
    s.seed = resolve_seed(args.seed, s.seed, loaded.synth_seed_set)?;
    s.validate()?;

    let _lock = RunLock::acquire(&args.out).map_err(runtime)?;
    run.write_snapshot(&args.out)?;
    let manifest = write_dataset(&run.synth, &args.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Outcome {
    let loaded = load_file(args.config.as_deref())?;
    let mut run = loaded.config;
    let t = &mut run.train;
    if args.toy {
        t.apply_toy_profile();
    }
    if let Some(v) = args.mode {
        t.mode = v;
    }
    if let Some(v) = args.steps {
        t.max_steps = Some(v);
    }
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.crop_size {
        t.crop_size = v;
    }
    if let Some(v) = args.lr {
        t.lr0 = v;
    }
    if let Some(v) = args.lambda_reg {
        t.loss.weights.lambda_reg = v;
    }
    if let Some(v) = args.lambda_aux {
        t.loss.weights.lambda_aux = v;
    }
    if args.no_flips {
        t.flips = false;
    }
    if args.deterministic {
        t.deterministic = true;
    }
    t.seed = resolve_seed(args.seed, t.seed, loaded.train_seed_set)?;
    t.validate()?;

    let final_ck = final_checkpoint_path(&args.out);
    if final_ck.exists() && args.resume.is_none() && !args.force {
        return Err(Failure::Config(format!(
            "{} already holds a finished run; pass --force to overwrite",
            args.out.display()
        )));
    }
    let _lock = RunLock::acquire(&args.out).map_err(runtime)?;
    run.write_snapshot(&args.out)?;

    let data = load_dataset(&args.data, None)?;
    let resume = match &args.resume {
        Some(path) => {
            let hash = run.train.config_hash(&data.hash)?;
            Some(Checkpoint::load(path, Some(&hash), args.force)?)
        }
        None => None,
    };
    let outcome = train(
        &run.train,
        &data,
        TrainOptions {
            out_dir: Some(args.out.clone()),
            resume,
            force: args.force,
            progress_every: args.progress,
        },
    )?;
    if let Some(last) = outcome.history.last() {
        eprintln!("step {} total {:.6}", last.step, last.total);
    }
    if args.eval {
        let id = run_id_for(&args.out);
        let report = evaluate(&outcome.checkpoint, &data, &run.eval, &id)?;
        report.save(&args.out.join("eval.json"))?;
        eprintln!("PSNR {:.3} dB  SSIM {:.4}", report.aggregate.psnr, report.aggregate.ssim);
    }
    println!("{}", final_ck.display());
    Ok(())
}

fn run_id_for(run_dir: &Path) -> String {
    run_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

/// `<run>/checkpoints/<name>` belongs to `<run>`; anything else is its own id.
fn ckpt_run_id(ckpt: &Path) -> String {
    let parent = ckpt.parent();
    match parent.and_then(|p| p.file_name()) {
        Some(n) if n == selfir::train::CHECKPOINT_DIR => run_id_for(parent.and_then(Path::parent).unwrap_or(ckpt)),
        _ => run_id_for(ckpt),
    }
}

fn eval_cmd(args: EvalArgs) -> Outcome {
    let mut run = load_file(args.config.as_deref())?.config;
    if args.clamp {
        run.eval.clamp_output = true;
    }
    if let Some(v) = args.ssim_tile {
        run.eval.ssim_tile = v;
    }
    if run.eval.ssim_tile == 0 {
        return Err(Failure::Config("ssim_tile must be positive".into()));
    }
    if let Some(out) = &args.out {
        run.write_snapshot_to(&out.with_extension("config.toml"))?;
    }
    let ck = Checkpoint::load(&args.ckpt, None, false)?;
    let data = load_dataset(&args.data, None)?;
    let id = args.run_id.clone().unwrap_or_else(|| ckpt_run_id(&args.ckpt));
    let report = evaluate(&ck, &data, &run.eval, &id)?;
    match &args.out {
        Some(out) => {
            report.save(out)?;
            eprintln!("PSNR {:.3} dB  SSIM {:.4}", report.aggregate.psnr, report.aggregate.ssim);
        }
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(|e| runtime(e.to_string()))?
        ),
    }
    Ok(())
}

fn compare(args: CompareArgs) -> Outcome {
    let reports = args
        .reports
        .iter()
        .map(|p| EvalReport::load(p))
        .collect::<selfir::Result<Vec<_>>>()?;
    let table = compare_runs(&reports)?;
    let write = |path: &Path, text: String| {
        std::fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
    };
    if let Some(p) = &args.csv {
        write(p, table.to_csv())?;
    }
    if let Some(p) = &args.md {
        write(p, table.to_markdown())?;
    }
    print!("{}", table.to_markdown());
    Ok(())
}

fn load_loose(path: &Path, space: ColorSpace) -> selfir::Result<Image> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("sirt")) {
        load_sirt_unclamped(path, space)
    } else {
        load_image(path, space)
    }
}

fn mask_debug(args: MaskDebugArgs) -> Outcome {
    if args.patch == 0 {
        return Err(Failure::Config("patch size must be positive".into()));
    }
    let (blurry, noisy, sample): (Image, Image, Option<Sample>) = match (&args.data, &args.blurry, &args.noisy) {
        (Some(manifest_path), _, _) => {
            let id = args.id.unwrap_or_default();
            let manifest = read_manifest(manifest_path)?;
            let record = manifest
                .records
                .iter()
                .find(|r| r.id == id)
                .ok_or_else(|| Failure::Config(format!("no pair with id {id} in {}", manifest_path.display())))?;
            let root = manifest_path.parent().unwrap_or(Path::new(""));
            let sample = load_record(root, record)?;
            (sample.pair.blurry.clone(), sample.pair.noisy.clone(), Some(sample))
        }
        (None, Some(b), Some(n)) => (load_loose(b, args.space)?, load_loose(n, args.space)?, None),
        _ => return Err(Failure::Config("give --data with --id, or --blurry with --noisy".into())),
    };
    let reference = match &args.ckpt {
        Some(path) => NetworkRestorer::from_checkpoint(&Checkpoint::load(path, None, false)?)?.restore(&blurry, &noisy)?,
        None => box_smooth(&noisy),
    };
    let mask = sharp_mask(&blurry, &reference, args.patch, args.eps_s, args.eps_v)?;
    let base = match &sample {
        Some(s) => to_srgb(&blurry, s)?,
        None => blurry.clone(),
    };
    let picture = overlay::render(&base, &mask)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    save_png(&picture, &args.out, false)?;
    println!(
        "{{\"patches\": {}, \"selected\": {}, \"fill_ratio\": {:.6}, \"patch_size\": {}}}",
        mask.grid().len(),
        mask.selected(),
        mask.fill_ratio(),
        mask.patch_size()
    );
    Ok(())
}

fn ablate(args: AblateArgs) -> Outcome {
    let loaded = load_file(args.config.as_deref())?;
    let mut run: RunConfig = loaded.config;
    if args.toy {
        run.train.apply_toy_profile();
    }
    if let Some(v) = args.steps {
        run.train.max_steps = Some(v);
    }
    run.train.validate()?;
    let _lock = RunLock::acquire(&args.out).map_err(runtime)?;
    run.write_snapshot(&args.out)?;
    let data = load_dataset(&args.data, None)?;
    let table = run_ablation(
        args.suite,
        &run.train,
        &data,
        &args.seeds,
        &run.eval,
        Some(&args.out),
        args.progress,
    )?;
    print!("{}", table.to_csv());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Compare(a) => compare(a),
        Command::MaskDebug(a) => mask_debug(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
