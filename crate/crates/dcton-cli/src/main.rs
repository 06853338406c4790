//! `dcton`: command-line front end for the virtual try-on pipeline.
//!
//! Exit codes: 0 on success, 1 on runtime failures (missing files, bad
//! data, divergence), 2 on usage errors (unknown flags, malformed values,
//! wrong argument counts).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcton_core::data::{self, DatasetSpec};
use dcton_core::losses::LossReport;
use dcton_core::metrics::{
    self, Classifier, Embedder, MetricReport, RandomProjectionClassifier,
    RandomProjectionEmbedder,
};
use dcton_core::train::{self, TrainConfig};
use dcton_core::{infer, tfile, Tensor};

#[derive(Parser)]
#[command(
    name = "dcton",
    version,
    about = "Desk-scale virtual try-on: synthetic data, warp + cycle training, \
             inference, evaluation and comparison grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paper-doll try-on dataset.
    GenData(GenDataArgs),
    /// Run only the warp pretraining phase and save its checkpoint.
    PretrainStn(PretrainStnArgs),
    /// Full training: warp pretraining followed by cycle training.
    Train(TrainArgs),
    /// Put a garment on a person with one generator pass.
    Infer(InferArgs),
    /// Compare a generated image directory against a reference directory.
    Eval(EvalArgs),
    /// Compose (person, clothes, result) triples into a comparison grid.
    Grid(GridArgs),
}

/// Parse `HxW` image sizes such as `64x48`.
fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW (for example 64x48), got '{s}'"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in '{s}'"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in '{s}'"))?;
    Ok((h, w))
}

#[derive(Args)]
struct GenDataArgs {
    /// Directory to create the dataset in.
    #[arg(long)]
    out: PathBuf,
    /// Number of samples.
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Image size as HxW.
    #[arg(long, value_parser = parse_size, default_value = "64x48")]
    size: (usize, usize),
    /// Number of distinct garment styles to cycle through.
    #[arg(long, default_value_t = 6)]
    styles: usize,
    /// Random seed for the rendered corpus.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainStnArgs {
    /// Dataset directory (as produced by gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for logs and the checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Pretraining epochs.
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Adam learning rate.
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight of the transform-consistency regularizer.
    #[arg(long, default_value_t = 1.0)]
    reg_weight: f64,
    /// Disable the transform-consistency regularizer.
    #[arg(long)]
    no_stn_reg: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (as produced by gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for logs and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Optional key=value config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a previous checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Cycle-training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Warp pretraining epochs.
    #[arg(long)]
    stn_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Weight of the cycle reconstruction loss.
    #[arg(long)]
    lambda_cyc: Option<f64>,
    /// Weight of the perceptual loss.
    #[arg(long)]
    lambda_vgg: Option<f64>,
    /// Weight of the content-preserving loss.
    #[arg(long)]
    lambda_pre: Option<f64>,
    /// Weight of the transform-consistency regularizer in pretraining.
    #[arg(long)]
    reg_weight: Option<f64>,
    /// Save an intermediate checkpoint every N cycle epochs (0 = final only).
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Ablation: drop the skin pyramid encoder.
    #[arg(long)]
    no_skin_encoder: bool,
    /// Ablation: disable the transform-consistency regularizer.
    #[arg(long)]
    no_stn_reg: bool,
    /// Do not stream per-iteration loss rows to stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint directory (training root or its model/ subdirectory).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Person image (RGB PNG).
    #[arg(long)]
    person: PathBuf,
    /// Garment image (RGB PNG).
    #[arg(long)]
    clothes: PathBuf,
    /// Pose descriptor tensor file.
    #[arg(long)]
    descriptor: PathBuf,
    /// Per-pixel parse labels (indexed PNG).
    #[arg(long)]
    parse: PathBuf,
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Also write intermediates (warped clothes, masks, skin) next to --out.
    #[arg(long)]
    debug: bool,
    /// Accepted for interface uniformity; inference is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of reference images.
    #[arg(long)]
    reference: PathBuf,
    /// Directory of generated images (paired with references by file name).
    #[arg(long)]
    generated: PathBuf,
    /// Metric backend for the distribution metrics.
    #[arg(long, default_value = "random-proj", value_parser = ["random-proj"])]
    backend: String,
    /// Seed for the metric backend weights.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of splits for the inception-style score.
    #[arg(long, default_value_t = 10)]
    splits: usize,
    /// Also write the report as a CSV file.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Output PNG path.
    #[arg(long)]
    out: PathBuf,
    /// Accepted for interface uniformity; grid composition is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Images in (person, clothes, result) triples, row by row.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

/// Failures after argument parsing: usage errors exit 2, runtime errors 1.
enum CliError {
    Usage(String),
    Runtime(dcton_core::Error),
}

impl From<dcton_core::Error> for CliError {
    fn from(e: dcton_core::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::GenData(args) => gen_data(args),
        Command::PretrainStn(args) => pretrain_stn(args),
        Command::Train(args) => train_cmd(args),
        Command::Infer(args) => infer_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Grid(args) => grid_cmd(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let spec = DatasetSpec {
        count: args.count,
        height: args.size.0,
        width: args.size.1,
        seed: args.seed,
        clothes_styles: args.styles,
    };
    let ids = data::generate_dataset(&spec, &args.out)?;
    println!(
        "wrote {} samples ({}x{}) to {}",
        ids.len(),
        spec.height,
        spec.width,
        args.out.display()
    );
    Ok(())
}

fn pretrain_stn(args: PretrainStnArgs) -> Result<(), CliError> {
    let config = TrainConfig {
        epochs: 0,
        stn_epochs: args.epochs,
        batch_size: args.batch_size,
        lr: args.lr,
        seed: args.seed,
        stn_reg_weight: args.reg_weight,
        ablate_stn_reg: args.no_stn_reg,
        ..TrainConfig::default()
    };
    let dataset = data::load_dataset(&args.data)?;
    let summary = train::train(&dataset, &config, &args.out, None, None)?;
    if let Some(last) = summary.pretrain_reports.last() {
        println!(
            "pretraining finished after {} iterations: warp={:.6} mask={:.6} \
             reg={:.6} total={:.6}",
            summary.pretrain_reports.len(),
            last.warp,
            last.mask,
            last.reg,
            last.total
        );
    }
    println!("log: {}", args.out.join("pretrain_log.csv").display());
    println!("checkpoint: {}", summary.checkpoint.display());
    Ok(())
}

fn train_cmd(args: TrainArgs) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.epochs {
        config.epochs = v;
    }
    if let Some(v) = args.stn_epochs {
        config.stn_epochs = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.lr {
        config.lr = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.lambda_cyc {
        config.lambda_cyc = v;
    }
    if let Some(v) = args.lambda_vgg {
        config.lambda_vgg = v;
    }
    if let Some(v) = args.lambda_pre {
        config.lambda_pre = v;
    }
    if let Some(v) = args.reg_weight {
        config.stn_reg_weight = v;
    }
    if let Some(v) = args.checkpoint_every {
        config.checkpoint_every = v;
    }
    if args.no_skin_encoder {
        config.ablate_skin_encoder = true;
    }
    if args.no_stn_reg {
        config.ablate_stn_reg = true;
    }

    let dataset = data::load_dataset(&args.data)?;
    let mut print_row = |r: &LossReport| println!("{}", r.to_csv());
    let progress: Option<&mut dyn FnMut(&LossReport)> = if args.quiet {
        None
    } else {
        println!("{}", LossReport::csv_header());
        Some(&mut print_row)
    };
    let summary = train::train(&dataset, &config, &args.out, args.resume.as_deref(), progress)?;
    println!(
        "trained {} cycle iterations ({} pretraining)",
        summary.reports.len(),
        summary.pretrain_reports.len()
    );
    println!("logs: {}", args.out.display());
    println!("checkpoint: {}", summary.checkpoint.display());
    Ok(())
}

/// Save a (1, H, W) mask in [0, 1] as a grayscale RGB PNG.
fn save_mask_png(path: &Path, mask: &Tensor<f32>) -> Result<(), dcton_core::Error> {
    let (h, w) = (mask.dim(1), mask.dim(2));
    let mut rgb = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        rgb.extend(mask.data().iter().map(|&v| v * 2.0 - 1.0));
    }
    data::save_rgb_png(path, &Tensor::from_vec(&[3, h, w], rgb))
}

fn infer_cmd(args: InferArgs) -> Result<(), CliError> {
    let mut loaded = infer::load_generator(&args.checkpoint)?;
    let person = data::load_rgb_png(&args.person)?;
    let clothes = data::load_rgb_png(&args.clothes)?;
    let (parse, ph, pw) = data::load_parse_png(&args.parse)?;
    if person.shape() != [3, ph, pw] {
        return Err(CliError::Runtime(dcton_core::Error::InvalidArgument(format!(
            "person is {:?} but the parse map is {ph}x{pw}",
            person.shape()
        ))));
    }
    let descriptor: Tensor<f32> = tfile::read_tensor(&args.descriptor)?;
    let result = infer::try_on(&mut loaded, &person, &parse, &clothes, &descriptor)?;
    if loaded.generator.passes() != 1 {
        return Err(CliError::Runtime(dcton_core::Error::InvalidArgument(format!(
            "internal error: expected exactly one generator pass, counted {}",
            loaded.generator.passes()
        ))));
    }
    data::save_rgb_png(&args.out, &result.image)?;
    println!("wrote {}", args.out.display());

    if args.debug {
        let sibling = |suffix: &str| -> PathBuf {
            let stem = args.out.file_stem().unwrap_or_default().to_string_lossy();
            args.out.with_file_name(format!("{stem}_{suffix}.png"))
        };
        let warped = sibling("warped_clothes");
        data::save_rgb_png(&warped, &result.warped_clothes)?;
        let mask_c = sibling("mask_clothes");
        save_mask_png(&mask_c, &result.mask_clothes)?;
        let mask_s = sibling("mask_skin");
        save_mask_png(&mask_s, &result.mask_skin)?;
        let skin_path = sibling("skin");
        data::save_rgb_png(&skin_path, &data::extract_skin(&person, &parse))?;
        for p in [&warped, &mask_c, &mask_s, &skin_path] {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> Result<(), CliError> {
    // `--backend` names a weight family; each backend seeds its own nets.
    let (embedder, classifier): (Box<dyn Embedder>, Box<dyn Classifier>) =
        match args.backend.as_str() {
            "random-proj" => (
                Box::new(RandomProjectionEmbedder::new(args.seed)),
                Box::new(RandomProjectionClassifier::new(args.seed)),
            ),
            other => {
                return Err(CliError::Usage(format!(
                    "unknown metric backend '{other}' (available: random-proj)"
                )))
            }
        };
    let report =
        metrics::evaluate_dirs(&args.reference, &args.generated, &*embedder, &*classifier, args.splits)?;
    println!("{report}");
    if let Some(csv) = &args.csv {
        let text = format!("{}\n{}\n", MetricReport::csv_header(), report.to_csv());
        fs::write(csv, text)
            .map_err(|e| dcton_core::Error::Io { path: csv.clone(), source: e })?;
        println!("csv: {}", csv.display());
    }
    Ok(())
}

fn grid_cmd(args: GridArgs) -> Result<(), CliError> {
    if args.images.len() % 3 != 0 {
        return Err(CliError::Usage(format!(
            "grid expects (person, clothes, result) triples; got {} images, \
             which is not a multiple of 3",
            args.images.len()
        )));
    }
    let mut images = Vec::with_capacity(args.images.len());
    for path in &args.images {
        images.push(data::load_rgb_png(path)?);
    }
    let canvas = infer::compose_grid(&images, 3, 4)?;
    data::save_rgb_png(&args.out, &canvas)?;
    println!(
        "wrote {} ({}x{}, {} rows)",
        args.out.display(),
        canvas.dim(1),
        canvas.dim(2),
        args.images.len() / 3
    );
    Ok(())
}
