//! The `vseg` command-line binary.
//!
//! One subcommand per pipeline stage; every run resolves its full
//! configuration (defaults plus flags), writes it as a `manifest.txt`
//! key=value file into `--out`, and derives all randomness from `--seed`.
//! Two runs with identical manifests produce identical outputs.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::metrics;
use crate::synth::{generate, ClassMode, DomainStyle, SynthConfig};
use crate::tensor::OptKind;
use crate::train::{
    adapt_adversarial, finetune_binary, scheme_weight_map, train_supervised, write_manifest,
    AdaptConfig, Scheme, TrainConfig,
};
use crate::volume::{get_slice, read_volume, write_volume, Volume3D};

#[derive(Parser)]
#[command(
    name = "vseg",
    version,
    about = "Volumetric boundary segmentation: weight maps, UNet training, adversarial adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired synthetic image/label volume.
    MakeSynth(MakeSynthArgs),
    /// Compute a per-slice weight volume from a label volume.
    GenWeights(GenWeightsArgs),
    /// Supervised weighted-cross-entropy training.
    Train(TrainArgs),
    /// Binary fine-tuning from a pretrained checkpoint.
    Finetune(FinetuneArgs),
    /// Unsupervised adversarial adaptation to an unlabeled target volume.
    Adapt(AdaptArgs),
    /// Predict a label volume from a checkpoint.
    Predict(PredictArgs),
    /// Compare a predicted label volume against ground truth.
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct MakeSynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Volume dims as ZxYxX.
    #[arg(long, default_value = "8x64x64")]
    dims: String,
    /// Seed points per slice.
    #[arg(long, default_value_t = 8)]
    points: usize,
    /// Boundary band thickness in pixels.
    #[arg(long, default_value_t = 2.0)]
    thickness: f32,
    /// 4 for the multi-class mosaic, 2 for boundary/non-boundary.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, value_parser = ["source", "target"], default_value = "source")]
    style: String,
    /// Intensity noise sigma.
    #[arg(long, default_value_t = 0.02)]
    noise: f32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct GenWeightsArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["entropy", "distance", "ratio", "uniform"], default_value = "distance")]
    scheme: String,
    #[arg(long)]
    ratio: Option<f32>,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 10.0)]
    sigma: f32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Precomputed weight volume; overrides --scheme.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = ["entropy", "distance", "ratio", "uniform"])]
    scheme: Option<String>,
    #[arg(long)]
    ratio: Option<f32>,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 10.0)]
    sigma: f32,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, default_value_t = 64)]
    crop: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    /// Epochs over the training slices.
    #[arg(long, default_value_t = 1)]
    iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f32,
    #[arg(long, value_parser = ["sgd", "adam"], default_value = "adam")]
    opt: String,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_parser = ["on", "off"], default_value = "off")]
    jitter: String,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f32,
    /// UNet encoder levels.
    #[arg(long, default_value_t = 3)]
    depth: usize,
    /// UNet channels at the top level.
    #[arg(long, default_value_t = 16)]
    base_channels: usize,
}

impl TrainFlags {
    fn to_config(&self, default_scheme: Scheme, default_classes: usize) -> TrainConfig {
        let mut cfg = TrainConfig::new(&self.images, &self.labels, &self.out);
        cfg.weights = self.weights.clone();
        cfg.scheme = match self.scheme.as_deref() {
            Some("entropy") => Scheme::Entropy,
            Some("distance") => Scheme::Distance,
            Some("ratio") => Scheme::Ratio(self.ratio.unwrap_or(5.0)),
            Some("uniform") => Scheme::Uniform,
            _ => default_scheme,
        };
        if let (Scheme::Ratio(_), Some(r)) = (cfg.scheme, self.ratio) {
            cfg.scheme = Scheme::Ratio(r);
        }
        cfg.classes = self.classes.unwrap_or(default_classes);
        cfg.crop = self.crop;
        cfg.batch = self.batch;
        cfg.iters = self.iters;
        cfg.lr = self.lr;
        cfg.opt = parse_opt(&self.opt);
        cfg.seed = self.seed;
        cfg.jitter = self.jitter == "on";
        cfg.val_frac = self.val_frac;
        cfg.window = self.window;
        cfg.sigma = self.sigma;
        cfg.depth = self.depth;
        cfg.base_channels = self.base_channels;
        cfg
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    base_checkpoint: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    /// Source image volume.
    #[arg(long)]
    images: PathBuf,
    /// Source label volume.
    #[arg(long)]
    labels: PathBuf,
    /// Target image volume (target labels are never read for training).
    #[arg(long)]
    target_images: PathBuf,
    /// Pretrained segmentation checkpoint.
    #[arg(long)]
    base_checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    d_steps: usize,
    #[arg(long, default_value_t = 1)]
    g_steps: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Cycles per epoch.
    #[arg(long, default_value_t = 16)]
    iters: usize,
    /// Learning rate for both networks.
    #[arg(long, default_value_t = 1e-4)]
    lr: f32,
    #[arg(long, value_parser = ["sgd", "adam"], default_value = "adam")]
    opt: String,
    #[arg(long, default_value_t = 64)]
    crop: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f32,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    base_checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted label volume.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth label volume.
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Optional output directory for the manifest and report CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_opt(s: &str) -> OptKind {
    match s {
        "sgd" => OptKind::Sgd,
        _ => OptKind::Adam,
    }
}

/// Parses arguments and dispatches; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err:#}");
            2
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::MakeSynth(args) => make_synth(args),
        Command::GenWeights(args) => gen_weights(args),
        Command::Train(args) => {
            let cfg = args.flags.to_config(Scheme::Uniform, 4);
            write_manifest(&cfg.out_dir, "train", &cfg.to_kv_pairs())?;
            let out = train_supervised(&cfg)?;
            println!("metrics: {}", out.metrics_csv.display());
            println!("final checkpoint: {}", out.final_checkpoint.display());
            if let Some(last) = out.epochs.last() {
                println!(
                    "epoch {}: train loss {:.4}, val jaccard mean {:.4}",
                    last.epoch, last.train_loss, last.val_jaccard_mean
                );
            }
            Ok(())
        }
        Command::Finetune(args) => {
            let cfg = args.flags.to_config(Scheme::Distance, 2);
            let mut pairs = cfg.to_kv_pairs();
            pairs.push((
                "base_checkpoint".into(),
                args.base_checkpoint.display().to_string(),
            ));
            write_manifest(&cfg.out_dir, "finetune", &pairs)?;
            let out = finetune_binary(&args.base_checkpoint, &cfg)?;
            if let Some(report) = &out.partial_report {
                println!(
                    "transferred {} entries, reinitialized: {}",
                    report.transferred.len(),
                    report.reinitialized.join(", ")
                );
            }
            println!("metrics: {}", out.metrics_csv.display());
            println!("final checkpoint: {}", out.final_checkpoint.display());
            Ok(())
        }
        Command::Adapt(args) => {
            let mut cfg = AdaptConfig::new(
                &args.images,
                &args.labels,
                &args.target_images,
                &args.base_checkpoint,
                &args.out,
            );
            cfg.d_lr = args.lr;
            cfg.g_lr = args.lr;
            cfg.d_steps = args.d_steps;
            cfg.g_steps = args.g_steps;
            cfg.steps_per_epoch = args.iters;
            cfg.epochs = args.epochs;
            cfg.batch = args.batch;
            cfg.crop = args.crop;
            cfg.opt = parse_opt(&args.opt);
            cfg.seed = args.seed;
            cfg.val_frac = args.val_frac;
            write_manifest(&cfg.out_dir, "adapt", &cfg.to_kv_pairs())?;
            let out = adapt_adversarial(&cfg)?;
            println!("metrics: {}", out.metrics_csv.display());
            println!("adapted checkpoint: {}", out.adapted_checkpoint.display());
            if let Some(last) = out.epochs.last() {
                println!(
                    "epoch {}: d_probe_acc {:.3}, tgt boundary jaccard {:.3}",
                    last.epoch, last.d_probe_acc, last.tgt_jaccard_boundary
                );
            }
            Ok(())
        }
        Command::Predict(args) => predict(args),
        Command::Eval(args) => eval(args),
        Command::GradCheck(args) => grad_check_cmd(args),
    }
}

fn make_synth(args: MakeSynthArgs) -> Result<()> {
    let dims: Vec<usize> = args
        .dims
        .split('x')
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| anyhow!("bad --dims '{}'", args.dims))
        })
        .collect::<Result<_>>()?;
    if dims.len() != 3 {
        bail!("--dims must be ZxYxX");
    }
    let mode = match args.classes {
        4 => ClassMode::FourClass,
        2 => ClassMode::Binary,
        other => bail!("--classes must be 2 or 4, got {other}"),
    };
    let cfg = SynthConfig {
        dims: (dims[0], dims[1], dims[2]),
        points: args.points,
        thickness: args.thickness,
        mode,
        style: if args.style == "target" {
            DomainStyle::Target
        } else {
            DomainStyle::Source
        },
        noise_sigma: args.noise,
        seed: args.seed,
    };
    let pairs = vec![
        ("out".to_string(), args.out.display().to_string()),
        ("dims".to_string(), args.dims.clone()),
        ("points".to_string(), args.points.to_string()),
        ("thickness".to_string(), args.thickness.to_string()),
        ("classes".to_string(), args.classes.to_string()),
        ("style".to_string(), args.style.clone()),
        ("noise".to_string(), args.noise.to_string()),
        ("seed".to_string(), args.seed.to_string()),
    ];
    write_manifest(&args.out, "make-synth", &pairs)?;
    let (images, labels) = generate(&cfg)?;
    let ip = args.out.join("images.vseg");
    let lp = args.out.join("labels.vseg");
    write_volume(&images, &ip)?;
    write_volume(&labels, &lp)?;
    println!("wrote {} and {}", ip.display(), lp.display());
    Ok(())
}

fn gen_weights(args: GenWeightsArgs) -> Result<()> {
    let scheme = match args.scheme.as_str() {
        "entropy" => Scheme::Entropy,
        "distance" => Scheme::Distance,
        "ratio" => Scheme::Ratio(args.ratio.unwrap_or(5.0)),
        _ => Scheme::Uniform,
    };
    let labels = read_volume(&args.labels).context("reading label volume")?;
    let (z, y, x) = labels.dims();
    let mut pairs = vec![
        ("labels".to_string(), args.labels.display().to_string()),
        ("out".to_string(), args.out.display().to_string()),
        ("scheme".to_string(), args.scheme.clone()),
        ("window".to_string(), args.window.to_string()),
        ("sigma".to_string(), args.sigma.to_string()),
        ("seed".to_string(), args.seed.to_string()),
    ];
    if let Scheme::Ratio(r) = scheme {
        pairs.insert(3, ("ratio".to_string(), r.to_string()));
    }
    write_manifest(&args.out, "gen-weights", &pairs)?;

    let mut data = Vec::with_capacity(z * y * x);
    for zi in 0..z {
        let slice = get_slice(&labels, zi)?;
        let map = scheme_weight_map(&slice, scheme, args.window, args.sigma, 1)?;
        data.extend_from_slice(map.data());
    }
    let out_path = args.out.join("weights.vseg");
    write_volume(&Volume3D::scalars((z, y, x), data)?, &out_path)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

fn predict(args: PredictArgs) -> Result<()> {
    let pairs = vec![
        ("images".to_string(), args.images.display().to_string()),
        (
            "base_checkpoint".to_string(),
            args.base_checkpoint.display().to_string(),
        ),
        ("out".to_string(), args.out.display().to_string()),
        ("seed".to_string(), args.seed.to_string()),
    ];
    write_manifest(&args.out, "predict", &pairs)?;
    let out_path = args.out.join("pred.vseg");
    crate::train::predict_to_file(&args.base_checkpoint, &args.images, &out_path)?;
    println!("wrote {}", out_path.display());
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let pred = read_volume(&args.pred).context("reading predicted volume")?;
    let gt = read_volume(&args.labels).context("reading ground-truth volume")?;
    if pred.dims() != gt.dims() {
        bail!("dims differ: {:?} vs {:?}", pred.dims(), gt.dims());
    }
    let pred_data = pred
        .as_labels()
        .ok_or_else(|| anyhow!("predicted volume must hold labels"))?;
    let gt_data = gt
        .as_labels()
        .ok_or_else(|| anyhow!("ground-truth volume must hold labels"))?;
    let pairs = vec![
        ("pred".to_string(), args.pred.display().to_string()),
        ("labels".to_string(), args.labels.display().to_string()),
        ("classes".to_string(), args.classes.to_string()),
        ("out".to_string(), args.out.display().to_string()),
        ("seed".to_string(), args.seed.to_string()),
    ];
    write_manifest(&args.out, "eval", &pairs)?;

    let (z, y, x) = pred.dims();
    let plane = y * x;
    let mut csv = String::from("slice,jaccard_mean");
    for c in 0..args.classes {
        csv.push_str(&format!(",jaccard_class_{c}"));
    }
    csv.push('\n');
    let mut row = |name: &str, p: &[u8], g: &[u8]| -> Result<()> {
        let mean = metrics::mean_jaccard(p, g, args.classes)?;
        csv.push_str(&format!("{name},{mean}"));
        for c in 0..args.classes {
            let j = metrics::jaccard(p, g, c as u8)?;
            csv.push_str(&format!(",{j}"));
        }
        csv.push('\n');
        Ok(())
    };
    for zi in 0..z {
        row(
            &zi.to_string(),
            &pred_data[zi * plane..(zi + 1) * plane],
            &gt_data[zi * plane..(zi + 1) * plane],
        )?;
    }
    row("all", pred_data, gt_data)?;
    let csv_path = args.out.join("metrics.csv");
    std::fs::write(&csv_path, csv)?;

    let cm = metrics::confusion(pred_data, gt_data, args.classes)?;
    let mut cm_csv = String::new();
    for i in 0..args.classes {
        let cells: Vec<String> = (0..args.classes)
            .map(|j| cm.count(i, j).to_string())
            .collect();
        cm_csv.push_str(&cells.join(","));
        cm_csv.push('\n');
    }
    std::fs::write(args.out.join("confusion.csv"), cm_csv)?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn grad_check_cmd(args: GradCheckArgs) -> Result<()> {
    let report = crate::models::grad_check_report(args.seed)?;
    let mut worst = 0f64;
    let mut csv = String::from("family,max_rel_error\n");
    for (family, err) in &report {
        println!("{family:<24} max relative error {err:.3e}");
        csv.push_str(&format!("{family},{err:e}\n"));
        worst = worst.max(*err);
    }
    if let Some(out) = &args.out {
        let pairs = vec![
            ("seed".to_string(), args.seed.to_string()),
            ("out".to_string(), out.display().to_string()),
        ];
        write_manifest(out, "grad-check", &pairs)?;
        std::fs::write(out.join("gradcheck.csv"), csv)?;
    }
    if worst < 1e-4 {
        println!("all families under 1e-4");
        Ok(())
    } else {
        bail!("worst relative error {worst:.3e} exceeds 1e-4")
    }
}
