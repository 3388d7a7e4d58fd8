mod commands;
mod manifest;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use wdm3d::conditioning::InpaintVariant;
use wdm3d::denoiser::GlobalPipeline;
use wdm3d::diffusion::SamplerKind;
use wdm3d::objectives::{Objective, DEFAULT_LAMBDA1};
use wdm3d::schedule::ScheduleKind;
use wdm3d::Modality;

use manifest::{CliError, Ctx, RunManifest};

#[derive(Parser)]
#[command(
    name = "wdm3d",
    version,
    about = "Conditional 3D wavelet diffusion for lesion inpainting and modality synthesis"
)]
struct Cli {
    /// Run manifest path. Defaults to `<main output>.manifest.json`, or
    /// `wdm3d-<command>.manifest.json` in the working directory.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "lowercase")]
enum Command {
    /// Single-level 3D Haar analysis or synthesis of a volume file.
    Dwt(DwtArgs),
    /// Print or dump a noise schedule.
    Schedule(ScheduleArgs),
    /// Place synthetic healthy masks inside a brain, away from unhealthy tissue.
    Maskgen(MaskgenArgs),
    /// Fit the affine denoiser on one objective; writes a checkpoint and loss CSV.
    Train(TrainArgs),
    /// Fill the healthy mask of a scan.
    Inpaint(InpaintArgs),
    /// Generate one missing modality from the other three.
    Synth(SynthArgs),
    /// ROI-restricted MSE, PSNR and SSIM.
    Metrics(MetricsArgs),
    /// Run the built-in invariant checks.
    Selftest(SelftestArgs),
    /// Write a synthetic four-modality case with a lesion.
    Phantom(PhantomArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Dwt(_) => "dwt",
            Command::Schedule(_) => "schedule",
            Command::Maskgen(_) => "maskgen",
            Command::Train(_) => "train",
            Command::Inpaint(_) => "inpaint",
            Command::Synth(_) => "synth",
            Command::Metrics(_) => "metrics",
            Command::Selftest(_) => "selftest",
            Command::Phantom(_) => "phantom",
        }
    }

    fn default_manifest(&self) -> PathBuf {
        if let Command::Phantom(a) = self {
            return a.out_dir.join(format!("{}.manifest.json", a.id));
        }
        match self.main_output() {
            Some(p) => PathBuf::from(format!("{}.manifest.json", p.display())),
            None => PathBuf::from(format!("wdm3d-{}.manifest.json", self.name())),
        }
    }

    /// Path the default manifest sits next to.
    fn main_output(&self) -> Option<&Path> {
        match self {
            Command::Dwt(a) => Some(&a.output),
            Command::Schedule(a) => a.dump.as_deref(),
            Command::Maskgen(a) => Some(&a.out),
            Command::Train(a) => Some(&a.out),
            Command::Inpaint(a) => Some(&a.out),
            Command::Synth(a) => Some(&a.out),
            Command::Metrics(a) => a.out.as_deref(),
            Command::Selftest(_) => None,
            Command::Phantom(_) => None,
        }
    }
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    Modality::parse(s)
        .ok_or_else(|| format!("unknown modality {s:?} (expected t1n, t1c, t2w or flair)"))
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected `lo,hi`, got {s:?}"))?;
    let a: f64 = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: f64 = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    Ok((a, b))
}

#[derive(Args, Serialize)]
#[command(group(ArgGroup::new("direction").required(true).args(["forward", "inverse"])))]
struct DwtArgs {
    /// Volume (3D, or 4D with one volume per channel) to subband stack.
    #[arg(long)]
    forward: bool,
    /// Subband stack (4D, channel count a multiple of 8) to volume.
    #[arg(long)]
    inverse: bool,
    #[arg(long, short)]
    input: PathBuf,
    #[arg(long, short)]
    output: PathBuf,
}

#[derive(Args, Serialize)]
struct ScheduleArgs {
    #[arg(long, default_value = "linear")]
    kind: ScheduleKind,
    #[arg(long = "T", short = 'T', default_value_t = 1000)]
    steps: usize,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    /// Also report a Karras sigma grid with this many nonzero levels.
    #[arg(long)]
    karras: Option<usize>,
    /// Write the per-step table as CSV.
    #[arg(long)]
    dump: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct MaskgenArgs {
    /// Brain mask (any nonzero voxel is brain; a skull-stripped scan works too).
    #[arg(long)]
    brain: PathBuf,
    #[arg(long)]
    unhealthy: PathBuf,
    /// Output mask; with `--count N > 1` an index is inserted before the extension.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Real healthy masks to draw from; without any, every region is a generated blob.
    #[arg(long)]
    library: Vec<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    real_prob: f64,
    /// Blob base semi-axis range in millimetres, `lo,hi`.
    #[arg(long, value_parser = parse_pair, default_value = "4,10")]
    blob_size: (f64, f64),
    #[arg(long, default_value_t = 0.3)]
    roughness: f64,
    #[arg(long, default_value_t = 100)]
    max_retries: usize,
    /// Emit shifted copies of the unhealthy mask instead of placed blobs.
    #[arg(long)]
    shift: bool,
    /// With `--shift`, translate only (no random flip or axis permutation).
    #[arg(long)]
    no_transform: bool,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    objective: Objective,
    #[arg(long, default_value_t = DEFAULT_LAMBDA1)]
    lambda1: f64,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "T", short = 'T', default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value = "linear")]
    schedule: ScheduleKind,
    /// Conditioning pipeline for `Dg`.
    #[arg(long, default_value = "default")]
    pipeline: GlobalPipeline,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    bins: usize,
    /// Case directories with `-<role>.nii.gz` files; phantoms are used when none are given.
    #[arg(long = "case")]
    cases: Vec<PathBuf>,
    #[arg(long, default_value_t = 4)]
    phantoms: usize,
    #[arg(long, default_value_t = 16)]
    phantom_size: usize,
    /// Replace every healthy and unhealthy mask with an empty one.
    #[arg(long)]
    empty_masks: bool,
    /// Checkpoint stem: writes `<out>.bin`, `<out>.json` and `<out>.loss.csv`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    big: bool,
}

#[derive(Args, Serialize)]
#[command(group(ArgGroup::new("input").required(true).args(["scan", "voided"])))]
struct InpaintArgs {
    #[arg(long)]
    variant: InpaintVariant,
    /// Full scan; the healthy region is voided internally where the variant needs it.
    #[arg(long)]
    scan: Option<PathBuf>,
    /// Scan whose healthy region was already removed.
    #[arg(long)]
    voided: Option<PathBuf>,
    #[arg(long)]
    healthy_mask: PathBuf,
    #[arg(long)]
    unhealthy_mask: Option<PathBuf>,
    #[arg(long, default_value = "ddpm")]
    sampler: SamplerKind,
    /// Nonzero Karras levels for `dpmpp2m`.
    #[arg(long, default_value_t = 50)]
    levels: usize,
    #[arg(long = "T", short = 'T', default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value = "linear")]
    schedule: ScheduleKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint sidecar path, or `oracle[:mu=M,sigma0=S]`.
    #[arg(long, default_value = "oracle")]
    denoiser: String,
    /// Normalized value written into voided voxels.
    #[arg(long, default_value_t = wdm3d::conditioning::DEFAULT_VOID_FILL)]
    void_fill: f64,
    #[arg(long)]
    out: PathBuf,
    /// Allow volumes larger than 96^3.
    #[arg(long)]
    big: bool,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[arg(long, default_value = "default")]
    pipeline: GlobalPipeline,
    #[arg(long, value_parser = parse_modality)]
    missing: Modality,
    /// Case directory with `-<modality>.nii.gz` files; explicit paths override it.
    #[arg(long)]
    case: Option<PathBuf>,
    #[arg(long)]
    t1n: Option<PathBuf>,
    #[arg(long)]
    t1c: Option<PathBuf>,
    #[arg(long)]
    t2w: Option<PathBuf>,
    #[arg(long)]
    flair: Option<PathBuf>,
    #[arg(long, default_value = "ddpm")]
    sampler: SamplerKind,
    #[arg(long, default_value_t = 50)]
    levels: usize,
    #[arg(long = "T", short = 'T', default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value = "linear")]
    schedule: ScheduleKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "oracle")]
    denoiser: String,
    /// Source intensities `lo,hi` that −1 and +1 map back to; output stays normalized otherwise.
    #[arg(long, value_parser = parse_pair)]
    output_range: Option<(f64, f64)>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    big: bool,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MetricTask {
    Inpaint,
    Synth,
}

#[derive(Args, Serialize)]
struct MetricsArgs {
    /// Predicted volume; repeat for several cases.
    #[arg(long, required = true)]
    pred: Vec<PathBuf>,
    #[arg(long = "ref", required = true)]
    reference: Vec<PathBuf>,
    /// Evaluation region per case; required for inpainting, defaults to the brain for synthesis.
    #[arg(long)]
    roi: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "inpaint")]
    task: MetricTask,
    /// Tumour mask per case for an extra synthesis SSIM.
    #[arg(long)]
    tumor: Vec<PathBuf>,
    #[arg(long)]
    case_id: Vec<String>,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct PhantomArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "phantom")]
    id: String,
}

fn print_error(err: &CliError) {
    eprintln!("{}", err.to_json());
}

/// Parse failures still leave a manifest when the destination is known.
fn usage_failure(argv: &[String], err: clap::Error) -> ExitCode {
    let code = err.exit_code();
    let _ = err.print();
    if code == 0 {
        return ExitCode::SUCCESS;
    }
    let cli_err = CliError::Usage(err.kind().to_string());
    print_error(&cli_err);
    let explicit = argv.iter().enumerate().find_map(|(i, a)| {
        a.strip_prefix("--manifest=")
            .map(PathBuf::from)
            .or_else(|| {
                (a == "--manifest")
                    .then(|| argv.get(i + 1).map(PathBuf::from))
                    .flatten()
            })
    });
    let sub = argv
        .iter()
        .skip(1)
        .find(|a| !a.starts_with('-'))
        .cloned()
        .unwrap_or_default();
    if let Some(path) = explicit {
        let m = RunManifest::new(
            argv.to_vec(),
            &sub,
            serde_json::Value::Null,
            Ctx::default(),
            Some(&cli_err),
        );
        let _ = m.write(&path);
    }
    ExitCode::from(code as u8)
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => return usage_failure(&argv, e),
    };
    let name = cli.command.name();
    let manifest_path = cli
        .manifest
        .clone()
        .unwrap_or_else(|| cli.command.default_manifest());
    let config = serde_json::to_value(&cli.command).unwrap_or(serde_json::Value::Null);

    let mut ctx = Ctx::default();
    let outcome = match &cli.command {
        Command::Dwt(a) => commands::dwt(a, &mut ctx),
        Command::Schedule(a) => commands::schedule(a, &mut ctx),
        Command::Maskgen(a) => commands::maskgen(a, &mut ctx),
        Command::Train(a) => commands::train(a, &mut ctx),
        Command::Inpaint(a) => commands::inpaint(a, &mut ctx),
        Command::Synth(a) => commands::synth(a, &mut ctx),
        Command::Metrics(a) => commands::metrics(a, &mut ctx),
        Command::Selftest(a) => commands::selftest(a, &mut ctx),
        Command::Phantom(a) => commands::phantom(a, &mut ctx),
    };
    if outcome.is_ok() && !ctx.printed && !ctx.result.is_null() {
        // a closed pipe on stdout is not a failure of the run
        let _ = writeln!(
            std::io::stdout(),
            "{}",
            serde_json::to_string_pretty(&ctx.result).unwrap_or_default()
        );
    }
    let err = outcome.err();
    let manifest = RunManifest::new(argv, name, config, ctx, err.as_ref());
    if let Err(e) = manifest.write(&manifest_path) {
        let e = CliError::Run(e.into());
        print_error(&e);
        return ExitCode::from(e.exit_code());
    }
    match err {
        None => ExitCode::SUCCESS,
        Some(e) => {
            print_error(&e);
            ExitCode::from(e.exit_code())
        }
    }
}
