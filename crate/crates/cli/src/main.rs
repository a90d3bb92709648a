//! `svr`: simulate, reconstruct, splat, inpaint and evaluate slice stacks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use svr_core::solver::MotionBasis;
use svr_core::{Axis, Dims};

#[derive(Parser)]
#[command(name = "svr", version, about = "Slice-to-volume reconstruction toolkit")]
struct Cli {
    /// Worker threads; results do not depend on this. Defaults to all cores.
    #[arg(long, global = true, env = "SVR_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Acquire a moving slice stack from a volume.
    Simulate(SimulateArgs),
    /// Jointly estimate per-stack volumes and per-slice motion.
    Reconstruct(ReconstructArgs),
    /// Normalized splat of stacks under given (or zero) motion.
    Splat(SplatArgs),
    /// Fill the holes of a volume.
    Inpaint(InpaintArgs),
    /// Print motion and intensity metrics as JSON.
    Evaluate(EvaluateArgs),
    /// Write a smooth random-blob test volume.
    Phantom(PhantomArgs),
    /// Describe the file formats.
    Formats,
}

#[derive(Args)]
pub struct SimulateArgs {
    /// JSON job file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input volume (.nii).
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out_stack: Option<PathBuf>,
    #[arg(long)]
    pub out_motion: Option<PathBuf>,
    /// Sidecar JSON [default: stack path with .json extension].
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Slicing axis: x, y or z [default: z].
    #[arg(long)]
    pub axis: Option<Axis>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fewest spline knots of the trajectory [default: 32].
    #[arg(long)]
    pub knots_min: Option<usize>,
    /// Most spline knots of the trajectory [default: 64].
    #[arg(long)]
    pub knots_max: Option<usize>,
    /// Largest Euler angle per axis, degrees [default: 20].
    #[arg(long)]
    pub euler_max: Option<f64>,
    /// Largest translation per axis, voxels [default: 26].
    #[arg(long)]
    pub trans_max: Option<f64>,
    /// Boxcar PSF width = slab thickness in voxels [default: 4].
    #[arg(long)]
    pub psf: Option<usize>,
    /// Slice spacing in voxels [default: 4].
    #[arg(long)]
    pub stride: Option<usize>,
    /// Gaussian noise standard deviation [default: 0.01].
    #[arg(long)]
    pub noise: Option<f64>,
    /// Gamma range lower bound [default: 0.9].
    #[arg(long)]
    pub gamma_lo: Option<f64>,
    /// Gamma range upper bound [default: 1.0].
    #[arg(long)]
    pub gamma_hi: Option<f64>,
    /// Interleaved (even slices first) acquisition order [default: true].
    #[arg(long)]
    pub interleave: Option<bool>,
}

#[derive(Args)]
pub struct ReconstructArgs {
    /// JSON job file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input stack (.nii); repeat for more stacks.
    #[arg(long = "stack")]
    pub stacks: Vec<PathBuf>,
    /// Ground-truth motion (.svrm) per stack, in stack order.
    #[arg(long = "truth-motion")]
    pub truth_motion: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Geometry `axis,spacing,slab` for untagged stack files.
    #[arg(long)]
    pub stack_geometry: Option<String>,
    /// Coupling weight between stack volumes [default: 0.3].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Pyramid levels [default: 3].
    #[arg(long)]
    pub levels: Option<usize>,
    /// Sweeps per level [default: 20].
    #[arg(long)]
    pub outer_iters: Option<usize>,
    /// Volume-only sweeps at the start of each level [default: 2].
    #[arg(long)]
    pub v_warmup: Option<usize>,
    /// [default: 30]
    #[arg(long)]
    pub cg_iters: Option<usize>,
    /// [default: 1e-4]
    #[arg(long)]
    pub cg_tol: Option<f64>,
    /// Motion steps per stack and sweep [default: 1].
    #[arg(long)]
    pub gn_iters: Option<usize>,
    /// Largest displacement change per motion step, voxels [default: 2].
    #[arg(long)]
    pub step_max: Option<f64>,
    /// Line-search shrink factor [default: 0.5].
    #[arg(long)]
    pub armijo: Option<f64>,
    /// [default: 10]
    #[arg(long)]
    pub max_backtracks: Option<usize>,
    /// Volume regularizer [default: 1e-6].
    #[arg(long)]
    pub tikhonov_eps: Option<f64>,
    /// Relative objective decrease that ends a level [default: 1e-6].
    #[arg(long)]
    pub tol: Option<f64>,
    /// Motion model: rigid or dense [default: rigid].
    #[arg(long)]
    pub basis: Option<MotionBasis>,
    /// Foreground threshold for EPE reporting, fraction of stack max [default: 0.05].
    #[arg(long)]
    pub fg_threshold: Option<f64>,
    /// Reconstruction grid `nx,ny,nz` [default: inferred from stacks].
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<Dims>,
}

#[derive(Args)]
pub struct SplatArgs {
    /// Input stack; repeat for more.
    #[arg(long = "stack", required = true)]
    pub stacks: Vec<PathBuf>,
    /// Motion per stack, in stack order [default: zero motion].
    #[arg(long = "motion")]
    pub motions: Vec<PathBuf>,
    #[arg(long, value_parser = parse_dims)]
    pub dims: Option<Dims>,
    #[arg(long)]
    pub stack_geometry: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Hole mask output (1 = no data).
    #[arg(long)]
    pub out_holes: Option<PathBuf>,
}

#[derive(Args)]
pub struct InpaintArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Hole mask; nonzero voxels are filled.
    #[arg(long)]
    pub holes: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Relaxation sweeps per pyramid level.
    #[arg(long, default_value_t = svr_core::inpaint::DEFAULT_PASSES)]
    pub passes: usize,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Estimated motion; repeat for more stacks.
    #[arg(long = "motion")]
    pub motions: Vec<PathBuf>,
    /// Reference motion, one per `--motion`.
    #[arg(long = "truth-motion")]
    pub truth_motion: Vec<PathBuf>,
    /// Reconstructed volume.
    #[arg(long)]
    pub volume: Option<PathBuf>,
    /// Reference volume for volume PSNR.
    #[arg(long)]
    pub truth_volume: Option<PathBuf>,
    /// Voxel mask for volume PSNR (nonzero = included).
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Acquired stacks, one per `--motion`. With `--volume`, slice PSNR of
    /// the volume re-sliced under the estimated motion is reported.
    #[arg(long = "stack")]
    pub stacks: Vec<PathBuf>,
    #[arg(long)]
    pub stack_geometry: Option<String>,
    /// With `--stack`: score motion only at pixels brighter than this
    /// fraction of their stack's maximum.
    #[arg(long)]
    pub fg_threshold: Option<f64>,
}

#[derive(Args)]
pub struct PhantomArgs {
    /// Grid size `n` or `nx,ny,nz`.
    #[arg(long, value_parser = parse_dims, default_value = "64")]
    pub dims: Dims,
    #[arg(long, default_value_t = 12)]
    pub blobs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_dims(s: &str) -> Result<Dims, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n] => Ok([n; 3]),
        [x, y, z] => Ok([x, y, z]),
        _ => Err("expected n or nx,ny,nz".into()),
    }
}

/// Error reported as `{"error": {"kind": ..., "message": ...}}` on stderr.
#[derive(Debug)]
pub struct Failure {
    pub kind: &'static str,
    pub message: String,
}

impl Failure {
    pub fn config(message: impl Into<String>) -> Self {
        Self { kind: "config", message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self { kind: "usage", message: message.into() }
    }
}

impl From<svr_core::Error> for Failure {
    fn from(e: svr_core::Error) -> Self {
        Self { kind: e.kind(), message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self { kind: "io", message: e.to_string() }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self { kind: "json", message: e.to_string() }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Splat(a) => commands::splat(a),
        Command::Inpaint(a) => commands::inpaint(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Phantom(a) => commands::phantom(a),
        Command::Formats => {
            print!("{}", svr_core::io::FORMATS);
            Ok(())
        }
    }
}

fn report(f: &Failure) -> ExitCode {
    let obj = serde_json::json!({ "error": { "kind": f.kind, "message": f.message } });
    eprintln!("{obj}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(&Failure::usage(e.render().to_string().trim())),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&f),
    }
}
