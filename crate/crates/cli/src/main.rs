//! `flowattn`: command-line surface over the flow / trajectory / pipeline /
//! metrics modules.
//!
//! Exit codes: 0 success, 1 validation or metric failure, 2 usage or
//! configuration error. Every command with a fixed seed and fixed inputs is
//! byte-deterministic in its outputs, and every command that writes files
//! persists its resolved run configuration alongside them.

mod commands;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

use commands::Failure;

#[derive(Parser)]
#[command(
    name = "flowattn",
    version,
    about = "Optical-flow-guided attention video editing toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate, convert, downsample, or perturb .flo displacement fields.
    #[command(subcommand)]
    Flow(FlowCmd),
    /// Sample, validate, or visualize patch trajectories.
    #[command(subcommand)]
    Traj(TrajCmd),
    /// DDIM inversion, editing, and the reconstruction experiment.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Warping error, edit score, PSNR, and SSIM over frame sequences.
    Metrics(MetricsArgs),
}

#[derive(Subcommand)]
enum FlowCmd {
    /// Synthesize an analytic displacement field.
    Gen(FlowGenArgs),
    /// Convert a field between .flo and JSON (direction from extensions).
    Convert(FlowConvertArgs),
    /// Block-mean downsample a field by an integer factor.
    Downsample(FlowDownsampleArgs),
    /// Add seeded Gaussian noise to every component.
    Noise(FlowNoiseArgs),
}

#[derive(Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum KindArg {
    Constant,
    Rotation,
    Zoom,
}

#[derive(Args, Serialize)]
struct FlowGenArgs {
    /// Motion pattern.
    #[arg(long, value_enum)]
    kind: KindArg,
    /// Horizontal displacement (constant motion).
    #[arg(long, default_value_t = 0.0)]
    dx: f64,
    /// Vertical displacement (constant motion).
    #[arg(long, default_value_t = 0.0)]
    dy: f64,
    /// Rotation angle in radians (rotation motion).
    #[arg(long, default_value_t = 0.0)]
    angle: f64,
    /// Radial scale factor (zoom motion).
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    /// Motion center x; defaults to the grid center.
    #[arg(long)]
    cx: Option<f64>,
    /// Motion center y; defaults to the grid center.
    #[arg(long)]
    cy: Option<f64>,
    /// Field width in cells.
    #[arg(long)]
    w: usize,
    /// Field height in cells.
    #[arg(long)]
    h: usize,
    /// Output .flo path; defaults to flow.flo in the default output dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct FlowConvertArgs {
    /// Input field (.flo or .json).
    input: PathBuf,
    /// Output field (.json or .flo).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct FlowDownsampleArgs {
    /// Input .flo path.
    input: PathBuf,
    /// Block size; width and height must divide by it.
    #[arg(long)]
    factor: usize,
    /// Output .flo path; defaults next to the input.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct FlowNoiseArgs {
    /// Input .flo path.
    input: PathBuf,
    /// Noise standard deviation; zero copies the input bit-for-bit.
    #[arg(long)]
    sigma: f64,
    /// RNG seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output .flo path; defaults next to the input.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TrajCmd {
    /// Partition the patch grid into trajectories along a flow sequence.
    Sample(TrajSampleArgs),
    /// Check that a trajectory set covers its grid exactly once.
    Check(TrajCheckArgs),
    /// Render a sample of trajectories as dots, one image per frame.
    Viz(TrajVizArgs),
}

#[derive(Args, Serialize)]
struct TrajSampleArgs {
    /// Flow fields between consecutive frames, in order (.flo).
    #[arg(num_args = 1.., required = true)]
    flows: Vec<PathBuf>,
    /// Seed for occlusion tie-breaking.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output trajectory JSON; defaults to traj.json in the output dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TrajCheckArgs {
    /// Trajectory set JSON.
    input: PathBuf,
    /// Optional partition report JSON output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct TrajVizArgs {
    /// Trajectory set JSON.
    input: PathBuf,
    /// How many trajectories to draw.
    #[arg(long, default_value_t = 5)]
    samples: usize,
    /// Seed for choosing which trajectories to draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Pixels per patch cell on the blank canvas.
    #[arg(long, default_value_t = 16)]
    cell_size: usize,
    /// Optional background frames (PNG, one per video frame).
    #[arg(long, num_args = 1..)]
    background: Vec<PathBuf>,
    /// Output directory for the rendered frames.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// DDIM-invert a latent video, recording the injection cache.
    Invert(PipelineInvertArgs),
    /// Sample from an inverted latent with feature injection.
    Edit(PipelineEditArgs),
    /// Invert and reconstruct with trajectory attention on vs off.
    Reconstruct(PipelineReconstructArgs),
}

#[derive(Clone, Copy, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum FlattenArg {
    On,
    Off,
}

#[derive(Args, Serialize)]
struct PipelineInvertArgs {
    /// Source latent blob (.bin with JSON sidecar).
    #[arg(long)]
    latent: PathBuf,
    /// Trajectory set JSON matching the latent grid.
    #[arg(long)]
    traj: PathBuf,
    /// Pipeline configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Force trajectory attention on or off in both phases.
    #[arg(long, value_enum)]
    flatten: Option<FlattenArg>,
    /// Output directory (inverted latent, cache, resolved config).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct PipelineEditArgs {
    /// Inverted latent blob (.bin with JSON sidecar).
    #[arg(long)]
    latent: PathBuf,
    /// Trajectory set JSON matching the latent grid.
    #[arg(long)]
    traj: PathBuf,
    /// Injection cache directory recorded by `pipeline invert`.
    #[arg(long)]
    cache: PathBuf,
    /// Pipeline configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Force trajectory attention on or off in both phases.
    #[arg(long, value_enum)]
    flatten: Option<FlattenArg>,
    /// Output directory (edited latent, resolved config).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct PipelineReconstructArgs {
    /// Source latent blob (.bin with JSON sidecar).
    #[arg(long)]
    latent: PathBuf,
    /// Trajectory set JSON matching the latent grid.
    #[arg(long)]
    traj: PathBuf,
    /// Pipeline configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Recorded in the run configuration; the experiment always reports
    /// both the flatten-on and flatten-off variants.
    #[arg(long, value_enum)]
    flatten: Option<FlattenArg>,
    /// Output directory (reconstruction report, resolved config).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct MetricsArgs {
    /// Frame sequence (PNG, in order).
    #[arg(long, num_args = 1.., required = true)]
    frames: Vec<PathBuf>,
    /// Flow fields between consecutive frames (.flo, in order).
    #[arg(long, num_args = 1.., required = true)]
    flows: Vec<PathBuf>,
    /// Reference frames for PSNR/SSIM (PNG, same shape as --frames).
    #[arg(long = "ref", num_args = 1..)]
    reference: Vec<PathBuf>,
    /// Externally measured CLIP-T (x100); enables the edit score.
    #[arg(long)]
    clip_t: Option<f64>,
    /// Output report JSON; defaults to metric_report.json in the output dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Flow(FlowCmd::Gen(args)) => commands::flow_gen(args),
        Command::Flow(FlowCmd::Convert(args)) => commands::flow_convert(args),
        Command::Flow(FlowCmd::Downsample(args)) => commands::flow_downsample(args),
        Command::Flow(FlowCmd::Noise(args)) => commands::flow_noise(args),
        Command::Traj(TrajCmd::Sample(args)) => commands::traj_sample(args),
        Command::Traj(TrajCmd::Check(args)) => commands::traj_check(args),
        Command::Traj(TrajCmd::Viz(args)) => commands::traj_viz(args),
        Command::Pipeline(PipelineCmd::Invert(args)) => commands::pipeline_invert(args),
        Command::Pipeline(PipelineCmd::Edit(args)) => commands::pipeline_edit(args),
        Command::Pipeline(PipelineCmd::Reconstruct(args)) => commands::pipeline_reconstruct(args),
        Command::Metrics(args) => commands::metrics(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
