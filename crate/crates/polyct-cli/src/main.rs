//! Command-line driver for the polychromatic CT toolkit.
//!
//! Subcommands cover the full workflow: simulate a metal-corrupted sinogram,
//! reconstruct with the neural field, run classical baselines, score results,
//! and export images. Every command writes a manifest capturing parameters
//! and input hashes, so reruns with the same seed reproduce outputs
//! bit-exactly. Diagnostics go to standard error; data only to files.

mod commands;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use polyct_core::Error;

#[derive(Parser)]
#[command(name = "polyct", version, about = "Polychromatic CT simulation and reconstruction")]
struct Cli {
    /// Cap the worker thread count (0 uses all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a metal-corrupted fan-beam sinogram from a preset phantom.
    Simulate(SimulateArgs),
    /// Fit the neural field to a measured sinogram and extract the image.
    Reconstruct(ReconstructArgs),
    /// Classical reconstructions for comparison.
    #[command(subcommand)]
    Baseline(BaselineCommand),
    /// Score a reconstruction against a reference image.
    Eval(EvalArgs),
    /// Export an image file as windowed 8-bit grayscale PNG.
    Png(PngArgs),
    /// Generate a source spectrum CSV.
    Spectrum(SpectrumArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Built-in experiment preset.
    #[arg(long, value_parser = ["desk64", "paper"], default_value = "desk64")]
    preset: String,
    /// Directory for the output files.
    #[arg(long)]
    out_dir: std::path::PathBuf,
    /// Seed for the noise generator.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Add Poisson counting noise to the measurements.
    #[arg(long, default_value_t = false)]
    noise: bool,
    /// Photons per ray when noise is on.
    #[arg(long, default_value_t = 2.0e7)]
    photons: f64,
    /// Number of energy levels for the simulation spectrum (defaults to the
    /// preset's training resolution).
    #[arg(long)]
    n_energies: Option<usize>,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Sinogram array file (with sidecar).
    #[arg(long)]
    sinogram: std::path::PathBuf,
    /// Geometry JSON file.
    #[arg(long)]
    geometry: std::path::PathBuf,
    /// Source spectrum CSV.
    #[arg(long)]
    spectrum: std::path::PathBuf,
    /// Metal mask array file.
    #[arg(long)]
    mask: std::path::PathBuf,
    /// Directory for the output files.
    #[arg(long)]
    out_dir: std::path::PathBuf,
    /// Preset supplying training defaults; individual flags override.
    #[arg(long, value_parser = ["desk64", "paper"], default_value = "paper")]
    preset: String,
    /// Smoothness weight lambda.
    #[arg(long)]
    lambda: Option<f64>,
    /// Optimizer steps.
    #[arg(long)]
    epochs: Option<usize>,
    /// Rays per optimizer step.
    #[arg(long)]
    batch_rays: Option<usize>,
    /// Energy channels the field emits; the spectrum is resampled to match.
    #[arg(long)]
    n_energies: Option<usize>,
    /// Energy span as "lo,hi" in keV.
    #[arg(long, value_parser = parse_range)]
    energy_range: Option<(f64, f64)>,
    /// Seed for initialization and batch sampling.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum BaselineCommand {
    /// Filtered backprojection of the sinogram as-is.
    Fbp(FbpArgs),
    /// Linear interpolation across the metal trace, then backprojection.
    Li(LiArgs),
}

#[derive(Args)]
struct FbpArgs {
    #[arg(long)]
    sinogram: std::path::PathBuf,
    #[arg(long)]
    geometry: std::path::PathBuf,
    #[arg(long)]
    out_dir: std::path::PathBuf,
    /// Ramp filter apodization.
    #[arg(long, value_parser = ["ramlak", "hann"], default_value = "ramlak")]
    window: String,
}

#[derive(Args)]
struct LiArgs {
    #[arg(long)]
    sinogram: std::path::PathBuf,
    #[arg(long)]
    geometry: std::path::PathBuf,
    /// Metal mask array file, projected to find the trace.
    #[arg(long)]
    mask: std::path::PathBuf,
    #[arg(long)]
    out_dir: std::path::PathBuf,
    #[arg(long, value_parser = ["ramlak", "hann"], default_value = "ramlak")]
    window: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Reference image array file.
    #[arg(long)]
    reference: std::path::PathBuf,
    /// Image under test.
    #[arg(long)]
    test: std::path::PathBuf,
    /// Metal mask; when given, metrics are also reported over non-metal
    /// pixels only.
    #[arg(long)]
    mask: Option<std::path::PathBuf>,
    /// Output metrics JSON path.
    #[arg(long)]
    out: std::path::PathBuf,
}

#[derive(Args)]
struct PngArgs {
    /// Input image array file.
    #[arg(long)]
    input: std::path::PathBuf,
    /// Output PNG path.
    #[arg(long)]
    out: std::path::PathBuf,
    /// Display window as "lo,hi"; lo maps to black, hi to white.
    #[arg(long, value_parser = parse_range)]
    window: (f64, f64),
}

#[derive(Args)]
struct SpectrumArgs {
    /// Spectrum family.
    #[arg(long, value_parser = ["uniform", "synthetic"], default_value = "synthetic")]
    kind: String,
    /// Number of energy levels.
    #[arg(long, default_value_t = 101)]
    n: usize,
    /// Energy span as "lo,hi" in keV.
    #[arg(long, value_parser = parse_range, default_value = "20,120")]
    range: (f64, f64),
    /// Output CSV path.
    #[arg(long)]
    out: std::path::PathBuf,
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected \"lo,hi\", got {s:?}"));
    }
    let lo = parts[0].trim().parse::<f64>().map_err(|e| format!("bad low value: {e}"))?;
    let hi = parts[1].trim().parse::<f64>().map_err(|e| format!("bad high value: {e}"))?;
    Ok((lo, hi))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()
        {
            log::error!("failed to configure {} threads: {e}", cli.threads);
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Simulate(args) => commands::simulate(args),
        Command::Reconstruct(args) => commands::reconstruct(args),
        Command::Baseline(BaselineCommand::Fbp(args)) => commands::baseline_fbp(args),
        Command::Baseline(BaselineCommand::Li(args)) => commands::baseline_li(args),
        Command::Eval(args) => commands::eval(args),
        Command::Png(args) => commands::png(args),
        Command::Spectrum(args) => commands::spectrum(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}
