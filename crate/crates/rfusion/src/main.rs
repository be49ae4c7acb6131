use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use rfusion::pipeline;
use rfusion_core::sensor::Preset;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    Oroville,
    ElephantButte,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Oroville => Preset::Oroville,
            PresetArg::ElephantButte => Preset::ElephantButte,
        }
    }
}

/// Robust multiresolution multispectral image fusion.
#[derive(Parser)]
#[command(name = "rfusion", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a ready-to-edit desk-scale JSON configuration.
    InitConfig {
        /// Noise/prior preset.
        #[arg(long, value_enum, default_value = "oroville")]
        preset: PresetArg,
        /// Output config path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic observation sequence plus ground truth.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (observations + manifest; truth under truth/).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dynamics network on a generated historical sequence.
    TrainDynamics {
        #[arg(long)]
        config: PathBuf,
        /// Output weights file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the filtering recursion over an observation manifest.
    Fuse {
        #[arg(long)]
        config: PathBuf,
        /// Observation manifest (JSON).
        #[arg(long)]
        manifest: PathBuf,
        /// Dynamics weights (overrides the config's dynamics.weights).
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Output directory for mean/variance rasters and outliers.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare fused estimates against ground truth.
    Evaluate {
        /// Directory with fused results (manifest.json + rasters).
        #[arg(long)]
        est: PathBuf,
        /// Directory with ground-truth rasters (manifest.json + rasters).
        #[arg(long)]
        truth: PathBuf,
        /// Output metrics.csv path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one band of a raster as a 16-bit PGM preview.
    ExportPgm {
        /// Input RFR1 raster.
        #[arg(long)]
        input: PathBuf,
        /// Band index.
        #[arg(long, default_value_t = 0)]
        band: usize,
        /// Output PGM path (a .pgm.json sidecar records the scale).
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version are not errors
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.command {
        Command::InitConfig { preset, out } => pipeline::init_config(preset.into(), &out),
        Command::Simulate { config, out } => pipeline::simulate(&config, &out),
        Command::TrainDynamics { config, out } => pipeline::train_dynamics(&config, &out),
        Command::Fuse { config, manifest, weights, out } => {
            pipeline::fuse(&config, &manifest, weights.as_deref(), &out)
        }
        Command::Evaluate { est, truth, out } => pipeline::evaluate(&est, &truth, &out),
        Command::ExportPgm { input, band, out } => pipeline::export_pgm(&input, band, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
