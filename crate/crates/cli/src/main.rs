mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use atlasforge::registration::Model;
use atlasforge::ErrorClass;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Multi-atlas RV segmentation of 2D cardiac slices.
#[derive(Parser, Debug)]
#[command(name = "atlasforge", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub global: Global,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Seed for every random choice.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Repeat for more log output (ATLASFORGE_LOG overrides).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

/// Flags that override fields of the pipeline configuration.
#[derive(Args, Debug, Clone, Default)]
pub struct Overrides {
    #[arg(long, value_enum)]
    pub phase2_model: Option<ModelArg>,
    #[arg(long)]
    pub top_fraction: Option<f64>,
    #[arg(long)]
    pub local_n: Option<usize>,
    #[arg(long)]
    pub mrf_beta: Option<f64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelArg {
    Rigid,
    Affine,
}

impl From<ModelArg> for Model {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Rigid => Model::Rigid,
            ModelArg::Affine => Model::Affine,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegisterModel {
    Rigid,
    Affine,
    /// Affine followed by a B-spline free-form deformation.
    Ffd,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FuseMethod {
    Majority,
    Staple,
    StepsGlobal,
    StepsLocal,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the three-phase pipeline on one or more cases.
    Segment {
        #[arg(long)]
        atlases: Option<PathBuf>,
        #[arg(long = "case")]
        cases: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Register one image pair and write the transform.
    Register {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        moving_labels: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "affine")]
        model: RegisterModel,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse a stack of label maps.
    Fuse {
        #[arg(long = "labels", num_args = 1.., required = true)]
        labels: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "majority")]
        method: FuseMethod,
        /// Target image, needed by the STEPS methods.
        #[arg(long)]
        target: Option<PathBuf>,
        /// Warped atlas images matching `--labels`, needed by STEPS.
        #[arg(long = "images", num_args = 1..)]
        images: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score predictions written by `segment` against case truths.
    Evaluate {
        #[arg(long = "case", required = true)]
        cases: Vec<PathBuf>,
        /// Output directory of `segment`.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic cohort with manifests.
    Phantom {
        /// Number of atlas subjects.
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        cases: usize,
        #[arg(long, default_value_t = 1)]
        slices: usize,
        /// Largest true warp of the test cases, px.
        #[arg(long)]
        warp_max: Option<f64>,
        /// 64x64 phantoms instead of 128x128.
        #[arg(long)]
        small: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check manifests, rasters, transforms, configs and reports.
    Validate {
        paths: Vec<PathBuf>,
        #[arg(long)]
        atlases: Option<PathBuf>,
        #[arg(long = "case")]
        cases: Vec<PathBuf>,
    },
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ATLASFORGE_LOG", default))
        .format_timestamp(None)
        .init();
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Io => 3,
        ErrorClass::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match commands::load_run_config(&cli.global) {
        Ok(rc) => {
            init_logging(cli.global.verbose.max(rc.verbose));
            let run = || commands::run(&cli, &rc);
            match cli.global.jobs.or(rc.jobs) {
                Some(0) => Err(commands::config_error("--jobs must be >= 1")),
                Some(n) => commands::with_workers(n, run),
                None => run(),
            }
        }
        Err(e) => Err(e),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("atlasforge: {e:#}");
            let class = e
                .downcast_ref::<atlasforge::Error>()
                .map_or(ErrorClass::Config, atlasforge::Error::class);
            ExitCode::from(exit_code(class))
        }
    }
}
