//! Command-line driver: one subcommand per pipeline stage, all reading the
//! same TOML run file and writing versioned artifacts to one directory.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use uapscan::attacks::AttackKind;

pub use commands::run;
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "uapscan",
    version,
    about = "Universal adversarial perturbations and their detection"
)]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "uapscan.toml")]
    pub config: PathBuf,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Dataset directory; overrides `data.root` and the environment.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the classifier and write `model.uaps`.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fit activation baselines on the clean baseline sample.
    Baseline,
    /// Generate every configured perturbation of one kind.
    Attack {
        kind: KindArg,
        /// Only the attack with this name.
        #[arg(long)]
        name: Option<String>,
        /// Mask budget on the 0-255 scale.
        #[arg(long)]
        epsilon: Option<f32>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Pick tap, aggregation and percentile, then set the threshold.
    Calibrate {
        /// Only the detector with this name.
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        fp_rate: Option<f64>,
    },
    /// Flag rates of the calibrated detectors on a split.
    Detect {
        #[arg(long, value_enum, default_value_t = SplitArg::Validation)]
        split: SplitArg,
        /// Apply this configured perturbation first.
        #[arg(long)]
        perturbation: Option<String>,
    },
    /// UER, TSR, AUC, ASR and CP of perturbations on the test split.
    Evaluate {
        /// Attacks to evaluate; all configured attacks when omitted.
        #[arg(long = "attack")]
        attacks: Vec<String>,
        /// Skip detectors and report universality only.
        #[arg(long)]
        no_detectors: bool,
    },
    /// Latency of plain and defended inference.
    Bench {
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// Collect evaluation reports into `reports/sweep.csv`.
    Report {
        /// Detector whose AUC fills the table; the first one when omitted.
        #[arg(long)]
        detector: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    SgdUap,
    SgdLayer,
    Perlin,
    EotPatch,
    BaselineFeature,
    RandomSign,
}

impl From<KindArg> for AttackKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::SgdUap => AttackKind::SgdUap,
            KindArg::SgdLayer => AttackKind::SgdLayer,
            KindArg::Perlin => AttackKind::Perlin,
            KindArg::EotPatch => AttackKind::EotPatch,
            KindArg::BaselineFeature => AttackKind::BaselineFeature,
            KindArg::RandomSign => AttackKind::RandomSign,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Validation,
    Test,
}
