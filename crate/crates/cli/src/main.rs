//! `hdmi-lab`: train on a synthetic source domain, adapt on the shifted
//! target without its labels, and measure what happened.
//!
//! Exit codes: 0 success (including `--help` / `--version`), 1 validation
//! or configuration error, 2 IO error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hdmi_lab_cli::commands;
use hdmi_lab_cli::config::{self, Overrides, ResolvedConfig};
use hdmi_lab_cli::sweep::{self, SweepSpec};

#[derive(Parser)]
#[command(
    name = "hdmi-lab",
    version,
    about = "Source-free hypothesis transfer on synthetic covariate shifts"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every subcommand. Resolution order: preset defaults,
/// then the config file, then these flags. Every flag mirrors a config-file
/// key of the same (snake_case) name.
#[derive(Args, Clone, Debug, Default)]
struct CommonFlags {
    /// Preset to start from: desk | blobs
    #[arg(long)]
    preset: Option<String>,
    /// Flat `key = value` config file applied over the preset
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Dataset family: two_moons | gauss_blobs
    #[arg(long)]
    generator: Option<String>,
    /// Number of source samples
    #[arg(long)]
    n_source: Option<usize>,
    /// Number of target samples
    #[arg(long)]
    n_target: Option<usize>,
    /// Per-coordinate Gaussian noise of the generator
    #[arg(long, allow_negative_numbers = true)]
    noise_sd: Option<f64>,
    /// Covariate-shift family: rotation | affine
    #[arg(long)]
    shift: Option<String>,
    /// Rotation angle in degrees (shift = rotation)
    #[arg(long, allow_negative_numbers = true)]
    rotation_deg: Option<f64>,
    /// Comma-separated translation vector (shift = affine)
    #[arg(long, allow_hyphen_values = true)]
    translation: Option<String>,
    /// Multiplicative scale (shift = affine)
    #[arg(long, allow_negative_numbers = true)]
    scale: Option<f64>,
    /// Number of classes
    #[arg(long)]
    k: Option<usize>,
    /// Number of hypotheses
    #[arg(long)]
    m: Option<usize>,
    /// Hypothesis construction: ic | mc
    #[arg(long)]
    variant: Option<String>,
    /// Dropout rate of the classifier hidden layer
    #[arg(long, allow_negative_numbers = true)]
    dropout_rate: Option<f64>,

    /// Source-training steps
    #[arg(long)]
    source_steps: Option<usize>,
    /// Source-training batch size
    #[arg(long)]
    source_batch_size: Option<usize>,
    /// Source-training learning rate
    #[arg(long, allow_negative_numbers = true)]
    source_lr: Option<f64>,
    /// Source-training momentum
    #[arg(long, allow_negative_numbers = true)]
    source_momentum: Option<f64>,
    /// Source-training Nesterov flag
    #[arg(long, value_name = "BOOL")]
    source_nesterov: Option<bool>,
    /// Source-training weight decay
    #[arg(long, allow_negative_numbers = true)]
    source_weight_decay: Option<f64>,
    /// Source-phase extractor learning-rate multiplier
    #[arg(long, allow_negative_numbers = true)]
    source_extractor_lr_multiplier: Option<f64>,
    /// Train-mode dropout during source loss passes
    #[arg(long, value_name = "BOOL")]
    source_train_dropout: Option<bool>,
    /// Source-training evaluation interval
    #[arg(long)]
    source_eval_every: Option<usize>,

    /// Adaptation objective: hdmi | mi_ensemble | mi_single | hd_only |
    /// cond_entropy_hd | mi_l2 | mi_l2_source | source_only
    #[arg(long)]
    objective: Option<String>,
    /// Disparity / penalty weight λ
    #[arg(long, allow_negative_numbers = true)]
    lambda: Option<f64>,
    /// Disparity divergence: cross_entropy | kl
    #[arg(long)]
    divergence: Option<String>,
    /// Disparity reduction over pairs: mean | sum
    #[arg(long)]
    reduction: Option<String>,
    /// Anchor policy: random | a fixed head index
    #[arg(long)]
    anchor: Option<String>,
    /// Adaptation steps
    #[arg(long)]
    steps: Option<usize>,
    /// Adaptation batch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adaptation learning rate
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
    /// Adaptation momentum
    #[arg(long, allow_negative_numbers = true)]
    momentum: Option<f64>,
    /// Adaptation Nesterov flag
    #[arg(long, value_name = "BOOL")]
    nesterov: Option<bool>,
    /// Adaptation weight decay
    #[arg(long, allow_negative_numbers = true)]
    weight_decay: Option<f64>,
    /// Adaptation-phase extractor learning-rate multiplier
    #[arg(long, allow_negative_numbers = true)]
    extractor_lr_multiplier: Option<f64>,
    /// Freeze classifier heads during adaptation
    #[arg(long, value_name = "BOOL")]
    freeze_classifiers: Option<bool>,
    /// Share one extractor across heads during adaptation
    #[arg(long, value_name = "BOOL")]
    shared_extractor: Option<bool>,
    /// Train-mode dropout during adaptation loss passes
    #[arg(long, value_name = "BOOL")]
    train_dropout: Option<bool>,
    /// Adaptation evaluation interval
    #[arg(long)]
    eval_every: Option<usize>,

    /// Master seed; data, source, and adaptation streams derive from it
    #[arg(long)]
    seed: Option<u64>,
    /// Output root directory (default: $HDMI_LAB_OUT or ./runs)
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonFlags {
    fn overrides(&self) -> Overrides {
        Overrides {
            generator: self.generator.clone(),
            n_source: self.n_source,
            n_target: self.n_target,
            noise_sd: self.noise_sd,
            shift: self.shift.clone(),
            rotation_deg: self.rotation_deg,
            translation: self.translation.clone(),
            scale: self.scale,
            k: self.k,
            m: self.m,
            variant: self.variant.clone(),
            dropout_rate: self.dropout_rate,
            source_steps: self.source_steps,
            source_batch_size: self.source_batch_size,
            source_lr: self.source_lr,
            source_momentum: self.source_momentum,
            source_nesterov: self.source_nesterov,
            source_weight_decay: self.source_weight_decay,
            source_extractor_lr_multiplier: self.source_extractor_lr_multiplier,
            source_train_dropout: self.source_train_dropout,
            source_eval_every: self.source_eval_every,
            objective: self.objective.clone(),
            lambda: self.lambda,
            divergence: self.divergence.clone(),
            reduction: self.reduction.clone(),
            anchor: self.anchor.clone(),
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            nesterov: self.nesterov,
            weight_decay: self.weight_decay,
            extractor_lr_multiplier: self.extractor_lr_multiplier,
            freeze_classifiers: self.freeze_classifiers,
            shared_extractor: self.shared_extractor,
            train_dropout: self.train_dropout,
            eval_every: self.eval_every,
            seed: self.seed,
            out: self.out.clone(),
        }
    }

    fn resolve(&self) -> hdmi_lab::Result<ResolvedConfig> {
        config::resolve(
            self.preset.as_deref(),
            self.config.as_deref(),
            &self.overrides(),
        )
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a source/target dataset pair and write it as CSV
    Gen {
        #[command(flatten)]
        common: CommonFlags,
        /// Directory for the dataset files (default: <out>/data_<generator>_s<seed>)
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
    },
    /// Train the source hypotheses and save a checkpoint
    TrainSource {
        #[command(flatten)]
        common: CommonFlags,
        /// Load datasets from a `gen` directory instead of regenerating
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        /// Checkpoint path to write (default: <out>/source.ckpt.json)
        #[arg(long, value_name = "FILE")]
        ckpt: Option<PathBuf>,
    },
    /// Adapt a source checkpoint on unlabeled target data
    Adapt {
        #[command(flatten)]
        common: CommonFlags,
        /// Source checkpoint to adapt (default: <out>/source.ckpt.json)
        #[arg(long, value_name = "FILE")]
        ckpt: Option<PathBuf>,
        /// Load datasets from a `gen` directory instead of regenerating
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        /// Run directory (default: <out>/<objective>_m<M>_l<λ>_s<seed>)
        #[arg(long, value_name = "DIR")]
        run_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on labeled target data
    Eval {
        #[command(flatten)]
        common: CommonFlags,
        /// Checkpoint to evaluate (default: <out>/source.ckpt.json)
        #[arg(long, value_name = "FILE")]
        ckpt: Option<PathBuf>,
        /// Load datasets from a `gen` directory instead of regenerating
        #[arg(long, value_name = "DIR")]
        data_dir: Option<PathBuf>,
        /// Report directory (default: <out>/eval_s<seed>)
        #[arg(long, value_name = "DIR")]
        run_dir: Option<PathBuf>,
    },
    /// Full pipeline: generate, train source, adapt, analyze
    Run {
        #[command(flatten)]
        common: CommonFlags,
        /// Run directory (default: <out>/<objective>_m<M>_l<λ>_s<seed>)
        #[arg(long, value_name = "DIR")]
        run_dir: Option<PathBuf>,
    },
    /// Run a (objective × M × λ × seed) grid and write summary.csv
    Sweep {
        #[command(flatten)]
        common: CommonFlags,
        /// Comma-separated objective axis (default: the resolved objective)
        #[arg(long)]
        objectives: Option<String>,
        /// Comma-separated M axis (default: the resolved M)
        #[arg(long)]
        ms: Option<String>,
        /// Comma-separated λ axis (default: the resolved λ)
        #[arg(long)]
        lambdas: Option<String>,
        /// Comma-separated seed axis (default: the resolved seed)
        #[arg(long)]
        seeds: Option<String>,
        /// Worker threads (default: all cores; ignored without the
        /// `parallel` feature)
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run the nine pinned configurations and write ablation.csv
    Ablate {
        #[command(flatten)]
        common: CommonFlags,
        /// Comma-separated seed list (default: 1,2,3,4,5)
        #[arg(long)]
        seeds: Option<String>,
        /// Worker threads (default: all cores; ignored without the
        /// `parallel` feature)
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn dispatch(cli: Cli) -> hdmi_lab::Result<()> {
    match cli.cmd {
        Cmd::Gen { common, data_dir } => {
            commands::cmd_gen(&common.resolve()?, data_dir)?;
        }
        Cmd::TrainSource {
            common,
            data_dir,
            ckpt,
        } => {
            commands::cmd_train_source(&common.resolve()?, data_dir, ckpt)?;
        }
        Cmd::Adapt {
            common,
            ckpt,
            data_dir,
            run_dir,
        } => {
            commands::cmd_adapt(&common.resolve()?, ckpt, data_dir, run_dir)?;
        }
        Cmd::Eval {
            common,
            ckpt,
            data_dir,
            run_dir,
        } => {
            commands::cmd_eval(&common.resolve()?, ckpt, data_dir, run_dir)?;
        }
        Cmd::Run { common, run_dir } => {
            commands::cmd_run(&common.resolve()?, run_dir)?;
        }
        Cmd::Sweep {
            common,
            objectives,
            ms,
            lambdas,
            seeds,
            jobs,
        } => {
            let cfg = common.resolve()?;
            let spec = SweepSpec::parse(
                &objectives.unwrap_or_else(|| cfg.objective.clone()),
                &ms.unwrap_or_else(|| cfg.pipeline.model.m.to_string()),
                &lambdas.unwrap_or_else(|| format!("{:?}", cfg.lambda)),
                &seeds.unwrap_or_else(|| cfg.pipeline.shift.seed.to_string()),
            )?;
            sweep::cmd_sweep(&cfg, &spec, jobs)?;
        }
        Cmd::Ablate {
            common,
            seeds,
            jobs,
        } => {
            let cfg = common.resolve()?;
            let seeds = sweep::parse_seed_list(seeds.as_deref().unwrap_or("1,2,3,4,5"))?;
            sweep::cmd_ablate(&cfg, &seeds, jobs)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
