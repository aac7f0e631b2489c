//! Operator entry point for the dataset pipeline: forge scenes, augment
//! subject counts, select plans, evaluate outputs, report stats, validate
//! manifests.
//!
//! Exit codes: 0 success, 1 domain failure, 2 usage or configuration error.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use commands::EXIT_USAGE;
use config::{BackendMode, RunConfig};
use subjectforge_core::forge::FaultProfile;

#[derive(Parser)]
#[command(name = "subjectforge", version, about = "Multi-subject dataset construction pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full scene pipeline and write a dataset manifest.
    Forge(ForgeArgs),
    /// Derive reduced-subject records from an existing manifest.
    Augment(AugmentArgs),
    /// Best-of-N planning branch selection.
    Select(SelectArgs),
    /// Embedding-based metrics over an evaluation manifest.
    Eval(EvalArgs),
    /// Render a stats file as the per-stage failure table.
    Stats(StatsArgs),
    /// Re-check every record invariant of a manifest.
    Validate(ValidateArgs),
}

/// Shared configuration knobs. Precedence: flag > config file > default.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// Flat TOML config file mirroring the configuration field names.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    vocabulary: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_min: Option<u32>,
    #[arg(long)]
    n_max: Option<u32>,
    #[arg(long)]
    delta: Option<f64>,
    /// Patch grid side (the layout is m x m cells).
    #[arg(long)]
    m: Option<u32>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    complex_prob: Option<f64>,
    #[arg(long)]
    with_ids_ratio: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Backend mode: mock or live.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    mock_image_size: Option<u32>,
    #[arg(long)]
    cot_min_words: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, String> {
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("config {}: {e}", path.display()))?;
            config.apply_file(&text)?;
        }
        if let Some(v) = &self.vocabulary {
            config.vocabulary_path = v.clone();
        }
        if let Some(v) = &self.out {
            config.output_root = v.clone();
        }
        if let Some(v) = self.seed {
            config.global_seed = v;
        }
        if let Some(v) = self.n_min {
            config.n_min = v;
        }
        if let Some(v) = self.n_max {
            config.n_max = v;
        }
        if let Some(v) = self.delta {
            config.delta = v;
        }
        if let Some(v) = self.m {
            config.m = v;
        }
        if let Some(v) = self.lambda {
            config.lambda = v;
        }
        if let Some(v) = self.complex_prob {
            config.complex_prob = v;
        }
        if let Some(v) = self.with_ids_ratio {
            config.with_ids_ratio = v;
        }
        if let Some(v) = self.workers {
            config.workers = v;
        }
        if let Some(v) = &self.backend {
            config.backend = BackendMode::parse(v)?;
        }
        if let Some(v) = self.mock_image_size {
            config.mock_image_size = v;
        }
        if let Some(v) = self.cot_min_words {
            config.cot_min_words = Some(v);
        }
        Ok(config)
    }
}

#[derive(Args)]
struct ForgeArgs {
    /// Number of scenes to process.
    #[arg(long)]
    scenes: u64,
    #[command(flatten)]
    config: ConfigArgs,
    /// One JSON object per scene event on stderr.
    #[arg(long)]
    log_json: bool,
    /// Injected per-stage failure probabilities, for accounting runs.
    #[arg(long)]
    fault_t2i: Option<f64>,
    #[arg(long)]
    fault_ovd: Option<f64>,
    #[arg(long)]
    fault_vlm: Option<f64>,
    #[arg(long)]
    fault_seg: Option<f64>,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out_manifest: Option<PathBuf>,
    /// Leave the chain-of-thought untouched; rewrite only the instruction.
    #[arg(long)]
    instruction_only: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct SelectArgs {
    /// Number of planning branches.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    instruction: PathBuf,
    #[arg(long)]
    subjects: PathBuf,
    /// Output directory for realized candidates.
    #[arg(long, default_value = "select_out")]
    out_dir: PathBuf,
    /// Category labels, comma-separated; defaults to subject file stems.
    #[arg(long, value_delimiter = ',')]
    categories: Option<Vec<String>>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Evaluation manifest: JSONL of
    /// {generated, references[], instruction, subject_count}.
    #[arg(long)]
    manifest: PathBuf,
    /// Write the report JSON here as well.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct StatsArgs {
    /// stats.json written by forge.
    #[arg(long)]
    stats: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    manifest: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Forge(args) => match args.config.resolve() {
            Ok(mut config) => {
                if args.fault_t2i.is_some()
                    || args.fault_ovd.is_some()
                    || args.fault_vlm.is_some()
                    || args.fault_seg.is_some()
                {
                    config.fault = Some(FaultProfile {
                        t2i_mismatch: args.fault_t2i.unwrap_or(0.0),
                        ovd_verify: args.fault_ovd.unwrap_or(0.0),
                        vlm_validation: args.fault_vlm.unwrap_or(0.0),
                        segmentation: args.fault_seg.unwrap_or(0.0),
                    });
                }
                commands::cmd_forge(&config, args.scenes, args.log_json)
            }
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_USAGE
            }
        },
        Command::Augment(args) => commands::cmd_augment(
            &args.manifest,
            args.out_manifest.as_deref(),
            !args.instruction_only,
        ),
        Command::Select(args) => match args.config.resolve() {
            Ok(config) => commands::cmd_select(
                &config,
                args.n,
                config.global_seed,
                &args.instruction,
                &args.subjects,
                &args.out_dir,
                args.categories.clone(),
            ),
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_USAGE
            }
        },
        Command::Eval(args) => match args.config.resolve() {
            Ok(config) => commands::cmd_eval(&config, &args.manifest, args.report.as_deref()),
            Err(e) => {
                eprintln!("error: {e}");
                EXIT_USAGE
            }
        },
        Command::Stats(args) => commands::cmd_stats(&args.stats),
        Command::Validate(args) => commands::cmd_validate(&args.manifest),
    };
    std::process::exit(code);
}
