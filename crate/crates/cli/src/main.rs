use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fetcheck::audit::{cmd_audit, cmd_render, cmd_synth, cmd_train, AuditConfig, Stage};
use fetcheck::models::AdapterRegistry;
use fetcheck::{Error, ErrorClass};

/// Audit charge-prediction models for selectivity, sensitivity and the
/// presumption of innocence.
#[derive(Parser)]
#[command(name = "fetcheck", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML audit configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Probe,
    Perturb,
    Ablate,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::Probe => Stage::Probe,
            StageArg::Perturb => Stage::Perturb,
            StageArg::Ablate => Stage::Ablate,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Synth(Common),
    /// Train the configured models and write bundles plus test metrics.
    Train(Common),
    /// Probe, perturb and ablate trained bundles.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long = "bundle", required = true)]
        bundles: Vec<PathBuf>,
        /// Run only these stages (repeatable).
        #[arg(long = "stage", value_enum)]
        stages: Vec<StageArg>,
    },
    /// Render tables and figure data from an audit directory.
    Render {
        dir: PathBuf,
    },
}

fn config(common: &Common) -> Result<AuditConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => AuditConfig::load(path)?,
        None => AuditConfig::default(),
    };
    if common.seed.is_some() {
        cfg.seed = common.seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Synth(common) => {
            let summary = cmd_synth(&config(&common)?, &common.out)?;
            print!("{summary}");
            for f in &summary.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Train(common) => {
            let outcomes = cmd_train(&config(&common)?, &common.out)?;
            println!("{:<14} {:>7} {:>7} {:>7} {:>7}", "model", "Acc", "F1", "P", "R");
            for o in &outcomes {
                let m = &o.metrics;
                println!(
                    "{:<14} {:>7.1} {:>7.1} {:>7.1} {:>7.1}",
                    m.model,
                    100.0 * m.accuracy,
                    100.0 * m.f1,
                    100.0 * m.precision,
                    100.0 * m.recall
                );
            }
            for o in &outcomes {
                println!("wrote {}", o.bundle.display());
            }
        }
        Command::Audit { common, bundles, stages } => {
            let stages: Vec<Stage> = stages.into_iter().map(Stage::from).collect();
            let summary = cmd_audit(
                &config(&common)?,
                &bundles,
                &stages,
                &common.out,
                &AdapterRegistry::default(),
            )?;
            let done: Vec<String> = summary.manifest.completed.iter().map(Stage::to_string).collect();
            println!("audited {} into {} ({})", summary.manifest.models.join(", "), summary.dir.display(), done.join(", "));
        }
        Command::Render { dir } => {
            let rendered = cmd_render(&dir)?;
            print!("{}", rendered.tables);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Pipeline => 4,
            })
        }
    }
}
