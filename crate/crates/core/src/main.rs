use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gemtrans_core::harness::commands::{CHECKPOINT_FILE, CONFIG_FILE};
use gemtrans_core::harness::{
    cmd_ablate, cmd_eval, cmd_explain, cmd_gradcheck, cmd_train, GradcheckOptions, RunConfig,
};
use gemtrans_core::model::Task;
use gemtrans_core::Result;

#[derive(Parser)]
#[command(
    name = "gemtrans",
    version,
    about = "Multi-level video transformer on synthetic echo-like tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// key = value run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, history and metrics
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file; its config.txt is used unless --config is given
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export attention maps and prototype matches for samples
    Explain {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file; its config.txt is used unless --config is given
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample ids, e.g. ef-test-00003
        #[arg(required = true)]
        samples: Vec<String>,
    },
    /// Full vs no-spatial vs no-temporal supervision on the EF task
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of the EF and AS objectives on a tiny model
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        h: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Perturb this parameter's analytic gradient (self-test)
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

/// Reads `--config`, or `config.txt` next to the checkpoint, or defaults.
fn run_config(common: &Common, checkpoint: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, checkpoint) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(ck)) => {
            let beside = ck.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
            if beside.exists() {
                RunConfig::load(&beside)?
            } else {
                RunConfig::new(Task::Ef)
            }
        }
        (None, None) => RunConfig::new(Task::Ef),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common } => {
            let cfg = run_config(&common, None)?;
            let report = cmd_train(&cfg, &common.out)?;
            println!("{}", json(&report.test)?);
            eprintln!("wrote {}", common.out.join(CHECKPOINT_FILE).display());
        }
        Command::Eval { common, checkpoint } => {
            let cfg = run_config(&common, Some(&checkpoint))?;
            let report = cmd_eval(&checkpoint, &cfg, Some(&common.out))?;
            println!("{}", json(&report)?);
        }
        Command::Explain {
            common,
            checkpoint,
            samples,
        } => {
            let cfg = run_config(&common, Some(&checkpoint))?;
            for p in cmd_explain(&checkpoint, &cfg, &samples, &common.out)? {
                println!("{}", p.display());
            }
        }
        Command::Ablate { common } => {
            let cfg = run_config(&common, None)?;
            let report = cmd_ablate(&cfg, Some(&common.out))?;
            print!("{}", report.to_table());
        }
        Command::Gradcheck {
            common,
            h,
            tol,
            corrupt,
        } => {
            let opts = GradcheckOptions {
                h,
                tol,
                seed: common.seed.unwrap_or(0),
                corrupt,
                ..GradcheckOptions::default()
            };
            let summary = cmd_gradcheck(&opts)?;
            print!("{}", summary.to_text());
            std::fs::create_dir_all(&common.out)?;
            std::fs::write(common.out.join("gradcheck.json"), json(&summary)? + "\n")?;
            return Ok(summary.passed);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors count as validation failures
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
