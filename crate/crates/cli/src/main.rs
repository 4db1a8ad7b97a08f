use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fade_cli::commands::{cmd_ablate, cmd_erase, cmd_eval, cmd_pretrain, cmd_verify_theory};
use fade_cli::output::write_text;
use fade_cli::{Result, RunConfig};

#[derive(Parser)]
#[command(name = "fade", version, about = "Concept erasure on toy conditional diffusion models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed of the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base conditional denoiser.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Erase the concept from a pretrained checkpoint.
    Erase {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score a pretrained or erased checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pretrained reference for normalization.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Check the equilibrium identities on random or supplied pairs.
    VerifyTheory {
        /// JSON-lines file of {"p1": [...], "p0": [...]} pairs.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        tolerance: f64,
        /// Directory for theory.json; the array is also printed.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the four ablation arms from a pretrained checkpoint.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common } => {
            let cfg = load(&common)?;
            let o = cmd_pretrain(&cfg, common.out.as_deref())?;
            println!("wrote {}", o.checkpoint.display());
        }
        Command::Erase { common, checkpoint } => {
            let cfg = load(&common)?;
            let s = cmd_erase(&cfg, &checkpoint, common.out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&s).expect("serializes"));
        }
        Command::Eval {
            common,
            checkpoint,
            reference,
        } => {
            let cfg = load(&common)?;
            let r = cmd_eval(&cfg, &checkpoint, reference.as_deref(), common.out.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&r).expect("serializes"));
        }
        Command::VerifyTheory {
            pairs,
            count,
            seed,
            tolerance,
            out,
        } => {
            let reports = cmd_verify_theory(pairs.as_deref(), count, seed, tolerance)?;
            let text = serde_json::to_string_pretty(&reports).expect("serializes");
            if let Some(dir) = out {
                write_text(&dir.join("theory.json"), &text)?;
            }
            println!("{text}");
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                eprintln!("{failed} of {} reports failed", reports.len());
                return Err(fade_cli::CliError::Argument("theory checks failed".into()));
            }
        }
        Command::Ablate { common, checkpoint } => {
            let cfg = load(&common)?;
            let rows = cmd_ablate(&cfg, &checkpoint, common.out.as_deref())?;
            print!("{}", fade_cli::commands::ablation_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
