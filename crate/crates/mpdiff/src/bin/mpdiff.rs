//! Thin command-line front end; all behavior lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mpdiff::cli::{
    cmd_evaluate, cmd_gen_data, cmd_sample, cmd_theory_check, cmd_train, cmd_uq, ExperimentConfig,
    MethodTag,
};
use mpdiff::error::Error;

#[derive(Parser)]
#[command(name = "mpdiff", version, about = "Multi-fidelity physics-guided diffusion for 2D fields")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset (fields, index, manifest).
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the denoiser on the train split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Conditioning variant: `c1` (default) or `s-ddim`.
        #[arg(long, default_value = "c1")]
        method: String,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Reverse-sample records from a checkpoint.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// 1 = cheap conditioning only, 2 = add expensive-simulation guidance.
        #[arg(long, default_value_t = 1)]
        choice: u8,
        /// Comma-separated record ids (defaults to the whole test split).
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the full reverse trajectory per record.
        #[arg(long)]
        dump_trajectory: bool,
    },
    /// Score samples against ground truth and write CSV/JSON reports.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Ensemble uncertainty for one record.
    Uq {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value_t = 1)]
        choice: u8,
    },
    /// Analytic sampling checks with exact scores.
    TheoryCheck {
        #[arg(long)]
        config: PathBuf,
    },
}

fn run() -> Result<(), Error> {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap's own help/version output is not an error
            if e.use_stderr() {
                return Err(Error::RejectedInput(e.to_string()));
            }
            print!("{e}");
            return Ok(());
        }
    };
    match cli.command {
        Command::GenData { config } => {
            let (cfg, hash) = ExperimentConfig::load(&config)?;
            let dir = cmd_gen_data(&cfg, &hash)?;
            println!("dataset written to {}", dir.display());
        }
        Command::Train { config, method, resume } => {
            let (cfg, hash) = ExperimentConfig::load(&config)?;
            let tag = MethodTag::parse(&method)?;
            let ck = cmd_train(&cfg, &hash, tag, resume.as_deref())?;
            println!("checkpoint written to {}", ck.display());
        }
        Command::Sample { config, checkpoint, choice, ids, out, dump_trajectory } => {
            let (cfg, hash) = ExperimentConfig::load(&config)?;
            let written =
                cmd_sample(&cfg, &hash, &checkpoint, choice, &ids, out.as_deref(), dump_trajectory)?;
            for path in written {
                println!("{}", path.display());
            }
        }
        Command::Evaluate { config, samples, dataset } => {
            let (cfg, hash) = ExperimentConfig::load(&config)?;
            let (csv, summary) = cmd_evaluate(&cfg, &hash, samples.as_deref(), dataset.as_deref())?;
            println!("report written to {}", csv.display());
            for (tag, m) in &summary.methods {
                println!("{tag}: mse {:.6} ssim {:.4}", m.mse.mean, m.ssim.mean);
            }
            if let Some(ordering) = summary.mse_ordering_holds {
                println!("mse ordering c2 <= c1 <= s-ddim: {ordering}");
            }
        }
        Command::Uq { config, checkpoint, id, choice } => {
            let (cfg, hash) = ExperimentConfig::load(&config)?;
            let (mean, std) = cmd_uq(&cfg, &hash, &checkpoint, &id, choice)?;
            println!("{}", mean.display());
            println!("{}", std.display());
        }
        Command::TheoryCheck { config } => {
            let (cfg, hash) = ExperimentConfig::load(&config)?;
            let report = cmd_theory_check(&cfg, &hash)?;
            for c in &report.checks {
                let verdict = if c.pass { "pass" } else { "FAIL" };
                println!(
                    "{verdict}  {}  W2 = {:.4} ({} {:.2})",
                    c.name,
                    c.w2,
                    if c.expect_within { "<=" } else { ">" },
                    c.threshold
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
