//! Command-line driver for the slow-convergence certification experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use slowavg::config::{Experiment, Overrides, RunConfig};
use slowavg::harness;
use slowavg::Error;

const EXIT_ERROR: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_CERTIFICATE: u8 = 3;

#[derive(Parser)]
#[command(name = "slowavg", version, about = "Certify slowly converging square Birkhoff averages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the slowdown construction and certify every step.
    Construct(Common),
    /// Construct, then recertify with guard digits, enumeration and sampling.
    Verify(Common),
    /// Tower independence check.
    Lemma3(Common),
    /// Defect bounds against measured defects.
    Defect(Common),
    /// Uniform deviation over a range of windows.
    Remark2(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Exact,
    Mc,
}

#[derive(Args)]
struct Common {
    /// TOML experiment description.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = "SLOWAVG_OUT")]
    out: Option<PathBuf>,
    #[arg(long, env = "SLOWAVG_SEED")]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Monte Carlo sample count.
    #[arg(long)]
    samples: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, common) = match cli.command {
        Command::Construct(c) => (Experiment::Construct, c),
        Command::Verify(c) => (Experiment::Verify, c),
        Command::Lemma3(c) => (Experiment::Lemma3, c),
        Command::Defect(c) => (Experiment::Defect, c),
        Command::Remark2(c) => (Experiment::Remark2, c),
    };
    let overrides = Overrides {
        experiment: Some(experiment),
        out: common.out,
        seed: common.seed,
        mode: common.mode.map(|m| match m {
            ModeArg::Exact => "exact".to_string(),
            ModeArg::Mc => "mc".to_string(),
        }),
        samples: common.samples,
    };
    let cfg = match RunConfig::load(&common.config, &overrides) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    match harness::run(&cfg) {
        Ok(outcome) => {
            print!("{}", outcome.summary);
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_CERTIFICATE)
            }
        }
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config { .. } => ExitCode::from(EXIT_CONFIG),
        Error::CertificateFailed(_) | Error::SearchExhausted { .. } => ExitCode::from(EXIT_CERTIFICATE),
        _ => ExitCode::from(EXIT_ERROR),
    }
}
