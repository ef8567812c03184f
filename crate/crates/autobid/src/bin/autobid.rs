use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use autobid::runner::{self, Overrides};

/// Deterministic auction-market simulator and mechanism toolkit for
/// ROI-constrained auto-bidding.
#[derive(Parser)]
#[command(name = "autobid", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (flat `key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Override the root seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the CPA-cap bid parameter m.
    #[arg(long = "param-m")]
    param_m: Option<f64>,
    /// Override the ROI-floor bid parameter n.
    #[arg(long = "param-n")]
    param_n: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one controlled episode and write the log and summary.
    Simulate(Common),
    /// Calibrate the feasible conversion frontier and export the mechanism.
    Calibrate(Common),
    /// Sweep misreports and write the audit rows and verdicts.
    Audit {
        #[command(flatten)]
        common: Common,
        /// Exit with status 3 when the audit verdict is not incentive-compatible.
        #[arg(long)]
        expect_ic: bool,
    },
    /// Reproduce the bundled example market 1 comparison table.
    #[command(name = "repro-example1")]
    ReproExample1(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (sub, common, expect_ic) = match cli.command {
        Command::Simulate(common) => (runner::Subcommand::Simulate, common, None),
        Command::Calibrate(common) => (runner::Subcommand::Calibrate, common, None),
        Command::Audit { common, expect_ic } => {
            (runner::Subcommand::Audit, common, Some(expect_ic))
        }
        Command::ReproExample1(common) => (runner::Subcommand::ReproExample1, common, None),
    };
    let overrides = Overrides {
        expect_ic,
        param_m: common.param_m,
        param_n: common.param_n,
        seed: common.seed,
    };
    match runner::execute(sub, &common.config, overrides) {
        Ok(code) => ExitCode::from(code as u8),
        Err(err) => {
            eprintln!("autobid: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
