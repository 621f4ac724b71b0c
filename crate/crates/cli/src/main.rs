use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use breadcrumbs_cli::{cmd_generate, cmd_report, cmd_run, cmd_verify, exit_code, ExperimentConfig, Overrides};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "breadcrumbs", version, about = "Long-tail classification with feature back-tracking")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,

    /// Experiment config (flat TOML).
    #[arg(long, global = true, default_value = "configs/desk.toml")]
    config: PathBuf,

    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// `all`, a strategy name, or a comma-separated list.
    #[arg(long, global = true)]
    strategy: Option<String>,

    /// Override the trail-set size.
    #[arg(long = "n-b", global = true)]
    n_b: Option<usize>,

    /// Output root; beats BREADCRUMBS_OUT_ROOT and `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    /// Generate the train and test sets.
    Generate,
    /// Stage one, verification and stage two for every seed and strategy.
    Run,
    /// Stage one and the verification checks only.
    Verify,
    /// Aggregate finished runs into report.json and report.txt.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(0) => ExitCode::SUCCESS,
        Ok(failures) => {
            eprintln!("{failures} seed(s) failed verification");
            ExitCode::from(3)
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}

/// Returns the number of seeds that failed verification.
fn execute(cli: &Cli) -> Result<usize> {
    let mut cfg = ExperimentConfig::load(&cli.config)?;
    cfg.apply(&Overrides { seed: cli.seed, strategy: cli.strategy.clone(), n_b: cli.n_b })?;
    let root = cfg.output_root(cli.out.as_deref());
    let verbose = !cli.quiet;
    match cli.verb {
        Verb::Generate => cmd_generate(cfg, &root).map(|_| 0),
        Verb::Run => {
            let summary = cmd_run(cfg.clone(), &root, verbose)?;
            cmd_report(&cfg, &root)?;
            if verbose {
                print!("{}", std::fs::read_to_string(root.join("report.txt"))?);
            }
            Ok(summary.verification_failures)
        }
        Verb::Verify => Ok(cmd_verify(cfg, &root, verbose)?.verification_failures),
        Verb::Report => {
            cmd_report(&cfg, &root)?;
            print!("{}", std::fs::read_to_string(root.join("report.txt"))?);
            Ok(0)
        }
    }
}
