use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ropdf::config::{parse_config, Overrides, RunConfig, OUTPUT_ENV};
use ropdf::pipeline::{replay, run_command, Command};

#[derive(Parser)]
#[command(
    name = "ropdf",
    version,
    about = "Learned reduced-order PDF equations for stochastic power-system dynamics"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Burn in and simulate the Monte-Carlo ensemble.
    Simulate(RunArgs),
    /// Learn the regression coefficients from the stored ensemble.
    Learn(RunArgs),
    /// Solve the learned density equations.
    Solve(RunArgs),
    /// Reference densities from a large ensemble.
    Yardstick(RunArgs),
    /// Minimum sample counts of both estimators over the benchmark plan.
    Benchmark(RunArgs),
    /// Rerun a manifest into a directory and compare checksums.
    Replay {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (the environment variable wins when set).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Bundled case name or case file.
    #[arg(long)]
    case: Option<String>,
    /// uncorrelated, exponential, constant, exponential:<lambda> or constant:<rho>.
    #[arg(long)]
    correlation: Option<String>,
    /// standard, none or i-j (1-based buses).
    #[arg(long)]
    failure: Option<String>,
    /// Quantity such as omega_4 or delta_2; repeatable.
    #[arg(long)]
    qoi: Vec<String>,
    /// Regression mode: auto, linear, llr or manual.
    #[arg(long)]
    method: Option<String>,
}

impl RunArgs {
    fn config(&self) -> ropdf::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => parse_config(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(&Overrides {
            out: self.out.clone(),
            seed: self.seed,
            case: self.case.clone(),
            correlation: self.correlation.clone(),
            failure: self.failure.clone(),
            qoi: self.qoi.clone(),
            method: self.method.clone(),
        })?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> ropdf::Result<()> {
    let (command, args) = match cli.command {
        Cmd::Simulate(a) => (Command::Simulate, a),
        Cmd::Learn(a) => (Command::Learn, a),
        Cmd::Solve(a) => (Command::Solve, a),
        Cmd::Yardstick(a) => (Command::Yardstick, a),
        Cmd::Benchmark(a) => (Command::Benchmark, a),
        Cmd::Replay { manifest, out } => {
            let report = replay(&manifest, &out)?;
            println!("checked {} artifacts", report.checked);
            for m in &report.mismatches {
                println!("mismatch {m}");
            }
            return if report.is_clean() {
                Ok(())
            } else {
                Err(ropdf::Error::Other(format!(
                    "{} checksum mismatches",
                    report.mismatches.len()
                )))
            };
        }
    };
    let cfg = args.config()?;
    let summary = run_command(command, &cfg, cfg.output_root())?;
    for name in &summary.artifacts {
        println!("{}", summary.dir.join(name).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, ropdf::Error::MissingArtifact { .. }) {
                eprintln!("(output directory can be set with --out or {OUTPUT_ENV})");
            }
            ExitCode::FAILURE
        }
    }
}
