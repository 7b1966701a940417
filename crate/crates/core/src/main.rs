use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use delaymark::checks::{reproduce_paper, ReproductionOptions};
use delaymark::config::ExperimentConfig;
use delaymark::experiment::{cmd_analyze, cmd_attack, cmd_bench, cmd_simulate, synthesize_report, AnalyzeOptions, BenchOptions};

#[derive(Parser)]
#[command(name = "delaymark", version, about = "Delay-feedback watermarking against replay attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment TOML; the built-in three-tank example when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured ensemble size.
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Exit with status 1 when the stability certificate does not pass.
    #[arg(long, global = true)]
    require_stable: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Gains, Riccati residuals and the stability certificate.
    Synthesize,
    /// One nominal run with traces and detector output.
    Simulate,
    /// One replay-attack run with traces and detector output.
    Attack,
    /// Detection-rate curves and long-run costs for every watermark.
    Bench,
    /// Exact attacked covariance against a Monte-Carlo ensemble.
    Analyze,
    /// Every reproduction check on the three-tank example.
    ReproducePaper,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> delaymark::Result<ExitCode> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::three_tank(),
    };
    let out = |default: &str| cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
    match cli.command {
        Command::Synthesize => {
            let report = synthesize_report(&cfg)?;
            print!("{report}");
            if cli.require_stable && !report.certificate_passes() {
                eprintln!("stability certificate did not pass");
                return Ok(ExitCode::from(1));
            }
        }
        Command::Simulate => {
            let (summary, _) = cmd_simulate(&cfg, &out("out/simulate"), cli.seed)?;
            print!("{summary}");
        }
        Command::Attack => {
            let (summary, _) = cmd_attack(&cfg, &out("out/attack"), cli.seed)?;
            print!("{summary}");
        }
        Command::Bench => {
            let opts = BenchOptions {
                seed: cli.seed,
                runs: cli.runs,
                cost_horizon: None,
            };
            let (report, _) = cmd_bench(&cfg, &out("out/bench"), &opts)?;
            print!("{report}");
        }
        Command::Analyze => {
            let mut opts = AnalyzeOptions {
                seed: cli.seed,
                ..AnalyzeOptions::default()
            };
            if let Some(runs) = cli.runs {
                opts.runs = runs;
            }
            let (report, _) = cmd_analyze(&cfg, &out("out/analyze"), &opts)?;
            print!("{report}");
        }
        Command::ReproducePaper => {
            let mut opts = ReproductionOptions::default();
            if let Some(seed) = cli.seed {
                opts.seed = seed;
            }
            if let Some(runs) = cli.runs {
                opts.runs = runs;
            }
            let (outcomes, _) = reproduce_paper(&out("out/reproduce"), &opts, |o| println!("{}", o.line()))?;
            if outcomes.iter().any(|o| !o.passed) {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
