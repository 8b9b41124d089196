use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use percolab_cli::config::ExperimentConfig;
use percolab_cli::pipeline::{run_pipeline, Failure, RunOptions};
use percolab_cli::report;

#[derive(Parser)]
#[command(name = "percolab", version, about = "Percolation renormalization and random-walk experiments")]
struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; overrides the config and PERCOLAB_OUT.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Existing snapshot used when the sample stage does not run.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    #[arg(long, env = "PERCOLAB_OUT", hide = true)]
    default_out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a configuration.
    Sample(RunArgs),
    /// Classify renormalised vertices as n-good or n-bad.
    Classify(RunArgs),
    /// Build and verify a perforated box.
    Perforate(RunArgs),
    /// Largest cluster, chemical distance and volume growth.
    Cluster(RunArgs),
    /// Isoperimetric audit of a perforation.
    Isop(RunArgs),
    /// Very-good-ball scan.
    Regularity(RunArgs),
    /// Heat-kernel, Harnack, invariance-principle and Green-function checks.
    Walk(RunArgs),
    /// Every stage enabled in the configuration.
    Pipeline(RunArgs),
    /// Summarise a finished bundle and write plots.
    Report {
        bundle: PathBuf,
    },
    /// Check a configuration and print ladder compliance.
    Validate {
        config: PathBuf,
    },
}

fn load(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Validation(vec![format!("{}: {e}", path.display())]))?;
    ExperimentConfig::parse(&text).map_err(|e| Failure::Validation(vec![format!("{}: {e}", path.display())]))
}

fn run(args: RunArgs, only: Option<&'static str>) -> Result<(), Failure> {
    let cfg = load(&args.config)?;
    let out = args
        .out
        .or_else(|| cfg.output.clone())
        .or(args.default_out)
        .unwrap_or_else(|| PathBuf::from("percolab-out"));
    let manifest = run_pipeline(&cfg, &RunOptions { out: out.clone(), snapshot: args.snapshot, only })?;
    for s in &manifest.stages {
        println!("{:<11} {:>8} ms  {}", s.name, s.wall_ms, s.files.iter().map(|f| f.path.as_str()).collect::<Vec<_>>().join(" "));
    }
    println!("bundle written to {}", out.display());
    Ok(())
}

fn validate(path: &Path) -> Result<(), Failure> {
    let cfg = load(path)?;
    let issues = cfg.validate();
    if let Some(c) = cfg.compliance() {
        println!("ladder compliance:");
        for (name, value) in c.table() {
            println!("  {name:<40} {value}");
        }
    }
    if issues.is_empty() {
        println!("{}: valid; stages {}", path.display(), cfg.stages.enabled().join(", "));
        Ok(())
    } else {
        Err(Failure::Validation(issues.iter().map(|i| i.to_string()).collect()))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("cannot configure {n} workers: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Sample(a) => run(a, Some("sample")),
        Command::Classify(a) => run(a, Some("classify")),
        Command::Perforate(a) => run(a, Some("perforate")),
        Command::Cluster(a) => run(a, Some("cluster")),
        Command::Isop(a) => run(a, Some("isop")),
        Command::Regularity(a) => run(a, Some("regularity")),
        Command::Walk(a) => run(a, Some("walk")),
        Command::Pipeline(a) => run(a, None),
        Command::Report { bundle } => report::summarise(&bundle).map(|s| print!("{}", report::render(&s))),
        Command::Validate { config } => validate(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
