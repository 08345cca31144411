use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use droplab_cli::{compare_runs, exit_code, load_config, run, write_comparison, CompareSpec, RunOptions, EXIT_VERIFIER};

/// Dropout implicit-regularization experiments.
#[derive(Parser)]
#[command(name = "droplab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Override the global seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact root (run) or comparison CSV path (compare).
    /// Defaults to the config's output_dir, then $DROPLAB_OUT, then ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its artifact directory.
    Run { config: PathBuf },
    /// Run a verifier experiment (theory_verify, modified_flow_check) and report its verdict.
    Verify { config: PathBuf },
    /// Align the metric tables of two artifact directories.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Only metrics starting with this prefix (repeatable).
        #[arg(long = "metric")]
        metrics: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match &cli.command {
        Command::Run { config } => execute(&cli, config, false),
        Command::Verify { config } => execute(&cli, config, true),
        Command::Compare { a, b, metrics } => compare(a, b, metrics, cli.out.as_deref()),
    };
    ExitCode::from(code as u8)
}

fn execute(cli: &Cli, path: &Path, verify_only: bool) -> i32 {
    let cfg = match load_config(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return exit_code(&e);
        }
    };
    if verify_only && !cfg.experiment.is_verifier() {
        eprintln!(
            "error: `verify` needs a theory_verify or modified_flow_check config, got {}",
            cfg.experiment.kind()
        );
        return droplab_cli::EXIT_CONFIG;
    }
    let opts = RunOptions {
        seed: cli.seed,
        out: cli.out.clone(),
        threads: cli.threads,
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    match run(&cfg, &opts) {
        Ok(artifact) => {
            println!("{}", artifact.dir.display());
            match artifact.verdict() {
                Some(true) => {
                    println!("verdict: pass");
                    0
                }
                Some(false) => {
                    eprintln!("verdict: FAIL (details in {})", artifact.dir.join("verdict.json").display());
                    EXIT_VERIFIER
                }
                None => 0,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn compare(a: &Path, b: &Path, metrics: &[String], out: Option<&Path>) -> i32 {
    let spec = CompareSpec {
        prefixes: metrics.to_vec(),
    };
    let result = compare_runs(a, b, &spec).and_then(|rows| match out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| droplab::LabError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            write_comparison(&rows, file)
        }
        None => write_comparison(&rows, std::io::stdout().lock()),
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
