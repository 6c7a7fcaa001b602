use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lqsg::experiment::{diff_files, log_event, run_from_file, Mode, Overrides};

#[derive(Parser)]
#[command(name = "lqsg", version, about = "Nash equilibria of linear-quadratic-singular stochastic differential games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed of the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Caps the number of worker threads.
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two JSON artifacts field by field.
    Diff {
        a: PathBuf,
        b: PathBuf,
        /// Relative threshold on numeric fields.
        #[arg(long, default_value_t = 1e-9)]
        rel_tol: f64,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config, seed, threads, mode, out } => {
            let overrides = Overrides { seed, mode, out };
            let mut pool = rayon::ThreadPoolBuilder::new();
            if let Some(t) = threads {
                pool = pool.num_threads(t);
            }
            let result = match pool.build() {
                Ok(pool) => pool.install(|| run_from_file(&config, &overrides)),
                Err(e) => {
                    log_event("error", "threads", serde_json::json!({ "error": e.to_string() }));
                    return ExitCode::from(1);
                }
            };
            match result {
                Ok(outcome) => {
                    let mut stdout = std::io::stdout().lock();
                    for a in &outcome.artifacts {
                        let _ = writeln!(stdout, "{}", a.display());
                    }
                    ExitCode::from(outcome.status.exit_code() as u8)
                }
                Err(e) => {
                    log_event("error", "io", serde_json::json!({ "error": e.to_string() }));
                    ExitCode::from(1)
                }
            }
        }
        Command::Diff { a, b, rel_tol } => match diff_files(&a, &b, rel_tol) {
            Ok(summary) => {
                let mut stdout = std::io::stdout().lock();
                for d in &summary.diffs {
                    let _ = writeln!(
                        stdout,
                        "{}\t{}\t{}\t{}",
                        if d.expected { "expected" } else { "UNEXPECTED" },
                        d.path,
                        d.a,
                        d.b
                    );
                }
                ExitCode::from(if summary.is_clean() { 0 } else { 2 })
            }
            Err(e) => {
                log_event("error", "diff", serde_json::json!({ "error": e.to_string() }));
                ExitCode::from(1)
            }
        },
    }
}
