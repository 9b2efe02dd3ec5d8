//! `qclimit`: runs and checks JSON scenario files.

mod run;
mod spec;
mod validate;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use run::{Failure, Options};

#[derive(Parser)]
#[command(name = "qclimit", about = "Exact and semiclassical spin-beam scenarios", disable_version_flag = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario and write its outputs.
    Run {
        spec: PathBuf,
        /// Master seed, overriding the one in the file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Worker threads; 0 picks one per core. Results do not depend on it.
        #[arg(long, default_value_t = 0)]
        threads: usize,
        /// Record wall-clock time per sweep row (makes outputs machine-dependent).
        #[arg(long)]
        timings: bool,
    },
    /// Check a scenario without running it and list every violation.
    Validate { spec: PathBuf },
    /// Print the program and schema versions.
    Version,
}

fn load(path: &Path) -> Result<spec::ScenarioFile, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    spec::parse(&text).map_err(Failure::Schema)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Version => {
            println!("qclimit {} (scenario schema {})", env!("CARGO_PKG_VERSION"), spec::SCHEMA_VERSION);
            ExitCode::SUCCESS
        }
        Command::Validate { spec } => {
            let violations = match load(&spec) {
                Ok(file) => validate::check(&file),
                Err(Failure::Schema(m)) => vec![validate::Violation { rule: "schema", field: String::new(), message: m }],
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(e.exit_code());
                }
            };
            if violations.is_empty() {
                println!("ok: no violations");
                return ExitCode::SUCCESS;
            }
            for v in &violations {
                println!("{v}");
            }
            println!("{} violation(s)", violations.len());
            ExitCode::SUCCESS
        }
        Command::Run { spec, seed, out_dir, threads, timings } => {
            if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
                eprintln!("cannot start the thread pool: {e}");
            }
            let result = load(&spec).and_then(|file| {
                let violations = validate::check(&file);
                if !violations.is_empty() {
                    let lines: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
                    return Err(Failure::Schema(lines.join("; ")));
                }
                run::run(&file, &Options { seed, out_dir, timings })
            });
            match result {
                Ok(summary) => {
                    println!("{summary}");
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{e}");
                    ExitCode::from(e.exit_code())
                }
            }
        }
    }
}
