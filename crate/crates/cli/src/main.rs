//! `sbqs` command line: run or validate JSON scenario files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sbqs::scenario::{ModeName, OutputFormat, Scenario};
use sbqs::SbqsError;

#[derive(Parser)]
#[command(name = "sbqs", version, about = "State-based quantum simulation scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario and write its artifact.
    Run {
        file: PathBuf,
        /// exact, circuit or sampled; overrides the file.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Artifact path; overrides the file. Without one the artifact goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scenario without running it.
    Validate { file: PathBuf },
}

const SCHEMA: u8 = 2;
const NUMERIC: u8 = 3;

fn code(e: &SbqsError) -> u8 {
    if e.is_input_error() {
        SCHEMA
    } else {
        NUMERIC
    }
}

fn fail(stage: &str, e: &SbqsError, code: u8) -> ExitCode {
    eprintln!("{stage}: {e}");
    ExitCode::from(code)
}

fn load(file: &Path) -> Result<Scenario, ExitCode> {
    Scenario::from_file(file).map_err(|e| fail("invalid scenario", &e, SCHEMA))
}

fn run(file: &Path, mode: Option<String>, seed: Option<u64>, out: Option<PathBuf>) -> ExitCode {
    let sc = match load(file) {
        Ok(s) => s,
        Err(c) => return c,
    };
    let mode = match mode.as_deref().map(ModeName::parse).transpose() {
        Ok(m) => m.unwrap_or(sc.mode),
        Err(e) => return fail("invalid arguments", &e, SCHEMA),
    };
    // budget violations found while planning are numeric failures, not schema ones
    if let Err(e) = sc.validate() {
        return fail("invalid scenario", &e, code(&e));
    }
    let output = match sc.run_with(mode, seed.unwrap_or(sc.seed)) {
        Ok(o) => o,
        Err(e) => return fail("run failed", &e, code(&e)),
    };
    let format = sc.output.as_ref().map(|o| o.format).unwrap_or_default();
    let path = out.or_else(|| sc.output.as_ref().and_then(|o| o.path.clone()).map(PathBuf::from));
    let artifact = output.render(format);
    let report = serde_json::to_string_pretty(&output.report).expect("report serializes");
    match path {
        Some(p) => {
            if let Err(e) = std::fs::write(&p, artifact) {
                eprintln!("cannot write {}: {e}", p.display());
                return ExitCode::from(NUMERIC);
            }
            println!("{report}");
        }
        None => {
            print!("{artifact}");
            if format == OutputFormat::Csv {
                eprintln!("{report}");
            }
        }
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { file, mode, seed, out } => run(&file, mode, seed, out),
        Command::Validate { file } => {
            let sc = match load(&file) {
                Ok(s) => s,
                Err(c) => return c,
            };
            match sc.validate() {
                Ok(()) => {
                    println!("OK");
                    ExitCode::SUCCESS
                }
                Err(e) => fail("invalid scenario", &e, SCHEMA),
            }
        }
    }
}
