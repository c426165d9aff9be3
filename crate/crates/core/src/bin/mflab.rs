use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use mflab::harness::{self, ExperimentSpec};
use mflab::LabError;

#[derive(Parser)]
#[command(name = "mflab", version, about = "Mean-field dynamics laboratory")]
struct Cli {
    /// Worker threads for sweeps (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its tables.
    Run {
        #[arg(long)]
        spec: PathBuf,
        /// Output directory; overrides `out_dir` in the spec.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a spec against the schema and print its hash.
    Validate {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Log-log fit of two columns of a result table.
    Fit {
        /// CSV written by `run`.
        table: PathBuf,
        #[arg(long, default_value = "N")]
        x: String,
        #[arg(long, default_value = "trace_distance")]
        y: String,
        /// Spec the table must have been produced from.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Restrict to rows with this value of `t`.
        #[arg(long)]
        t: Option<f64>,
    },
    /// List experiment kinds and their keys.
    ListExperiments,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            error!("could not configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli.command, cli.quiet) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let LabError::Schema(errs) = &e {
                eprintln!("schema error:");
                for err in errs {
                    eprintln!("  {err}");
                }
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}

fn execute(command: Command, quiet: bool) -> mflab::Result<()> {
    match command {
        Command::Run { spec, out } => {
            let parsed = ExperimentSpec::from_file(&spec)?;
            let dir = out
                .or_else(|| parsed.out_dir().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("out"));
            let output = harness::run(&parsed, &dir)?;
            if !quiet {
                for f in &output.files {
                    println!("{}", f.display());
                }
            }
        }
        Command::Validate { spec } => {
            let parsed = ExperimentSpec::from_file(&spec)?;
            if !quiet {
                println!("ok {} {}", parsed.kind().name(), parsed.hash());
            }
        }
        Command::Fit { table, x, y, spec, t } => {
            let spec = spec.map(|p| ExperimentSpec::from_file(&p)).transpose()?;
            let mut loaded = harness::load_table(&table, spec.as_ref())?;
            if let Some(t) = t {
                let ts = loaded.column("t")?;
                loaded.rows = loaded.rows.into_iter().zip(ts).filter(|(_, s)| *s == t).map(|(r, _)| r).collect();
            }
            let fit = harness::fit_rate(&loaded, &x, &y)?;
            println!(
                "slope={} intercept={} residual={}",
                harness::format_float(fit.slope),
                harness::format_float(fit.intercept),
                harness::format_float(fit.residual)
            );
        }
        Command::ListExperiments => print!("{}", harness::list_experiments()),
    }
    Ok(())
}
