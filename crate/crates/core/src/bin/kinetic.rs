use clap::{Parser, Subcommand};
use kinetic_core::experiment::{self, ExperimentKind, OutputFormat, Overrides};
use kinetic_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

const EXIT_VALIDATION: u8 = 1;
const EXIT_TOLERANCE: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "kinetic", version, about = "Tracer kinetics experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its result tables and metadata.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        kind: ExperimentKind,
        /// Output directory; defaults to `output.dir` of the config.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        eps: Option<f64>,
        /// Series order K.
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        t_max: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        format: Option<OutputFormat>,
    },
    /// Summarize a result directory.
    Report {
        dir: PathBuf,
        /// Also write the long-format table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn exit_for(e: &Error) -> u8 {
    match e {
        Error::Io(_) => EXIT_IO,
        _ => EXIT_VALIDATION,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Run {
            config,
            kind,
            out,
            seed,
            eps,
            order,
            t_max,
            dt,
            format,
        } => {
            let overrides = Overrides {
                seed,
                eps,
                order,
                t_max,
                dt,
                out,
                format,
            };
            let cfg = experiment::load_config(&config, &overrides)?;
            let outcome = experiment::run_experiment(&cfg, kind)?;
            let dir = PathBuf::from(&cfg.output.dir);
            for path in experiment::write_outcome(&outcome, &dir)? {
                log::info!("wrote {}", path.display());
            }
            for c in &outcome.metadata.checks {
                let mark = if c.pass { "PASS" } else { "FAIL" };
                println!("{mark} {}: {:.3e} (tolerance {:.1e})", c.name, c.value, c.tolerance);
            }
            Ok(if outcome.passed() { 0 } else { EXIT_TOLERANCE })
        }
        Command::Report { dir, csv } => {
            let report = experiment::report(&dir)?;
            print!("{}", report.text);
            if let Some(path) = csv {
                experiment::write_atomic(&path, &report.long.to_csv()?)?;
            }
            Ok(if report.all_pass { 0 } else { EXIT_TOLERANCE })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}
