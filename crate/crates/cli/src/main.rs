use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fdgfdm_core::scenario::{
    emit_csv, emit_plotdata, load_anchor_set, load_scenario, optimal_filter, run_calibration,
    run_scenario, write_csv, Engine, FilterFile, Scenario,
};
use fdgfdm_core::Error;

#[derive(Parser)]
#[command(name = "fdgfdm", version, about = "Full-duplex GFDM residual-SI and SIR laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form metrics at the scenario's base point.
    Analyze(Common),
    /// Monte-Carlo metrics at the scenario's base point.
    Simulate(Common),
    /// Optimal receiver filter at the base point, written as filter JSON.
    Optimize(Common),
    /// Every point of the scenario's sweep.
    Sweep(Common),
    /// Offset, gaps and rank order against a reference anchor set.
    Calibrate(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario file, or anchor set for `calibrate`.
    #[arg(long)]
    config: PathBuf,
    /// Output file (csv, json) or directory (plotdata); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_enum)]
    engine: Option<EngineArg>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum EngineArg {
    Analytic,
    Mc,
    Both,
}

impl EngineArg {
    fn engines(self) -> Vec<Engine> {
        match self {
            Self::Analytic => vec![Engine::Analytic],
            Self::Mc => vec![Engine::MonteCarlo],
            Self::Both => vec![Engine::Analytic, Engine::MonteCarlo],
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Plotdata,
}

#[derive(Debug)]
enum Failure {
    Core(Error),
    Io(io::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e)
    }
}

fn scenario(c: &Common, engines: Option<Vec<Engine>>, single_point: bool) -> Result<Scenario, Error> {
    let mut s = load_scenario(&c.config)?;
    if let Some(seed) = c.seed {
        s.seed = seed;
    }
    if let Some(trials) = c.trials {
        s.trials = trials;
    }
    if let Some(e) = engines.or_else(|| c.engine.map(EngineArg::engines)) {
        s.engines = e;
    }
    if single_point {
        s.sweep = None;
    }
    s.validate()?;
    Ok(s)
}

fn write_text(out: Option<&Path>, text: &str) -> io::Result<()> {
    match out {
        Some(p) => std::fs::write(p, text),
        None => io::stdout().lock().write_all(text.as_bytes()),
    }
}

fn emit(c: &Common, s: &Scenario) -> Result<(), Failure> {
    let rows = run_scenario(s)?;
    match (c.format, c.out.as_deref()) {
        (Format::Csv, Some(path)) => emit_csv(&rows, path)?,
        (Format::Csv, None) => write_csv(&rows, io::stdout().lock())?,
        (Format::Plotdata, out) => {
            let dir = out.unwrap_or(Path::new("plotdata"));
            for f in emit_plotdata(&rows, dir)? {
                eprintln!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Analyze(c) => {
            let s = scenario(&c, Some(vec![Engine::Analytic]), true)?;
            emit(&c, &s)
        }
        Command::Simulate(c) => {
            let s = scenario(&c, Some(vec![Engine::MonteCarlo]), true)?;
            emit(&c, &s)
        }
        Command::Sweep(c) => {
            let s = scenario(&c, None, false)?;
            emit(&c, &s)
        }
        Command::Optimize(c) => {
            let s = scenario(&c, None, true)?;
            let mode = s.modes[0];
            let opt = optimal_filter(&s.base, mode)?;
            eprintln!(
                "{} aggregate SIR {:.4} dB, eigen residual {:.2e}, multiplicity {}",
                mode.label(),
                10.0 * opt.achieved_sir.log10(),
                opt.eigen_residual,
                opt.multiplicity
            );
            let json = serde_json::to_string_pretty(&FilterFile::from_filter(&opt.f))
                .map_err(io::Error::other)?;
            write_text(c.out.as_deref(), &(json + "\n"))?;
            Ok(())
        }
        Command::Calibrate(c) => {
            let set = load_anchor_set(&c.config)?;
            let report = run_calibration(&set)?;
            eprintln!("offset (median ours - reference): {:+.3} dB", report.offset_db);
            for g in &report.groups {
                eprintln!(
                    "{} @ {}: rank order {}, max gap error {:.3} dB",
                    g.scenario,
                    g.sweep_value,
                    if g.rank_order_matches { "matches" } else { "differs" },
                    g.max_gap_error_db
                );
            }
            let json = serde_json::to_string_pretty(&report).map_err(io::Error::other)?;
            write_text(c.out.as_deref(), &(json + "\n"))?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            if e.is_config_error() {
                ExitCode::from(2)
            } else if matches!(e, Error::Io(_)) {
                ExitCode::from(1)
            } else {
                ExitCode::from(3)
            }
        }
        Err(Failure::Io(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
