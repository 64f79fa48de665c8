//! `nfra`: run localization sweeps, evaluate the position error bound, export codebooks.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nfra_core::sim::{render, run_sweep, Design, ExperimentConfig, Method, OutputFormat};
use nfra_core::{Error, Position};

const THREADS_ENV: &str = "NF_RA_THREADS";

#[derive(Parser)]
#[command(
    name = "nfra",
    version,
    about = "Near-field localization with reconfigurable-antenna arrays"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the Monte-Carlo sweep described by a config file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (NF_RA_THREADS takes precedence).
        #[arg(long)]
        threads: Option<usize>,
        /// Also write every trial as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Print the position error bound at a point for each configured method.
    Peb {
        #[arg(long)]
        config: PathBuf,
        /// UE position `x,y,z` in meters.
        #[arg(long, value_parser = parse_position, allow_hyphen_values = true)]
        at: Position,
        /// SNR in dB; defaults to the config's `snr_db`, or the first sweep value of an SNR sweep.
        #[arg(long, allow_hyphen_values = true)]
        snr_db: Option<f64>,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Design a power-allocated codebook and write it as JSON.
    Codebook {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        export: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::RaOptimal)]
        method: MethodArg,
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    RaOptimal,
    RaDirectional,
    Conventional,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::RaOptimal => Method::RaOptimal,
            MethodArg::RaDirectional => Method::RaDirectional,
            MethodArg::Conventional => Method::Conventional,
        }
    }
}

/// Exit status 2: bad configuration or arguments; 3: failure while computing or writing.
enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn parse_position(s: &str) -> Result<Position, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{x}` is not a number"))
        })
        .collect::<Result<_, _>>()?;
    match v.as_slice() {
        [x, y, z] if v.iter().all(|c| c.is_finite()) => Ok(Position::new(*x, *y, *z)),
        _ => Err(format!("expected three finite numbers `x,y,z`, got `{s}`")),
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io { .. } | Error::Config(_) => Failure::Config(e.to_string()),
        other => Failure::Config(other.to_string()),
    })
}

fn init_threads(flag: Option<usize>) -> Result<(), Failure> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
            Failure::Config(format!(
                "{THREADS_ENV} must be a non-negative integer, got `{v}`"
            ))
        })?),
        Err(_) => flag,
    };
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(format!("cannot start thread pool: {e}")))?;
    }
    Ok(())
}

fn write_output(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text)
            .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", p.display()))),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::Runtime(format!("cannot write output: {e}"))),
    }
}

fn simulate(
    config: &Path,
    out: Option<&Path>,
    format: Format,
    seed: Option<u64>,
    log: Option<&Path>,
) -> Result<(), Failure> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let result = run_sweep(&cfg)?;
    let format = match format {
        Format::Csv => OutputFormat::Csv,
        Format::Json => OutputFormat::Json,
    };
    write_output(out, &render(&result.points, format)?)?;
    if let Some(path) = log {
        let mut text = String::new();
        for t in &result.trials {
            text.push_str(&serde_json::to_string(t).map_err(|e| Failure::Runtime(e.to_string()))?);
            text.push('\n');
        }
        write_output(Some(path), &text)?;
    }
    for p in &result.points {
        if p.failures > 0 {
            eprintln!(
                "warning: {} at {} = {}: {} of {} trials failed and were excluded",
                p.method,
                p.sweep_name,
                p.sweep_value,
                p.failures,
                p.failures + p.trials
            );
        }
    }
    Ok(())
}

fn peb_at(config: &Path, at: Position, snr_db: Option<f64>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let snr = snr_db.or(cfg.snr_for(cfg.sweep_values[0]));
    let mut text = String::from("method,peb_m,peb_trace_m2\n");
    for &method in &cfg.methods {
        let design = Design::build(&cfg, method, cfg.bases_for(method, cfg.sweep_values[0]))?;
        let los = design.model.los_gain(&at, 0.0)?;
        let power = match snr {
            Some(s) if s.is_finite() => cfg.scenario.power_for_snr(s, los.magnitude),
            Some(_) => return Err(Failure::Config("the bound needs a finite SNR".into())),
            None => cfg.scenario.tx_power_w,
        };
        let trace = design.peb_trace(&cfg, &at, 0.0, power)?;
        text.push_str(&format!("{},{:.8e},{:.8e}\n", method, trace.sqrt(), trace));
    }
    write_output(None, &text)
}

fn export_codebook(config: &Path, export: &Path, method: Method) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let design = Design::build(&cfg, method, cfg.bases_for(method, cfg.sweep_values[0]))?;
    design.codebook.save(export)?;
    eprintln!(
        "{}: {} codewords, worst-case bound {:.6e} m^2 over the sample lattice",
        method,
        design.codebook.len(),
        design.allocation.max_peb
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Simulate {
            config,
            out,
            format,
            seed,
            threads,
            log,
        } => {
            init_threads(threads)?;
            simulate(&config, out.as_deref(), format, seed, log.as_deref())
        }
        Command::Peb {
            config,
            at,
            snr_db,
            threads,
        } => {
            init_threads(threads)?;
            peb_at(&config, at, snr_db)
        }
        Command::Codebook {
            config,
            export,
            method,
            threads,
        } => {
            init_threads(threads)?;
            export_codebook(&config, &export, method.into())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
