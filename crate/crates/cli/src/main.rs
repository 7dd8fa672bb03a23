//! `spinforge` command-line front end.
//!
//! Every command writes a JSON report (`<command>.json`) plus CSV and SVG
//! artifacts into the output directory. Exit codes: 0 ok, 1 input error,
//! 2 ambiguous or degenerate result, 3 non-convergence.

// `!(x > 0.0)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use config::{ModelChoice, RunConfig, SynthKind};

#[derive(Parser, Debug)]
#[command(name = "spinforge", version, about = "NV-center spin environment analysis and control simulation")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (default `out`).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seed for synthetic noise; required whenever noise is generated.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve field strength and angle from an ESEEM spectrum.
    FieldSolve(FieldSolveArgs),
    /// Fit a hyperfine tensor to splitting-vs-orientation data.
    HyperfineFit(HyperfineFitArgs),
    /// Locate a defect from dipolar couplings.
    Locate(LocateArgs),
    /// Simulate the SEDOR spectrum of the configured spin system.
    SedorSim(SedorArgs),
    /// Simulate GHZ preparation and phase-cycled readout.
    GhzSim(GhzArgs),
    /// Generate a synthetic fixture.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct FieldSolveArgs {
    /// Spectrum CSV (frequency_mhz, amplitude).
    #[arg(long)]
    spectrum: Option<PathBuf>,
    /// Measured NV resonance, MHz.
    #[arg(long)]
    resonance: Option<f64>,
}

#[derive(Args, Debug)]
struct HyperfineFitArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelChoice>,
}

#[derive(Args, Debug)]
struct LocateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Map half-width, nm.
    #[arg(long)]
    half_width: Option<f64>,
    /// Map cell size, nm.
    #[arg(long)]
    resolution: Option<f64>,
}

#[derive(Args, Debug)]
struct SedorArgs {
    /// Field strength, G.
    #[arg(long)]
    b0: Option<f64>,
    /// Polar angle, degrees.
    #[arg(long)]
    theta: Option<f64>,
    /// Azimuth, degrees.
    #[arg(long)]
    phi: Option<f64>,
    /// Line FWHM, kHz.
    #[arg(long)]
    linewidth: Option<f64>,
}

#[derive(Args, Debug)]
struct GhzArgs {
    #[arg(long)]
    over_rotation: Option<f64>,
    #[arg(long)]
    depolarizing: Option<f64>,
    #[arg(long)]
    polarization_efficiency: Option<f64>,
    /// Phase-cycle repetitions.
    #[arg(long)]
    reps: Option<usize>,
    /// Preparation sequence (JSON).
    #[arg(long)]
    sequence: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: Option<SynthKind>,
    /// Defect label in the spin system.
    #[arg(long)]
    defect: Option<String>,
    #[arg(long)]
    b0: Option<f64>,
    /// Tilt from the NV axis, degrees (eseem).
    #[arg(long)]
    tilt: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    third_plane: bool,
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
    /// Partial result to report alongside the error.
    pub partial: Option<Value>,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into(), partial: None }
    }
}

impl From<spinforge::Error> for CliError {
    fn from(e: spinforge::Error) -> Self {
        use spinforge::Error as E;
        let code = match &e {
            E::Ambiguous { .. }
            | E::RankDeficient(_)
            | E::DegenerateGeometry(_)
            | E::DegenerateMixing { .. }
            | E::IndistinguishableTones { .. }
            | E::TooFewPeaks { .. } => 2,
            E::NonConvergence(_) => 3,
            _ => 1,
        };
        let partial = match &e {
            E::Ambiguous { solution, .. } => serde_json::to_value(solution).ok(),
            _ => None,
        };
        Self { code, message: e.to_string(), partial }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::input(e.to_string())
    }
}

/// A finished command: its JSON result, warnings and exit code.
pub struct Outcome {
    pub code: u8,
    pub warnings: Vec<String>,
    pub result: Value,
}

impl Outcome {
    pub fn ok(result: impl Serialize) -> Result<Self, CliError> {
        Ok(Self {
            code: 0,
            warnings: Vec::new(),
            result: serde_json::to_value(result).map_err(|e| CliError::input(e.to_string()))?,
        })
    }
}

#[derive(Serialize)]
struct Report<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    status: &'a str,
    exit_code: u8,
    warnings: &'a [String],
    error: Option<&'a str>,
    result: Option<&'a Value>,
}

fn status(code: u8) -> &'static str {
    match code {
        0 => "ok",
        1 => "input-error",
        2 => "degenerate",
        _ => "non-convergence",
    }
}

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

impl Context {
    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<(), CliError> {
        std::fs::write(self.path(name), contents).map_err(|e| CliError::input(format!("{name}: {e}")))
    }

    pub fn create(&self, name: &str) -> Result<std::fs::File, CliError> {
        std::fs::File::create(self.path(name)).map_err(|e| CliError::input(format!("{name}: {e}")))
    }
}

fn write_report(out: &Path, command: &str, seed: Option<u64>, code: u8, warnings: &[String], error: Option<&str>, result: Option<&Value>) {
    let report = Report {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        status: status(code),
        exit_code: code,
        warnings,
        error,
        result,
    };
    let Ok(mut text) = serde_json::to_string_pretty(&report) else {
        return;
    };
    text.push('\n');
    let file = out.join(format!("{}.json", command.replace('-', "_")));
    if let Err(e) = std::fs::write(&file, text) {
        log::error!("{}: {e}", file.display());
    }
}

fn merge(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    fn set<T: Clone>(dst: &mut T, src: &Option<T>) {
        if let Some(v) = src {
            *dst = v.clone();
        }
    }
    fn set_opt<T: Clone>(dst: &mut Option<T>, src: &Option<T>) {
        if src.is_some() {
            *dst = src.clone();
        }
    }
    match &cli.command {
        Command::FieldSolve(a) => {
            set_opt(&mut cfg.field_solve.spectrum, &a.spectrum);
            set_opt(&mut cfg.field_solve.resonance, &a.resonance);
        }
        Command::HyperfineFit(a) => {
            set_opt(&mut cfg.hyperfine_fit.data, &a.data);
            set(&mut cfg.hyperfine_fit.model, &a.model);
        }
        Command::Locate(a) => {
            set_opt(&mut cfg.locate.data, &a.data);
            set(&mut cfg.locate.half_width, &a.half_width);
            set(&mut cfg.locate.resolution, &a.resolution);
        }
        Command::SedorSim(a) => {
            set(&mut cfg.sedor.b0, &a.b0);
            set(&mut cfg.sedor.theta, &a.theta);
            set(&mut cfg.sedor.phi, &a.phi);
            set(&mut cfg.sedor.linewidth, &a.linewidth);
        }
        Command::GhzSim(a) => {
            set(&mut cfg.ghz.errors.over_rotation, &a.over_rotation);
            set(&mut cfg.ghz.errors.depolarizing, &a.depolarizing);
            set(&mut cfg.ghz.errors.polarization_efficiency, &a.polarization_efficiency);
            set(&mut cfg.ghz.protocol.n_reps, &a.reps);
            set_opt(&mut cfg.ghz.sequence, &a.sequence);
        }
        Command::Synth(a) => {
            set(&mut cfg.synth.kind, &a.kind);
            set(&mut cfg.synth.defect, &a.defect);
            set(&mut cfg.synth.b0, &a.b0);
            set(&mut cfg.synth.tilt, &a.tilt);
            set(&mut cfg.synth.noise, &a.noise);
            cfg.synth.third_plane |= a.third_plane;
        }
    }
    Ok(cfg)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::FieldSolve(_) => "field-solve",
        Command::HyperfineFit(_) => "hyperfine-fit",
        Command::Locate(_) => "locate",
        Command::SedorSim(_) => "sedor-sim",
        Command::GhzSim(_) => "ghz-sim",
        Command::Synth(_) => "synth",
    }
}

fn run(cli: &Cli, ctx: &Context) -> Result<Outcome, CliError> {
    match cli.command {
        Command::FieldSolve(_) => commands::field_solve(ctx),
        Command::HyperfineFit(_) => commands::hyperfine_fit(ctx),
        Command::Locate(_) => commands::locate(ctx),
        Command::SedorSim(_) => commands::sedor_sim(ctx),
        Command::GhzSim(_) => commands::ghz_sim(ctx),
        Command::Synth(_) => commands::synth(ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let name = command_name(&cli.command);
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));

    let cfg = match merge(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}", e.message);
            return ExitCode::from(e.code);
        }
    };
    let out = cfg.out.clone().unwrap_or(out);
    if let Err(e) = std::fs::create_dir_all(&out) {
        eprintln!("error: {}: {e}", out.display());
        return ExitCode::from(1);
    }
    if let Some(n) = cfg.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool: {e}");
        }
    }
    let ctx = Context { seed: cfg.seed, cfg, out };

    match run(&cli, &ctx) {
        Ok(o) => {
            for w in &o.warnings {
                log::warn!("{w}");
            }
            write_report(&ctx.out, name, ctx.seed, o.code, &o.warnings, None, Some(&o.result));
            ExitCode::from(o.code)
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            write_report(&ctx.out, name, ctx.seed, e.code, &[], Some(&e.message), e.partial.as_ref());
            ExitCode::from(e.code)
        }
    }
}
