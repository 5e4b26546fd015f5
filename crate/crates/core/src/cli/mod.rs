//! `pubsel` command-line interface.
//!
//! Exit codes: 0 success, 1 input error, 2 numerical failure or
//! non-convergence.

mod commands;
pub mod io;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
pub use commands::{FitDocument, ParameterRow};
pub use io::{read_studies, ReadOptions, RunManifest};

/// Environment variable setting the worker thread count.
pub const THREADS_ENV: &str = "PUBSEL_THREADS";

#[derive(Debug, Parser, Serialize)]
#[command(name = "pubsel", version, about = "Publication selection models for replication and meta-study data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
enum Command {
    /// Fit a selection model by maximum likelihood.
    Fit(FitArgs),
    /// Bias-corrected estimates and confidence intervals per study.
    Correct(CorrectArgs),
    /// Simulate latent and published studies.
    Simulate(SimulateArgs),
    /// Density, cutoff-jump, symmetry and meta-regression diagnostics.
    Diagnose(DiagnoseArgs),
    /// Median bias and coverage of conventional and corrected inference.
    Curves(CurvesArgs),
    /// Moment estimates and robust confidence sets.
    Gmm(GmmArgs),
    /// Build x and sigma from reported p-values and effect sizes.
    Prepare(PrepareArgs),
}

#[derive(Debug, Args, Serialize)]
struct DataArgs {
    /// Input CSV.
    #[arg(long)]
    data: PathBuf,
    /// Column of cluster labels for clustered standard errors.
    #[arg(long)]
    cluster: Option<String>,
    /// Estimates are reported as absolute values.
    #[arg(long)]
    sign_normalized: bool,
}

impl DataArgs {
    fn options(&self) -> ReadOptions {
        ReadOptions { cluster: self.cluster.clone(), sign_normalized: self.sign_normalized }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum Kind {
    Replication,
    Metastudy,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum EffectFamily {
    Gamma,
    T,
    Normal,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum Transform {
    Log,
    Identity,
}

#[derive(Debug, Args, Serialize)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    kind: Kind,
    /// Comma-separated z cutoffs.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "1.96")]
    cutoffs: Vec<f64>,
    /// Cutoffs apply to |z|.
    #[arg(long)]
    symmetric: bool,
    #[arg(long, value_enum, default_value = "gamma")]
    effect: EffectFamily,
    /// Cell whose coefficient is fixed at 1 (0-based); defaults to the last cell.
    #[arg(long)]
    reference: Option<usize>,
    /// Covariate shift of a cell's log coefficient, as `name:cell`. Repeatable.
    #[arg(long)]
    offset: Vec<String>,
    /// Maximum number of starting points.
    #[arg(long, default_value_t = 10)]
    starts: usize,
    #[arg(long, default_value_t = 20_200_101)]
    seed: u64,
    /// Quadrature nodes per piece; calibrated when omitted.
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long, value_enum, default_value = "log")]
    beta_transform: Transform,
    #[arg(long, default_value_t = 3000)]
    max_iters: u64,
    /// Also run the score test for selection on the latent effect.
    #[arg(long)]
    score_test: bool,
    /// Output fit document (JSON).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SelectionArgs {
    /// Fit document written by `pubsel fit`.
    #[arg(long, conflicts_with = "coefficients")]
    fit: Option<PathBuf>,
    /// Cutoffs of a known selection function.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    cutoffs: Vec<f64>,
    /// Coefficients of a known selection function, one per cell.
    #[arg(long, value_delimiter = ',')]
    coefficients: Option<Vec<f64>>,
    #[arg(long)]
    symmetric: bool,
}

#[derive(Debug, Args, Serialize)]
struct CorrectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    selection: SelectionArgs,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, default_value_t = 0.005)]
    delta: f64,
    /// Widen intervals for estimation error in the selection function.
    #[arg(long, requires = "fit")]
    bonferroni: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct SimulateArgs {
    /// Simulation configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Write every latent draw with `theta_star` and `D` columns.
    #[arg(long)]
    emit_latent: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct DiagnoseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "1.96")]
    cutoffs: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    bin_width: f64,
    /// Fit document whose selection function sets the bunching bound.
    #[arg(long)]
    fit: Option<PathBuf>,
    /// Bin edges for the replication symmetry check.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    edges: Option<Vec<f64>>,
    #[arg(long, default_value_t = 500)]
    bootstrap: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output prefix.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct CurvesArgs {
    #[command(flatten)]
    selection: SelectionArgs,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    theta_min: f64,
    #[arg(long, default_value_t = 6.0, allow_hyphen_values = true)]
    theta_max: f64,
    #[arg(long, default_value_t = 0.01)]
    theta_step: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum Moments {
    ReplicationBaseline,
    ReplicationSimple,
    Metastudy,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum Bound {
    MinusC1,
    MinusC2,
}

#[derive(Debug, Args, Serialize)]
struct GmmArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    moments: Moments,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "1.96")]
    cutoffs: Vec<f64>,
    #[arg(long)]
    symmetric: bool,
    /// Cell whose coefficient is fixed at 1 (0-based); defaults to the last cell.
    #[arg(long)]
    reference: Option<usize>,
    #[arg(long)]
    sigma_max: Option<f64>,
    #[arg(long, value_enum, default_value = "minus-c1")]
    bound: Bound,
    #[arg(long, default_value_t = crate::gmm::DEFAULT_BETA_MAX)]
    beta_max: f64,
    #[arg(long, default_value_t = crate::gmm::DEFAULT_GRID_STEP)]
    step: f64,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
enum EffectScale {
    /// Effects are correlations; apply atanh.
    Fisher,
    None,
}

#[derive(Debug, Args, Serialize)]
struct PrepareArgs {
    /// CSV with study_id, a p-value and an effect size per study.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "p_value")]
    p_column: String,
    #[arg(long, default_value = "effect")]
    effect_column: String,
    /// Replication p-value column, used when present.
    #[arg(long, default_value = "p_value_r")]
    p_column_r: String,
    #[arg(long, default_value = "effect_r")]
    effect_column_r: String,
    #[arg(long, value_enum, default_value = "fisher")]
    transform: EffectScale,
    #[arg(long)]
    out: PathBuf,
}

/// Files touched by one invocation.
#[derive(Debug, Default)]
struct Run {
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
}

impl Run {
    fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        io::write_atomic(path, bytes)?;
        self.outputs.push(path.to_path_buf());
        Ok(())
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Input(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
    // A pool may already exist when called repeatedly in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn execute(cli: &Cli) -> Result<i32> {
    init_threads()?;
    let start = Instant::now();
    let mut run = Run::default();
    let (name, out, code) = match &cli.command {
        Command::Fit(a) => ("fit", &a.out, commands::fit(a, &mut run)?),
        Command::Correct(a) => ("correct", &a.out, commands::correct(a, &mut run)?),
        Command::Simulate(a) => ("simulate", &a.out, commands::simulate(a, &mut run)?),
        Command::Diagnose(a) => ("diagnose", &a.out, commands::diagnose(a, &mut run)?),
        Command::Curves(a) => ("curves", &a.out, commands::curves(a, &mut run)?),
        Command::Gmm(a) => ("gmm", &a.out, commands::gmm(a, &mut run)?),
        Command::Prepare(a) => ("prepare", &a.out, commands::prepare(a, &mut run)?),
    };
    let inputs = run
        .inputs
        .iter()
        .map(|p| Ok(io::InputDigest { path: p.display().to_string(), sha256: io::file_digest(p)? }))
        .collect::<Result<Vec<_>>>()?;
    let manifest = RunManifest {
        command: name.to_string(),
        config_digest: io::sha256_hex(&serde_json::to_vec(&cli.command)?),
        seed: run.seed,
        inputs,
        outputs: run.outputs.iter().map(|p| p.display().to_string()).collect(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
    };
    io::write_atomic(&io::sibling(out, "manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(code)
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input() {
                1
            } else {
                2
            }
        }
    }
}
