//! Run configuration and command implementations behind the `adapttikh`
//! binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use adapttikh::adaptive::AdaptiveConfig;
use adapttikh::benchmark::{
    add_noise, delta_study, rate_study, DeltaStudyConfig, RateStudyConfig, RefinementStrategy, RingBenchmark,
};
use adapttikh::estimators::{implication_test, report, EstimatorConstants, EstimatorReport};
use adapttikh::fem::interpolate;
use adapttikh::{make_disk_mesh, Problem, Regularizer, RegularizerKind, SolverOptions};
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

/// Failure of a command, mapped to the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration or input files: exit 1.
    Usage(String),
    /// A solver or verification did not succeed: exit 2.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => f.write_str(m),
        }
    }
}

impl From<adapttikh::Error> for CliError {
    fn from(e: adapttikh::Error) -> Self {
        use adapttikh::Error as E;
        match e {
            E::NumericalFailure { .. } | E::InfeasibleCertificate { .. } | E::Assembly(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshParams {
    pub n_boundary: usize,
    /// Uniform refinements of the initial fan.
    pub levels: usize,
}

impl Default for MeshParams {
    fn default() -> Self {
        Self {
            n_boundary: 48,
            levels: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputPaths {
    /// Main result (JSON for `solve`, CSV for the studies); standard output
    /// when absent.
    pub out: Option<PathBuf>,
    /// Full JSON table for the studies.
    pub json: Option<PathBuf>,
}

/// Everything a command reads besides its flags. Flags override fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub benchmark: RingBenchmark,
    pub adaptive: AdaptiveConfig,
    pub constants: EstimatorConstants,
    pub mesh: MeshParams,
    pub output: OutputPaths,
}

impl RunConfig {
    /// Parses JSON; errors name the offending key.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| CliError::Usage(format!("config key `{}`: {}", e.path(), e.inner())))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        Self::from_json(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self, CliError> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.benchmark.validate()?;
        self.adaptive.validate()?;
        self.constants.validate()?;
        if self.mesh.n_boundary < 3 {
            return Err(CliError::Usage(format!("mesh.n_boundary must be at least 3, got {}", self.mesh.n_boundary)));
        }
        Ok(())
    }
}

fn write_output(path: Option<&Path>, contents: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, contents).map_err(|e| io_error(p, e)),
        None => std::io::stdout()
            .write_all(contents)
            .map_err(|e| CliError::Usage(format!("standard output: {e}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegularizerArg {
    L2,
    Ivanov,
    Measure,
}

impl From<RegularizerArg> for RegularizerKind {
    fn from(r: RegularizerArg) -> Self {
        match r {
            RegularizerArg::L2 => RegularizerKind::HilbertL2,
            RegularizerArg::Ivanov => RegularizerKind::IvanovLinf,
            RegularizerArg::Measure => RegularizerKind::MeasureNorm,
        }
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long, value_enum)]
    pub regularizer: RegularizerArg,
    /// Regularization parameter; also enters the benchmark data.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub mesh_levels: Option<usize>,
    #[arg(long)]
    pub n_boundary: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Result JSON; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
pub struct SolveSummary {
    pub regularizer: RegularizerKind,
    pub alpha: f64,
    pub rho: f64,
    pub delta: f64,
    pub num_vertices: usize,
    pub num_triangles: usize,
    pub h_max: f64,
    pub num_controls: usize,
    pub j_value: f64,
    pub discrepancy: f64,
    pub optimality_residual: f64,
    pub duality_gap: Option<f64>,
    pub iterations: usize,
    /// Nonzero coefficients (atoms for the measure penalty).
    pub support: usize,
    pub control_sup: f64,
    pub report: EstimatorReport,
}

pub fn cmd_solve(args: &SolveArgs) -> Result<(), CliError> {
    let mut config = RunConfig::load_or_default(args.config.as_deref())?;
    if let Some(alpha) = args.alpha {
        config.benchmark.alpha = alpha;
    }
    if let Some(levels) = args.mesh_levels {
        config.mesh.levels = levels;
    }
    if let Some(n) = args.n_boundary {
        config.mesh.n_boundary = n;
    }
    if args.out.is_some() {
        config.output.out = args.out.clone();
    }
    config.validate()?;
    let kind = RegularizerKind::from(args.regularizer);
    let b = config.benchmark;
    let mesh = Arc::new(make_disk_mesh(config.mesh.n_boundary, 1.0, config.mesh.levels)?);
    let data = add_noise(&mesh, &interpolate(&mesh, |p| b.data(p)), b.delta, b.seed)?;
    let problem = Problem::new(mesh.clone(), data)?;
    let solution = problem.solve(Regularizer::new(kind, b.alpha)?, &SolverOptions::default())?;
    let rep = report(&solution, &config.constants)?;
    let summary = SolveSummary {
        regularizer: kind,
        alpha: b.alpha,
        rho: b.rho,
        delta: b.delta,
        num_vertices: mesh.num_vertices(),
        num_triangles: mesh.num_triangles(),
        h_max: mesh.h_max(),
        num_controls: problem.num_controls(),
        j_value: solution.j_value,
        discrepancy: solution.discrepancy,
        optimality_residual: solution.optimality_residual,
        duality_gap: solution.duality_gap,
        iterations: solution.iterations,
        support: solution.u.iter().filter(|c| **c != 0.0).count(),
        control_sup: solution.u.iter().fold(0.0f64, |m, c| m.max(c.abs())),
        report: rep,
    };
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| CliError::Numerical(e.to_string()))?;
    text.push('\n');
    write_output(config.output.out.as_deref(), text.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RefinementArg {
    Uniform,
    Adaptive,
}

#[derive(Debug, Args)]
pub struct RateStudyArgs {
    #[arg(long, value_enum, default_value = "uniform")]
    pub refinement: RefinementArg,
    #[arg(long, default_value_t = 4)]
    pub levels: usize,
    /// Extra uniform refinements of the finest level for the reference.
    #[arg(long, default_value_t = 2)]
    pub reference_levels: usize,
    /// Keep the configured constants instead of fitting them on level 0.
    #[arg(long)]
    pub no_calibrate: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV table; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

pub fn cmd_rate_study(args: &RateStudyArgs) -> Result<(), CliError> {
    let mut config = RunConfig::load_or_default(args.config.as_deref())?;
    if args.out.is_some() {
        config.output.out = args.out.clone();
    }
    if args.json.is_some() {
        config.output.json = args.json.clone();
    }
    config.validate()?;
    let study = RateStudyConfig {
        refinement: match args.refinement {
            RefinementArg::Uniform => RefinementStrategy::Uniform,
            RefinementArg::Adaptive => RefinementStrategy::Adaptive,
        },
        levels: args.levels,
        n_boundary: config.mesh.n_boundary,
        initial_levels: config.mesh.levels,
        reference_levels: args.reference_levels,
        theta_mark: config.adaptive.theta_mark,
        calibrate: !args.no_calibrate,
        constants: config.constants,
        ..RateStudyConfig::default()
    };
    let table = rate_study(&config.benchmark, &study)?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    write_output(config.output.out.as_deref(), &csv)?;
    if let Some(path) = &config.output.json {
        fs::write(path, table.to_json()?).map_err(|e| io_error(path, e))?;
    }
    if table.truncated {
        eprintln!("warning: vertex cap reached, {} of {} levels computed", table.rows.len(), args.levels);
    }
    let line = table.slopes.summary();
    if config.output.out.is_some() {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct DeltaStudyArgs {
    /// Decreasing noise levels.
    #[arg(long, value_delimiter = ',', default_values_t = [4e-2, 2e-2, 1e-2, 5e-3])]
    pub deltas: Vec<f64>,
    #[arg(long, value_enum, default_value = "measure")]
    pub regularizer: RegularizerArg,
    /// Uniform refinements of the initial mesh used to fit the constants; 0
    /// keeps the configured ones.
    #[arg(long, default_value_t = 3)]
    pub calibration_levels: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// CSV table; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

pub fn cmd_delta_study(args: &DeltaStudyArgs) -> Result<(), CliError> {
    let mut config = RunConfig::load_or_default(args.config.as_deref())?;
    if args.out.is_some() {
        config.output.out = args.out.clone();
    }
    if args.json.is_some() {
        config.output.json = args.json.clone();
    }
    config.validate()?;
    let study = DeltaStudyConfig {
        deltas: args.deltas.clone(),
        kind: args.regularizer.into(),
        rho: config.benchmark.rho,
        seed: config.benchmark.seed,
        n_boundary: config.mesh.n_boundary,
        initial_levels: config.mesh.levels,
        adaptive: config.adaptive.clone(),
        constants: config.constants,
        calibration_levels: args.calibration_levels,
    };
    let table = delta_study(&study)?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv)?;
    write_output(config.output.out.as_deref(), &csv)?;
    if let Some(path) = &config.output.json {
        fs::write(path, table.to_json()?).map_err(|e| io_error(path, e))?;
    }
    let accepted = table.rows.iter().filter(|r| r.accepted).count();
    let line = match table.discrepancy_slope {
        Some(s) => format!("slope discrepancy vs delta: {s:.4} over {accepted} accepted rows"),
        None => format!("warning: no slope, a fit needs at least two accepted rows ({accepted} accepted)"),
    };
    if config.output.out.is_some() {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct CheckLemmaArgs {
    #[arg(long)]
    pub sigma: f64,
    #[arg(long)]
    pub gamma: f64,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Succeeds iff the closed-form check and the sampled implication agree.
pub fn cmd_check_lemma(args: &CheckLemmaArgs) -> Result<(), CliError> {
    if !args.sigma.is_finite() || !args.gamma.is_finite() {
        return Err(CliError::Usage("sigma and gamma must be finite".into()));
    }
    let o = implication_test(args.sigma, args.gamma, args.samples, args.seed);
    println!(
        "sigma {} gamma {}: check {}, {} samples, {} violations",
        o.sigma, o.gamma, o.check, o.samples, o.violations
    );
    if let Some([a, b, c, d]) = o.counterexample {
        println!("counterexample a={a:e} b={b:e} c={c:e} d={d:e}");
    }
    if o.consistent() {
        Ok(())
    } else if o.check {
        Err(CliError::Numerical(format!("{} violations although the check holds", o.violations)))
    } else {
        Err(CliError::Numerical("no counterexample found although the check fails".into()))
    }
}

/// Thread count from `ADAPTTIKH_THREADS`, falling back to the flag.
pub fn resolve_threads(flag: Option<usize>, env: Option<&str>) -> Result<Option<usize>, CliError> {
    match env {
        Some(v) if !v.trim().is_empty() => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("ADAPTTIKH_THREADS must be a nonnegative integer, got `{v}`"))),
        _ => Ok(flag),
    }
}
