//! Batch front end: every command reads JSON inputs, writes JSON and CSV
//! outputs plus a run manifest, and exits with 0 (success), 2 (invalid
//! input) or 3 (numerical failure).

mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

pub use manifest::{sha256_hex, FileHash, RunManifest};

use crate::apseries::{ApSeries, Basis, SeriesWire, Window};
use crate::error::{Error, Result};
use crate::frequency::{
    sample_alpha, sample_frequency, DiophantineParams, FrequencyContext, Lattice, DEFAULT_GAMMA, DEFAULT_GAMMA0,
    DEFAULT_MAX_ATTEMPTS, DEFAULT_MAX_ORDER, DEFAULT_MAX_WEIGHT, DEFAULT_MU,
};
use crate::homological::{solve_difference, SolveOptions};
use crate::kam::{
    fit_contraction, kam_iterate, orbit_shadow_check, perturbation_size, verify_conjugacy, CurveWire, InvariantCurve,
    IterateOptions, KamConstants, KamSchedule, Mode, DEFAULT_SAMPLES,
};
use crate::pendulum::{
    boundedness_experiment, fit_poincare_map, integrate_ivp, section_csv, BoundednessRecord, ChartOptions, FitOptions,
    PendulumSystem, PoincareChart, PoincareState, SystemWire,
};
use crate::twistmap::{MapDefinition, MapWire};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "apkam", version, about = "Invariant curves of almost periodic twist maps")]
pub struct Cli {
    /// Seed of every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Directory receiving the outputs.
    #[arg(long, global = true, default_value = ".")]
    pub out_dir: PathBuf,
    /// Manifest path; defaults to `manifest.json` in the output directory.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Diophantine frequency vectors and rotation numbers.
    #[command(subcommand)]
    Freq(FreqCmd),
    /// Twist map evaluation and the intersection property.
    #[command(subcommand)]
    Map(MapCmd),
    /// The difference equation `s(x + alpha) - s(x) = h(x)`.
    #[command(subcommand)]
    Homological(HomologicalCmd),
    /// The KAM iteration.
    #[command(subcommand)]
    Kam(KamCmd),
    /// Conjugacy residual and orbit shadowing of a curve.
    Verify(VerifyArgs),
    /// Forced pendulum experiments.
    #[command(subcommand)]
    Pendulum(PendulumCmd),
    /// Re-runs a manifest and compares the outputs byte for byte.
    Replay(ReplayArgs),
}

#[derive(Debug, Subcommand)]
pub enum FreqCmd {
    Sample(FreqSampleArgs),
    Check(FreqCheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct FreqSampleArgs {
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_WEIGHT)]
    pub weight: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_ORDER)]
    pub order: u32,
    #[arg(long, default_value_t = DEFAULT_GAMMA0)]
    pub gamma0: f64,
    #[arg(long, default_value_t = DEFAULT_MU)]
    pub mu: f64,
    /// Constant of the rotation condition.
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, num_args = 2, value_names = ["A", "B"], default_values_t = [0.4, 0.6])]
    pub interval: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_MAX_ATTEMPTS)]
    pub max_attempts: usize,
    #[arg(long, default_value = "ctx.json")]
    pub out: String,
}

#[derive(Debug, Args, Serialize)]
pub struct FreqCheckArgs {
    #[arg(value_name = "CTX", required_unless_present = "ctx")]
    pub path: Option<PathBuf>,
    #[arg(long, conflicts_with = "path")]
    pub ctx: Option<PathBuf>,
    #[arg(long, default_value = "check.json")]
    pub out: String,
}

#[derive(Debug, Subcommand)]
pub enum MapCmd {
    Apply(MapApplyArgs),
    Intersect(MapIntersectArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct MapSource {
    #[arg(long)]
    pub map: PathBuf,
    /// Frequency context; needed when the map file does not embed one.
    #[arg(long)]
    pub ctx: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct MapApplyArgs {
    #[command(flatten)]
    pub source: MapSource,
    #[arg(long)]
    pub x: f64,
    #[arg(long)]
    pub y: f64,
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    #[arg(long, default_value = "orbit.csv")]
    pub out: String,
}

#[derive(Debug, Args, Serialize)]
pub struct MapIntersectArgs {
    #[command(flatten)]
    pub source: MapSource,
    /// Height of the horizontal test curve; defaults to the rotation number.
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub x_min: f64,
    #[arg(long, default_value_t = 1000.0)]
    pub x_max: f64,
    #[arg(long, default_value_t = 4096)]
    pub samples: usize,
    #[arg(long, default_value = "intersect.json")]
    pub out: String,
}

#[derive(Debug, Subcommand)]
pub enum HomologicalCmd {
    Solve(HomologicalArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct HomologicalArgs {
    #[arg(long)]
    pub ctx: PathBuf,
    /// Right-hand side `h` as a series file.
    #[arg(long, alias = "h")]
    pub rhs: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub r: f64,
    #[arg(long, alias = "rprime", default_value_t = 0.5)]
    pub r_prime: f64,
    #[arg(long, default_value_t = 0.05)]
    pub s: f64,
    #[arg(long, default_value = "solution.json")]
    pub out: String,
    /// Also write the report on its own.
    #[arg(long)]
    pub report: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum KamCmd {
    Run(KamRunArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct KamRunArgs {
    #[command(flatten)]
    pub source: MapSource,
    #[arg(long, default_value = "practical")]
    pub mode: String,
    /// Conjugacy tolerance of practical mode.
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value_t = 1.0)]
    pub r0: f64,
    /// Initial action width; defaults to the map window.
    #[arg(long)]
    pub s0: Option<f64>,
    /// Size bound of the schedule; defaults to the measured size.
    #[arg(long)]
    pub eps0: Option<f64>,
    #[arg(long, default_value_t = 6)]
    pub max_stage: usize,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value = "curve.json")]
    pub out: String,
    /// Stage log; defaults to `<out stem>.stages.csv`.
    #[arg(long)]
    pub log: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long)]
    pub curve: PathBuf,
    #[command(flatten)]
    pub source: MapSource,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    /// Orbits started on the curve for the shadowing check.
    #[arg(long, default_value_t = 8)]
    pub seeds: usize,
    #[arg(long, default_value_t = 1000)]
    pub iterates: usize,
    #[arg(long, default_value = "verify.json")]
    pub out: String,
}

#[derive(Debug, Subcommand)]
pub enum PendulumCmd {
    Simulate(SimulateArgs),
    Poincare(PoincareArgs),
    Bounded(BoundedArgs),
    Fitmap(FitmapArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub sys: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub x0: f64,
    #[arg(long)]
    pub y0: f64,
    #[arg(long)]
    pub tmax: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    /// Sample spacing of the output.
    #[arg(long, default_value_t = 0.1)]
    pub dt: f64,
    #[arg(long, default_value = "traj.csv")]
    pub out: String,
}

#[derive(Debug, Args, Serialize)]
pub struct PoincareArgs {
    #[arg(long)]
    pub sys: PathBuf,
    #[arg(long)]
    pub rho: f64,
    #[arg(long, default_value_t = 0.0)]
    pub theta: f64,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    /// Required `h - sup |G| > fraction h` along each return.
    #[arg(long, default_value_t = 0.5)]
    pub energy_fraction: f64,
    #[arg(long, default_value = "section.csv")]
    pub out: String,
}

#[derive(Debug, Args, Serialize)]
pub struct BoundedArgs {
    #[arg(long)]
    pub sys: PathBuf,
    #[arg(long, num_args = 1.., value_delimiter = ',')]
    pub y0: Vec<f64>,
    #[arg(long)]
    pub tmax: f64,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
    #[arg(long, default_value = "bounded.csv")]
    pub out: String,
}

#[derive(Debug, Args, Serialize)]
pub struct FitmapArgs {
    #[arg(long)]
    pub sys: PathBuf,
    /// Action at the center of the fitted band.
    #[arg(long)]
    pub rho: f64,
    #[arg(long, default_value_t = 4)]
    pub weight: u32,
    #[arg(long, default_value_t = 2)]
    pub degree: usize,
    #[arg(long, default_value_t = 256)]
    pub n_theta: usize,
    #[arg(long, default_value_t = 5)]
    pub n_mu: usize,
    #[arg(long, default_value_t = 200.0)]
    pub theta_max: f64,
    #[arg(long, default_value_t = 1e-12)]
    pub tol: f64,
    #[arg(long, default_value = "fitmap.json")]
    pub out: String,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    /// Manifest to re-run; its input paths are resolved against its
    /// directory.
    #[arg(value_name = "MANIFEST")]
    pub path: PathBuf,
}

/// Failure of a command, with the exit code it maps to.
#[derive(Debug)]
pub enum CliError {
    Engine(Error),
    /// A check the command performs did not pass.
    Failed(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Engine(e)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Engine(e) if e.is_validation() => EXIT_INVALID,
            _ => EXIT_NUMERICAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Engine(e) => write!(f, "{e}"),
            CliError::Failed(msg) => write!(f, "{msg}"),
        }
    }
}

/// Files read and produced by one command. Outputs are held in memory and
/// written only once the command has succeeded.
#[derive(Default)]
struct Run {
    inputs: Vec<FileHash>,
    outputs: Vec<(String, Vec<u8>)>,
    /// Outputs of a command whose final check failed are still written.
    failure: Option<String>,
    summary: Vec<String>,
}

impl Run {
    fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).map_err(|e| manifest::io_error(path, e))?;
        self.inputs.push(FileHash {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        });
        Ok(bytes)
    }

    fn json<T: DeserializeOwned>(&mut self, path: &Path) -> Result<T> {
        let bytes = self.read(path)?;
        serde_json::from_slice(&bytes).map_err(|source| Error::Json {
            what: path.display().to_string(),
            source,
        })
    }

    fn write(&mut self, name: &str, bytes: Vec<u8>) {
        self.outputs.push((name.to_string(), bytes));
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) {
        let mut text = serde_json::to_string_pretty(value).expect("outputs serialize");
        text.push('\n');
        self.write(name, text.into_bytes());
    }

    fn note(&mut self, line: String) {
        self.summary.push(line);
    }

    fn map(&mut self, src: &MapSource) -> Result<MapDefinition> {
        let wire: MapWire = self.json(&src.map)?;
        match &src.ctx {
            Some(p) => {
                let ctx: FrequencyContext = self.json(p)?;
                MapDefinition::from_wire(&Basis::new(ctx)?, &wire)
            }
            None => MapDefinition::from_wire_embedded(&wire),
        }
    }

    fn system(&mut self, path: &Path) -> Result<PendulumSystem> {
        let wire: SystemWire = self.json(path)?;
        PendulumSystem::from_wire(&wire)
    }
}

/// Output names must stay inside the output directory.
fn check_name(name: &str) -> Result<()> {
    let p = Path::new(name);
    if name.is_empty() || p.is_absolute() || p.components().any(|c| !matches!(c, std::path::Component::Normal(_))) {
        return Err(Error::invalid("cli", format!("output name {name:?} must be a plain relative path")));
    }
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::invalid("cli", format!("--{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Freq(FreqCmd::Sample(_)) => "freq sample",
        Command::Freq(FreqCmd::Check(_)) => "freq check",
        Command::Map(MapCmd::Apply(_)) => "map apply",
        Command::Map(MapCmd::Intersect(_)) => "map intersect",
        Command::Homological(_) => "homological solve",
        Command::Kam(_) => "kam run",
        Command::Verify(_) => "verify",
        Command::Pendulum(PendulumCmd::Simulate(_)) => "pendulum simulate",
        Command::Pendulum(PendulumCmd::Poincare(_)) => "pendulum poincare",
        Command::Pendulum(PendulumCmd::Bounded(_)) => "pendulum bounded",
        Command::Pendulum(PendulumCmd::Fitmap(_)) => "pendulum fitmap",
        Command::Replay(_) => "replay",
    }
}

fn parameters(cmd: &Command) -> serde_json::Value {
    let v = match cmd {
        Command::Freq(FreqCmd::Sample(a)) => serde_json::to_value(a),
        Command::Freq(FreqCmd::Check(a)) => serde_json::to_value(a),
        Command::Map(MapCmd::Apply(a)) => serde_json::to_value(a),
        Command::Map(MapCmd::Intersect(a)) => serde_json::to_value(a),
        Command::Homological(HomologicalCmd::Solve(a)) => serde_json::to_value(a),
        Command::Kam(KamCmd::Run(a)) => serde_json::to_value(a),
        Command::Verify(a) => serde_json::to_value(a),
        Command::Pendulum(PendulumCmd::Simulate(a)) => serde_json::to_value(a),
        Command::Pendulum(PendulumCmd::Poincare(a)) => serde_json::to_value(a),
        Command::Pendulum(PendulumCmd::Bounded(a)) => serde_json::to_value(a),
        Command::Pendulum(PendulumCmd::Fitmap(a)) => serde_json::to_value(a),
        Command::Replay(a) => serde_json::to_value(a),
    };
    v.expect("arguments serialize")
}

fn output_name(cmd: &Command) -> &str {
    match cmd {
        Command::Freq(FreqCmd::Sample(a)) => &a.out,
        Command::Freq(FreqCmd::Check(a)) => &a.out,
        Command::Map(MapCmd::Apply(a)) => &a.out,
        Command::Map(MapCmd::Intersect(a)) => &a.out,
        Command::Homological(HomologicalCmd::Solve(a)) => &a.out,
        Command::Kam(KamCmd::Run(a)) => &a.out,
        Command::Verify(a) => &a.out,
        Command::Pendulum(PendulumCmd::Simulate(a)) => &a.out,
        Command::Pendulum(PendulumCmd::Poincare(a)) => &a.out,
        Command::Pendulum(PendulumCmd::Bounded(a)) => &a.out,
        Command::Pendulum(PendulumCmd::Fitmap(a)) => &a.out,
        Command::Replay(_) => "",
    }
}

/// File name next to the main output: `curve.json` + `stages.csv` gives
/// `curve.stages.csv`.
fn sibling(main: &str, suffix: &str) -> String {
    let stem = match main.rfind('.') {
        Some(i) if i > 0 => &main[..i],
        _ => main,
    };
    format!("{stem}.{suffix}")
}

fn freq_sample(run: &mut Run, a: &FreqSampleArgs, seed: u64) -> Result<()> {
    let lattice = Lattice {
        max_dim: a.dim,
        max_weight: a.weight,
        max_order: a.order,
    };
    let params = DiophantineParams {
        gamma0: a.gamma0,
        mu: a.mu,
        gamma: a.gamma,
    };
    let (mut ctx, stats) = sample_frequency(lattice, params, seed, a.max_attempts)?;
    let (alpha, astats) = sample_alpha(&mut ctx, (a.interval[0], a.interval[1]), a.gamma, seed, a.max_attempts)?;
    run.note(format!(
        "omega = {:?} after {} attempts; alpha = {alpha} after {} attempts",
        ctx.omega, stats.attempts, astats.attempts
    ));
    run.write_json(&a.out, &ctx);
    Ok(())
}

fn freq_check(run: &mut Run, a: &FreqCheckArgs) -> Result<()> {
    let path = a.path.as_ref().or(a.ctx.as_ref()).expect("clap requires one");
    let ctx: FrequencyContext = run.json(path)?;
    let report = ctx.verify()?;
    if !report.passed() {
        run.failure = Some(format!(
            "frequency: {} Diophantine and {} rotation failures",
            report.diophantine_failures, report.rotation_failures
        ));
    }
    run.note(format!("{} indices checked, passed = {}", report.indices_checked, report.passed()));
    run.write_json(&a.out, &report);
    Ok(())
}

fn map_apply(run: &mut Run, a: &MapApplyArgs) -> Result<()> {
    let map = run.map(&a.source)?;
    let mut csv = String::from("k,x,y\n");
    let (mut x, mut y) = (a.x, a.y);
    csv.push_str(&format!("0,{x:e},{y:e}\n"));
    for k in 1..=a.steps {
        (x, y) = map.apply(x, y);
        csv.push_str(&format!("{k},{x:e},{y:e}\n"));
    }
    run.write(&a.out, csv.into_bytes());
    Ok(())
}

fn map_intersect(run: &mut Run, a: &MapIntersectArgs) -> Result<()> {
    let (map, _) = run.map(&a.source)?.into_standard()?;
    let level = a.level.unwrap_or_else(|| map.alpha());
    let phi = ApSeries::constant(map.basis(), 0, level);
    let res = map.intersection_check(&phi, (a.x_min, a.x_max), a.samples)?;
    run.note(format!("intersection found = {}", res.found));
    run.write_json(&a.out, &json!({ "level": level, "result": res }));
    Ok(())
}

fn homological(run: &mut Run, a: &HomologicalArgs) -> Result<()> {
    let ctx: FrequencyContext = run.json(&a.ctx)?;
    let basis = Basis::new(ctx)?;
    let wire: SeriesWire = run.json(&a.rhs)?;
    let h = ApSeries::from_wire(&basis, &wire)?;
    let opts = SolveOptions::new(Window::new(a.r, a.s)?, a.r_prime)?;
    let (s, report) = solve_difference(&h, &opts)?;
    run.note(format!("relative residual {:e}", report.relative_residual));
    run.write_json(&a.out, &json!({ "solution": s.to_wire(), "report": report }));
    if let Some(name) = &a.report {
        run.write_json(name, &report);
    }
    Ok(())
}

fn kam_run(run: &mut Run, a: &KamRunArgs) -> Result<()> {
    let mode: Mode = a.mode.parse()?;
    let def = run.map(&a.source)?;
    let (map, nonresonance) = def.into_standard()?;
    let s0 = a.s0.unwrap_or(map.window.s);
    positive("s0", s0)?;
    let eps0 = match a.eps0 {
        Some(e) => e,
        None => perturbation_size(&map.f, &map.g, Window::new(a.r0, s0)?),
    };
    let schedule = KamSchedule {
        r0: a.r0,
        s0,
        eps0,
        constants: KamConstants::default(),
        max_stage: a.max_stage,
    };
    schedule.validate()?;
    let opts = IterateOptions {
        mode,
        tol_conj: a.tol,
        samples: a.samples,
    };
    let curve = kam_iterate(&map, &schedule, &opts)?;
    let fit = fit_contraction(&curve.stage_log);
    let alpha = map.alpha();
    let mut frequencies = map.basis().context().omega.clone();
    // After rescaling a small twist map, alpha is already the product
    // delta * alpha of the scaled rotation number.
    frequencies.push(1.0 / alpha);
    run.note(format!(
        "{} stages, conjugacy residual {:e}",
        curve.stage_log.len(),
        curve.conjugacy_residual
    ));
    run.write_json(&a.out, &curve.to_wire());
    let log = a.log.clone().unwrap_or_else(|| sibling(&a.out, "stages.csv"));
    run.write(&log, curve.stage_csv().into_bytes());
    run.write_json(
        &sibling(&a.out, "report.json"),
        &json!({
            "mode": mode,
            "alpha": alpha,
            "stages": curve.stage_log.len(),
            "conjugacy_residual": curve.conjugacy_residual,
            "norm_bound": curve.norm_bound,
            "contraction_fit": fit,
            "solution_frequencies": frequencies,
            "rotation_recheck": nonresonance,
        }),
    );
    Ok(())
}

fn verify(run: &mut Run, a: &VerifyArgs) -> Result<()> {
    let (map, _) = run.map(&a.source)?.into_standard()?;
    let wire: CurveWire = run.json(&a.curve)?;
    let curve = InvariantCurve::from_wire(map.basis(), &wire)?;
    let residual = verify_conjugacy(&curve, &map, a.samples);
    let shadow = orbit_shadow_check(&curve, &map, a.seeds, a.iterates);
    run.note(format!("conjugacy residual {residual:e}, shadow deviation {:e}", shadow.max_deviation));
    run.write_json(&a.out, &json!({ "conjugacy_residual": residual, "shadow": shadow }));
    Ok(())
}

fn simulate(run: &mut Run, a: &SimulateArgs) -> Result<()> {
    let sys = run.system(&a.sys)?;
    positive("tmax", a.tmax)?;
    positive("dt", a.dt)?;
    let tr = integrate_ivp(&sys, a.x0, a.y0, (0.0, a.tmax), a.tol, Some(a.dt))?;
    run.write(&a.out, tr.csv().into_bytes());
    Ok(())
}

fn poincare(run: &mut Run, a: &PoincareArgs) -> Result<()> {
    let sys = run.system(&a.sys)?;
    let chart = PoincareChart::new(
        &sys,
        ChartOptions {
            tol: a.tol,
            energy_fraction: a.energy_fraction,
        },
    )?;
    let orbit = chart.orbit(
        PoincareState {
            theta: a.theta,
            rho: a.rho,
        },
        a.iters,
    )?;
    run.note(format!("validity threshold rho > {:e}", chart.validity_threshold()));
    run.write(&a.out, section_csv(&orbit).into_bytes());
    Ok(())
}

fn bounded(run: &mut Run, a: &BoundedArgs) -> Result<()> {
    let sys = run.system(&a.sys)?;
    if a.y0.is_empty() {
        return Err(Error::invalid("cli", "--y0 needs at least one value"));
    }
    let records = boundedness_experiment(&sys, &a.y0, a.tmax, a.tol)?;
    let mut csv = String::from(BoundednessRecord::csv_header());
    csv.push('\n');
    for r in &records {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    if records.iter().any(|r| r.rate_bound_holds == Some(false)) {
        run.failure = Some("pendulum: fitted growth rate below p*/2 - tolerance".into());
    }
    run.write(&a.out, csv.into_bytes());
    run.write_json(&sibling(&a.out, "json"), &records);
    Ok(())
}

fn fitmap(run: &mut Run, a: &FitmapArgs) -> Result<()> {
    let sys = run.system(&a.sys)?;
    positive("rho", a.rho)?;
    let mut opts = FitOptions::around(a.rho);
    opts.max_weight = a.weight;
    opts.degree = a.degree;
    opts.n_theta = a.n_theta;
    opts.n_mu = a.n_mu;
    opts.theta_range = (0.0, a.theta_max);
    opts.chart.tol = a.tol;
    let fit = fit_poincare_map(&sys, &opts)?;
    run.note(format!(
        "fit residual {:e}, perturbation size {:e}",
        fit.report.residual_max, fit.report.perturbation_norm
    ));
    let wire = MapDefinition::SmallTwist(fit.map).to_wire();
    run.write_json(&a.out, &wire);
    run.write_json(&sibling(&a.out, "report.json"), &json!({ "options": opts, "report": fit.report }));
    Ok(())
}

fn dispatch(run: &mut Run, cmd: &Command, seed: u64) -> Result<()> {
    match cmd {
        Command::Freq(FreqCmd::Sample(a)) => freq_sample(run, a, seed),
        Command::Freq(FreqCmd::Check(a)) => freq_check(run, a),
        Command::Map(MapCmd::Apply(a)) => map_apply(run, a),
        Command::Map(MapCmd::Intersect(a)) => map_intersect(run, a),
        Command::Homological(HomologicalCmd::Solve(a)) => homological(run, a),
        Command::Kam(KamCmd::Run(a)) => kam_run(run, a),
        Command::Verify(a) => verify(run, a),
        Command::Pendulum(PendulumCmd::Simulate(a)) => simulate(run, a),
        Command::Pendulum(PendulumCmd::Poincare(a)) => poincare(run, a),
        Command::Pendulum(PendulumCmd::Bounded(a)) => bounded(run, a),
        Command::Pendulum(PendulumCmd::Fitmap(a)) => fitmap(run, a),
        Command::Replay(_) => unreachable!("replay is handled before dispatch"),
    }
}

/// Summary of a finished command.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
    pub messages: Vec<String>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| manifest::io_error(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| manifest::io_error(path, e))
}

/// `target` relative to the directory `base`.
fn relative_path(target: &Path, base: &Path) -> Result<String> {
    let t = std::fs::canonicalize(target).map_err(|e| manifest::io_error(target, e))?;
    let b = std::fs::canonicalize(base).map_err(|e| manifest::io_error(base, e))?;
    let tc: Vec<_> = t.components().collect();
    let bc: Vec<_> = b.components().collect();
    let common = tc.iter().zip(&bc).take_while(|(x, y)| x == y).count();
    let mut rel = PathBuf::new();
    for _ in common..bc.len() {
        rel.push("..");
    }
    for c in &tc[common..] {
        rel.push(c);
    }
    Ok(rel.display().to_string())
}

/// Applies `f` to every argument and to the value of every `--flag=value`.
fn map_path_args(args: &[String], f: &dyn Fn(&str) -> Option<String>) -> Vec<String> {
    args.iter()
        .map(|a| {
            if let Some(new) = f(a) {
                return new;
            }
            if let Some((flag, value)) = a.split_once('=') {
                if let Some(new) = f(value) {
                    return format!("{flag}={new}");
                }
            }
            a.clone()
        })
        .collect()
}

fn rename_strings(v: &mut serde_json::Value, f: &dyn Fn(&str) -> Option<String>) {
    match v {
        serde_json::Value::String(s) => {
            if let Some(new) = f(s) {
                *s = new;
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(|x| rename_strings(x, f)),
        serde_json::Value::Object(map) => map.values_mut().for_each(|x| rename_strings(x, f)),
        _ => {}
    }
}

/// Runs one parsed command; `args` is the command line without the
/// program name, recorded in the manifest.
pub fn execute(cli: &Cli, args: &[String]) -> std::result::Result<Outcome, CliError> {
    if let Command::Replay(r) = &cli.command {
        return replay(&r.path, cli.threads);
    }
    check_name(output_name(&cli.command))?;
    let mut run = Run::default();
    dispatch(&mut run, &cli.command, cli.seed)?;

    for (name, _) in &run.outputs {
        check_name(name)?;
    }
    let mut outputs = Vec::with_capacity(run.outputs.len());
    for (name, bytes) in &run.outputs {
        write_file(&cli.out_dir.join(name), bytes)?;
        outputs.push(FileHash {
            path: name.clone(),
            sha256: sha256_hex(bytes),
        });
    }
    let manifest_path = cli.manifest.clone().unwrap_or_else(|| cli.out_dir.join("manifest.json"));
    let manifest_dir = match manifest_path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&manifest_dir).map_err(|e| manifest::io_error(&manifest_dir, e))?;
    let mut renames = Vec::with_capacity(run.inputs.len());
    for input in &mut run.inputs {
        let rel = relative_path(Path::new(&input.path), &manifest_dir)?;
        renames.push((input.path.clone(), rel.clone()));
        input.path = rel;
    }
    let rename = |a: &str| renames.iter().find(|(old, _)| old == a).map(|(_, new)| new.clone());
    let mut params = parameters(&cli.command);
    rename_strings(&mut params, &rename);
    let manifest = RunManifest {
        command: command_name(&cli.command).to_string(),
        args: map_path_args(&manifest::strip_output_flags(args), &rename),
        parameters: params,
        seed: cli.seed,
        inputs: run.inputs,
        outputs,
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_file(&manifest_path, manifest.to_json().as_bytes())?;
    if let Some(msg) = run.failure {
        return Err(CliError::Failed(msg));
    }
    Ok(Outcome {
        manifest,
        manifest_path,
        messages: run.summary,
    })
}

/// Re-runs the manifest at `path` in a scratch directory and compares every
/// output with its recorded hash.
pub fn replay(path: &Path, threads: Option<usize>) -> std::result::Result<Outcome, CliError> {
    let manifest = RunManifest::load(path)?;
    let base = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let scratch = tempfile::tempdir().map_err(|e| manifest::io_error(Path::new("tempdir"), e))?;

    // Inputs are recorded relative to the manifest directory.
    let rebase = |a: &str| {
        manifest
            .inputs
            .iter()
            .any(|f| f.path == a && Path::new(a).is_relative())
            .then(|| base.join(a).display().to_string())
    };
    let mut args = map_path_args(&manifest.args, &rebase);
    for input in &manifest.inputs {
        let p = if Path::new(&input.path).is_relative() {
            base.join(&input.path)
        } else {
            PathBuf::from(&input.path)
        };
        let bytes = std::fs::read(&p).map_err(|e| manifest::io_error(&p, e))?;
        if sha256_hex(&bytes) != input.sha256 {
            return Err(Error::invalid("cli", format!("input {} changed since the manifest was written", input.path)).into());
        }
    }
    args.push("--out-dir".into());
    args.push(scratch.path().display().to_string());
    args.push("--manifest".into());
    args.push(scratch.path().join("replay-manifest.json").display().to_string());
    let mut argv = vec!["apkam".to_string()];
    argv.extend(args.iter().cloned());
    let mut cli = Cli::try_parse_from(&argv)
        .map_err(|e| CliError::Engine(Error::invalid("cli", format!("manifest arguments do not parse: {e}"))))?;
    cli.threads = threads.or(cli.threads);
    match execute(&cli, &args) {
        Ok(_) | Err(CliError::Failed(_)) => {}
        Err(e) => return Err(e),
    }
    let mismatches = manifest.mismatches(scratch.path());
    if !mismatches.is_empty() {
        let list: Vec<String> = mismatches
            .iter()
            .map(|(p, h)| format!("{p} ({})", h.as_deref().unwrap_or("missing")))
            .collect();
        return Err(CliError::Failed(format!("cli: replay differs in {}", list.join(", "))));
    }
    Ok(Outcome {
        messages: vec![format!("{} outputs reproduced bit-identically", manifest.outputs.len())],
        manifest,
        manifest_path: path.to_path_buf(),
    })
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: cli: invalid input: --threads must be at least 1");
            return EXIT_INVALID;
        }
        // A second initialization only happens in-process; keep the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let args: Vec<String> = argv.iter().skip(1).cloned().collect();
    match execute(&cli, &args) {
        Ok(out) => {
            for m in &out.messages {
                println!("{m}");
            }
            println!("manifest: {}", out.manifest_path.display());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
