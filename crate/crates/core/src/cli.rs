//! Command-line orchestration: config loading, subcommands, CSV and report
//! emission.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | config or expression error |
//! | 3 | validation error (lattice, frozen data, schedule, coarse step, terminal or barrier ordering) |
//! | 4 | contraction condition violated without `--force` |
//! | 5 | no convergence (Picard iterations or scalar solves) |
//! | 6 | an oracle or certification check failed |
//! | 7 | I/O error |
//! | 8 | expression evaluation error |

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::conditions::{contraction_report, mokobodski_check};
use crate::drbsde::{random_frozen_data, solve_reflected, DRSolution};
use crate::error::{Error, Result};
use crate::fixedpoint::{empirical_contraction, picard_solve, FixedPointResult, NormChoice, PicardConfig, PicardMode};
use crate::lattice::{d_norm, Lattice};
use crate::model::{
    audit_monotonicity, check_separation, load_config, validate_terminal, AuditConfig, DeltaSetting, LoadedProblem,
    NormSetting, PicardModeSetting, ProblemConfig, Route, SampleGrid,
};
use crate::oracle::dynkin_value_bruteforce;
use crate::penalization::{cascade, counterexample_run, CascadeOutcome, LimitOrder, Schedule};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VALIDATION: i32 = 3;
pub const EXIT_CONTRACTION: i32 = 4;
pub const EXIT_NO_CONVERGENCE: i32 = 5;
pub const EXIT_CHECK_FAILED: i32 = 6;
pub const EXIT_IO: i32 = 7;
pub const EXIT_EVAL: i32 = 8;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Lattice(_)
        | Error::LevelOutOfRange { .. }
        | Error::FrozenData(_)
        | Error::EnumerationCap { .. }
        | Error::CoarseStep(_)
        | Error::Schedule(_)
        | Error::Invalid(_) => EXIT_VALIDATION,
        Error::Contraction(_) => EXIT_CONTRACTION,
        Error::NoConvergence { .. } | Error::ScalarSolve { .. } => EXIT_NO_CONVERGENCE,
        Error::Io(_) => EXIT_IO,
        Error::Eval(_) => EXIT_EVAL,
    }
}

#[derive(Debug, Parser)]
#[command(name = "mfdrbsde", version, about = "Mean-field doubly reflected BSDEs on a binomial lattice")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Problem config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for audits and random trials.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides `solver.tol` (and `solver.penalty_tol` for the cascade).
    #[arg(long)]
    pub tol: Option<f64>,
    /// Overrides `lattice.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides `lattice.horizon`.
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long, value_enum)]
    pub route: Option<RouteArg>,
    /// Window length, or `auto` for the largest admissible one.
    #[arg(long)]
    pub delta: Option<DeltaSetting>,
    /// Run the fixed point even if the contraction condition fails.
    #[arg(long)]
    pub force: bool,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouteArg {
    FixedPoint,
    Penalized,
    Both,
}

impl From<RouteArg> for Route {
    fn from(r: RouteArg) -> Self {
        match r {
            RouteArg::FixedPoint => Route::FixedPoint,
            RouteArg::Penalized => Route::Penalized,
            RouteArg::Both => Route::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Global,
    Windowed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormArg {
    Auto,
    D,
    Sp,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PicardArgs {
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long, value_enum)]
    pub norm: Option<NormArg>,
    /// Random pairs for the empirical contraction measurement (0 skips it).
    #[arg(long, default_value_t = 0)]
    pub trials: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CascadeArgs {
    #[arg(long)]
    pub n_max: Option<u64>,
    #[arg(long)]
    pub m_max: Option<u64>,
    /// Experimental: raise n and m together.
    #[arg(long)]
    pub diagonal: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Contraction constants, window size, Mokobodski and coefficient audits.
    CheckConditions {
        #[command(flatten)]
        common: Common,
    },
    /// Windowed or global Picard iteration.
    SolveFixedPoint {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        picard: PicardArgs,
    },
    /// Double-indexed penalization cascade.
    SolvePenalized {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        cascade: CascadeArgs,
    },
    /// Backward induction against the brute-force Dynkin game.
    OracleCompare {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Runs both routes and reports their distance.
    CompareRoutes {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        picard: PicardArgs,
        #[command(flatten)]
        cascade: CascadeArgs,
        /// Fail with exit code 6 if the d_norm gap exceeds this.
        #[arg(long)]
        max_gap: Option<f64>,
    },
    /// Penalized stages on the data with no solution.
    Counterexample {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4096)]
        mmax: u64,
    },
}

/// Inputs that determine a run's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    /// SHA-256 of the canonical JSON of the resolved config and flags.
    pub digest: String,
    pub horizon: f64,
    pub steps: usize,
    pub route: Option<Route>,
    pub tol: Option<f64>,
    pub seed: u64,
    pub outputs: Vec<String>,
}

fn digest_of(value: &serde_json::Value) -> String {
    // serde_json maps are ordered by key, so this is canonical.
    let bytes = serde_json::to_vec(value).expect("json value serializes");
    Sha256::digest(&bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// `k,j,t,b,Y,Z,Kplus,Kminus`, one row per node in `(k, j)` order.
pub fn solution_csv(sol: &DRSolution, lat: &Lattice) -> String {
    let (kp, km) = (sol.k_plus(lat), sol.k_minus(lat));
    let mut s = String::from("k,j,t,b,Y,Z,Kplus,Kminus\n");
    for k in 0..=lat.steps() {
        for j in 0..=k {
            let _ = writeln!(
                s,
                "{k},{j},{},{},{},{},{},{}",
                num(lat.time(k)),
                num(lat.brownian(k, j)),
                num(sol.y.get(k, j)),
                num(sol.z.get(k, j)),
                num(kp.get(k, j)),
                num(km.get(k, j)),
            );
        }
    }
    s
}

pub fn emit_solution_csv(sol: &DRSolution, lat: &Lattice, path: &Path) -> Result<()> {
    fs::write(path, solution_csv(sol, lat))?;
    Ok(())
}

struct Run<'a> {
    out: PathBuf,
    outputs: Vec<String>,
    stdout: &'a mut dyn Write,
}

impl Run<'_> {
    fn new<'a>(dir: &Path, stdout: &'a mut dyn Write) -> Result<Run<'a>> {
        fs::create_dir_all(dir)?;
        Ok(Run {
            out: dir.to_path_buf(),
            outputs: Vec::new(),
            stdout,
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        fs::write(self.out.join(name), contents)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn say(&mut self, line: impl AsRef<str>) -> Result<()> {
        writeln!(self.stdout, "{}", line.as_ref())?;
        Ok(())
    }

    fn finish(mut self, manifest: RunManifest, report: serde_json::Value) -> Result<()> {
        let mut manifest = manifest;
        self.outputs.push("report.json".into());
        manifest.outputs = self.outputs.clone();
        let doc = json!({ "manifest": manifest, "report": report });
        fs::write(self.out.join("report.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
        self.say(format!("digest: {}", manifest.digest))?;
        self.say(format!("outputs: {}", self.out.display()))
    }
}

/// Reads the config and applies command-line overrides.
fn resolve_config(common: &Common) -> Result<ProblemConfig> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this subcommand".into()))?;
    let text = fs::read_to_string(path)?;
    let mut cfg: ProblemConfig =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("schema violation: {e}")))?;
    if let Some(n) = common.steps {
        cfg.lattice.steps = n;
    }
    if let Some(h) = common.horizon {
        cfg.lattice.horizon = h;
    }
    if let Some(t) = common.tol {
        cfg.solver.tol = t;
        cfg.solver.penalty_tol = t;
    }
    if let Some(r) = common.route {
        cfg.route = r.into();
    }
    if let Some(d) = common.delta {
        cfg.solver.delta = d;
    }
    Ok(cfg)
}

fn manifest(command: &str, common: &Common, cfg: Option<&ProblemConfig>, extra: serde_json::Value, lat: &Lattice) -> RunManifest {
    let digest = digest_of(&json!({
        "command": command,
        "config": cfg,
        "seed": common.seed,
        "force": common.force,
        "extra": extra,
    }));
    RunManifest {
        command: command.to_string(),
        config_path: common.config.as_ref().map(|p| p.display().to_string()),
        digest,
        horizon: lat.horizon(),
        steps: lat.steps(),
        route: cfg.map(|c| c.route),
        tol: cfg.map(|c| c.solver.tol),
        seed: common.seed,
        outputs: Vec::new(),
    }
}

fn picard_config(problem: &LoadedProblem, common: &Common, args: &PicardArgs) -> Result<(PicardConfig, Vec<String>)> {
    let s = &problem.config.solver;
    let lat = &problem.lattice;
    let spec = &problem.spec;
    let mut notes = Vec::new();
    let mode = match args.mode.unwrap_or(match s.mode {
        PicardModeSetting::Global => ModeArg::Global,
        PicardModeSetting::Windowed => ModeArg::Windowed,
    }) {
        ModeArg::Global => PicardMode::Global,
        ModeArg::Windowed => {
            let delta = match s.delta {
                DeltaSetting::Value(d) => d.min(lat.horizon()),
                DeltaSetting::Auto => {
                    let report = contraction_report(&spec.lipschitz, spec.p, lat.horizon(), s.target)?;
                    match report.delta_for(spec.p) {
                        Some(d) => d,
                        None if common.force => {
                            notes.push("no admissible window; --force uses one step".into());
                            lat.dt()
                        }
                        None => {
                            return Err(Error::Contraction(
                                "no window length satisfies the contraction target".into(),
                            ))
                        }
                    }
                }
            };
            PicardMode::Windowed { delta }
        }
    };
    let norm = match args.norm.unwrap_or(match s.norm {
        NormSetting::Auto => NormArg::Auto,
        NormSetting::D => NormArg::D,
        NormSetting::Sp => NormArg::Sp,
    }) {
        NormArg::Auto => NormChoice::default_for(spec, lat),
        NormArg::D => NormChoice::D,
        NormArg::Sp => NormChoice::Sp(spec.p),
    };
    Ok((
        PicardConfig {
            mode,
            tol: s.tol,
            max_iter: args.max_iter.unwrap_or(s.max_iter),
            norm,
            force: common.force,
            target: s.target,
        },
        notes,
    ))
}

fn schedule(problem: &LoadedProblem, args: &CascadeArgs) -> Schedule {
    let s = &problem.config.solver;
    let mut sch = Schedule::doubling(args.n_max.unwrap_or(s.n_max), args.m_max.unwrap_or(s.m_max));
    if args.diagonal {
        let top = sch.n_values.len().min(sch.m_values.len());
        sch.n_values.truncate(top);
        sch.m_values.truncate(top);
        sch.order = LimitOrder::Diagonal;
    }
    sch
}

fn fixed_point_report(r: &FixedPointResult) -> serde_json::Value {
    json!({
        "window_steps": r.window_steps,
        "windows": r.windows,
        "iterations": r.iterations(),
        "final_residuals": r.final_residuals(),
        "contraction_ratios": r.contraction_ratios(),
        "fixed_point_residual": r.fixed_point_residual,
        "idempotence_gap": r.idempotence_gap,
        "root_value": r.solution.root_value(),
        "skorokhod": [r.solution.skorokhod_plus, r.solution.skorokhod_minus],
        "flat_off_barrier": r.solution.flat_off_barrier,
        "conditions": r.conditions,
        "norm": format!("{:?}", r.norm),
        "warnings": r.warnings,
    })
}

fn stages_csv(out: &CascadeOutcome) -> String {
    let mut s = String::from(
        "n,m,gap,sup_mean_square,z_energy,k_plus_square,k_minus_square,lower_violation_square,upper_violation_square,lower_violation,upper_violation\n",
    );
    for r in &out.report.stages {
        let m = &r.monitors;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.n,
            r.m,
            r.gap.map(num).unwrap_or_default(),
            num(m.sup_mean_square),
            num(m.z_energy),
            num(m.k_plus_square),
            num(m.k_minus_square),
            num(m.lower_violation_square),
            num(m.upper_violation_square),
            num(m.lower_violation),
            num(m.upper_violation),
        );
    }
    s
}

/// Executes one subcommand, writing the human-readable report to `stdout`.
/// Returns the process exit code.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::CheckConditions { common } => check_conditions(common, stdout),
        Command::SolveFixedPoint { common, picard } => solve_fixed_point(common, picard, stdout),
        Command::SolvePenalized { common, cascade } => solve_penalized(common, cascade, stdout),
        Command::OracleCompare { common, trials } => oracle_compare(common, *trials, stdout),
        Command::CompareRoutes {
            common,
            picard,
            cascade,
            max_gap,
        } => compare_routes(common, picard, cascade, *max_gap, stdout),
        Command::Counterexample { common, mmax } => counterexample(common, *mmax, stdout),
    }
}

fn load(common: &Common) -> Result<(ProblemConfig, LoadedProblem)> {
    let cfg = resolve_config(common)?;
    let problem = load_config(cfg.clone())?;
    Ok((cfg, problem))
}

fn check_conditions(common: &Common, stdout: &mut dyn Write) -> Result<i32> {
    let (cfg, problem) = load(common)?;
    let (spec, lat) = (&problem.spec, &problem.lattice);
    let s = &cfg.solver;
    let mut run = Run::new(&common.out, stdout)?;
    let report = contraction_report(&spec.lipschitz, spec.p, lat.horizon(), s.target)?;
    let grid = SampleGrid::square(s.audit_half_width, s.grid_points);
    let terminal = validate_terminal(spec, lat)?;
    let separation = check_separation(spec, lat, &grid)?;
    let audit_cfg = AuditConfig {
        half_width: s.audit_half_width,
        pairs: s.audit_pairs,
        seed: common.seed,
    };
    let monotone = audit_monotonicity(spec, lat, &audit_cfg)?;
    let moko = problem
        .witness
        .as_ref()
        .map(|w| mokobodski_check(spec, w, lat, &grid))
        .transpose()?;

    let fmt_opt = |v: Option<f64>| v.map_or("none".to_string(), num);
    let mut csv = String::from("quantity,value\n");
    let rows: Vec<(&str, String)> = vec![
        ("lambda_at_zero", fmt_opt(report.lambda_at_zero)),
        ("sigma_at_zero", num(report.sigma_at_zero)),
        ("cd1_holds", report.cd1_holds.to_string()),
        ("cd_p1_holds", report.cd_p1_holds.to_string()),
        ("delta_p", fmt_opt(report.delta_p)),
        ("delta_1", fmt_opt(report.delta_1)),
        ("terminal_compatible", terminal.passed().to_string()),
        ("separation_margin", num(separation.min_margin)),
        ("coefficients_monotone", monotone.all().to_string()),
        ("mokobodski_passed", moko.as_ref().map_or("no witness".into(), |m| m.passed.to_string())),
    ];
    for (name, value) in &rows {
        let _ = writeln!(csv, "{name},{value}");
        run.say(format!("{name}: {value}"))?;
    }
    run.write("conditions.csv", &csv)?;
    for w in problem.warnings() {
        run.say(format!("warning: {w}"))?;
    }
    if let Some(m) = &moko {
        run.say(format!("mokobodski: {}", m.note))?;
    }
    let failed_validation = !terminal.passed() || !separation.passed();
    let failed_check = moko.as_ref().is_some_and(|m| !m.passed);
    let doc = json!({
        "contraction": report,
        "terminal": terminal,
        "separation": separation,
        "lipschitz_estimates": problem.lipschitz_audit.estimates,
        "lipschitz_warnings": problem.warnings(),
        "monotonicity": monotone,
        "mokobodski": moko,
    });
    let m = manifest("check-conditions", common, Some(&cfg), json!(null), lat);
    run.finish(m, doc)?;
    Ok(if failed_validation {
        EXIT_VALIDATION
    } else if failed_check {
        EXIT_CHECK_FAILED
    } else {
        EXIT_OK
    })
}

fn solve_fixed_point(common: &Common, args: &PicardArgs, stdout: &mut dyn Write) -> Result<i32> {
    let (mut cfg, _) = load(common)?;
    cfg.route = Route::FixedPoint;
    let problem = load_config(cfg.clone())?;
    let (spec, lat) = (&problem.spec, &problem.lattice);
    let (pc, notes) = picard_config(&problem, common, args)?;
    let mut run = Run::new(&common.out, stdout)?;
    for n in &notes {
        run.say(format!("note: {n}"))?;
    }
    let r = picard_solve(spec, lat, &pc)?;
    for w in &r.warnings {
        run.say(format!("warning: {w}"))?;
    }
    run.write("solution.csv", &solution_csv(&r.solution, lat))?;
    run.say(format!("root value: {}", num(r.solution.root_value())))?;
    run.say(format!("window steps: {}, windows: {}", r.window_steps, r.windows.len()))?;
    run.say(format!("iterations per window: {:?}", r.iterations()))?;
    run.say(format!("fixed-point residual: {:e}", r.fixed_point_residual))?;
    let mut doc = fixed_point_report(&r);
    if args.trials > 0 {
        let delta = match pc.mode {
            PicardMode::Windowed { delta } => delta,
            PicardMode::Global => lat.horizon(),
        };
        let t = empirical_contraction(spec, lat, delta, args.trials, common.seed, pc.norm)?;
        run.say(format!("empirical contraction: max ratio {:.6} over {} pairs", t.max_ratio, t.ratios.len()))?;
        doc["empirical_contraction"] = json!(t);
    }
    let m = manifest("solve-fixed-point", common, Some(&cfg), json!(args), lat);
    run.finish(m, doc)?;
    Ok(EXIT_OK)
}

fn solve_penalized(common: &Common, args: &CascadeArgs, stdout: &mut dyn Write) -> Result<i32> {
    let (cfg, problem) = load(common)?;
    let (spec, lat) = (&problem.spec, &problem.lattice);
    let sch = schedule(&problem, args);
    let mut run = Run::new(&common.out, stdout)?;
    let out = cascade(spec, lat, &sch, cfg.solver.penalty_tol)?;
    let sol = out.state.to_solution(lat);
    run.write("solution.csv", &solution_csv(&sol, lat))?;
    run.write("stages.csv", &stages_csv(&out))?;
    let rep = &out.report;
    run.say(format!("final stage: (n, m) = {:?}", rep.final_stage))?;
    run.say(format!("stages run: {}", rep.stages.len()))?;
    run.say(format!("converged: {}", rep.converged))?;
    run.say(format!("root value: {}", num(sol.root_value())))?;
    run.say(format!(
        "monotonicity: {} violations in {} comparisons (worst {:e})",
        rep.monotonicity.violations, rep.monotonicity.comparisons, rep.monotonicity.worst
    ))?;
    run.say(format!("final constraint violation: {:e}", rep.final_constraint_violation))?;
    if rep.monitor_blowup {
        run.say("warning: a monitor grew by more than 10x between consecutive stages")?;
    }
    let m = manifest("solve-penalized", common, Some(&cfg), json!(args), lat);
    run.finish(m, json!(rep))?;
    Ok(if rep.converged { EXIT_OK } else { EXIT_NO_CONVERGENCE })
}

const ORACLE_TOL: f64 = 1e-12;

fn oracle_compare(common: &Common, trials: usize, stdout: &mut dyn Write) -> Result<i32> {
    let lat = Lattice::new(common.horizon.unwrap_or(1.0), common.steps.unwrap_or(3))?;
    let mut run = Run::new(&common.out, stdout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
    let mut csv = String::from("trial,root,sup_inf,inf_sup,deviation\n");
    let mut worst = 0.0f64;
    for i in 0..trials {
        let fd = random_frozen_data(&lat, &mut rng);
        let root = solve_reflected(&fd, &lat)?.root_value();
        let v = dynkin_value_bruteforce(&fd, &lat)?;
        let dev = (root - v.sup_inf).abs().max(v.saddle_gap());
        worst = worst.max(dev);
        let _ = writeln!(csv, "{i},{},{},{},{}", num(root), num(v.sup_inf), num(v.inf_sup), num(dev));
    }
    run.write("oracle.csv", &csv)?;
    let pass = worst <= ORACLE_TOL;
    run.say(format!("trials: {trials}, steps: {}", lat.steps()))?;
    run.say(format!("max deviation: {worst:e} ({})", if pass { "ok" } else { "FAILED" }))?;
    let m = manifest("oracle-compare", common, None, json!({ "trials": trials }), &lat);
    run.finish(m, json!({ "trials": trials, "max_deviation": worst, "tolerance": ORACLE_TOL, "passed": pass }))?;
    Ok(if pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn compare_routes(
    common: &Common,
    picard: &PicardArgs,
    cascade_args: &CascadeArgs,
    max_gap: Option<f64>,
    stdout: &mut dyn Write,
) -> Result<i32> {
    let (cfg, problem) = load(common)?;
    let (spec, lat) = (&problem.spec, &problem.lattice);
    let (pc, notes) = picard_config(&problem, common, picard)?;
    let mut run = Run::new(&common.out, stdout)?;
    for n in &notes {
        run.say(format!("note: {n}"))?;
    }
    let fp = picard_solve(spec, lat, &pc)?;
    let pen = cascade(spec, lat, &schedule(&problem, cascade_args), cfg.solver.penalty_tol)?;
    let pen_sol = pen.state.to_solution(lat);
    let diff = fp.solution.y.sub(&pen_sol.y);
    let gap = d_norm(lat, &diff);
    let node_gap = fp.solution.y.max_abs_diff(&pen_sol.y);
    run.write("fixed_point.csv", &solution_csv(&fp.solution, lat))?;
    run.write("penalized.csv", &solution_csv(&pen_sol, lat))?;
    run.say(format!("d_norm gap: {gap:e}"))?;
    run.say(format!("max node gap: {node_gap:e}"))?;
    run.say(format!("penalized final stage: {:?}", pen.report.final_stage))?;
    let pass = max_gap.is_none_or(|m| gap <= m);
    let m = manifest(
        "compare-routes",
        common,
        Some(&cfg),
        json!({ "picard": picard, "cascade": cascade_args, "max_gap": max_gap }),
        lat,
    );
    run.finish(
        m,
        json!({
            "d_norm_gap": gap,
            "max_node_gap": node_gap,
            "fixed_point": fixed_point_report(&fp),
            "penalized": pen.report,
            "passed": pass,
        }),
    )?;
    Ok(if pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn counterexample(common: &Common, mmax: u64, stdout: &mut dyn Write) -> Result<i32> {
    let lat = Lattice::new(common.horizon.unwrap_or(1.0), common.steps.unwrap_or(100))?;
    let mut run = Run::new(&common.out, stdout)?;
    let m_values = Schedule::doubling(0, mmax).m_values;
    let r = counterexample_run(&lat, &m_values)?;
    let mut csv = String::from("m,level,t,mean_y,bound,violation\n");
    for s in &r.stages {
        for l in &s.levels {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                s.m,
                l.level,
                num(l.t),
                num(l.mean_y),
                num(l.bound),
                num(s.violation)
            );
        }
    }
    run.write("counterexample.csv", &csv)?;
    for s in &r.stages {
        run.say(format!(
            "m = {:>5}: E[Y_0] = {:.6}, violation v_m = {:.6}, min(E[Y_t] + t) = {:.3e}",
            s.m, s.levels[0].mean_y, s.violation, s.bound_margin
        ))?;
    }
    let pass = r.bound_holds && r.min_violation >= 0.5 && r.plain_error.is_none_or(|e| e <= 1e-12);
    run.say(format!("E[Y_t] >= -t at every level: {}", r.bound_holds))?;
    run.say(format!("violation persists: min v_m = {:.6}", r.min_violation))?;
    let m = manifest("counterexample", common, None, json!({ "mmax": mmax }), &lat);
    run.finish(m, json!(r))?;
    Ok(if pass { EXIT_OK } else { EXIT_CHECK_FAILED })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            EXIT_OK,
            EXIT_CONFIG,
            EXIT_VALIDATION,
            EXIT_CONTRACTION,
            EXIT_NO_CONVERGENCE,
            EXIT_CHECK_FAILED,
            EXIT_IO,
            EXIT_EVAL,
        ];
        let mut sorted = codes.to_vec();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), codes.len());
        assert_eq!(exit_code(&Error::Contraction("x".into())), EXIT_CONTRACTION);
        assert_eq!(exit_code(&Error::CoarseStep(2.0)), EXIT_VALIDATION);
    }

    #[test]
    fn csv_has_one_row_per_node() {
        let lat = Lattice::new(1.0, 1).unwrap();
        let fd = crate::drbsde::FrozenData::new(
            &lat,
            crate::AdaptedProcess::zeros(&lat),
            crate::AdaptedProcess::constant(&lat, -1.0),
            crate::AdaptedProcess::constant(&lat, 1.0),
            vec![0.5, -0.5],
        )
        .unwrap();
        let sol = solve_reflected(&fd, &lat).unwrap();
        let csv = solution_csv(&sol, &lat);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "k,j,t,b,Y,Z,Kplus,Kminus");
        assert_eq!(lines.len(), 4);
        let root: f64 = lines[1].split(',').nth(4).unwrap().parse().unwrap();
        assert_eq!(root, sol.root_value());
    }

    #[test]
    fn digest_depends_on_inputs() {
        let a = digest_of(&json!({"x": 1}));
        assert_eq!(a, digest_of(&json!({"x": 1})));
        assert_ne!(a, digest_of(&json!({"x": 2})));
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn parses_documented_flags() {
        let cli = Cli::try_parse_from(["mfdrbsde", "oracle-compare", "--trials", "100", "--steps", "3", "--seed", "7"]).unwrap();
        assert!(matches!(cli.command, Command::OracleCompare { trials: 100, .. }));
        let cli = Cli::try_parse_from(["mfdrbsde", "solve-fixed-point", "--config", "c.json", "--delta", "auto", "--force"]).unwrap();
        match cli.command {
            Command::SolveFixedPoint { common, .. } => {
                assert_eq!(common.delta, Some(DeltaSetting::Auto));
                assert!(common.force);
            }
            _ => panic!("wrong subcommand"),
        }
    }
}
