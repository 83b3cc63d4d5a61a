//! Problem definition: coefficients, declared constants, config loading and
//! structural checks.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::{Expression, Var, Vars};
use crate::lattice::{expectation_of, Lattice};
use crate::par;

/// Which coefficient an expression stands for; decides the admitted variables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Driver,
    Barrier,
    Terminal,
    Witness,
}

impl Slot {
    pub fn allowed(self) -> &'static [Var] {
        match self {
            Slot::Driver => &[Var::T, Var::B, Var::Y, Var::YBar, Var::Z],
            Slot::Barrier => &[Var::T, Var::B, Var::Y, Var::YBar],
            Slot::Terminal => &[Var::B],
            Slot::Witness => &[Var::T, Var::B],
        }
    }

    fn label(self) -> &'static str {
        match self {
            Slot::Driver => "driver",
            Slot::Barrier => "barrier",
            Slot::Terminal => "terminal",
            Slot::Witness => "witness",
        }
    }
}

/// Parses `src` and rejects variables not admitted for `slot`.
pub fn parse_for_slot(src: &str, slot: Slot) -> Result<Expression> {
    let e = Expression::parse(src)?;
    if let Some(bad) = e.variables().iter().find(|v| !slot.allowed().contains(v)) {
        return Err(Error::Parse(crate::expr::ParseError {
            offset: e.offset_of(*bad).unwrap_or(0),
            message: format!("variable '{}' is not allowed in a {} expression", bad.name(), slot.label()),
        }));
    }
    Ok(e)
}

/// Declared Lipschitz constants of `f` (`cf`), `h` (`gamma1`, `gamma2`) and
/// `g` (`beta1`, `beta2`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lipschitz {
    #[serde(default)]
    pub cf: f64,
    #[serde(default)]
    pub gamma1: f64,
    #[serde(default)]
    pub gamma2: f64,
    #[serde(default)]
    pub beta1: f64,
    #[serde(default)]
    pub beta2: f64,
}

impl Lipschitz {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("cf", self.cf),
            ("gamma1", self.gamma1),
            ("gamma2", self.gamma2),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("lipschitz.{name} must be a finite non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    /// `gamma1 + gamma2 + beta1 + beta2`.
    pub fn barrier_sum(&self) -> f64 {
        self.gamma1 + self.gamma2 + self.beta1 + self.beta2
    }
}

#[derive(Debug, Clone)]
pub struct ProblemSpec {
    pub driver: Expression,
    pub lower: Expression,
    pub upper: Expression,
    pub terminal: Expression,
    pub lipschitz: Lipschitz,
    pub p: f64,
    pub driver_uses_z: bool,
}

impl ProblemSpec {
    pub fn new(
        driver: &str,
        lower: &str,
        upper: &str,
        terminal: &str,
        lipschitz: Lipschitz,
        p: f64,
    ) -> Result<Self> {
        lipschitz.validate()?;
        if !(p.is_finite() && p >= 1.0) {
            return Err(Error::Config(format!("p must be >= 1, got {p}")));
        }
        let driver = parse_for_slot(driver, Slot::Driver)?;
        let driver_uses_z = driver.uses(Var::Z);
        Ok(Self {
            driver,
            lower: parse_for_slot(lower, Slot::Barrier)?,
            upper: parse_for_slot(upper, Slot::Barrier)?,
            terminal: parse_for_slot(terminal, Slot::Terminal)?,
            lipschitz,
            p,
            driver_uses_z,
        })
    }

    pub fn driver_at(&self, t: f64, b: f64, y: f64, ybar: f64, z: f64) -> Result<f64> {
        Ok(self.driver.eval(&Vars { t, b, y, ybar, z })?)
    }

    pub fn lower_at(&self, t: f64, b: f64, y: f64, ybar: f64) -> Result<f64> {
        Ok(self.lower.eval(&Vars::at(t, b).with_y(y, ybar))?)
    }

    pub fn upper_at(&self, t: f64, b: f64, y: f64, ybar: f64) -> Result<f64> {
        Ok(self.upper.eval(&Vars::at(t, b).with_y(y, ybar))?)
    }

    pub fn terminal_at(&self, b: f64) -> Result<f64> {
        Ok(self.terminal.eval(&Vars::at(0.0, b))?)
    }

    /// `xi` at every terminal node.
    pub fn terminal_values(&self, lat: &Lattice) -> Result<Vec<f64>> {
        let n = lat.steps();
        (0..=n).map(|j| self.terminal_at(lat.brownian(n, j))).collect()
    }

    /// Rejects drivers depending on `z` (required by the fixed-point route).
    pub fn require_z_free(&self) -> Result<()> {
        if self.driver_uses_z {
            Err(Error::Config(
                "the fixed-point route requires that f does not depend on z".into(),
            ))
        } else {
            Ok(())
        }
    }
}

/// Semimartingale candidate `X = X0 + sum J dB + V+ - V-` lying between the
/// barriers uniformly in the mean-field arguments.
#[derive(Debug, Clone)]
pub struct MokobodskiWitness {
    pub x0: f64,
    pub integrand: Expression,
    pub vplus: Expression,
    pub vminus: Expression,
}

impl MokobodskiWitness {
    pub fn new(x0: f64, integrand: &str, vplus: &str, vminus: &str) -> Result<Self> {
        if !x0.is_finite() {
            return Err(Error::Config(format!("mokobodski.x0 must be finite, got {x0}")));
        }
        Ok(Self {
            x0,
            integrand: parse_for_slot(integrand, Slot::Witness)?,
            vplus: parse_for_slot(vplus, Slot::Witness)?,
            vminus: parse_for_slot(vminus, Slot::Witness)?,
        })
    }

    /// The trivial witness `X = 0`.
    pub fn zero() -> Self {
        Self::new(0.0, "0", "0", "0").expect("constant witness parses")
    }
}

/// Rectangle of `(y, ybar)` sample points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleGrid {
    pub y_min: f64,
    pub y_max: f64,
    pub ybar_min: f64,
    pub ybar_max: f64,
    pub points: usize,
}

impl Default for SampleGrid {
    fn default() -> Self {
        Self::square(5.0, 41)
    }
}

impl SampleGrid {
    pub fn square(half_width: f64, points: usize) -> Self {
        Self {
            y_min: -half_width,
            y_max: half_width,
            ybar_min: -half_width,
            ybar_max: half_width,
            points,
        }
    }

    fn axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        if n <= 1 {
            return vec![0.5 * (lo + hi)];
        }
        (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect()
    }

    pub fn points(&self) -> Vec<(f64, f64)> {
        let ys = Self::axis(self.y_min, self.y_max, self.points);
        let bs = Self::axis(self.ybar_min, self.ybar_max, self.points);
        ys.iter()
            .flat_map(|&y| bs.iter().map(move |&yb| (y, yb)))
            .collect()
    }

    /// Corners of the box scaled by `factor`.
    pub fn corners(&self, factor: f64) -> [(f64, f64); 4] {
        [
            (self.y_min * factor, self.ybar_min * factor),
            (self.y_min * factor, self.ybar_max * factor),
            (self.y_max * factor, self.ybar_min * factor),
            (self.y_max * factor, self.ybar_max * factor),
        ]
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TerminalViolation {
    pub node: usize,
    pub lower: f64,
    pub terminal: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TerminalReport {
    pub expected_terminal: f64,
    pub violations: Vec<TerminalViolation>,
}

impl TerminalReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks `h(T, b, xi, E xi) <= xi <= g(T, b, xi, E xi)` at every terminal node.
pub fn validate_terminal(spec: &ProblemSpec, lat: &Lattice) -> Result<TerminalReport> {
    let n = lat.steps();
    let t = lat.time(n);
    let xi = spec.terminal_values(lat)?;
    let mean = expectation_of(lat, &xi, n);
    let mut violations = Vec::new();
    for (j, &x) in xi.iter().enumerate() {
        let b = lat.brownian(n, j);
        let lower = spec.lower_at(t, b, x, mean)?;
        let upper = spec.upper_at(t, b, x, mean)?;
        if !(lower <= x && x <= upper) {
            violations.push(TerminalViolation {
                node: j,
                lower,
                terminal: x,
                upper,
            });
        }
    }
    Ok(TerminalReport {
        expected_terminal: mean,
        violations,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SeparationReport {
    /// `min (g - h)` over all nodes and grid points.
    pub min_margin: f64,
    /// `(k, j, y, ybar)` where the minimum is attained.
    pub argmin: (usize, usize, f64, f64),
}

impl SeparationReport {
    pub fn passed(&self) -> bool {
        self.min_margin > 0.0
    }
}

fn barrier_gap(g: f64, h: f64) -> f64 {
    if g == h {
        0.0
    } else {
        g - h
    }
}

/// Smallest gap `g - h` over every lattice node and grid point.
pub fn check_separation(spec: &ProblemSpec, lat: &Lattice, grid: &SampleGrid) -> Result<SeparationReport> {
    let pts = grid.points();
    let nodes: Vec<(usize, usize)> = (0..=lat.steps())
        .flat_map(|k| (0..=k).map(move |j| (k, j)))
        .collect();
    let per_node = par::try_map_range(nodes.len(), |i| -> Result<(f64, (usize, usize, f64, f64))> {
        let (k, j) = nodes[i];
        let (t, b) = (lat.time(k), lat.brownian(k, j));
        let mut best = (f64::INFINITY, (k, j, 0.0, 0.0));
        for &(y, yb) in &pts {
            let gap = barrier_gap(spec.upper_at(t, b, y, yb)?, spec.lower_at(t, b, y, yb)?);
            if gap < best.0 {
                best = (gap, (k, j, y, yb));
            }
        }
        Ok(best)
    })?;
    let (min_margin, argmin) = per_node
        .into_iter()
        .fold((f64::INFINITY, (0, 0, 0.0, 0.0)), |a, b| if b.0 < a.0 { b } else { a });
    Ok(SeparationReport { min_margin, argmin })
}

/// A sampled pair where a declared Lipschitz bound failed.
#[derive(Debug, Clone, Serialize)]
pub struct LipschitzWarning {
    pub coefficient: &'static str,
    pub t: f64,
    pub b: f64,
    pub first: (f64, f64, f64),
    pub second: (f64, f64, f64),
    pub difference: f64,
    pub bound: f64,
}

/// Largest partial slopes seen while sampling.
#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LipschitzEstimates {
    pub cf: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub beta1: f64,
    pub beta2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzAudit {
    pub estimates: LipschitzEstimates,
    pub warnings: Vec<LipschitzWarning>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub half_width: f64,
    pub pairs: usize,
    pub seed: u64,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self {
            half_width: 5.0,
            pairs: 10_000,
            seed: 0,
        }
    }
}

const AUDIT_EPS: f64 = 1e-9;

fn diff(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs()
    }
}

fn random_node(lat: &Lattice, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let k = rng.gen_range(0..=lat.steps());
    let j = rng.gen_range(0..=k);
    (lat.time(k), lat.brownian(k, j))
}

/// Spot-checks the declared constants on random pairs in a box.
///
/// Violations are warnings: constants may legitimately be declared loosely,
/// and a failed check only means the declaration is too tight.
pub fn audit_lipschitz(spec: &ProblemSpec, lat: &Lattice, cfg: &AuditConfig) -> Result<LipschitzAudit> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = cfg.half_width;
    let lip = spec.lipschitz;
    let mut est = LipschitzEstimates::default();
    let mut warnings = Vec::new();
    let draw = |rng: &mut ChaCha8Rng| rng.gen_range(-w..=w);
    for _ in 0..cfg.pairs {
        let (t, b) = random_node(lat, &mut rng);
        let p = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let q = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let dy = (p.0 - q.0).abs();
        let dyb = (p.1 - q.1).abs();
        let dz = (p.2 - q.2).abs();

        let hp = spec.lower_at(t, b, p.0, p.1)?;
        let gp = spec.upper_at(t, b, p.0, p.1)?;
        let fp = spec.driver_at(t, b, p.0, p.1, p.2)?;
        let dh = diff(hp, spec.lower_at(t, b, q.0, q.1)?);
        let dg = diff(gp, spec.upper_at(t, b, q.0, q.1)?);
        let df = diff(fp, spec.driver_at(t, b, q.0, q.1, q.2)?);

        let mut check = |name: &'static str, d: f64, bound: f64| {
            if d > bound {
                warnings.push(LipschitzWarning {
                    coefficient: name,
                    t,
                    b,
                    first: p,
                    second: q,
                    difference: d,
                    bound,
                });
            }
        };
        check("h", dh, (lip.gamma1 + AUDIT_EPS) * dy + (lip.gamma2 + AUDIT_EPS) * dyb);
        check("g", dg, (lip.beta1 + AUDIT_EPS) * dy + (lip.beta2 + AUDIT_EPS) * dyb);
        let zterm = if spec.driver_uses_z { dz } else { 0.0 };
        check("f", df, (lip.cf + AUDIT_EPS) * (dy + dyb + zterm));

        // Partial slopes: move one coordinate at a time from p.
        if dy > 1e-6 {
            est.gamma1 = est.gamma1.max(diff(hp, spec.lower_at(t, b, q.0, p.1)?) / dy);
            est.beta1 = est.beta1.max(diff(gp, spec.upper_at(t, b, q.0, p.1)?) / dy);
            est.cf = est.cf.max(diff(fp, spec.driver_at(t, b, q.0, p.1, p.2)?) / dy);
        }
        if dyb > 1e-6 {
            est.gamma2 = est.gamma2.max(diff(hp, spec.lower_at(t, b, p.0, q.1)?) / dyb);
            est.beta2 = est.beta2.max(diff(gp, spec.upper_at(t, b, p.0, q.1)?) / dyb);
            est.cf = est.cf.max(diff(fp, spec.driver_at(t, b, p.0, q.1, p.2)?) / dyb);
        }
        if spec.driver_uses_z && dz > 1e-6 {
            est.cf = est.cf.max(diff(fp, spec.driver_at(t, b, p.0, p.1, q.2)?) / dz);
        }
    }
    // Keep reports readable: the first few witnesses per coefficient suffice.
    let mut kept = Vec::new();
    for name in ["f", "h", "g"] {
        kept.extend(warnings.iter().filter(|w| w.coefficient == name).take(3).cloned());
    }
    Ok(LipschitzAudit {
        estimates: est,
        warnings: kept,
    })
}

/// Sampled monotonicity of the coefficients in `(y, ybar)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct MonotonicityAudit {
    pub driver_in_y: bool,
    pub driver_in_ybar: bool,
    pub lower_in_y: bool,
    pub lower_in_ybar: bool,
    pub upper_in_y: bool,
    pub upper_in_ybar: bool,
}

impl MonotonicityAudit {
    pub fn all(&self) -> bool {
        self.driver_in_y
            && self.driver_in_ybar
            && self.lower_in_y
            && self.lower_in_ybar
            && self.upper_in_y
            && self.upper_in_ybar
    }
}

/// Samples whether `f` is non-decreasing in `y` and `ybar`, and `h`, `g` are
/// non-decreasing in both arguments.
pub fn audit_monotonicity(spec: &ProblemSpec, lat: &Lattice, cfg: &AuditConfig) -> Result<MonotonicityAudit> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d6f_6e6f);
    let w = cfg.half_width;
    let mut a = MonotonicityAudit {
        driver_in_y: true,
        driver_in_ybar: true,
        lower_in_y: true,
        lower_in_ybar: true,
        upper_in_y: true,
        upper_in_ybar: true,
    };
    let tol = 1e-12;
    for _ in 0..cfg.pairs {
        let (t, b) = random_node(lat, &mut rng);
        let y = rng.gen_range(-w..=w);
        let yb = rng.gen_range(-w..=w);
        let z = rng.gen_range(-w..=w);
        let hi_y = y + rng.gen_range(0.0..=w);
        let hi_yb = yb + rng.gen_range(0.0..=w);
        let f0 = spec.driver_at(t, b, y, yb, z)?;
        let h0 = spec.lower_at(t, b, y, yb)?;
        let g0 = spec.upper_at(t, b, y, yb)?;
        a.driver_in_y &= spec.driver_at(t, b, hi_y, yb, z)? >= f0 - tol;
        a.driver_in_ybar &= spec.driver_at(t, b, y, hi_yb, z)? >= f0 - tol;
        a.lower_in_y &= spec.lower_at(t, b, hi_y, yb)? >= h0 - tol;
        a.lower_in_ybar &= spec.lower_at(t, b, y, hi_yb)? >= h0 - tol;
        a.upper_in_y &= spec.upper_at(t, b, hi_y, yb)? >= g0 - tol;
        a.upper_in_ybar &= spec.upper_at(t, b, y, hi_yb)? >= g0 - tol;
    }
    Ok(a)
}

// ---------------------------------------------------------------------------
// Config file

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Route {
    FixedPoint,
    Penalized,
    #[default]
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WitnessConfig {
    #[serde(default)]
    pub x0: f64,
    #[serde(default = "zero_src")]
    pub integrand: String,
    #[serde(default = "zero_src")]
    pub vplus: String,
    #[serde(default = "zero_src")]
    pub vminus: String,
}

fn zero_src() -> String {
    "0".into()
}

/// `delta` in the config: a number of time units or `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum DeltaSetting {
    Value(f64),
    #[default]
    Auto,
}

impl Serialize for DeltaSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Value(v) => s.serialize_f64(*v),
            Self::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for DeltaSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::Number(n) => n
                .as_f64()
                .map(Self::Value)
                .ok_or_else(|| serde::de::Error::custom("delta is not representable as f64")),
            serde_json::Value::String(s) if s == "auto" => Ok(Self::Auto),
            other => Err(serde::de::Error::custom(format!(
                "delta must be \"auto\" or a number, got {other}"
            ))),
        }
    }
}

impl std::str::FromStr for DeltaSetting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "auto" {
            Ok(Self::Auto)
        } else {
            s.parse::<f64>()
                .map(Self::Value)
                .map_err(|_| format!("expected 'auto' or a number, got '{s}'"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PicardModeSetting {
    #[default]
    Windowed,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum NormSetting {
    #[default]
    Auto,
    D,
    Sp,
}

/// Solver tolerances and schedule; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub target: f64,
    pub delta: DeltaSetting,
    pub mode: PicardModeSetting,
    pub norm: NormSetting,
    pub penalty_tol: f64,
    pub n_max: u64,
    pub m_max: u64,
    pub audit_half_width: f64,
    pub audit_pairs: usize,
    pub grid_points: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 500,
            target: 0.99,
            delta: DeltaSetting::Auto,
            mode: PicardModeSetting::Windowed,
            norm: NormSetting::Auto,
            penalty_tol: 1e-6,
            n_max: 1 << 12,
            m_max: 1 << 12,
            audit_half_width: 5.0,
            audit_pairs: 10_000,
            grid_points: 41,
        }
    }
}

/// On-disk config document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub driver: String,
    pub lower: String,
    pub upper: String,
    pub terminal: String,
    #[serde(default)]
    pub lipschitz: Lipschitz,
    #[serde(default = "default_p")]
    pub p: f64,
    pub lattice: LatticeConfig,
    #[serde(default)]
    pub mokobodski: Option<WitnessConfig>,
    #[serde(default)]
    pub route: Route,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn default_p() -> f64 {
    2.0
}

#[derive(Debug, Clone)]
pub struct LoadedProblem {
    pub config: ProblemConfig,
    pub spec: ProblemSpec,
    pub witness: Option<MokobodskiWitness>,
    pub lattice: Lattice,
    pub lipschitz_audit: LipschitzAudit,
}

impl LoadedProblem {
    /// Human-readable audit warnings.
    pub fn warnings(&self) -> Vec<String> {
        self.lipschitz_audit
            .warnings
            .iter()
            .map(|w| {
                format!(
                    "declared Lipschitz bound for {} fails at t={}, b={}: |delta|={:.6e} > {:.6e} between {:?} and {:?}",
                    w.coefficient, w.t, w.b, w.difference, w.bound, w.first, w.second
                )
            })
            .collect()
    }
}

/// Parses and validates a config document.
pub fn load_problem(document: &str) -> Result<LoadedProblem> {
    let config: ProblemConfig =
        serde_json::from_str(document).map_err(|e| Error::Config(format!("schema violation: {e}")))?;
    load_config(config)
}

pub fn load_problem_file(path: &Path) -> Result<LoadedProblem> {
    load_problem(&std::fs::read_to_string(path)?)
}

pub fn load_config(config: ProblemConfig) -> Result<LoadedProblem> {
    let spec = ProblemSpec::new(
        &config.driver,
        &config.lower,
        &config.upper,
        &config.terminal,
        config.lipschitz,
        config.p,
    )?;
    if config.route == Route::FixedPoint {
        spec.require_z_free()?;
    }
    let s = &config.solver;
    if !(s.tol > 0.0 && s.penalty_tol >= 0.0) {
        return Err(Error::Config("solver tolerances must be positive".into()));
    }
    if !(s.target > 0.0 && s.target < 1.0) {
        return Err(Error::Config(format!("solver.target must lie in (0, 1), got {}", s.target)));
    }
    if let DeltaSetting::Value(d) = s.delta {
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::Config(format!("solver.delta must be positive, got {d}")));
        }
    }
    let witness = config
        .mokobodski
        .as_ref()
        .map(|w| MokobodskiWitness::new(w.x0, &w.integrand, &w.vplus, &w.vminus))
        .transpose()?;
    let lattice = Lattice::new(config.lattice.horizon, config.lattice.steps)?;
    let audit = AuditConfig {
        half_width: s.audit_half_width,
        pairs: s.audit_pairs,
        seed: 0,
    };
    let lipschitz_audit = audit_lipschitz(&spec, &lattice, &audit)?;
    Ok(LoadedProblem {
        config,
        spec,
        witness,
        lattice,
        lipschitz_audit,
    })
}
