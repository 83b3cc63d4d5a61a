//! Double-indexed penalization `Y^{n,m}`.
//!
//! Stage `(n, m)` penalizes excursions below `L_prev = h(Y_prev, E[Y_prev])`
//! with weight `m` and above `U_prev = g(Y_prev, E[Y_prev])` with weight
//! `n`, where everything marked `prev` is frozen at the schedule predecessor
//! `(n-1, m-1)`. Stage `(0, 0)` is the plain mean-field BSDE.
//!
//! For each `n` the cascade raises `m` until consecutive stages agree to
//! `tol`, then raises `n`.

use serde::Serialize;

use crate::drbsde::{skorokhod_residuals, DRSolution, Window};
use crate::error::{Error, Result};
use crate::lattice::{d_norm, level_expectations, AdaptedProcess, Lattice};
use crate::model::{audit_monotonicity, AuditConfig, Lipschitz, ProblemSpec};
use crate::stage::{MeanField, StageProblem, StageSolution};

/// Quantities frozen from the predecessor stage.
#[derive(Debug, Clone)]
pub struct FrozenStage {
    pub ybar_prev: Vec<f64>,
    pub lower_prev: AdaptedProcess,
    pub upper_prev: AdaptedProcess,
}

impl FrozenStage {
    /// Barriers and mean-field term evaluated at `(Y, E[Y])`.
    pub fn from_solution(spec: &ProblemSpec, lat: &Lattice, y: &AdaptedProcess) -> Result<Self> {
        let ybar = level_expectations(lat, y);
        let mut lower = AdaptedProcess::zeros(lat);
        let mut upper = AdaptedProcess::zeros(lat);
        for (k, j, v) in y.iter_nodes() {
            let (t, b) = (lat.time(k), lat.brownian(k, j));
            lower.set(k, j, spec.lower_at(t, b, v, ybar[k])?);
            upper.set(k, j, spec.upper_at(t, b, v, ybar[k])?);
        }
        Ok(Self {
            ybar_prev: ybar,
            lower_prev: lower,
            upper_prev: upper,
        })
    }

    /// Largest `(L - Y)^+` or `(Y - U)^+`, with the barriers re-evaluated at
    /// `Y` itself.
    fn self_violation(&self, y: &AdaptedProcess) -> f64 {
        y.iter_nodes()
            .map(|(k, j, v)| (self.lower_prev.get(k, j) - v).max(v - self.upper_prev.get(k, j)).max(0.0))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct PenalizationState {
    pub n: u64,
    pub m: u64,
    pub y: AdaptedProcess,
    pub z: AdaptedProcess,
    /// Per-node penalty increments `m dt (Y - L_prev)^-`.
    pub dk_plus: AdaptedProcess,
    /// Per-node penalty increments `n dt (Y - U_prev)^+`.
    pub dk_minus: AdaptedProcess,
    /// `None` for the self-consistent stage `(0, 0)`.
    pub frozen: Option<FrozenStage>,
}

impl PenalizationState {
    pub fn k_plus(&self, lat: &Lattice) -> AdaptedProcess {
        DRSolution::projected_cumulative(lat, &self.dk_plus)
    }

    pub fn k_minus(&self, lat: &Lattice) -> AdaptedProcess {
        DRSolution::projected_cumulative(lat, &self.dk_minus)
    }

    pub fn to_solution(&self, lat: &Lattice) -> DRSolution {
        let mut sol = DRSolution {
            y: self.y.clone(),
            z: self.z.clone(),
            dk_plus: self.dk_plus.clone(),
            dk_minus: self.dk_minus.clone(),
            window: Window::full(lat),
            skorokhod_plus: 0.0,
            skorokhod_minus: 0.0,
            flat_off_barrier: 0.0,
        };
        if let Some(f) = &self.frozen {
            let (p, m) = skorokhod_residuals(&sol, &f.lower_prev, &f.upper_prev, lat);
            sol.skorokhod_plus = p;
            sol.skorokhod_minus = m;
        }
        sol
    }
}

/// One penalized stage. `frozen = None` solves stage `(0, 0)` with the
/// mean-field term made self-consistent level by level.
pub fn solve_penalized_stage(
    spec: &ProblemSpec,
    lat: &Lattice,
    n: u64,
    m: u64,
    frozen: Option<FrozenStage>,
) -> Result<PenalizationState> {
    let terminal = spec.terminal_values(lat)?;
    if frozen.is_none() && (n, m) != (0, 0) {
        return Err(Error::Invalid(format!("stage ({n}, {m}) needs frozen data")));
    }
    let StageSolution {
        y,
        z,
        dk_plus,
        dk_minus,
    } = StageProblem {
        spec,
        lat,
        lower: frozen.as_ref().map(|f| &f.lower_prev),
        upper: frozen.as_ref().map(|f| &f.upper_prev),
        m: m as f64,
        n: n as f64,
        mean_field: match &frozen {
            Some(f) => MeanField::Frozen(&f.ybar_prev),
            None => MeanField::SelfConsistent,
        },
        terminal: &terminal,
    }
    .solve()?;
    Ok(PenalizationState {
        n,
        m,
        y,
        z,
        dk_plus,
        dk_minus,
        frozen,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LimitOrder {
    /// For each `n`, raise `m` to its limit, then raise `n`.
    MThenN,
    /// Experimental: raise `n` and `m` together.
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schedule {
    pub n_values: Vec<u64>,
    pub m_values: Vec<u64>,
    pub order: LimitOrder,
}

impl Schedule {
    /// `0, 1, 2, 4, ...` up to the given maxima.
    pub fn doubling(n_max: u64, m_max: u64) -> Self {
        let seq = |max: u64| {
            let mut v = vec![0];
            let mut x = 1;
            while x <= max {
                v.push(x);
                x = match x.checked_mul(2) {
                    Some(y) => y,
                    None => break,
                };
            }
            v
        };
        Self {
            n_values: seq(n_max),
            m_values: seq(m_max),
            order: LimitOrder::MThenN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("n", &self.n_values), ("m", &self.m_values)] {
            if v.first() != Some(&0) {
                return Err(Error::Schedule(format!("{name} schedule must start at 0")));
            }
            if v.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Schedule(format!("{name} schedule must be strictly increasing")));
            }
        }
        if self.order == LimitOrder::Diagonal && self.n_values != self.m_values {
            return Err(Error::Schedule("diagonal order needs identical n and m schedules".into()));
        }
        Ok(())
    }
}

/// Estimate monitors for one stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Monitors {
    /// `sup_k E[Y_k^2]`.
    pub sup_mean_square: f64,
    /// `sum_k E[Z_k^2] dt`.
    pub z_energy: f64,
    /// `E[(K+_T)^2]` along paths.
    pub k_plus_square: f64,
    pub k_minus_square: f64,
    /// `sum_k E[((Y - L_prev)^-)^2] dt`.
    pub lower_violation_square: f64,
    pub upper_violation_square: f64,
    /// `sum_k E[(Y - L_prev)^-] dt`.
    pub lower_violation: f64,
    pub upper_violation: f64,
}

impl Monitors {
    pub fn all_finite(&self) -> bool {
        [
            self.sup_mean_square,
            self.z_energy,
            self.k_plus_square,
            self.k_minus_square,
            self.lower_violation_square,
            self.upper_violation_square,
            self.lower_violation,
            self.upper_violation,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    fn growth_checked(&self) -> [f64; 4] {
        [self.sup_mean_square, self.z_energy, self.k_plus_square, self.k_minus_square]
    }
}

/// `E[K_T^2]` for a path-additive process with node increments `inc`,
/// via `A_k = E[K_T - K_k | node]` and `B_k = E[(K_T - K_k)^2 | node]`.
fn terminal_square(lat: &Lattice, inc: &AdaptedProcess) -> f64 {
    let n = lat.steps();
    let mut a = vec![0.0; n + 1];
    let mut b = vec![0.0; n + 1];
    for k in (0..n).rev() {
        let (mut a2, mut b2) = (vec![0.0; k + 1], vec![0.0; k + 1]);
        for j in 0..=k {
            let d = inc.get(k, j);
            let ea = 0.5 * (a[j] + a[j + 1]);
            let eb = 0.5 * (b[j] + b[j + 1]);
            a2[j] = d + ea;
            b2[j] = d * d + 2.0 * d * ea + eb;
        }
        a = a2;
        b = b2;
    }
    b[0]
}

pub fn monitors(state: &PenalizationState, lat: &Lattice) -> Monitors {
    let dt = lat.dt();
    let n = lat.steps();
    let mut sup_ms = 0.0f64;
    let mut z_energy = 0.0;
    let (mut lv2, mut uv2, mut lv, mut uv) = (0.0, 0.0, 0.0, 0.0);
    for k in 0..=n {
        let w = lat.weights(k);
        let mut ms = 0.0;
        for j in 0..=k {
            let y = state.y.get(k, j);
            ms += w[j] * y * y;
            if k < n {
                z_energy += w[j] * state.z.get(k, j).powi(2) * dt;
                if let Some(f) = &state.frozen {
                    let below = (f.lower_prev.get(k, j) - y).max(0.0);
                    let above = (y - f.upper_prev.get(k, j)).max(0.0);
                    lv += w[j] * below * dt;
                    uv += w[j] * above * dt;
                    lv2 += w[j] * below * below * dt;
                    uv2 += w[j] * above * above * dt;
                }
            }
        }
        sup_ms = sup_ms.max(ms);
    }
    Monitors {
        sup_mean_square: sup_ms,
        z_energy,
        k_plus_square: terminal_square(lat, &state.dk_plus),
        k_minus_square: terminal_square(lat, &state.dk_minus),
        lower_violation_square: lv2,
        upper_violation_square: uv2,
        lower_violation: lv,
        upper_violation: uv,
    }
}

/// Every computed stage, by row of the `n` schedule.
#[derive(Debug, Clone)]
pub struct StageHistory {
    pub rows: Vec<Vec<PenalizationState>>,
}

impl StageHistory {
    pub fn stages(&self) -> impl Iterator<Item = &PenalizationState> {
        self.rows.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRecord {
    pub n: u64,
    pub m: u64,
    /// `d_norm` distance to the previous stage in the same row.
    pub gap: Option<f64>,
    pub monitors: Monitors,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct MonotonicityReport {
    pub comparisons: usize,
    pub violations: usize,
    pub worst: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CascadeReport {
    pub stages: Vec<StageRecord>,
    /// `d_norm` between consecutive `m`-limits.
    pub n_gaps: Vec<f64>,
    pub final_stage: (u64, u64),
    /// Stage `(0, 0)` already satisfied both constraints.
    pub feasible_at_start: bool,
    pub converged: bool,
    pub monotonicity: MonotonicityReport,
    /// Sampled monotonicity of the coefficients in `(y, ybar)`.
    pub spec_monotone: bool,
    pub monitors_finite: bool,
    /// Some monitor grew by more than 10x between consecutive stages.
    pub monitor_blowup: bool,
    /// Largest `(h(Y, E Y) - Y)^+` or `(Y - g(Y, E Y))^+` at the final stage.
    pub final_constraint_violation: f64,
    pub final_skorokhod: (f64, f64),
}

pub struct CascadeOutcome {
    pub state: PenalizationState,
    pub report: CascadeReport,
    pub history: StageHistory,
}

const MONITOR_FLOOR: f64 = 1e-3;
const MONOTONE_SLACK: f64 = 1e-9;

pub fn cascade(spec: &ProblemSpec, lat: &Lattice, schedule: &Schedule, tol: f64) -> Result<CascadeOutcome> {
    schedule.validate()?;
    if !(tol >= 0.0) {
        return Err(Error::Invalid(format!("tol must be >= 0, got {tol}")));
    }
    let mut records = Vec::new();
    let mut rows: Vec<Vec<PenalizationState>> = Vec::new();
    let mut n_gaps = Vec::new();

    let first = solve_penalized_stage(spec, lat, 0, 0, None)?;
    records.push(StageRecord {
        n: 0,
        m: 0,
        gap: None,
        monitors: monitors(&first, lat),
    });
    let first_check = FrozenStage::from_solution(spec, lat, &first.y)?;
    let feasible_at_start = first_check.self_violation(&first.y) == 0.0;
    rows.push(vec![first]);
    let mut converged = feasible_at_start;

    if !feasible_at_start {
        match schedule.order {
            LimitOrder::MThenN => {
                converged = run_m_then_n(spec, lat, schedule, tol, &mut rows, &mut records, &mut n_gaps)?;
            }
            LimitOrder::Diagonal => {
                converged = run_diagonal(spec, lat, schedule, tol, &mut rows, &mut records)?;
            }
        }
    }

    let history = StageHistory { rows };
    let state = history.rows.last().and_then(|r| r.last()).expect("stage (0,0) exists").clone();
    let check = FrozenStage::from_solution(spec, lat, &state.y)?;
    let sol = state.to_solution(lat);
    let monitor_blowup = monitor_blowup(&records);
    let spec_monotone = audit_monotonicity(spec, lat, &AuditConfig::default())?.all();
    let report = CascadeReport {
        final_stage: (state.n, state.m),
        feasible_at_start,
        converged,
        monotonicity: monotonicity_check(&history),
        spec_monotone,
        monitors_finite: records.iter().all(|r| r.monitors.all_finite()),
        monitor_blowup,
        final_constraint_violation: check.self_violation(&state.y),
        final_skorokhod: (sol.skorokhod_plus, sol.skorokhod_minus),
        stages: records,
        n_gaps,
    };
    Ok(CascadeOutcome { state, report, history })
}

/// Whether a growth-checked monitor rises more than tenfold from a stage to
/// its neighbour with the next larger `n` or `m`.
fn monitor_blowup(records: &[StageRecord]) -> bool {
    let mut ns: Vec<u64> = records.iter().map(|r| r.n).collect();
    let mut ms: Vec<u64> = records.iter().map(|r| r.m).collect();
    ns.sort_unstable();
    ns.dedup();
    ms.sort_unstable();
    ms.dedup();
    let next = |v: &[u64], x: u64| v.iter().copied().find(|&y| y > x);
    let find = |n: u64, m: u64| records.iter().find(|r| r.n == n && r.m == m);
    records.iter().any(|a| {
        let neighbours = [
            next(&ms, a.m).and_then(|m| find(a.n, m)),
            next(&ns, a.n).and_then(|n| find(n, a.m)),
        ];
        neighbours.into_iter().flatten().any(|b| {
            let (x, y) = (a.monitors.growth_checked(), b.monitors.growth_checked());
            x.iter().zip(y.iter()).any(|(x, y)| *y > 10.0 * x.max(MONITOR_FLOOR))
        })
    })
}

/// Predecessor stage `(n_{i-1}, m_{j-1})` with index `-1` read as `0`;
/// a truncated predecessor row supplies its last computed stage.
fn predecessor(rows: &[Vec<PenalizationState>], i: usize, j: usize) -> &PenalizationState {
    let row = &rows[i.saturating_sub(1)];
    &row[j.saturating_sub(1).min(row.len() - 1)]
}

fn run_m_then_n(
    spec: &ProblemSpec,
    lat: &Lattice,
    schedule: &Schedule,
    tol: f64,
    rows: &mut Vec<Vec<PenalizationState>>,
    records: &mut Vec<StageRecord>,
    n_gaps: &mut Vec<f64>,
) -> Result<bool> {
    for (i, &n) in schedule.n_values.iter().enumerate() {
        if i > 0 {
            rows.push(Vec::new());
        }
        let mut row_converged = false;
        let start = if i == 0 { 1 } else { 0 };
        for (j, &m) in schedule.m_values.iter().enumerate().skip(start) {
            let pred = if i == 0 {
                &rows[0][j - 1]
            } else {
                predecessor(rows, i, j)
            };
            let frozen = FrozenStage::from_solution(spec, lat, &pred.y)?;
            let state = solve_penalized_stage(spec, lat, n, m, Some(frozen))?;
            let gap = rows[i].last().map(|prev| d_norm(lat, &state.y.sub(&prev.y)));
            records.push(StageRecord {
                n,
                m,
                gap,
                monitors: monitors(&state, lat),
            });
            rows[i].push(state);
            if gap.is_some_and(|g| g <= tol) {
                row_converged = true;
                break;
            }
        }
        if i > 0 {
            let (a, b) = (rows[i - 1].last().unwrap(), rows[i].last().unwrap());
            let g = d_norm(lat, &a.y.sub(&b.y));
            n_gaps.push(g);
            if g <= tol && row_converged {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

fn run_diagonal(
    spec: &ProblemSpec,
    lat: &Lattice,
    schedule: &Schedule,
    tol: f64,
    rows: &mut Vec<Vec<PenalizationState>>,
    records: &mut Vec<StageRecord>,
) -> Result<bool> {
    for (i, &k) in schedule.n_values.iter().enumerate().skip(1) {
        let pred = &rows[i - 1][0];
        let frozen = FrozenStage::from_solution(spec, lat, &pred.y)?;
        let state = solve_penalized_stage(spec, lat, k, k, Some(frozen))?;
        let gap = d_norm(lat, &state.y.sub(&pred.y));
        records.push(StageRecord {
            n: k,
            m: k,
            gap: Some(gap),
            monitors: monitors(&state, lat),
        });
        rows.push(vec![state]);
        if gap <= tol {
            return Ok(true);
        }
    }
    Ok(false)
}

/// `Y^{n+1,m} <= Y^{n,m} <= Y^{n,m+1}` node-wise up to `1e-9` over every
/// pair of recorded stages that are neighbours in the schedule.
pub fn monotonicity_check(history: &StageHistory) -> MonotonicityReport {
    let mut report = MonotonicityReport::default();
    let mut compare = |low: &AdaptedProcess, high: &AdaptedProcess| {
        report.comparisons += 1;
        let mut bad = false;
        for (k, j, v) in low.iter_nodes() {
            let excess = v - high.get(k, j);
            if excess > MONOTONE_SLACK {
                bad = true;
                report.worst = report.worst.max(excess);
            }
        }
        if bad {
            report.violations += 1;
        }
    };
    for (i, row) in history.rows.iter().enumerate() {
        for pair in row.windows(2) {
            compare(&pair[0].y, &pair[1].y);
        }
        if let Some(next) = history.rows.get(i + 1) {
            for (a, b) in row.iter().zip(next.iter()) {
                if a.m == b.m {
                    compare(&b.y, &a.y);
                }
            }
        }
    }
    report
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterexampleLevel {
    pub level: usize,
    pub t: f64,
    pub mean_y: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterexampleStage {
    pub m: u64,
    pub levels: Vec<CounterexampleLevel>,
    /// `max_{t < 1} (E[Y_t] + 1)^+`.
    pub violation: f64,
    /// `min_k (E[Y_k] + t_k)`.
    pub bound_margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterexampleReport {
    pub stages: Vec<CounterexampleStage>,
    /// `E[Y_t] >= -t - 1e-9` at every level of every stage.
    pub bound_holds: bool,
    /// `max_k |E[Y_k] + t_k|` at `m = 0`.
    pub plain_error: Option<f64>,
    pub min_violation: f64,
}

/// Upper barrier of the counterexample; above anything the stages reach.
pub const COUNTEREXAMPLE_CEILING: f64 = 10.0;

/// Data `f = 1`, `xi = -1`, `h = y + ybar + 1`, `g = 10` on `T = 1`.
pub fn counterexample_spec() -> ProblemSpec {
    let lip = Lipschitz {
        cf: 0.0,
        gamma1: 1.0,
        gamma2: 1.0,
        beta1: 0.0,
        beta2: 0.0,
    };
    ProblemSpec::new("1", "y + ybar + 1", "10", "-1", lip, 2.0).expect("counterexample data parses")
}

/// Runs the `n = 0` stages for every `m` of the schedule.
pub fn counterexample_run(lat: &Lattice, m_schedule: &[u64]) -> Result<CounterexampleReport> {
    if (lat.horizon() - 1.0).abs() > 1e-12 {
        return Err(Error::Invalid(format!("counterexample needs T = 1, got {}", lat.horizon())));
    }
    let schedule = Schedule {
        n_values: vec![0],
        m_values: m_schedule.to_vec(),
        order: LimitOrder::MThenN,
    };
    schedule.validate()?;
    let spec = counterexample_spec();
    let mut prev = solve_penalized_stage(&spec, lat, 0, 0, None)?;
    let mut stages = Vec::new();
    let mut plain_error = None;
    for (i, &m) in m_schedule.iter().enumerate() {
        if i > 0 {
            let frozen = FrozenStage::from_solution(&spec, lat, &prev.y)?;
            prev = solve_penalized_stage(&spec, lat, 0, m, Some(frozen))?;
        }
        let means = level_expectations(lat, &prev.y);
        let levels: Vec<CounterexampleLevel> = means
            .iter()
            .enumerate()
            .map(|(k, &mean_y)| CounterexampleLevel {
                level: k,
                t: lat.time(k),
                mean_y,
                bound: -lat.time(k),
            })
            .collect();
        if m == 0 {
            plain_error = Some(levels.iter().map(|l| (l.mean_y - l.bound).abs()).fold(0.0, f64::max));
        }
        let violation = levels[..lat.steps()]
            .iter()
            .map(|l| (l.mean_y + 1.0).max(0.0))
            .fold(0.0, f64::max);
        let bound_margin = levels.iter().map(|l| l.mean_y - l.bound).fold(f64::INFINITY, f64::min);
        stages.push(CounterexampleStage {
            m,
            levels,
            violation,
            bound_margin,
        });
    }
    Ok(CounterexampleReport {
        bound_holds: stages.iter().all(|s| s.bound_margin >= -1e-9),
        min_violation: stages.iter().map(|s| s.violation).fold(f64::INFINITY, f64::min),
        plain_error,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drbsde::{solve_reflected, FrozenData};

    fn spec(f: &str, h: &str, g: &str, xi: &str, lip: Lipschitz) -> ProblemSpec {
        ProblemSpec::new(f, h, g, xi, lip, 2.0).unwrap()
    }

    #[test]
    fn zero_data_gives_zero() {
        let lat = Lattice::new(1.0, 6).unwrap();
        let s = spec("0", "-1", "1", "0", Lipschitz::default());
        let st = solve_penalized_stage(&s, &lat, 0, 0, None).unwrap();
        assert!(st.y.iter_nodes().all(|n| n.2 == 0.0));
    }

    #[test]
    fn large_m_approaches_one_sided_reflection() {
        let lat = Lattice::new(1.0, 10).unwrap();
        let s = spec("0", "0.5", "inf", "0", Lipschitz::default());
        let mut lower = AdaptedProcess::constant(&lat, 0.5);
        lower.set_level(10, vec![-1.0; 11]);
        let exact = solve_reflected(
            &FrozenData::new(
                &lat,
                AdaptedProcess::zeros(&lat),
                lower.clone(),
                AdaptedProcess::constant(&lat, f64::INFINITY),
                vec![0.0; 11],
            )
            .unwrap(),
            &lat,
        )
        .unwrap();
        let mut last = f64::INFINITY;
        for m in [10u64, 100, 1000, 10000] {
            let frozen = FrozenStage {
                ybar_prev: vec![0.0; 11],
                lower_prev: AdaptedProcess::constant(&lat, 0.5),
                upper_prev: AdaptedProcess::constant(&lat, f64::INFINITY),
            };
            let st = solve_penalized_stage(&s, &lat, 0, m, Some(frozen)).unwrap();
            let gap = (0..10)
                .flat_map(|k| (0..=k).map(move |j| (k, j)))
                .map(|(k, j)| (st.y.get(k, j) - exact.y.get(k, j)).abs())
                .fold(0.0, f64::max);
            assert!(gap < last);
            assert!(gap * m as f64 <= 10.0, "m = {m}: gap {gap}");
            last = gap;
        }
    }

    #[test]
    fn increments_match_penalty() {
        let lat = Lattice::new(1.0, 8).unwrap();
        let lip = Lipschitz {
            cf: 1.0,
            gamma1: 0.1,
            gamma2: 0.1,
            beta1: 0.1,
            beta2: 0.1,
        };
        let s = spec("0.5 * y + 0.5 * ybar + 1", "0.1 * y + 0.1 * ybar", "0.5 + 0.1 * y + 0.1 * ybar", "0.2", lip);
        let y0 = solve_penalized_stage(&s, &lat, 0, 0, None).unwrap();
        let frozen = FrozenStage::from_solution(&s, &lat, &y0.y).unwrap();
        let st = solve_penalized_stage(&s, &lat, 8, 16, Some(frozen.clone())).unwrap();
        let dt = lat.dt();
        for k in 0..8 {
            for j in 0..=k {
                let y = st.y.get(k, j);
                let p = 16.0 * dt * (frozen.lower_prev.get(k, j) - y).max(0.0);
                let q = 8.0 * dt * (y - frozen.upper_prev.get(k, j)).max(0.0);
                assert_eq!(st.dk_plus.get(k, j), p);
                assert_eq!(st.dk_minus.get(k, j), q);
                // budget identity
                let e = 0.5 * (st.y.get(k + 1, j) + st.y.get(k + 1, j + 1));
                let f = s
                    .driver_at(lat.time(k), lat.brownian(k, j), y, frozen.ybar_prev[k], st.z.get(k, j))
                    .unwrap();
                assert!((y - (e + dt * f + p - q)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn sentinel_barriers_stop_at_first_stage() {
        let lat = Lattice::new(1.0, 8).unwrap();
        let s = spec("sin(b)", "-inf", "inf", "b", Lipschitz::default());
        let out = cascade(&s, &lat, &Schedule::doubling(64, 64), 1e-6).unwrap();
        assert_eq!(out.report.final_stage, (0, 0));
        assert!(out.report.feasible_at_start);
        assert_eq!(out.history.len(), 1);
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule::doubling(4, 8).validate().is_ok());
        assert_eq!(Schedule::doubling(4, 8).m_values, vec![0, 1, 2, 4, 8]);
        let bad = Schedule {
            n_values: vec![0, 2, 1],
            m_values: vec![0],
            order: LimitOrder::MThenN,
        };
        assert!(matches!(bad.validate(), Err(Error::Schedule(_))));
    }

    #[test]
    fn chain_holds_on_monotone_spec() {
        let lat = Lattice::new(1.0, 12).unwrap();
        let lip = Lipschitz {
            cf: 0.5,
            gamma1: 0.1,
            gamma2: 0.1,
            beta1: 0.1,
            beta2: 0.1,
        };
        let s = spec(
            "0.3 * y + 0.2 * ybar + sin(3 * b)",
            "-0.1 + 0.1 * y + 0.1 * ybar + 0.2 * b",
            "0.2 + 0.1 * y + 0.1 * ybar + 0.2 * b",
            "0.1 + 0.2 * b",
            lip,
        );
        let out = cascade(&s, &lat, &Schedule::doubling(64, 64), 1e-7).unwrap();
        assert!(out.history.len() > 2);
        assert!(out.report.monotonicity.comparisons > 0);
        assert_eq!(out.report.monotonicity.violations, 0, "{:?}", out.report.monotonicity);
        assert!(out.report.spec_monotone);
    }

    #[test]
    fn terminal_square_matches_path_enumeration() {
        let lat = Lattice::new(1.0, 4).unwrap();
        let inc = AdaptedProcess::from_fn(&lat, |k, j| (k * 3 + j) as f64 * 0.1);
        let mut exact = 0.0;
        for p in 0..16usize {
            let (mut j, mut total) = (0, 0.0);
            for k in 0..4 {
                total += inc.get(k, j);
                j += (p >> k) & 1;
            }
            exact += total * total / 16.0;
        }
        assert!((terminal_square(&lat, &inc) - exact).abs() < 1e-14);
    }

    #[test]
    fn counterexample_small() {
        let lat = Lattice::new(1.0, 20).unwrap();
        let r = counterexample_run(&lat, &[0, 1, 2, 4, 8]).unwrap();
        assert!(r.bound_holds);
        assert!(r.plain_error.unwrap() < 1e-12);
        assert!(r.min_violation >= 0.5);
        assert!(counterexample_run(&Lattice::new(2.0, 4).unwrap(), &[0]).is_err());
    }
}
