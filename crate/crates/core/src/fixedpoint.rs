//! Picard iteration of the frozen reflected operator `Phi`.
//!
//! `Phi(Y)` freezes driver and barriers at `(Y, E[Y])` and solves the
//! resulting reflected problem. Windowed mode iterates on `[T - delta, T]`
//! first, then uses the converged values at the left edge as terminal data
//! for the next window toward 0.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::conditions::{contraction_report, ContractionReport};
use crate::drbsde::{solve_reflected, DRSolution, FrozenData, Window};
use crate::error::{Error, Result};
use crate::lattice::{d_norm_window, expectation_of, sp_norm_root_window, AdaptedProcess, Lattice, PATH_ENUMERATION_CAP};
use crate::model::ProblemSpec;
use crate::par;
use crate::stage::plain_mean_field_bsde;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PicardMode {
    Global,
    /// Windows of `delta` time units, snapped down to whole steps.
    Windowed { delta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormChoice {
    /// Stopping-time norm `sup_tau E|p_tau|`.
    D,
    /// `(E[sup |p|^q])^{1/q}` by path enumeration.
    Sp(f64),
}

impl NormChoice {
    /// `Sp(p)` when `p > 1` and the lattice is small enough to enumerate.
    pub fn default_for(spec: &ProblemSpec, lat: &Lattice) -> Self {
        if spec.p > 1.0 && lat.steps() <= PATH_ENUMERATION_CAP {
            Self::Sp(spec.p)
        } else {
            Self::D
        }
    }

    /// Norm of `p` restricted to levels `[w.start, w.end]`. Falls back to
    /// the `D` norm when the window is too long to enumerate.
    pub fn window_norm(&self, lat: &Lattice, p: &AdaptedProcess, w: Window) -> f64 {
        match *self {
            Self::D => d_norm_window(lat, p, w.start, w.end),
            Self::Sp(q) => match sp_norm_root_window(lat, p, q, w.start, w.end, PATH_ENUMERATION_CAP) {
                Ok(v) => v,
                Err(_) => d_norm_window(lat, p, w.start, w.end),
            },
        }
    }

    fn enumerable(&self, w: Window) -> bool {
        match self {
            Self::D => true,
            Self::Sp(_) => w.end <= PATH_ENUMERATION_CAP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardConfig {
    pub mode: PicardMode,
    pub tol: f64,
    pub max_iter: usize,
    pub norm: NormChoice,
    /// Run even when the contraction condition fails.
    pub force: bool,
    /// Target used for the condition report.
    pub target: f64,
}

impl PicardConfig {
    pub fn validate(&self, lat: &Lattice) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Invalid(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Invalid("max_iter must be at least 1".into()));
        }
        if let PicardMode::Windowed { delta } = self.mode {
            if !(delta > 0.0 && delta <= lat.horizon() * (1.0 + 1e-12)) {
                return Err(Error::Invalid(format!(
                    "delta must lie in (0, {}], got {delta}",
                    lat.horizon()
                )));
            }
        }
        if let NormChoice::Sp(q) = self.norm {
            if !(q >= 1.0) {
                return Err(Error::Invalid(format!("norm exponent must be >= 1, got {q}")));
            }
        }
        Ok(())
    }
}

/// Whole steps in a window of `delta` time units, at least one.
pub fn window_steps(lat: &Lattice, delta: f64) -> usize {
    let raw = (delta / lat.dt() * (1.0 + 1e-12)).floor() as usize;
    raw.clamp(1, lat.steps())
}

/// Windows from the horizon back to 0.
pub fn windows(lat: &Lattice, steps: usize) -> Vec<Window> {
    let mut out = Vec::new();
    let mut end = lat.steps();
    while end > 0 {
        let start = end.saturating_sub(steps);
        out.push(Window { start, end });
        end = start;
    }
    out
}

/// Freezes driver and barriers at `(Y, E[Y])` on `window`. Terminal values
/// are `xi` when the window ends at the horizon and `Y` at the right edge
/// otherwise.
pub fn freeze(spec: &ProblemSpec, lat: &Lattice, y: &AdaptedProcess, window: Window) -> Result<FrozenData> {
    spec.require_z_free()?;
    if window.start > window.end || window.end > lat.steps() || y.steps() != lat.steps() {
        return Err(Error::Invalid(format!("bad window [{}, {}]", window.start, window.end)));
    }
    let mut driver = AdaptedProcess::zeros(lat);
    let mut lower = AdaptedProcess::constant(lat, f64::NEG_INFINITY);
    let mut upper = AdaptedProcess::constant(lat, f64::INFINITY);
    for k in window.start..=window.end {
        let t = lat.time(k);
        let ybar = expectation_of(lat, y.level(k), k);
        let rows = par::try_map_range(k + 1, |j| -> Result<(f64, f64, f64)> {
            let (b, v) = (lat.brownian(k, j), y.get(k, j));
            Ok((
                if k < window.end { spec.driver_at(t, b, v, ybar, 0.0)? } else { 0.0 },
                spec.lower_at(t, b, v, ybar)?,
                spec.upper_at(t, b, v, ybar)?,
            ))
        })?;
        for (j, (f, l, u)) in rows.into_iter().enumerate() {
            driver.set(k, j, f);
            lower.set(k, j, l);
            upper.set(k, j, u);
        }
    }
    let terminal = if window.end == lat.steps() {
        spec.terminal_values(lat)?
    } else {
        y.level(window.end).to_vec()
    };
    Ok(FrozenData {
        driver,
        lower,
        upper,
        terminal,
        window,
    })
}

/// `Phi(Y)` on a window; levels outside the window are copied from `Y`.
pub fn apply_phi(spec: &ProblemSpec, lat: &Lattice, y: &AdaptedProcess, window: Window) -> Result<(FrozenData, DRSolution)> {
    let fd = freeze(spec, lat, y, window)?;
    let sol = solve_reflected(&fd, lat)?;
    Ok((fd, sol))
}

#[derive(Debug, Clone, Serialize)]
pub struct WindowReport {
    pub start: usize,
    pub end: usize,
    pub iterations: usize,
    pub residuals: Vec<f64>,
}

impl WindowReport {
    /// `r_{i+1} / r_i` for consecutive non-zero residuals.
    pub fn residual_ratios(&self) -> Vec<f64> {
        self.residuals
            .windows(2)
            .filter(|w| w[0] > 0.0)
            .map(|w| w[1] / w[0])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct FixedPointResult {
    pub solution: DRSolution,
    pub window_steps: usize,
    pub windows: Vec<WindowReport>,
    /// `||Y - Phi(Y)||` over the whole lattice after convergence.
    pub fixed_point_residual: f64,
    /// Largest node gap between `Y` and one more `Phi` pass.
    pub idempotence_gap: f64,
    pub conditions: ContractionReport,
    pub norm: NormChoice,
    pub warnings: Vec<String>,
}

impl FixedPointResult {
    pub fn final_residuals(&self) -> Vec<f64> {
        self.windows
            .iter()
            .map(|w| w.residuals.last().copied().unwrap_or(0.0))
            .collect()
    }

    pub fn iterations(&self) -> Vec<usize> {
        self.windows.iter().map(|w| w.iterations).collect()
    }

    pub fn contraction_ratios(&self) -> Vec<f64> {
        self.windows.iter().flat_map(|w| w.residual_ratios()).collect()
    }
}

/// Unreflected mean-field BSDE used as the Picard seed.
pub fn initial_guess(spec: &ProblemSpec, lat: &Lattice) -> Result<AdaptedProcess> {
    Ok(plain_mean_field_bsde(spec, lat)?.y)
}

pub fn picard_solve(spec: &ProblemSpec, lat: &Lattice, cfg: &PicardConfig) -> Result<FixedPointResult> {
    spec.require_z_free()?;
    cfg.validate(lat)?;
    let conditions = contraction_report(&spec.lipschitz, spec.p, lat.horizon(), cfg.target)?;
    let mut warnings = Vec::new();
    if !conditions.holds_for(spec.p) {
        let msg = if spec.p > 1.0 {
            format!("Lambda(0) = {:?} is not below 1", conditions.lambda_at_zero)
        } else {
            format!("Sigma(0) = {} is not below 1", conditions.sigma_at_zero)
        };
        if !cfg.force {
            return Err(Error::Contraction(msg));
        }
        warnings.push(format!("contraction condition fails ({msg}); continuing because of --force"));
    }

    let steps = match cfg.mode {
        PicardMode::Global => lat.steps(),
        PicardMode::Windowed { delta } => window_steps(lat, delta),
    };
    let mut y = initial_guess(spec, lat)?;
    let mut z = AdaptedProcess::zeros(lat);
    let mut dk_plus = AdaptedProcess::zeros(lat);
    let mut dk_minus = AdaptedProcess::zeros(lat);
    let mut reports = Vec::new();
    let mut warned_norm = false;

    for w in windows(lat, steps) {
        if !cfg.norm.enumerable(w) && !warned_norm {
            warnings.push("window too long for path enumeration; using the stopping-time norm".into());
            warned_norm = true;
        }
        let mut residuals = Vec::new();
        let mut converged = false;
        for _ in 0..cfg.max_iter {
            let (_, sol) = apply_phi(spec, lat, &y, w)?;
            let r = cfg.norm.window_norm(lat, &sol.y.sub(&y), w);
            residuals.push(r);
            for k in w.start..w.end {
                y.set_level(k, sol.y.level(k).to_vec());
                z.set_level(k, sol.z.level(k).to_vec());
                dk_plus.set_level(k, sol.dk_plus.level(k).to_vec());
                dk_minus.set_level(k, sol.dk_minus.level(k).to_vec());
            }
            if r <= cfg.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence {
                iterations: cfg.max_iter,
                residual: residuals.last().copied().unwrap_or(f64::NAN),
            });
        }
        reports.push(WindowReport {
            start: w.start,
            end: w.end,
            iterations: residuals.len(),
            residuals,
        });
    }

    // One more full pass measures how far the concatenation is from a fixed
    // point and supplies the barriers for the complementarity residuals.
    let full = Window::full(lat);
    let (fd, check) = apply_phi(spec, lat, &y, full)?;
    let fixed_point_residual = cfg.norm.window_norm(lat, &check.y.sub(&y), full);
    let idempotence_gap = check.y.max_abs_diff(&y);
    let mut solution = DRSolution {
        y,
        z,
        dk_plus,
        dk_minus,
        window: full,
        skorokhod_plus: 0.0,
        skorokhod_minus: 0.0,
        flat_off_barrier: 0.0,
    };
    let (sp, sm) = crate::drbsde::skorokhod_residuals(&solution, &fd.lower, &fd.upper, lat);
    solution.skorokhod_plus = sp;
    solution.skorokhod_minus = sm;
    solution.flat_off_barrier = crate::drbsde::flat_off_barrier(&solution, &fd.lower, &fd.upper);
    Ok(FixedPointResult {
        solution,
        window_steps: steps,
        windows: reports,
        fixed_point_residual,
        idempotence_gap,
        conditions,
        norm: cfg.norm,
        warnings,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ContractionTrials {
    pub window_start: usize,
    pub window_end: usize,
    pub max_ratio: f64,
    pub ratios: Vec<f64>,
    /// Trials where the two draws coincided and no ratio was formed.
    pub skipped: usize,
}

/// Largest observed `||Phi(Y) - Phi(Y')|| / ||Y - Y'||` over random pairs
/// that agree outside the last window `[T - delta, T]`.
pub fn empirical_contraction(
    spec: &ProblemSpec,
    lat: &Lattice,
    delta: f64,
    trials: usize,
    seed: u64,
    norm: NormChoice,
) -> Result<ContractionTrials> {
    if trials == 0 {
        return Err(Error::Invalid("trials must be at least 1".into()));
    }
    spec.require_z_free()?;
    let steps = window_steps(lat, delta);
    let w = Window {
        start: lat.steps() - steps,
        end: lat.steps(),
    };
    let base = initial_guess(spec, lat)?;
    let noise = |y: &mut AdaptedProcess, scale: f64, rng: &mut ChaCha8Rng| {
        for k in w.start..w.end {
            for v in y.level_mut(k) {
                *v += scale * rng.gen_range(-1.0..1.0);
            }
        }
    };
    // The difference is node noise, a constant shift, or a smooth function
    // of (t, b), each with a random scale.
    let outcomes = par::map_coarse(trials, |i| -> Result<Option<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
        let mut a = base.clone();
        noise(&mut a, rng.gen_range(0.01..2.0), &mut rng);
        let mut b = a.clone();
        let scale = rng.gen_range(0.01..2.0);
        match rng.gen_range(0..3) {
            0 => noise(&mut b, scale, &mut rng),
            1 => {
                let shift = scale * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                for k in w.start..w.end {
                    b.level_mut(k).iter_mut().for_each(|v| *v += shift);
                }
            }
            _ => {
                let c: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                let freq = rng.gen_range(0.5..4.0);
                for k in w.start..w.end {
                    let t = lat.time(k);
                    for (j, v) in b.level_mut(k).iter_mut().enumerate() {
                        let x = lat.brownian(k, j);
                        *v += scale * (c[0] + c[1] * x / (1.0 + x.abs()) + c[2] * (freq * x).sin() + c[3] * t);
                    }
                }
            }
        }
        let denom = norm.window_norm(lat, &a.sub(&b), w);
        if denom == 0.0 {
            return Ok(None);
        }
        let pa = apply_phi(spec, lat, &a, w)?.1.y;
        let pb = apply_phi(spec, lat, &b, w)?.1.y;
        Ok(Some(norm.window_norm(lat, &pa.sub(&pb), w) / denom))
    });
    let mut ratios = Vec::with_capacity(trials);
    let mut skipped = 0;
    for o in outcomes {
        match o? {
            Some(r) => ratios.push(r),
            None => skipped += 1,
        }
    }
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    Ok(ContractionTrials {
        window_start: w.start,
        window_end: w.end,
        max_ratio,
        ratios,
        skipped,
    })
}
