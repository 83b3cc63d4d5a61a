//! Implicit backward induction shared by the penalized stages and the plain
//! mean-field BSDE used as the Picard seed.
//!
//! At node `(k, j)` with `e = E[Y_{k+1} | F_k]` and `z` the martingale
//! increment of `Y_{k+1}`, the value `y` solves
//!
//! ```text
//! y = e + dt * [ f(t, b, y, ybar_k, z) + m (y - L)^- - n (y - U)^+ ]
//! ```
//!
//! The right-hand side minus `y` is strictly decreasing as long as
//! `dt * C_f < 1`, so each node is a well-posed scalar root.

use crate::error::{Error, Result};
use crate::lattice::{conditional_expectation_of, expectation_of, martingale_increment, AdaptedProcess, Lattice};
use crate::model::ProblemSpec;
use crate::par;
use crate::scalar::{scalar_error, solve_increasing};

/// How the mean-field argument is supplied at each level.
pub(crate) enum MeanField<'a> {
    /// Per-level values frozen from a previous stage.
    Frozen(&'a [f64]),
    /// `ybar_k = E[y_k]` solved jointly with the level.
    SelfConsistent,
}

pub(crate) struct StageProblem<'a> {
    pub spec: &'a ProblemSpec,
    pub lat: &'a Lattice,
    /// Lower obstacle for the `m` penalty; `None` means no lower barrier.
    pub lower: Option<&'a AdaptedProcess>,
    pub upper: Option<&'a AdaptedProcess>,
    pub m: f64,
    pub n: f64,
    pub mean_field: MeanField<'a>,
    pub terminal: &'a [f64],
}

pub(crate) struct StageSolution {
    pub y: AdaptedProcess,
    pub z: AdaptedProcess,
    pub dk_plus: AdaptedProcess,
    pub dk_minus: AdaptedProcess,
}

const MEAN_FIELD_MAX_ITER: usize = 200;

impl StageProblem<'_> {
    fn check(&self) -> Result<()> {
        let c = self.lat.dt() * self.spec.lipschitz.cf;
        if c >= 1.0 {
            return Err(Error::CoarseStep(c));
        }
        if self.terminal.len() != self.lat.steps() + 1 {
            return Err(Error::Invalid("terminal values do not match the lattice".into()));
        }
        Ok(())
    }

    fn solve_level(&self, k: usize, e: &[f64], z: &[f64], ybar: f64) -> Result<Vec<f64>> {
        let lat = self.lat;
        let (t, dt) = (lat.time(k), lat.dt());
        let (m, n) = (self.m, self.n);
        par::try_map_range(k + 1, |j| {
            let b = lat.brownian(k, j);
            let low = self.lower.map_or(f64::NEG_INFINITY, |p| p.get(k, j));
            let up = self.upper.map_or(f64::INFINITY, |p| p.get(k, j));
            let residual = |y: f64| -> Result<f64> {
                let f = self.spec.driver_at(t, b, y, ybar, z[j])?;
                let push = if m > 0.0 { m * (low - y).max(0.0) } else { 0.0 };
                let pull = if n > 0.0 { n * (y - up).max(0.0) } else { 0.0 };
                Ok(y - e[j] - dt * (f + push - pull))
            };
            solve_increasing(residual, e[j]).map_err(|r| scalar_error(k, j, r))
        })
    }

    pub fn solve(&self) -> Result<StageSolution> {
        self.check()?;
        let lat = self.lat;
        let n_steps = lat.steps();
        let mut y = AdaptedProcess::zeros(lat);
        let mut z = AdaptedProcess::zeros(lat);
        let mut dk_plus = AdaptedProcess::zeros(lat);
        let mut dk_minus = AdaptedProcess::zeros(lat);
        y.set_level(n_steps, self.terminal.to_vec());

        for k in (0..n_steps).rev() {
            let e = conditional_expectation_of(y.level(k + 1));
            let zk = martingale_increment(y.level(k + 1), lat.sqrt_dt());
            let level = match self.mean_field {
                MeanField::Frozen(ybar) => self.solve_level(k, &e, &zk, ybar[k])?,
                MeanField::SelfConsistent => self.self_consistent_level(k, &e, &zk)?,
            };
            let dt = lat.dt();
            for (j, &v) in level.iter().enumerate() {
                if self.m > 0.0 {
                    if let Some(l) = self.lower {
                        dk_plus.set(k, j, self.m * dt * (l.get(k, j) - v).max(0.0));
                    }
                }
                if self.n > 0.0 {
                    if let Some(u) = self.upper {
                        dk_minus.set(k, j, self.n * dt * (v - u.get(k, j)).max(0.0));
                    }
                }
            }
            y.set_level(k, level);
            z.set_level(k, zk);
        }
        Ok(StageSolution {
            y,
            z,
            dk_plus,
            dk_minus,
        })
    }

    fn self_consistent_level(&self, k: usize, e: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        let lat = self.lat;
        let mut ybar = expectation_of(lat, e, k);
        let mut level = self.solve_level(k, e, z, ybar)?;
        if !self.spec.driver.uses(crate::expr::Var::YBar) {
            return Ok(level);
        }
        for _ in 0..MEAN_FIELD_MAX_ITER {
            let next = expectation_of(lat, &level, k);
            let done = (next - ybar).abs() <= 1e-15 * (1.0 + next.abs());
            ybar = next;
            level = self.solve_level(k, e, z, ybar)?;
            if done {
                return Ok(level);
            }
        }
        let last = expectation_of(lat, &level, k);
        Err(Error::NoConvergence {
            iterations: MEAN_FIELD_MAX_ITER,
            residual: (last - ybar).abs(),
        })
    }
}

/// Unreflected mean-field BSDE `Y = xi + int f(s, Y, E Y, Z) ds - int Z dB`.
pub(crate) fn plain_mean_field_bsde(spec: &ProblemSpec, lat: &Lattice) -> Result<StageSolution> {
    let terminal = spec.terminal_values(lat)?;
    StageProblem {
        spec,
        lat,
        lower: None,
        upper: None,
        m: 0.0,
        n: 0.0,
        mean_field: MeanField::SelfConsistent,
        terminal: &terminal,
    }
    .solve()
}
