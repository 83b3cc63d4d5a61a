//! Recombining binomial model of a one-dimensional Brownian motion.
//!
//! Node `(k, j)` with `0 <= j <= k <= N` sits at time `k * dt` and carries the
//! Brownian value `(2j - k) * sqrt(dt)`. From `(k, j)` the walk moves to
//! `(k+1, j+1)` or `(k+1, j)` with probability one half each, so conditional
//! expectations and the martingale representation are exact.

use crate::error::{Error, Result};
use crate::par;

/// Default cap on the number of steps for exhaustive path enumeration.
pub const PATH_ENUMERATION_CAP: usize = 20;

#[derive(Debug, Clone)]
pub struct Lattice {
    horizon: f64,
    steps: usize,
    dt: f64,
    sqrt_dt: f64,
    // weights[k][j] = C(k, j) 2^{-k}, built by Pascal averaging.
    weights: Vec<Vec<f64>>,
}

impl Lattice {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Lattice(format!("horizon must be positive, got {horizon}")));
        }
        if steps == 0 {
            return Err(Error::Lattice("steps must be at least 1".into()));
        }
        let dt = horizon / steps as f64;
        let mut weights = Vec::with_capacity(steps + 1);
        weights.push(vec![1.0]);
        for k in 0..steps {
            let prev: &Vec<f64> = &weights[k];
            let next = (0..=k + 1)
                .map(|j| {
                    let down = if j <= k { prev[j] } else { 0.0 };
                    let up = if j >= 1 { prev[j - 1] } else { 0.0 };
                    0.5 * (down + up)
                })
                .collect();
            weights.push(next);
        }
        Ok(Self {
            horizon,
            steps,
            dt,
            sqrt_dt: dt.sqrt(),
            weights,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sqrt_dt(&self) -> f64 {
        self.sqrt_dt
    }

    /// Number of levels, `N + 1`.
    pub fn levels(&self) -> usize {
        self.steps + 1
    }

    pub fn node_count(&self) -> usize {
        (self.steps + 1) * (self.steps + 2) / 2
    }

    /// Time of level `k`; the last level is exactly the horizon.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.dt
        }
    }

    pub fn brownian(&self, k: usize, j: usize) -> f64 {
        (2.0 * j as f64 - k as f64) * self.sqrt_dt
    }

    /// Binomial probabilities of the nodes at level `k`.
    pub fn weights(&self, k: usize) -> &[f64] {
        &self.weights[k]
    }

    pub(crate) fn check_level(&self, k: usize) -> Result<()> {
        if k > self.steps {
            Err(Error::LevelOutOfRange {
                level: k,
                steps: self.steps,
            })
        } else {
            Ok(())
        }
    }
}

/// A real value per lattice node.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    levels: Vec<Vec<f64>>,
}

impl AdaptedProcess {
    pub fn zeros(lat: &Lattice) -> Self {
        Self::constant(lat, 0.0)
    }

    pub fn constant(lat: &Lattice, c: f64) -> Self {
        Self {
            levels: (0..=lat.steps()).map(|k| vec![c; k + 1]).collect(),
        }
    }

    pub fn from_fn(lat: &Lattice, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        Self {
            levels: (0..=lat.steps())
                .map(|k| (0..=k).map(|j| f(k, j)).collect())
                .collect(),
        }
    }

    /// The Brownian motion itself.
    pub fn brownian(lat: &Lattice) -> Self {
        Self::from_fn(lat, |k, j| lat.brownian(k, j))
    }

    pub fn from_levels(levels: Vec<Vec<f64>>) -> Result<Self> {
        for (k, l) in levels.iter().enumerate() {
            if l.len() != k + 1 {
                return Err(Error::Invalid(format!(
                    "level {k} has {} values, expected {}",
                    l.len(),
                    k + 1
                )));
            }
        }
        if levels.is_empty() {
            return Err(Error::Invalid("process has no levels".into()));
        }
        Ok(Self { levels })
    }

    pub fn steps(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.levels[k][j]
    }

    pub fn set(&mut self, k: usize, j: usize, v: f64) {
        self.levels[k][j] = v;
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.levels[k]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.levels[k]
    }

    pub fn set_level(&mut self, k: usize, values: Vec<f64>) {
        assert_eq!(values.len(), k + 1, "level {k} needs {} values", k + 1);
        self.levels[k] = values;
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            levels: self
                .levels
                .iter()
                .map(|l| l.iter().map(|&v| f(v)).collect())
                .collect(),
        }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.steps(), other.steps(), "processes live on different lattices");
        Self {
            levels: self
                .levels
                .iter()
                .zip(&other.levels)
                .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect())
                .collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.levels
            .iter()
            .zip(&other.levels)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn iter_nodes(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.levels
            .iter()
            .enumerate()
            .flat_map(|(k, l)| l.iter().enumerate().map(move |(j, &v)| (k, j, v)))
    }
}

/// `E[next | F_k]` for level-(k+1) values, one entry per level-k node.
pub fn conditional_expectation_of(next: &[f64]) -> Vec<f64> {
    next.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
}

/// Level-k values of `E[p_{k+1} | F_k]`.
pub fn conditional_expectation(lat: &Lattice, p: &AdaptedProcess, k: usize) -> Result<Vec<f64>> {
    if k >= lat.steps() {
        return Err(Error::LevelOutOfRange {
            level: k,
            steps: lat.steps(),
        });
    }
    Ok(conditional_expectation_of(p.level(k + 1)))
}

pub fn expectation_of(lat: &Lattice, values: &[f64], k: usize) -> f64 {
    lat.weights(k).iter().zip(values).map(|(w, v)| w * v).sum()
}

/// `E[p_k]` under the binomial weights.
pub fn expectation(lat: &Lattice, p: &AdaptedProcess, k: usize) -> Result<f64> {
    lat.check_level(k)?;
    Ok(expectation_of(lat, p.level(k), k))
}

/// `E[p_k]` for every level.
pub fn level_expectations(lat: &Lattice, p: &AdaptedProcess) -> Vec<f64> {
    (0..=lat.steps()).map(|k| expectation_of(lat, p.level(k), k)).collect()
}

/// Discrete integrand `Z_k` with `next = E[next | F_k] + Z_k * dB`.
pub fn martingale_increment(next: &[f64], sqrt_dt: f64) -> Vec<f64> {
    next.windows(2).map(|w| (w[1] - w[0]) / (2.0 * sqrt_dt)).collect()
}

/// `sup_tau E|p_tau|` over stopping times valued in `[0, N]`.
pub fn d_norm(lat: &Lattice, p: &AdaptedProcess) -> f64 {
    d_norm_window(lat, p, 0, lat.steps())
}

/// `sup E|p_tau|` over stopping times valued in `[from, to]`, computed as
/// the root value of the Snell envelope of `|p|`.
pub fn d_norm_window(lat: &Lattice, p: &AdaptedProcess, from: usize, to: usize) -> f64 {
    assert!(from <= to && to <= lat.steps(), "bad window [{from}, {to}]");
    let mut env: Vec<f64> = p.level(to).iter().map(|v| v.abs()).collect();
    for k in (0..to).rev() {
        let cont = conditional_expectation_of(&env);
        env = if k >= from {
            cont.iter()
                .zip(p.level(k))
                .map(|(c, v)| v.abs().max(*c))
                .collect()
        } else {
            cont
        };
    }
    env[0]
}

/// `E[sup_k |p_k|^q]` by exhaustive enumeration of the `2^N` paths.
pub fn sp_norm(lat: &Lattice, p: &AdaptedProcess, q: f64) -> Result<f64> {
    sp_norm_window(lat, p, q, 0, lat.steps(), PATH_ENUMERATION_CAP)
}

/// `E[sup_{from <= k <= to} |p_k|^q]` by path enumeration, refusing lattices
/// with more than `cap` steps.
pub fn sp_norm_window(
    lat: &Lattice,
    p: &AdaptedProcess,
    q: f64,
    from: usize,
    to: usize,
    cap: usize,
) -> Result<f64> {
    if q < 1.0 || !q.is_finite() {
        return Err(Error::Invalid(format!("exponent must be >= 1, got {q}")));
    }
    assert!(from <= to && to <= lat.steps(), "bad window [{from}, {to}]");
    // Only the first `to` moves matter.
    if to > cap {
        return Err(Error::EnumerationCap { steps: to, cap });
    }
    let n_paths = 1usize << to;
    let weight = 0.5f64.powi(to as i32);
    // Chunked so the parallel reduction is deterministic.
    let chunk = 1usize << to.min(10);
    let n_chunks = n_paths / chunk;
    let partial = par::map_coarse(n_chunks, |c| {
        let mut acc = 0.0;
        for path in c * chunk..(c + 1) * chunk {
            let mut j = 0usize;
            let mut sup = if from == 0 { p.get(0, 0).abs() } else { 0.0 };
            for k in 1..=to {
                if (path >> (k - 1)) & 1 == 1 {
                    j += 1;
                }
                if k >= from {
                    sup = sup.max(p.get(k, j).abs());
                }
            }
            acc += sup.powf(q);
        }
        acc
    });
    Ok(partial.iter().sum::<f64>() * weight)
}

/// The `S^q` norm proper, `(E[sup |p|^q])^{1/q}`.
pub fn sp_norm_root_window(
    lat: &Lattice,
    p: &AdaptedProcess,
    q: f64,
    from: usize,
    to: usize,
    cap: usize,
) -> Result<f64> {
    Ok(sp_norm_window(lat, p, q, from, to, cap)?.powf(1.0 / q))
}
