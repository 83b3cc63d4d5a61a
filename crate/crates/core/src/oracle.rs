//! Brute-force zero-sum Dynkin game on tiny lattices.
//!
//! The maximizer stops at `tau` and collects the lower barrier, the minimizer
//! stops at `sigma` and pays the upper barrier; the running reward is
//! `sum_{k < tau ^ sigma} phi_k dt` and the terminal value is paid if nobody
//! stops. A tie `tau = sigma < N` goes to the lower barrier.
//!
//! Strategies are stop-sets over the non-terminal nodes: a player stops at
//! the first node of the path that lies in its set.

use std::collections::HashSet;

use crate::drbsde::FrozenData;
use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::par;

/// Largest lattice the enumeration accepts.
pub const ORACLE_MAX_STEPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynkinValue {
    pub sup_inf: f64,
    pub inf_sup: f64,
}

impl DynkinValue {
    pub fn saddle_gap(&self) -> f64 {
        (self.sup_inf - self.inf_sup).abs()
    }
}

/// Node index along each of the `2^N` paths.
fn paths(n: usize) -> Vec<Vec<usize>> {
    (0..1usize << n)
        .map(|p| {
            let mut j = 0;
            let mut nodes = Vec::with_capacity(n + 1);
            nodes.push(0);
            for k in 0..n {
                j += (p >> k) & 1;
                nodes.push(j);
            }
            nodes
        })
        .collect()
}

/// All distinct first-hitting times generated by stop-sets.
fn stopping_times(n: usize, paths: &[Vec<usize>]) -> Vec<Vec<u8>> {
    let bit = |k: usize, j: usize| k * (k + 1) / 2 + j;
    let n_bits = n * (n + 1) / 2;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for mask in 0u32..(1u32 << n_bits) {
        let times: Vec<u8> = paths
            .iter()
            .map(|nodes| {
                (0..n)
                    .find(|&k| mask >> bit(k, nodes[k]) & 1 == 1)
                    .unwrap_or(n) as u8
            })
            .collect();
        if seen.insert(times.clone()) {
            out.push(times);
        }
    }
    out
}

/// `sup_tau inf_sigma` and `inf_sigma sup_tau` of the expected payoff.
pub fn dynkin_value_bruteforce(fd: &FrozenData, lat: &Lattice) -> Result<DynkinValue> {
    let n = lat.steps();
    if n > ORACLE_MAX_STEPS {
        return Err(Error::Invalid(format!(
            "oracle enumeration is limited to {ORACLE_MAX_STEPS} steps, got {n}"
        )));
    }
    fd.validate(lat)?;
    if fd.window.start != 0 || fd.window.end != n {
        return Err(Error::Invalid("oracle needs frozen data on the whole lattice".into()));
    }
    let paths = paths(n);
    let times = stopping_times(n, &paths);
    let weight = 0.5f64.powi(n as i32);
    let dt = lat.dt();

    // running[p][k] = sum_{i < k} phi(i, j_i) dt along path p
    let running: Vec<Vec<f64>> = paths
        .iter()
        .map(|nodes| {
            let mut acc = vec![0.0; n + 1];
            for k in 0..n {
                acc[k + 1] = acc[k] + fd.driver.get(k, nodes[k]) * dt;
            }
            acc
        })
        .collect();

    let payoff = |tau: &[u8], sigma: &[u8]| -> f64 {
        let mut total = 0.0;
        for (p, nodes) in paths.iter().enumerate() {
            let (t, s) = (tau[p] as usize, sigma[p] as usize);
            let stop = t.min(s);
            let end = if s < t {
                fd.upper.get(s, nodes[s])
            } else if t < n {
                fd.lower.get(t, nodes[t])
            } else {
                fd.terminal[nodes[n]]
            };
            total += running[p][stop] + end;
        }
        total * weight
    };

    let rows: Vec<Vec<f64>> = par::map_coarse(times.len(), |i| {
        times.iter().map(|sigma| payoff(&times[i], sigma)).collect()
    });
    let sup_inf = rows
        .iter()
        .map(|r| r.iter().copied().fold(f64::INFINITY, f64::min))
        .fold(f64::NEG_INFINITY, f64::max);
    let inf_sup = (0..times.len())
        .map(|c| rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max))
        .fold(f64::INFINITY, f64::min);
    Ok(DynkinValue { sup_inf, inf_sup })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drbsde::{random_frozen_data, solve_reflected};
    use crate::lattice::AdaptedProcess;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd(lat: &Lattice, l: f64, u: f64, xi: f64) -> FrozenData {
        FrozenData::new(
            lat,
            AdaptedProcess::zeros(lat),
            AdaptedProcess::constant(lat, l),
            AdaptedProcess::constant(lat, u),
            vec![xi; lat.steps() + 1],
        )
        .unwrap()
    }

    #[test]
    fn stopping_time_counts() {
        // Distinct first-hitting times for one and two steps.
        assert_eq!(stopping_times(1, &paths(1)).len(), 2);
        assert_eq!(stopping_times(2, &paths(2)).len(), 5);
        assert!(stopping_times(3, &paths(3)).len() > 5);
    }

    #[test]
    fn inactive_barriers_value_zero() {
        let lat = Lattice::new(1.0, 3).unwrap();
        let v = dynkin_value_bruteforce(&fd(&lat, -1.0, 1.0, 0.0), &lat).unwrap();
        assert_eq!(v.sup_inf, 0.0);
        assert_eq!(v.inf_sup, 0.0);
    }

    #[test]
    fn maximizer_stops_immediately() {
        let lat = Lattice::new(1.0, 1).unwrap();
        let mut d = fd(&lat, -1.0, 1.0, 0.0);
        d.lower.set(0, 0, 0.2);
        let v = dynkin_value_bruteforce(&d, &lat).unwrap();
        assert_eq!(v.sup_inf, 0.2);
        assert_eq!(v.inf_sup, 0.2);
    }

    #[test]
    fn matches_backward_induction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=4 {
            let lat = Lattice::new(1.0, n).unwrap();
            for _ in 0..10 {
                let d = random_frozen_data(&lat, &mut rng);
                let v = dynkin_value_bruteforce(&d, &lat).unwrap();
                let root = solve_reflected(&d, &lat).unwrap().root_value();
                assert!((v.sup_inf - root).abs() <= 1e-12, "N={n}: {} vs {root}", v.sup_inf);
                assert!(v.saddle_gap() <= 1e-12);
            }
        }
    }

    #[test]
    fn refuses_large_lattices() {
        let lat = Lattice::new(1.0, 5).unwrap();
        assert!(dynkin_value_bruteforce(&fd(&lat, -1.0, 1.0, 0.0), &lat).is_err());
    }
}
