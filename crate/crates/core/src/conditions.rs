//! Contraction constants, window size and the Mokobodski check.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lattice::Lattice;
use crate::model::{Lipschitz, MokobodskiWitness, ProblemSpec, SampleGrid};
use crate::par;

/// Which contraction constant governs the window size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regime {
    /// `p > 1`, governed by `Lambda`.
    Lp(f64),
    /// `p = 1`, governed by `Sigma`.
    Integrable,
}

impl Regime {
    pub fn from_p(p: f64) -> Result<Self> {
        if p > 1.0 {
            Ok(Self::Lp(p))
        } else if p == 1.0 {
            Ok(Self::Integrable)
        } else {
            Err(Error::Invalid(format!("p must be >= 1, got {p}")))
        }
    }
}

/// `Lambda(delta)` for exponent `p > 1`.
pub fn lambda_contraction(lip: &Lipschitz, p: f64, delta: f64) -> Result<f64> {
    if !(p > 1.0) || !p.is_finite() {
        return Err(Error::Invalid(format!("Lambda needs p > 1, got {p}")));
    }
    if !(delta >= 0.0) {
        return Err(Error::Invalid(format!("delta must be >= 0, got {delta}")));
    }
    lip.validate()?;
    let dc = delta * lip.cf;
    let outer = (2.0 * dc + lip.barrier_sum()).powf((p - 1.0) / p);
    let inner = (p / (p - 1.0)).powf(p) * (dc + lip.gamma1 + lip.beta1) + (dc + lip.gamma2 + lip.beta2);
    Ok(outer * inner.powf(1.0 / p))
}

/// `Sigma(delta) = 2 delta C_f + gamma1 + gamma2 + beta1 + beta2`.
pub fn sigma_contraction(lip: &Lipschitz, delta: f64) -> f64 {
    2.0 * delta * lip.cf + lip.barrier_sum()
}

pub fn contraction_value(lip: &Lipschitz, regime: Regime, delta: f64) -> Result<f64> {
    match regime {
        Regime::Lp(p) => lambda_contraction(lip, p, delta),
        Regime::Integrable => Ok(sigma_contraction(lip, delta)),
    }
}

/// Largest `delta <= horizon` whose contraction value is at most `target`.
///
/// `None` when the condition already fails at `delta = 0`; `Some(horizon)`
/// when it holds on the whole horizon. Otherwise bisects until the bracket
/// stops shrinking in floating point.
pub fn find_delta(lip: &Lipschitz, regime: Regime, target: f64, horizon: f64) -> Result<Option<f64>> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::Invalid(format!("target must lie in (0, 1), got {target}")));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Invalid(format!("horizon must be positive, got {horizon}")));
    }
    let value = |d: f64| contraction_value(lip, regime, d);
    if value(0.0)? > target {
        return Ok(None);
    }
    if value(horizon)? <= target {
        return Ok(Some(horizon));
    }
    let (mut lo, mut hi) = (0.0f64, horizon);
    loop {
        let mid = lo + 0.5 * (hi - lo);
        if mid <= lo || mid >= hi {
            break;
        }
        if value(mid)? <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(Some(lo))
}

#[derive(Debug, Clone, Serialize)]
pub struct ContractionReport {
    /// `Lambda(0)`; absent when `p = 1`.
    pub lambda_at_zero: Option<f64>,
    pub sigma_at_zero: f64,
    pub cd1_holds: bool,
    pub cd_p1_holds: bool,
    pub delta_p: Option<f64>,
    pub delta_1: Option<f64>,
    pub target: f64,
}

impl ContractionReport {
    /// The condition that governs the fixed-point route for exponent `p`.
    pub fn holds_for(&self, p: f64) -> bool {
        if p > 1.0 {
            self.cd1_holds
        } else {
            self.cd_p1_holds
        }
    }

    pub fn delta_for(&self, p: f64) -> Option<f64> {
        if p > 1.0 {
            self.delta_p
        } else {
            self.delta_1
        }
    }
}

pub fn contraction_report(lip: &Lipschitz, p: f64, horizon: f64, target: f64) -> Result<ContractionReport> {
    let sigma0 = sigma_contraction(lip, 0.0);
    let (lambda0, delta_p) = if p > 1.0 {
        (
            Some(lambda_contraction(lip, p, 0.0)?),
            find_delta(lip, Regime::Lp(p), target, horizon)?,
        )
    } else {
        (None, None)
    };
    Ok(ContractionReport {
        lambda_at_zero: lambda0,
        sigma_at_zero: sigma0,
        cd1_holds: lambda0.is_some_and(|l| l < 1.0),
        cd_p1_holds: sigma0 < 1.0,
        delta_p,
        delta_1: find_delta(lip, Regime::Integrable, target, horizon)?,
        target,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct MarginPoint {
    pub level: usize,
    pub node: usize,
    pub y: f64,
    pub ybar: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MokobodskiReport {
    pub passed: bool,
    /// Largest disagreement between the two predecessors of a node.
    pub decomposition_error: f64,
    pub vplus_monotone: bool,
    pub vminus_monotone: bool,
    /// `min (X - h)` over nodes and sample points.
    pub lower_margin: MarginPoint,
    /// `min (g - X)` over nodes and sample points.
    pub upper_margin: MarginPoint,
    pub sample_points: usize,
    pub note: &'static str,
}

const DECOMPOSITION_TOL: f64 = 1e-9;

/// Assembles `X = X0 + sum J dB + V+ - V-` on the lattice and checks
/// `h <= X <= g` over every node and every sample point, plus the box
/// corners scaled by 10.
pub fn mokobodski_check(
    spec: &ProblemSpec,
    witness: &MokobodskiWitness,
    lat: &Lattice,
    grid: &SampleGrid,
) -> Result<MokobodskiReport> {
    let n = lat.steps();
    let eval = |e: &crate::expr::Expression, k: usize, j: usize| -> Result<f64> {
        Ok(e.eval(&crate::expr::Vars::at(lat.time(k), lat.brownian(k, j)))?)
    };

    // Martingale part, forward; every interior node has two predecessors.
    let mut mart: Vec<Vec<f64>> = vec![vec![0.0]];
    let mut decomposition_error = 0.0f64;
    for k in 0..n {
        let jumps: Vec<f64> = (0..=k)
            .map(|j| Ok(eval(&witness.integrand, k, j)? * lat.sqrt_dt()))
            .collect::<Result<_>>()?;
        let prev = &mart[k];
        let mut next = vec![0.0; k + 2];
        for (j, slot) in next.iter_mut().enumerate() {
            let from_below = (j >= 1).then(|| prev[j - 1] + jumps[j - 1]);
            let from_above = (j <= k).then(|| prev[j] - jumps[j]);
            *slot = match (from_below, from_above) {
                (Some(a), Some(b)) => {
                    let gap = (a - b).abs();
                    if gap > DECOMPOSITION_TOL {
                        return Err(Error::Invalid(format!(
                            "witness martingale part does not recombine at ({}, {j}): {a} vs {b}",
                            k + 1
                        )));
                    }
                    decomposition_error = decomposition_error.max(gap);
                    0.5 * (a + b)
                }
                (Some(a), None) | (None, Some(a)) => a,
                (None, None) => unreachable!(),
            };
        }
        mart.push(next);
    }

    let mut vplus_monotone = true;
    let mut vminus_monotone = true;
    for k in 0..n {
        for j in 0..=k {
            for (v, flag) in [(&witness.vplus, &mut vplus_monotone), (&witness.vminus, &mut vminus_monotone)] {
                let here = eval(v, k, j)?;
                if eval(v, k + 1, j)? < here || eval(v, k + 1, j + 1)? < here {
                    *flag = false;
                }
            }
        }
    }

    let mut samples = grid.points();
    samples.extend(grid.corners(10.0));
    let nodes: Vec<(usize, usize)> = (0..=n).flat_map(|k| (0..=k).map(move |j| (k, j))).collect();
    let per_node = par::try_map_range(nodes.len(), |i| -> Result<(MarginPoint, MarginPoint)> {
        let (k, j) = nodes[i];
        let (t, b) = (lat.time(k), lat.brownian(k, j));
        let x = witness.x0 + mart[k][j] + eval(&witness.vplus, k, j)? - eval(&witness.vminus, k, j)?;
        let mut low = MarginPoint {
            level: k,
            node: j,
            y: 0.0,
            ybar: 0.0,
            margin: f64::INFINITY,
        };
        let mut up = low.clone();
        for &(y, ybar) in &samples {
            let lm = x - spec.lower_at(t, b, y, ybar)?;
            let um = spec.upper_at(t, b, y, ybar)? - x;
            if lm < low.margin || lm.is_nan() {
                low.margin = lm;
                low.y = y;
                low.ybar = ybar;
            }
            if um < up.margin || um.is_nan() {
                up.margin = um;
                up.y = y;
                up.ybar = ybar;
            }
        }
        Ok((low, up))
    })?;
    let pick = |it: &mut dyn Iterator<Item = MarginPoint>| {
        it.fold(None::<MarginPoint>, |best, m| match best {
            Some(b) if !(m.margin < b.margin) => Some(b),
            _ => Some(m),
        })
        .expect("lattice has nodes")
    };
    let lower_margin = pick(&mut per_node.iter().map(|p| p.0.clone()));
    let upper_margin = pick(&mut per_node.iter().map(|p| p.1.clone()));
    let passed = vplus_monotone && vminus_monotone && lower_margin.margin >= 0.0 && upper_margin.margin >= 0.0;
    Ok(MokobodskiReport {
        passed,
        decomposition_error,
        vplus_monotone,
        vminus_monotone,
        lower_margin,
        upper_margin,
        sample_points: samples.len(),
        note: "finite-sample falsification check: a pass does not prove the bound for all (y, ybar)",
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lip(cf: f64, g1: f64, g2: f64, b1: f64, b2: f64) -> Lipschitz {
        Lipschitz {
            cf,
            gamma1: g1,
            gamma2: g2,
            beta1: b1,
            beta2: b2,
        }
    }

    #[test]
    fn lambda_spot_values() {
        let zero = lip(1.0, 0.0, 0.0, 0.0, 0.0);
        for p in [1.5, 2.0, 4.0] {
            assert_eq!(lambda_contraction(&zero, p, 0.0).unwrap(), 0.0);
        }
        let l = lambda_contraction(&lip(0.0, 0.05, 0.05, 0.05, 0.05), 2.0, 0.0).unwrap();
        assert!((l - 0.1f64.sqrt()).abs() < 1e-15);
        // h = -1 + 0.1 y and g = 1 + 0.1 y: sqrt(0.2) * sqrt(4 * 0.2).
        let l = lambda_contraction(&lip(0.0, 0.1, 0.0, 0.1, 0.0), 2.0, 0.0).unwrap();
        assert!((l - 0.4).abs() < 1e-15);
        assert!(lambda_contraction(&zero, 1.0, 0.0).is_err());
        let counter = lip(0.0, 1.0, 1.0, 0.0, 0.0);
        for p in [1.1, 2.0, 10.0] {
            assert!(lambda_contraction(&counter, p, 0.0).unwrap() > 1.0);
        }
    }

    #[test]
    fn sigma_spot_values() {
        assert_eq!(sigma_contraction(&lip(0.0, 0.0, 0.0, 0.0, 0.0), 0.0), 0.0);
        let s = sigma_contraction(&lip(1.0, 0.2, 0.1, 0.1, 0.1), 0.1);
        assert!((s - 0.7).abs() < 1e-15);
        assert_eq!(sigma_contraction(&lip(0.0, 0.25, 0.25, 0.25, 0.25), 0.0), 1.0);
    }

    #[test]
    fn delta_unconstrained_and_none() {
        let zero = lip(0.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(find_delta(&zero, Regime::Lp(2.0), 0.99, 1.0).unwrap(), Some(1.0));
        assert_eq!(find_delta(&zero, Regime::Integrable, 0.99, 1.0).unwrap(), Some(1.0));
        let counter = lip(0.0, 1.0, 1.0, 0.0, 0.0);
        assert_eq!(find_delta(&counter, Regime::Lp(2.0), 0.99, 1.0).unwrap(), None);
        assert_eq!(find_delta(&counter, Regime::Integrable, 0.99, 1.0).unwrap(), None);
        assert!(find_delta(&zero, Regime::Integrable, 1.0, 1.0).is_err());
    }

    #[test]
    fn delta_closed_form_for_sigma() {
        let l = lip(2.0, 0.1, 0.1, 0.05, 0.05);
        let d = find_delta(&l, Regime::Integrable, 0.9, 1.0).unwrap().unwrap();
        let exact = (0.9 - 0.3) / (2.0 * 2.0);
        assert!((d - exact).abs() < 1e-10, "{d} vs {exact}");
    }

    #[test]
    fn bisection_certificate_on_random_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let l = lip(
                rng.gen_range(0.0..5.0),
                rng.gen_range(0.0..0.1),
                rng.gen_range(0.0..0.1),
                rng.gen_range(0.0..0.1),
                rng.gen_range(0.0..0.1),
            );
            let p = rng.gen_range(1.2..4.0);
            for regime in [Regime::Lp(p), Regime::Integrable] {
                if let Some(d) = find_delta(&l, regime, 0.99, 1.0).unwrap() {
                    let v = contraction_value(&l, regime, d).unwrap();
                    assert!(v <= 0.99);
                    if d < 1.0 {
                        assert!(contraction_value(&l, regime, d * (1.0 + 1e-6)).unwrap() > 0.99);
                    }
                }
            }
        }
    }

    #[test]
    fn lambda_continuous_at_zero() {
        let l = lip(1.0, 0.05, 0.05, 0.05, 0.05);
        let at0 = lambda_contraction(&l, 2.0, 0.0).unwrap();
        let mut last = f64::INFINITY;
        for e in 1..12 {
            let gap = (lambda_contraction(&l, 2.0, 10f64.powi(-e)).unwrap() - at0).abs();
            assert!(gap <= last);
            last = gap;
        }
        assert!(last < 1e-10);
    }

    #[test]
    fn report_fields() {
        let r = contraction_report(&lip(0.5, 0.05, 0.05, 0.05, 0.05), 2.0, 1.0, 0.99).unwrap();
        assert!(r.cd1_holds && r.cd_p1_holds);
        assert!(r.delta_p.unwrap() < 1.0);
        let r = contraction_report(&lip(0.0, 0.3, 0.3, 0.3, 0.3), 1.0, 1.0, 0.99).unwrap();
        assert!(r.lambda_at_zero.is_none() && !r.cd1_holds && !r.cd_p1_holds);
        assert!(r.delta_1.is_none());
    }

    fn spec(h: &str, g: &str) -> ProblemSpec {
        ProblemSpec::new("0", h, g, "0", Lipschitz::default(), 2.0).unwrap()
    }

    #[test]
    fn mokobodski_constant_barriers() {
        let lat = Lattice::new(1.0, 4).unwrap();
        let r = mokobodski_check(&spec("-1", "1"), &MokobodskiWitness::zero(), &lat, &SampleGrid::default()).unwrap();
        assert!(r.passed);
        assert_eq!(r.lower_margin.margin, 1.0);
        assert_eq!(r.upper_margin.margin, 1.0);
    }

    #[test]
    fn mokobodski_kinked_barriers() {
        let lat = Lattice::new(1.0, 4).unwrap();
        let s = spec("min(y, 0) - 1", "max(y, 0) + 1");
        let r = mokobodski_check(&s, &MokobodskiWitness::zero(), &lat, &SampleGrid::default()).unwrap();
        assert!(r.passed);
    }

    #[test]
    fn mokobodski_unbounded_barrier_fails() {
        let lat = Lattice::new(1.0, 4).unwrap();
        let s = spec("y + ybar + 1", "10");
        let w = MokobodskiWitness::new(0.5, "0.3", "t", "0").unwrap();
        let r = mokobodski_check(&s, &w, &lat, &SampleGrid::square(10.0, 41)).unwrap();
        assert!(!r.passed);
        assert!(r.lower_margin.margin < 0.0);
    }

    #[test]
    fn mokobodski_brownian_witness_recombines() {
        let lat = Lattice::new(1.0, 6).unwrap();
        let s = spec("b - 1", "b + 1");
        let w = MokobodskiWitness::new(0.0, "1", "0", "0").unwrap();
        let r = mokobodski_check(&s, &w, &lat, &SampleGrid::default()).unwrap();
        assert!(r.passed);
        assert!(r.decomposition_error < 1e-12);
        assert!((r.lower_margin.margin - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mokobodski_rejects_non_recombining_integrand() {
        let lat = Lattice::new(1.0, 3).unwrap();
        let w = MokobodskiWitness::new(0.0, "t", "0", "0").unwrap();
        assert!(mokobodski_check(&spec("-9", "9"), &w, &lat, &SampleGrid::default()).is_err());
    }

    #[test]
    fn mokobodski_decreasing_vplus_flagged() {
        let lat = Lattice::new(1.0, 3).unwrap();
        let w = MokobodskiWitness::new(0.0, "0", "-t", "0").unwrap();
        let r = mokobodski_check(&spec("-9", "9"), &w, &lat, &SampleGrid::default()).unwrap();
        assert!(!r.vplus_monotone && !r.passed);
    }
}
