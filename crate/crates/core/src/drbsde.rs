//! Frozen-coefficient doubly reflected BSDE on the lattice.
//!
//! With driver, barriers and terminal values fixed, the solution is the
//! backward induction `Y_k = clamp(E[Y_{k+1} | F_k] + phi_k dt, L_k, U_k)`.
//! Pushes are attributed to the node where the clamp acts, so the discrete
//! Skorokhod conditions hold by construction.

use rand::Rng;

use crate::error::{Error, Result};
use crate::lattice::{conditional_expectation_of, martingale_increment, AdaptedProcess, Lattice};
use crate::par;

/// Levels `[start, end]` a frozen problem lives on; `end` carries the
/// terminal values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn full(lat: &Lattice) -> Self {
        Self {
            start: 0,
            end: lat.steps(),
        }
    }

    pub fn contains(&self, k: usize) -> bool {
        self.start <= k && k <= self.end
    }
}

#[derive(Debug, Clone)]
pub struct FrozenData {
    pub driver: AdaptedProcess,
    pub lower: AdaptedProcess,
    pub upper: AdaptedProcess,
    /// Values at level `window.end`.
    pub terminal: Vec<f64>,
    pub window: Window,
}

impl FrozenData {
    /// Frozen data on the whole lattice.
    pub fn new(
        lat: &Lattice,
        driver: AdaptedProcess,
        lower: AdaptedProcess,
        upper: AdaptedProcess,
        terminal: Vec<f64>,
    ) -> Result<Self> {
        let fd = Self {
            driver,
            lower,
            upper,
            terminal,
            window: Window::full(lat),
        };
        fd.validate(lat)?;
        Ok(fd)
    }

    /// Checks `L < U` inside the window and, when the window ends at the
    /// horizon, `L_N <= terminal <= U_N`. Interior window ends take their
    /// terminal values from a solved later window and are not re-checked.
    pub fn validate(&self, lat: &Lattice) -> Result<()> {
        let w = self.window;
        if w.start > w.end || w.end > lat.steps() {
            return Err(Error::FrozenData(format!("bad window [{}, {}]", w.start, w.end)));
        }
        for p in [&self.driver, &self.lower, &self.upper] {
            if p.steps() != lat.steps() {
                return Err(Error::FrozenData("process does not match the lattice".into()));
            }
        }
        if self.terminal.len() != w.end + 1 {
            return Err(Error::FrozenData(format!(
                "expected {} terminal values, got {}",
                w.end + 1,
                self.terminal.len()
            )));
        }
        for k in w.start..=w.end {
            for j in 0..=k {
                let (l, u) = (self.lower.get(k, j), self.upper.get(k, j));
                if !(l < u) {
                    return Err(Error::FrozenData(format!(
                        "barriers not strictly ordered at ({k}, {j}): L = {l}, U = {u}"
                    )));
                }
                if !self.driver.get(k, j).is_finite() && k < w.end {
                    return Err(Error::FrozenData(format!("driver not finite at ({k}, {j})")));
                }
            }
        }
        if w.end == lat.steps() {
            for (j, &x) in self.terminal.iter().enumerate() {
                let (l, u) = (self.lower.get(w.end, j), self.upper.get(w.end, j));
                if !(l <= x && x <= u) {
                    return Err(Error::FrozenData(format!(
                        "terminal value {x} outside [{l}, {u}] at node {j}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `(Y, Z, dK+, dK-)` on a window.
///
/// `dk_plus`/`dk_minus` hold the push attributed to each node; the
/// cumulative `K` is path dependent on a recombining lattice, see
/// [`DRSolution::projected_cumulative`].
#[derive(Debug, Clone)]
pub struct DRSolution {
    pub y: AdaptedProcess,
    pub z: AdaptedProcess,
    pub dk_plus: AdaptedProcess,
    pub dk_minus: AdaptedProcess,
    pub window: Window,
    pub skorokhod_plus: f64,
    pub skorokhod_minus: f64,
    /// Largest push at a node strictly between the barriers.
    pub flat_off_barrier: f64,
}

impl DRSolution {
    pub fn root_value(&self) -> f64 {
        self.y.get(self.window.start, 0)
    }

    /// `E[K_k | node (k, j)]` with `K_k` the sum of the increments strictly
    /// before level `k` along the path, averaged over the paths reaching the
    /// node.
    pub fn projected_cumulative(lat: &Lattice, increments: &AdaptedProcess) -> AdaptedProcess {
        let mut out = AdaptedProcess::zeros(lat);
        for k in 0..lat.steps() {
            let kk = (k + 1) as f64;
            let next: Vec<f64> = (0..=k + 1)
                .map(|j| {
                    // Share of paths arriving from below (k, j-1) is j/(k+1).
                    let from_down = if j >= 1 {
                        (out.get(k, j - 1) + increments.get(k, j - 1)) * (j as f64 / kk)
                    } else {
                        0.0
                    };
                    let from_same = if j <= k {
                        (out.get(k, j) + increments.get(k, j)) * ((kk - j as f64) / kk)
                    } else {
                        0.0
                    };
                    from_down + from_same
                })
                .collect();
            out.set_level(k + 1, next);
        }
        out
    }

    pub fn k_plus(&self, lat: &Lattice) -> AdaptedProcess {
        Self::projected_cumulative(lat, &self.dk_plus)
    }

    pub fn k_minus(&self, lat: &Lattice) -> AdaptedProcess {
        Self::projected_cumulative(lat, &self.dk_minus)
    }
}

/// Backward induction with two-sided clamping.
pub fn solve_reflected(fd: &FrozenData, lat: &Lattice) -> Result<DRSolution> {
    fd.validate(lat)?;
    let w = fd.window;
    let dt = lat.dt();
    let mut y = AdaptedProcess::zeros(lat);
    let mut z = AdaptedProcess::zeros(lat);
    let mut dk_plus = AdaptedProcess::zeros(lat);
    let mut dk_minus = AdaptedProcess::zeros(lat);
    y.set_level(w.end, fd.terminal.clone());

    for k in (w.start..w.end).rev() {
        let next = y.level(k + 1);
        let cont = conditional_expectation_of(next);
        z.set_level(k, martingale_increment(next, lat.sqrt_dt()));
        let nodes = par::map_range(k + 1, |j| {
            let pre = cont[j] + fd.driver.get(k, j) * dt;
            let (l, u) = (fd.lower.get(k, j), fd.upper.get(k, j));
            if pre < l {
                (l, l - pre, 0.0)
            } else if pre > u {
                (u, 0.0, pre - u)
            } else {
                (pre, 0.0, 0.0)
            }
        });
        let (mut yl, mut up, mut down) = (Vec::with_capacity(k + 1), Vec::with_capacity(k + 1), Vec::with_capacity(k + 1));
        for (a, b, c) in nodes {
            yl.push(a);
            up.push(b);
            down.push(c);
        }
        y.set_level(k, yl);
        dk_plus.set_level(k, up);
        dk_minus.set_level(k, down);
    }

    let mut sol = DRSolution {
        y,
        z,
        dk_plus,
        dk_minus,
        window: w,
        skorokhod_plus: 0.0,
        skorokhod_minus: 0.0,
        flat_off_barrier: 0.0,
    };
    let (sp, sm) = skorokhod_residuals(&sol, &fd.lower, &fd.upper, lat);
    sol.skorokhod_plus = sp;
    sol.skorokhod_minus = sm;
    sol.flat_off_barrier = flat_off_barrier(&sol, &fd.lower, &fd.upper);
    Ok(sol)
}

/// Binomially weighted `sum (Y - L) dK+` and `sum (U - Y) dK-` over the
/// non-terminal levels of the solution window.
pub fn skorokhod_residuals(
    sol: &DRSolution,
    lower: &AdaptedProcess,
    upper: &AdaptedProcess,
    lat: &Lattice,
) -> (f64, f64) {
    let w = sol.window;
    let mut plus = 0.0;
    let mut minus = 0.0;
    for k in w.start..w.end {
        let weights = lat.weights(k);
        for j in 0..=k {
            let y = sol.y.get(k, j);
            let dkp = sol.dk_plus.get(k, j);
            let dkm = sol.dk_minus.get(k, j);
            // Skip zero pushes so infinite sentinels never meet 0 * inf.
            if dkp != 0.0 {
                plus += weights[j] * (y - lower.get(k, j)) * dkp;
            }
            if dkm != 0.0 {
                minus += weights[j] * (upper.get(k, j) - y) * dkm;
            }
        }
    }
    (plus, minus)
}

/// Largest `|dK|` at nodes where `L < Y < U` strictly.
pub fn flat_off_barrier(sol: &DRSolution, lower: &AdaptedProcess, upper: &AdaptedProcess) -> f64 {
    let w = sol.window;
    let mut worst = 0.0f64;
    for k in w.start..w.end {
        for j in 0..=k {
            let y = sol.y.get(k, j);
            if lower.get(k, j) < y && y < upper.get(k, j) {
                worst = worst
                    .max(sol.dk_plus.get(k, j).abs())
                    .max(sol.dk_minus.get(k, j).abs());
            }
        }
    }
    worst
}

/// Largest violation of `Y_k = E[Y_{k+1}|F_k] + phi_k dt + dK+_k - dK-_k`.
pub fn budget_residual(sol: &DRSolution, driver: &AdaptedProcess, lat: &Lattice) -> f64 {
    let w = sol.window;
    let mut worst = 0.0f64;
    for k in w.start..w.end {
        let cont = conditional_expectation_of(sol.y.level(k + 1));
        for j in 0..=k {
            let rhs = cont[j] + driver.get(k, j) * lat.dt() + sol.dk_plus.get(k, j) - sol.dk_minus.get(k, j);
            worst = worst.max((sol.y.get(k, j) - rhs).abs());
        }
    }
    worst
}

/// Summary of the structural invariants of a reflected solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InvariantReport {
    /// Largest `(L - Y)^+` or `(Y - U)^+`.
    pub barrier_violation: f64,
    /// Most negative push (0 when all pushes are non-negative).
    pub negative_push: f64,
    /// Largest `min(dK+, dK-)`.
    pub simultaneous_push: f64,
}

pub fn check_invariants(sol: &DRSolution, lower: &AdaptedProcess, upper: &AdaptedProcess) -> InvariantReport {
    let w = sol.window;
    let mut r = InvariantReport {
        barrier_violation: 0.0,
        negative_push: 0.0,
        simultaneous_push: 0.0,
    };
    for k in w.start..=w.end {
        for j in 0..=k {
            let y = sol.y.get(k, j);
            r.barrier_violation = r
                .barrier_violation
                .max((lower.get(k, j) - y).max(0.0))
                .max((y - upper.get(k, j)).max(0.0));
            let (p, m) = (sol.dk_plus.get(k, j), sol.dk_minus.get(k, j));
            r.negative_push = r.negative_push.min(p).min(m);
            r.simultaneous_push = r.simultaneous_push.max(p.min(m));
        }
    }
    r
}

/// A random but admissible frozen problem, for oracle comparisons.
pub fn random_frozen_data<R: Rng>(lat: &Lattice, rng: &mut R) -> FrozenData {
    let n = lat.steps();
    let driver = AdaptedProcess::from_fn(lat, |_, _| rng.gen_range(-2.0..2.0));
    let lower = AdaptedProcess::from_fn(lat, |_, _| rng.gen_range(-1.0..0.5));
    let upper = lower.map(|l| l);
    let upper = AdaptedProcess::from_fn(lat, |k, j| upper.get(k, j) + rng.gen_range(0.05..1.5));
    let terminal = (0..=n)
        .map(|j| {
            let (l, u) = (lower.get(n, j), upper.get(n, j));
            l + (u - l) * rng.gen_range(0.0..=1.0)
        })
        .collect();
    FrozenData {
        driver,
        lower,
        upper,
        terminal,
        window: Window::full(lat),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_fd(lat: &Lattice, phi: f64, l: f64, u: f64, xi: f64) -> FrozenData {
        FrozenData::new(
            lat,
            AdaptedProcess::constant(lat, phi),
            AdaptedProcess::constant(lat, l),
            AdaptedProcess::constant(lat, u),
            vec![xi; lat.steps() + 1],
        )
        .unwrap()
    }

    #[test]
    fn unconstrained_zero() {
        let lat = Lattice::new(1.0, 5).unwrap();
        let s = solve_reflected(&constant_fd(&lat, 0.0, -1.0, 1.0, 0.0), &lat).unwrap();
        for (_, _, v) in s.y.iter_nodes().chain(s.z.iter_nodes()) {
            assert_eq!(v, 0.0);
        }
        assert!(s.dk_plus.iter_nodes().all(|n| n.2 == 0.0));
        assert!(s.dk_minus.iter_nodes().all(|n| n.2 == 0.0));
    }

    #[test]
    fn lower_barrier_push() {
        let lat = Lattice::new(1.0, 2).unwrap();
        // L = 0.5 at the horizon would exclude the terminal value 0.
        let bad = FrozenData::new(
            &lat,
            AdaptedProcess::zeros(&lat),
            AdaptedProcess::constant(&lat, 0.5),
            AdaptedProcess::constant(&lat, 2.0),
            vec![0.0; 3],
        );
        assert!(matches!(bad, Err(Error::FrozenData(_))));
        let mut fd = constant_fd(&lat, 0.0, -1.0, 2.0, 0.0);
        for k in 0..2 {
            fd.lower.level_mut(k).iter_mut().for_each(|v| *v = 0.5);
        }
        let s = solve_reflected(&fd, &lat).unwrap();
        assert_eq!(s.y.level(1), &[0.5, 0.5]);
        assert_eq!(s.y.level(0), &[0.5]);
        assert_eq!(s.dk_plus.level(1), &[0.5, 0.5]);
        assert_eq!(s.dk_plus.level(0), &[0.0]);
        assert!(s.dk_minus.iter_nodes().all(|n| n.2 == 0.0));
        assert_eq!((s.skorokhod_plus, s.skorokhod_minus), (0.0, 0.0));
    }

    #[test]
    fn upper_barrier_push() {
        let lat = Lattice::new(1.0, 1).unwrap();
        let mut fd = constant_fd(&lat, 1.0, -1.0, 1.5, 1.0);
        fd.upper.set(0, 0, 0.5);
        let s = solve_reflected(&fd, &lat).unwrap();
        assert_eq!(s.root_value(), 0.5);
        assert_eq!(s.dk_minus.get(0, 0), 1.5);
        assert_eq!(s.dk_plus.get(0, 0), 0.0);
    }

    #[test]
    fn rejects_crossed_barriers() {
        let lat = Lattice::new(1.0, 2).unwrap();
        let r = FrozenData::new(
            &lat,
            AdaptedProcess::zeros(&lat),
            AdaptedProcess::constant(&lat, 1.0),
            AdaptedProcess::constant(&lat, 1.0),
            vec![1.0; 3],
        );
        assert!(matches!(r, Err(Error::FrozenData(_))));
    }

    #[test]
    fn sentinels_reduce_to_plain_induction() {
        let lat = Lattice::new(1.0, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let driver = AdaptedProcess::from_fn(&lat, |_, _| rng.gen_range(-1.0..1.0));
        let xi: Vec<f64> = (0..=6).map(|j| lat.brownian(6, j).sin()).collect();
        let fd = FrozenData::new(
            &lat,
            driver.clone(),
            AdaptedProcess::constant(&lat, f64::NEG_INFINITY),
            AdaptedProcess::constant(&lat, f64::INFINITY),
            xi.clone(),
        )
        .unwrap();
        let s = solve_reflected(&fd, &lat).unwrap();
        let mut plain = xi;
        for k in (0..6).rev() {
            let c = conditional_expectation_of(&plain);
            plain = c.iter().enumerate().map(|(j, v)| v + driver.get(k, j) * lat.dt()).collect();
            assert_eq!(s.y.level(k), plain.as_slice());
        }
        assert!(s.dk_plus.iter_nodes().chain(s.dk_minus.iter_nodes()).all(|n| n.2 == 0.0));
        assert_eq!((s.skorokhod_plus, s.skorokhod_minus), (0.0, 0.0));
    }

    #[test]
    fn corrupted_solution_has_positive_residual() {
        let lat = Lattice::new(1.0, 2).unwrap();
        let fd = constant_fd(&lat, 0.0, -1.0, 1.0, 0.0);
        let mut s = solve_reflected(&fd, &lat).unwrap();
        s.y.set(1, 1, -0.7);
        s.dk_plus.set(1, 1, 1.0);
        let (p, m) = skorokhod_residuals(&s, &fd.lower, &fd.upper, &lat);
        assert!((p - 0.3 * lat.weights(1)[1]).abs() < 1e-15);
        assert_eq!(m, 0.0);
        assert!(flat_off_barrier(&s, &fd.lower, &fd.upper) >= 1.0);
    }

    #[test]
    fn zero_pushes_have_zero_residual() {
        let lat = Lattice::new(1.0, 3).unwrap();
        let fd = constant_fd(&lat, 0.0, -1.0, 1.0, 0.0);
        let mut s = solve_reflected(&fd, &lat).unwrap();
        s.y = AdaptedProcess::constant(&lat, 0.3);
        assert_eq!(skorokhod_residuals(&s, &fd.lower, &fd.upper, &lat), (0.0, 0.0));
    }

    #[test]
    fn random_instances_satisfy_invariants() {
        let lat = Lattice::new(1.0, 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let fd = random_frozen_data(&lat, &mut rng);
            let s = solve_reflected(&fd, &lat).unwrap();
            let inv = check_invariants(&s, &fd.lower, &fd.upper);
            assert_eq!(inv.barrier_violation, 0.0);
            assert_eq!(inv.negative_push, 0.0);
            assert_eq!(inv.simultaneous_push, 0.0);
            assert_eq!((s.skorokhod_plus, s.skorokhod_minus), (0.0, 0.0));
            assert_eq!(s.flat_off_barrier, 0.0);
            assert!(budget_residual(&s, &fd.driver, &lat) < 1e-14);
        }
    }

    #[test]
    fn comparison_in_barriers_and_driver() {
        let lat = Lattice::new(1.0, 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let fd = random_frozen_data(&lat, &mut rng);
            let base = solve_reflected(&fd, &lat).unwrap().y;
            let bump = rng.gen_range(0.0..0.04);
            for which in 0..3 {
                let mut g = fd.clone();
                let target = match which {
                    0 => &mut g.lower,
                    1 => &mut g.upper,
                    _ => &mut g.driver,
                };
                for k in 0..8 {
                    target.level_mut(k).iter_mut().for_each(|v| *v += bump);
                }
                let raised = solve_reflected(&g, &lat).unwrap().y;
                for (k, j, v) in raised.iter_nodes() {
                    assert!(v >= base.get(k, j) - 1e-15, "case {which} at ({k},{j})");
                }
            }
        }
    }

    #[test]
    fn projected_cumulative_of_constant_increments() {
        let lat = Lattice::new(1.0, 4).unwrap();
        let inc = AdaptedProcess::constant(&lat, 0.25);
        let k = DRSolution::projected_cumulative(&lat, &inc);
        for (kk, _, v) in k.iter_nodes() {
            assert!((v - 0.25 * kk as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn windowed_solve_only_touches_window() {
        let lat = Lattice::new(1.0, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut fd = random_frozen_data(&lat, &mut rng);
        let full = solve_reflected(&fd, &lat).unwrap();
        fd.window = Window { start: 2, end: 4 };
        fd.terminal = full.y.level(4).to_vec();
        let part = solve_reflected(&fd, &lat).unwrap();
        for k in 2..=4 {
            assert_eq!(part.y.level(k), full.y.level(k));
        }
        assert!(part.y.level(1).iter().all(|&v| v == 0.0));
        assert_eq!(part.root_value(), full.y.get(2, 0));
    }
}
