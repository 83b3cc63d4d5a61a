//! Root finding for strictly increasing scalar maps.

use crate::error::{Error, Result};

const MAX_ITER: usize = 200;

/// Root of a strictly increasing `f`, starting from `guess`.
///
/// Safeguarded Newton: finite-difference slopes, bisection whenever the
/// Newton step leaves the current bracket. Converges to the last few ulps.
pub(crate) fn solve_increasing<F>(mut f: F, guess: f64) -> Result<f64, String>
where
    F: FnMut(f64) -> Result<f64>,
{
    let eval = |f: &mut F, y: f64| -> Result<f64, String> {
        let v = f(y).map_err(|e| e.to_string())?;
        if v.is_nan() {
            Err(format!("residual is NaN at y = {y}"))
        } else {
            Ok(v)
        }
    };

    let f0 = eval(&mut f, guess)?;
    if f0 == 0.0 {
        return Ok(guess);
    }

    // Bracket by doubling away from the guess.
    let (mut lo, mut hi, mut f_lo, mut f_hi);
    let mut step = f0.abs().max(1e-12 * (1.0 + guess.abs()));
    if f0 < 0.0 {
        lo = guess;
        f_lo = f0;
        loop {
            hi = guess + step;
            f_hi = eval(&mut f, hi)?;
            if f_hi >= 0.0 {
                break;
            }
            lo = hi;
            f_lo = f_hi;
            step *= 2.0;
            if !hi.is_finite() {
                return Err("no sign change found above the guess".into());
            }
        }
    } else {
        hi = guess;
        f_hi = f0;
        loop {
            lo = guess - step;
            f_lo = eval(&mut f, lo)?;
            if f_lo <= 0.0 {
                break;
            }
            hi = lo;
            f_hi = f_lo;
            step *= 2.0;
            if !lo.is_finite() {
                return Err("no sign change found below the guess".into());
            }
        }
    }
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }

    // Secant through the bracket is a good first Newton point.
    let mut y = lo - f_lo * (hi - lo) / (f_hi - f_lo);
    if !(y > lo && y < hi) {
        y = 0.5 * (lo + hi);
    }
    let mut width = hi - lo;
    for _ in 0..MAX_ITER {
        let fy = eval(&mut f, y)?;
        if fy == 0.0 {
            return Ok(y);
        }
        if fy < 0.0 {
            lo = y;
        } else {
            hi = y;
        }
        if hi - lo <= 2.0 * f64::EPSILON * lo.abs().max(hi.abs()).max(f64::MIN_POSITIVE) {
            return Ok(if fy < 0.0 { hi } else { lo });
        }
        let h = 1e-7 * (1.0 + y.abs());
        let slope = (eval(&mut f, y + h)? - eval(&mut f, y - h)?) / (2.0 * h);
        let newton = y - fy / slope;
        // Newton must halve the bracket every step or yield to bisection.
        let stalled = hi - lo > 0.5 * width;
        width = hi - lo;
        let next = if !stalled && slope > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - y).abs() <= 1e-16 * (1.0 + y.abs()) {
            return Ok(next);
        }
        y = next;
    }
    let fy = eval(&mut f, y)?;
    if fy.abs() <= 1e-13 * (1.0 + y.abs()) {
        Ok(y)
    } else {
        Err(format!("no convergence, residual {fy:e} at y = {y}"))
    }
}

pub(crate) fn scalar_error(level: usize, node: usize, reason: String) -> Error {
    Error::ScalarSolve {
        level,
        node,
        reason,
    }
}
