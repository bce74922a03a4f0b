//! Scalar search routines used to fit the calibration factor.

use crate::error::{Error, Result};

const GOLDEN: f64 = 1.618_033_988_749_895;
const CGOLD: f64 = 0.381_966_011_250_105_1;

/// Three abscissae `a < b < c` with `f(b) ≥ max(f(a), f(c))`, or a report
/// that the function kept increasing until it hit a bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub fb: f64,
    /// Set when the search reached `lo` or `hi` while still climbing.
    pub at_bound: bool,
    pub evaluations: usize,
}

fn finite(x: f64, fx: f64) -> Result<f64> {
    if fx.is_finite() {
        Ok(fx)
    } else {
        Err(Error::Numeric(format!("objective is {fx} at {x}")))
    }
}

/// Walks uphill from `x0` with geometrically growing steps until the maximum
/// of `f` is enclosed, staying inside `[lo, hi]`.
pub fn bracket_maximum<F>(mut f: F, x0: f64, step: f64, lo: f64, hi: f64) -> Result<Bracket>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut evaluations = 0;
    let mut eval = |x: f64| -> Result<f64> {
        evaluations += 1;
        let fx = f(x)?;
        finite(x, fx)
    };
    let mut b = x0.clamp(lo, hi);
    let mut fb = eval(b)?;
    let mut step = step;
    let mut right = (b + step).min(hi);
    let mut fr = eval(right)?;
    let mut left = (b - step).max(lo);
    let mut fl = eval(left)?;
    loop {
        if fb >= fl && fb >= fr {
            return Ok(Bracket {
                a: left,
                b,
                c: right,
                fb,
                at_bound: false,
                evaluations,
            });
        }
        step *= GOLDEN;
        if fr > fb {
            if right >= hi {
                return Ok(Bracket {
                    a: b,
                    b: right,
                    c: right,
                    fb: fr,
                    at_bound: true,
                    evaluations,
                });
            }
            (left, fl) = (b, fb);
            (b, fb) = (right, fr);
            right = (b + step).min(hi);
            fr = eval(right)?;
        } else {
            if left <= lo {
                return Ok(Bracket {
                    a: left,
                    b: left,
                    c: b,
                    fb: fl,
                    at_bound: true,
                    evaluations,
                });
            }
            (right, fr) = (b, fb);
            (b, fb) = (left, fl);
            left = (b - step).max(lo);
            fl = eval(left)?;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Maximum {
    pub x: f64,
    pub fx: f64,
    /// Final enclosing interval.
    pub low: f64,
    pub high: f64,
    pub iterations: usize,
}

/// Brent's golden-section / parabolic search for the maximum of `f` on
/// `[a, c]` starting from the interior point `b`. Stops once the enclosing
/// interval is no wider than `4·tol`.
pub fn brent_maximize<F>(mut f: F, a: f64, b: f64, c: f64, tol: f64, max_iter: usize) -> Result<Maximum>
where
    F: FnMut(f64) -> Result<f64>,
{
    // Minimizes g = -f, following the classic formulation.
    let mut g = |x: f64| -> Result<f64> { Ok(-finite(x, f(x)?)?) };
    let (mut lo, mut hi) = if a < c { (a, c) } else { (c, a) };
    let (mut x, mut w, mut v) = (b, b, b);
    let mut fx = g(x)?;
    let (mut fw, mut fv) = (fx, fx);
    let mut d: f64 = 0.0;
    let mut e: f64 = 0.0;
    let mut iterations = 0;
    while iterations < max_iter {
        let xm = 0.5 * (lo + hi);
        let tol1 = tol;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (hi - lo) {
            break;
        }
        iterations += 1;
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let etemp = e;
            if p.abs() < (0.5 * q * etemp).abs() && p > q * (lo - x) && p < q * (hi - x) {
                e = d;
                d = p / q;
                let u = x + d;
                if u - lo < tol2 || hi - u < tol2 {
                    d = tol1.copysign(xm - x);
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { lo - x } else { hi - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = g(u)?;
        if fu <= fx {
            if u >= x {
                lo = x;
            } else {
                hi = x;
            }
            (v, fv) = (w, fw);
            (w, fw) = (x, fx);
            (x, fx) = (u, fu);
        } else {
            if u < x {
                lo = u;
            } else {
                hi = u;
            }
            if fu <= fw || w == x {
                (v, fv) = (w, fw);
                (w, fw) = (u, fu);
            } else if fu <= fv || v == x || v == w {
                (v, fv) = (u, fu);
            }
        }
    }
    Ok(Maximum {
        x,
        fx: -fx,
        low: lo,
        high: hi,
        iterations,
    })
}

/// Root of `g` on `[a, b]` given `g(a)` and `g(b)` of opposite sign, by
/// Illinois-modified regula falsi with a bisection fallback. Runs until the
/// interval is no wider than `xtol` (or collapses to adjacent floats) or `g`
/// hits zero exactly.
#[allow(clippy::too_many_arguments)]
pub fn find_root<F>(
    mut g: F,
    mut a: f64,
    mut b: f64,
    mut ga: f64,
    mut gb: f64,
    xtol: f64,
    max_iter: usize,
) -> Result<(f64, usize)>
where
    F: FnMut(f64) -> Result<f64>,
{
    if ga == 0.0 {
        return Ok((a, 0));
    }
    if gb == 0.0 {
        return Ok((b, 0));
    }
    if ga.signum() == gb.signum() {
        return Err(Error::Numeric(format!(
            "root not bracketed: g({a}) = {ga}, g({b}) = {gb}"
        )));
    }
    let mut side = 0i8;
    let mut iterations = 0;
    while iterations < max_iter {
        let width = (b - a).abs();
        if width <= xtol {
            break;
        }
        iterations += 1;
        let mut m = (a * gb - b * ga) / (gb - ga);
        // Stalled secant steps fall back to bisection.
        if !(m > a.min(b) && m < a.max(b)) || iterations % 8 == 0 {
            m = 0.5 * (a + b);
        }
        if m == a || m == b {
            break;
        }
        let gm = finite(m, g(m)?)?;
        if gm == 0.0 {
            return Ok((m, iterations));
        }
        if gm.signum() == gb.signum() {
            (b, gb) = (m, gm);
            if side == -1 {
                ga *= 0.5;
            }
            side = -1;
        } else {
            (a, ga) = (m, gm);
            if side == 1 {
                gb *= 0.5;
            }
            side = 1;
        }
        if (b - a).abs() >= width {
            // No progress; bisect once more to guarantee shrinkage.
            let mid = 0.5 * (a + b);
            if mid == a || mid == b {
                break;
            }
            let gmid = finite(mid, g(mid)?)?;
            if gmid.signum() == gb.signum() {
                (b, gb) = (mid, gmid);
            } else {
                (a, ga) = (mid, gmid);
            }
        }
    }
    let root = if ga.abs() <= gb.abs() { a } else { b };
    Ok((root, iterations))
}
