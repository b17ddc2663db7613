//! Small numeric routines shared by the verification code: central finite
//! differences and a bracketed golden-section minimizer.

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn central_difference<F>(x: &[f64], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| central_difference_at(&mut probe, k, step, &mut f))
        .collect()
}

/// Central difference along coordinate `k` only. `probe` is restored on return.
pub fn central_difference_at<F>(probe: &mut [f64], k: usize, step: f64, f: &mut F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let orig = probe[k];
    probe[k] = orig + step;
    let hi = f(probe);
    probe[k] = orig - step;
    let lo = f(probe);
    probe[k] = orig;
    (hi - lo) / (2.0 * step)
}

/// `|a - b| <= rtol * max(|a|, |b|) + atol`.
pub fn approx_eq(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()) + atol
}

/// Expands `[a, b]` downhill until it brackets a minimum of `f`.
/// Returns `(lo, mid, hi)` with `f(mid) <= f(lo), f(hi)`.
pub fn bracket_minimum<F: FnMut(f64) -> f64>(mut a: f64, mut b: f64, f: &mut F) -> Option<(f64, f64, f64)> {
    const GROW: f64 = 1.618_033_988_749_895;
    let mut fa = f(a);
    let mut fb = f(b);
    if fb > fa {
        std::mem::swap(&mut a, &mut b);
        std::mem::swap(&mut fa, &mut fb);
    }
    let mut c = b + GROW * (b - a);
    let mut fc = f(c);
    for _ in 0..200 {
        if fc >= fb {
            return Some(if a < c { (a, b, c) } else { (c, b, a) });
        }
        a = b;
        b = c;
        fb = fc;
        c = b + GROW * (b - a);
        fc = f(c);
    }
    None
}

/// Golden-section search on a bracket; stops when the interval is below `tol`.
pub fn golden_section<F: FnMut(f64) -> f64>(lo: f64, hi: f64, tol: f64, f: &mut F) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Bracket from `[x0, x0 + step]` then refine; `None` if no bracket is found.
pub fn minimize_scalar<F: FnMut(f64) -> f64>(x0: f64, step: f64, tol: f64, mut f: F) -> Option<f64> {
    let (lo, _, hi) = bracket_minimum(x0, x0 + step, &mut f)?;
    Some(golden_section(lo, hi, tol, &mut f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_of_quadratic() {
        let g = central_difference(&[1.0, -2.0], 1e-5, |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn minimizes_shifted_parabola_from_either_side() {
        for x0 in [-40.0, 0.0, 7.0, 55.0] {
            let x = minimize_scalar(x0, 0.5, 1e-10, |x| (x - 3.25) * (x - 3.25) + 1.0).unwrap();
            assert!((x - 3.25).abs() < 1e-7, "{x0} -> {x}");
        }
    }

    #[test]
    fn unbounded_function_has_no_bracket() {
        assert!(minimize_scalar(0.0, 1.0, 1e-8, |x| -x).is_none());
    }
}
