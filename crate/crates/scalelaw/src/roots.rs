//! Scalar root finding for monotone maps on `(0, ∞)`.

/// Root of an increasing `f` on `[lo, hi]` (both positive): geometric
/// bisection to relative width `1e-6`, then safeguarded Newton to `tol`.
/// Returns `None` when the bracket does not straddle a sign change.
pub fn increasing_root<F, D>(f: F, df: D, lo: f64, hi: f64, tol: f64) -> Option<f64>
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    let (mut a, mut b) = (lo, hi);
    let (fa, fb) = (f(a), f(b));
    if fa > 0.0 || fb < 0.0 {
        return None;
    }
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    while b / a > 1.0 + 1e-6 {
        let mid = (a * b).sqrt();
        if f(mid) < 0.0 {
            a = mid;
        } else {
            b = mid;
        }
    }
    let mut x = (a * b).sqrt();
    for _ in 0..100 {
        let fx = f(x);
        let d = df(x);
        let mut next = if d > 0.0 { x - fx / d } else { f64::NAN };
        if !(next > a && next < b) {
            next = 0.5 * (a + b);
        }
        if fx < 0.0 {
            a = x;
        } else {
            b = x;
        }
        let step = (next - x).abs();
        x = next;
        if step <= tol * x.abs() || fx == 0.0 {
            break;
        }
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_sqrt_two() {
        let r = increasing_root(|x| x * x - 2.0, |x| 2.0 * x, 1e-12, 1e12, 1e-14).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-13);
    }

    #[test]
    fn rejects_bad_bracket() {
        assert!(increasing_root(|x| x + 1.0, |_| 1.0, 1.0, 2.0, 1e-12).is_none());
    }
}
