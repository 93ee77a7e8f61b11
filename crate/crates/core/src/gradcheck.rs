//! Central finite differences for gradient checking.

/// Denominator floor for relative errors. Round-off in a central difference
/// is roughly `eps * |f| / h` (about 1e-11 at h = 1e-5), so components below
/// this magnitude are effectively compared with an absolute tolerance of
/// `tol * RELATIVE_FLOOR`.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Central difference `(f(θ + h e_i) - f(θ - h e_i)) / 2h` for every coordinate.
pub fn central_difference<F>(theta: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, RELATIVE_FLOOR)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

pub fn max_abs_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let fd = central_difference(&[1.0, -2.0], 1e-5, |t| t[0] * t[0] + 3.0 * t[1]);
        assert!((fd[0] - 2.0).abs() < 1e-9);
        assert!((fd[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn relative_error_uses_floor_near_zero() {
        assert_eq!(max_relative_error(&[0.0], &[0.0]), 0.0);
        assert!((max_relative_error(&[1.0], &[1.1]) - 0.1 / 1.1).abs() < 1e-15);
    }
}
