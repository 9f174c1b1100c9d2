//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the scalar function; it never
//! touches the tape's backward pass.

/// Central differences of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise relative error `|a - n| / max(|a| + |n|, floor)`.
///
/// `floor` keeps gradients that are zero on both sides from dividing by zero.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / (a.abs() + n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_matches_closed_form() {
        let x = [0.5, -1.5, 2.0];
        let g = numeric_gradient(&x, 1e-5, |v| v.iter().map(|a| a * a * a).sum());
        let exact: Vec<f64> = x.iter().map(|a| 3.0 * a * a).collect();
        assert!(max_relative_error(&exact, &g, 1e-8) < 1e-8);
    }

    #[test]
    fn relative_error_floor_handles_zeros() {
        assert_eq!(max_relative_error(&[0.0], &[0.0], 1e-8), 0.0);
        assert!((max_relative_error(&[1.0], &[3.0], 1e-8) - 0.5).abs() < 1e-15);
    }
}
