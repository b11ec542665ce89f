//! Central finite differences for validating analytic gradients.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
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

/// Directional central difference `(f(x + h d) - f(x - h d)) / 2h`.
pub fn directional_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], dir: &[f64], h: f64) -> f64 {
    let shifted = |s: f64| -> Vec<f64> { x.iter().zip(dir).map(|(a, d)| a + s * d).collect() };
    (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h)
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `||a - b|| / max(||a||, ||b||)`, or the absolute difference norm when
/// both are below `1e-12`.
pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub rel_err: f64,
    pub max_abs_err: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.rel_err <= tol
    }
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn check(f: impl FnMut(&[f64]) -> f64, analytic: &[f64], x: &[f64], h: f64) -> GradCheck {
    let fd = central_diff(f, x, h);
    let max_abs_err = fd
        .iter()
        .zip(analytic)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    GradCheck {
        rel_err: rel_error(analytic, &fd),
        max_abs_err,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_exact() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[0] * x[1];
        let x = [1.5, -2.0];
        let g = [2.0 * 1.5 + 3.0 * -2.0, 3.0 * 1.5];
        let c = check(f, &g, &x, 1e-3);
        assert!(c.rel_err < 1e-9, "{c:?}");
        assert!(!check(f, &[-g[0], g[1]], &x, 1e-3).passes(1e-3));
    }

    #[test]
    fn directional_matches_dot_product() {
        let f = |x: &[f64]| x.iter().map(|v| v.sin()).sum::<f64>();
        let x = [0.1f64, 0.2, 0.3];
        let d = [1.0, -1.0, 0.5];
        let expect: f64 = x.iter().zip(&d).map(|(a, b)| a.cos() * b).sum();
        assert!((directional_diff(f, &x, &d, 1e-4) - expect).abs() < 1e-8);
    }
}
