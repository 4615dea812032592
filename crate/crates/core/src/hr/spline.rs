//! Interpolation helpers: piecewise-linear on sorted knots and the natural
//! cubic spline.

use crate::error::{Error, Result};

/// Evaluate the piecewise-linear interpolant through `(xs, ys)` at `t`.
/// `t` is clamped to the knot range.
pub fn linear_at(xs: &[f64], ys: &[f64], t: f64) -> f64 {
    let n = xs.len();
    if t <= xs[0] {
        return ys[0];
    }
    if t >= xs[n - 1] {
        return ys[n - 1];
    }
    let j = xs.partition_point(|&x| x <= t);
    let (x0, x1) = (xs[j - 1], xs[j]);
    let w = (t - x0) / (x1 - x0);
    ys[j - 1] + w * (ys[j] - ys[j - 1])
}

/// Natural cubic spline through strictly increasing knots.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots (zero at both ends).
    m: Vec<f64>,
}

impl CubicSpline {
    pub fn natural(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        let n = xs.len();
        if n != ys.len() {
            return Err(Error::Shape(format!("{} knots but {} values", n, ys.len())));
        }
        if n < 2 {
            return Err(Error::Data("spline needs at least two knots".into()));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Data("spline knots must be strictly increasing".into()));
        }
        let mut m = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior equations
            // h[i-1] m[i-1] + 2(h[i-1]+h[i]) m[i] + h[i] m[i+1] = 6 (d[i] - d[i-1]).
            let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
            let d: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
            let k = n - 2;
            let mut c = vec![0.0; k];
            let mut r = vec![0.0; k];
            for i in 0..k {
                let diag = 2.0 * (h[i] + h[i + 1]);
                let rhs = 6.0 * (d[i + 1] - d[i]);
                if i == 0 {
                    c[i] = h[i + 1] / diag;
                    r[i] = rhs / diag;
                } else {
                    let denom = diag - h[i] * c[i - 1];
                    c[i] = h[i + 1] / denom;
                    r[i] = (rhs - h[i] * r[i - 1]) / denom;
                }
            }
            for i in (0..k).rev() {
                m[i + 1] = if i + 1 == k { r[i] } else { r[i] - c[i] * m[i + 2] };
            }
        }
        Ok(Self { xs, ys, m })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.xs.len();
        let j = self.xs.partition_point(|&x| x <= t).clamp(1, n - 1);
        let (x0, x1) = (self.xs[j - 1], self.xs[j]);
        let h = x1 - x0;
        let a = (x1 - t) / h;
        let b = (t - x0) / h;
        a * self.ys[j - 1]
            + b * self.ys[j]
            + ((a * a * a - a) * self.m[j - 1] + (b * b * b - b) * self.m[j]) * h * h / 6.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_hits_knots_and_midpoints() {
        let xs = [0.0, 1.0, 3.0];
        let ys = [1.0, 3.0, -1.0];
        assert_eq!(linear_at(&xs, &ys, 1.0), 3.0);
        assert_eq!(linear_at(&xs, &ys, 0.5), 2.0);
        assert_eq!(linear_at(&xs, &ys, 2.0), 1.0);
        assert_eq!(linear_at(&xs, &ys, -5.0), 1.0);
    }

    #[test]
    fn spline_interpolates_knots() {
        let xs: Vec<f64> = (0..10).map(|i| i as f64 * 0.7).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
        let s = CubicSpline::natural(xs.clone(), ys.clone()).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert!((s.eval(*x) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_exact_on_affine() {
        let xs = vec![0.0, 0.3, 1.1, 2.0, 2.2];
        let ys: Vec<f64> = xs.iter().map(|x| 0.5 - 0.2 * x).collect();
        let s = CubicSpline::natural(xs, ys).unwrap();
        for k in 0..50 {
            let t = k as f64 * 0.044;
            assert!((s.eval(t) - (0.5 - 0.2 * t)).abs() < 1e-12);
        }
    }

    #[test]
    fn spline_has_zero_end_curvature_and_matches_hand_solution() {
        // Knots (0,0), (1,1), (2,0): m1 solves 4 m1 = 6 (-1 - 1) => m1 = -3.
        let s = CubicSpline::natural(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(s.m, vec![0.0, -3.0, 0.0]);
        // At 0.5: 0.5 + (0.125 - 0.5) * (-3) / 6 = 0.6875.
        assert!((s.eval(0.5) - 0.6875).abs() < 1e-15);
    }

    #[test]
    fn spline_rejects_bad_knots() {
        assert!(CubicSpline::natural(vec![0.0], vec![1.0]).is_err());
        assert!(CubicSpline::natural(vec![0.0, 0.0], vec![1.0, 2.0]).is_err());
        assert!(CubicSpline::natural(vec![0.0, 1.0], vec![1.0]).is_err());
    }
}
