//! Piecewise-cubic interpolation used for EMD envelopes.
//!
//! Not-a-knot end conditions: the third derivative is continuous across the
//! second and penultimate knots, so cubic data is reproduced exactly. Two
//! knots give the straight line, three give the interpolating parabola.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    slopes: Vec<f64>,
}

impl CubicSpline {
    /// `xs` must be strictly increasing and match `ys` in length (≥ 2).
    pub fn not_a_knot(xs: &[f64], ys: &[f64]) -> Result<Self> {
        let n = xs.len();
        if n != ys.len() {
            return Err(Error::Input(format!("{n} knot positions vs {} values", ys.len())));
        }
        if n < 2 {
            return Err(Error::Input(format!("spline needs at least 2 knots, got {n}")));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Input("spline knots must be strictly increasing".into()));
        }
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();

        let slopes = match n {
            2 => vec![delta[0]; 2],
            3 => {
                // parabola through the three points
                let c2 = (delta[1] - delta[0]) / (xs[2] - xs[0]);
                vec![
                    delta[0] - c2 * h[0],
                    delta[0] + c2 * h[0],
                    delta[1] + c2 * h[1],
                ]
            }
            _ => not_a_knot_slopes(&h, &delta),
        };
        Ok(Self {
            xs: xs.to_vec(),
            ys: ys.to_vec(),
            slopes,
        })
    }

    /// Evaluates at `0, 1, ..., len-1`.
    pub fn sample_grid(&self, len: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(len);
        let last = self.xs.len() - 2;
        let mut seg = 0;
        for i in 0..len {
            let t = i as f64;
            while seg < last && t > self.xs[seg + 1] {
                seg += 1;
            }
            out.push(self.eval_in(seg, t));
        }
        out
    }

    pub fn eval(&self, t: f64) -> f64 {
        let last = self.xs.len() - 2;
        let seg = match self.xs.partition_point(|&x| x <= t) {
            0 => 0,
            p => (p - 1).min(last),
        };
        self.eval_in(seg, t)
    }

    fn eval_in(&self, i: usize, t: f64) -> f64 {
        let h = self.xs[i + 1] - self.xs[i];
        let delta = (self.ys[i + 1] - self.ys[i]) / h;
        let (s0, s1) = (self.slopes[i], self.slopes[i + 1]);
        let c = (3.0 * delta - 2.0 * s0 - s1) / h;
        let d = (s0 + s1 - 2.0 * delta) / (h * h);
        let u = t - self.xs[i];
        self.ys[i] + u * (s0 + u * (c + u * d))
    }
}

/// Tridiagonal slope system with not-a-knot first and last rows (n ≥ 4).
fn not_a_knot_slopes(h: &[f64], delta: &[f64]) -> Vec<f64> {
    let n = h.len() + 1;
    let mut sub = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut sup = vec![0.0; n];
    let mut rhs = vec![0.0; n];

    diag[0] = h[1];
    sup[0] = h[0] + h[1];
    rhs[0] = ((h[0] + 2.0 * sup[0]) * h[1] * delta[0] + h[0] * h[0] * delta[1]) / sup[0];

    for i in 1..n - 1 {
        sub[i] = h[i];
        diag[i] = 2.0 * (h[i - 1] + h[i]);
        sup[i] = h[i - 1];
        rhs[i] = 3.0 * (h[i] * delta[i - 1] + h[i - 1] * delta[i]);
    }

    let (ha, hb) = (h[n - 3], h[n - 2]);
    sub[n - 1] = ha + hb;
    diag[n - 1] = ha;
    rhs[n - 1] = (hb * hb * delta[n - 3] + (2.0 * sub[n - 1] + hb) * ha * delta[n - 2]) / sub[n - 1];

    solve_tridiagonal(&sub, &mut diag, &sup, &mut rhs);
    rhs
}

/// Thomas algorithm; solution is left in `rhs`.
fn solve_tridiagonal(sub: &[f64], diag: &mut [f64], sup: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    for i in 1..n {
        let w = sub[i] / diag[i - 1];
        diag[i] -= w * sup[i - 1];
        rhs[i] -= w * rhs[i - 1];
    }
    rhs[n - 1] /= diag[n - 1];
    for i in (0..n - 1).rev() {
        rhs[i] = (rhs[i] - sup[i] * rhs[i + 1]) / diag[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_data_reproduced() {
        let xs = [-3.0, 0.0, 1.0, 4.0, 9.0, 10.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 * x - 1.0).collect();
        let s = CubicSpline::not_a_knot(&xs, &ys).unwrap();
        for (i, v) in s.sample_grid(11).iter().enumerate() {
            assert!((v - (2.0 * i as f64 - 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn two_knots_interpolate_linearly() {
        let s = CubicSpline::not_a_knot(&[0.0, 4.0], &[1.0, 3.0]).unwrap();
        assert_eq!(s.sample_grid(5), vec![1.0, 1.5, 2.0, 2.5, 3.0]);
    }

    #[test]
    fn cubic_data_reproduced() {
        let f = |x: f64| 0.02 * x * x * x - 0.3 * x * x + x - 4.0;
        let xs = [-2.0, 1.0, 2.5, 6.0, 7.0, 11.0, 15.0, 21.0];
        let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        let s = CubicSpline::not_a_knot(&xs, &ys).unwrap();
        for (i, v) in s.sample_grid(22).iter().enumerate() {
            assert!((v - f(i as f64)).abs() < 1e-8, "at {i}: {v} vs {}", f(i as f64));
        }
        for t in [-2.0, 3.3, 20.9] {
            assert!((s.eval(t) - f(t)).abs() < 1e-8);
        }
    }

    #[test]
    fn three_knots_are_a_parabola() {
        let f = |x: f64| 0.5 * x * x - x + 2.0;
        let xs = [0.0, 3.0, 7.0];
        let ys: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
        let s = CubicSpline::not_a_knot(&xs, &ys).unwrap();
        for (i, v) in s.sample_grid(8).iter().enumerate() {
            assert!((v - f(i as f64)).abs() < 1e-10);
        }
    }

    #[test]
    fn passes_through_knots() {
        let xs = [0.0, 2.0, 3.0, 7.0, 8.0, 12.0];
        let ys = [1.0, -1.0, 4.0, 0.5, 0.0, 2.0];
        let s = CubicSpline::not_a_knot(&xs, &ys).unwrap();
        let grid = s.sample_grid(13);
        for (&x, &y) in xs.iter().zip(&ys) {
            assert!((grid[x as usize] - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_knots() {
        assert!(CubicSpline::not_a_knot(&[1.0], &[1.0]).is_err());
        assert!(CubicSpline::not_a_knot(&[1.0, 1.0], &[1.0, 2.0]).is_err());
        assert!(CubicSpline::not_a_knot(&[1.0, 2.0], &[1.0]).is_err());
    }
}
