//! Interpolating cubic splines with natural or periodic end conditions.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("need at least {needed} knots, got {got}")]
    TooFewKnots { needed: usize, got: usize },
    #[error("knots must be strictly increasing (index {0})")]
    NotIncreasing(usize),
    #[error("periodic spline requires matching end values ({0} vs {1})")]
    PeriodMismatch(f64, f64),
    #[error("non-finite spline data at index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndCondition {
    Natural,
    /// `values[0] == values[last]` and the first two derivatives wrap.
    Periodic,
}

/// Piecewise cubic `s(t)` through `(knots[i], values[i])`.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    /// second derivatives at the knots
    curvature: Vec<f64>,
    end: EndCondition,
}

impl CubicSpline {
    pub fn new(knots: &[f64], values: &[f64], end: EndCondition) -> Result<Self, SplineError> {
        let n = knots.len();
        let needed = match end {
            EndCondition::Natural => 2,
            EndCondition::Periodic => 3,
        };
        if n < needed || values.len() != n {
            return Err(SplineError::TooFewKnots {
                needed,
                got: n.min(values.len()),
            });
        }
        for i in 0..n {
            if !knots[i].is_finite() || !values[i].is_finite() {
                return Err(SplineError::NonFinite(i));
            }
            if i > 0 && knots[i] <= knots[i - 1] {
                return Err(SplineError::NotIncreasing(i));
            }
        }
        let curvature = match end {
            EndCondition::Natural => natural_second_derivatives(knots, values),
            EndCondition::Periodic => {
                let scale = values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
                if (values[0] - values[n - 1]).abs() > 1e-9 * scale {
                    return Err(SplineError::PeriodMismatch(values[0], values[n - 1]));
                }
                periodic_second_derivatives(knots, values)
            }
        };
        Ok(CubicSpline {
            knots: knots.to_vec(),
            values: values.to_vec(),
            curvature,
            end,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn start(&self) -> f64 {
        self.knots[0]
    }

    pub fn end(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    pub fn period(&self) -> f64 {
        self.end() - self.start()
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let t = match self.end {
            EndCondition::Periodic => {
                let p = self.period();
                let mut w = (t - self.start()).rem_euclid(p) + self.start();
                if w >= self.end() {
                    w = self.start();
                }
                w
            }
            EndCondition::Natural => t,
        };
        let n = self.knots.len();
        let idx = self.knots.partition_point(|&k| k <= t);
        let seg = idx.saturating_sub(1).min(n - 2);
        (seg, t)
    }

    /// Value, first and second derivative at `t`.
    pub fn eval_all(&self, t: f64) -> (f64, f64, f64) {
        let (i, t) = self.locate(t);
        let h = self.knots[i + 1] - self.knots[i];
        let a = self.knots[i + 1] - t;
        let b = t - self.knots[i];
        let (mi, mj) = (self.curvature[i], self.curvature[i + 1]);
        let ci = self.values[i] / h - mi * h / 6.0;
        let cj = self.values[i + 1] / h - mj * h / 6.0;
        let s = mi * a * a * a / (6.0 * h) + mj * b * b * b / (6.0 * h) + ci * a + cj * b;
        let ds = -mi * a * a / (2.0 * h) + mj * b * b / (2.0 * h) - ci + cj;
        let dds = mi * a / h + mj * b / h;
        (s, ds, dds)
    }

    pub fn eval(&self, t: f64) -> f64 {
        self.eval_all(t).0
    }

    pub fn derivative(&self, t: f64) -> f64 {
        self.eval_all(t).1
    }
}

fn natural_second_derivatives(t: &[f64], y: &[f64]) -> Vec<f64> {
    let n = t.len();
    let mut m = vec![0.0; n];
    if n < 3 {
        return m;
    }
    let k = n - 2;
    let mut sub = vec![0.0; k];
    let mut diag = vec![0.0; k];
    let mut sup = vec![0.0; k];
    let mut rhs = vec![0.0; k];
    for r in 0..k {
        let i = r + 1;
        let h0 = t[i] - t[i - 1];
        let h1 = t[i + 1] - t[i];
        sub[r] = h0;
        diag[r] = 2.0 * (h0 + h1);
        sup[r] = h1;
        rhs[r] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
    }
    let inner = solve_tridiagonal(&sub, &diag, &sup, &rhs);
    m[1..(k + 1)].copy_from_slice(&inner);
    m
}

fn periodic_second_derivatives(t: &[f64], y: &[f64]) -> Vec<f64> {
    // unknowns M_0..M_{k-1} with M_k == M_0, k = n - 1 segments
    let k = t.len() - 1;
    let h = |i: usize| t[i + 1] - t[i];
    let mut sub = vec![0.0; k];
    let mut diag = vec![0.0; k];
    let mut sup = vec![0.0; k];
    let mut rhs = vec![0.0; k];
    for i in 0..k {
        let prev = if i == 0 { k - 1 } else { i - 1 };
        let h0 = h(prev);
        let h1 = h(i);
        let y_prev = if i == 0 { y[k - 1] } else { y[i - 1] };
        sub[i] = h0;
        diag[i] = 2.0 * (h0 + h1);
        sup[i] = h1;
        rhs[i] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y_prev) / h0);
    }
    let mut m = solve_cyclic_tridiagonal(&sub, &diag, &sup, &rhs);
    m.push(m[0]);
    m
}

/// Thomas algorithm; `sub[0]` and `sup[n-1]` are ignored.
pub(crate) fn solve_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = sup[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let denom = diag[i] - sub[i] * c[i - 1];
        c[i] = if i + 1 < n { sup[i] / denom } else { 0.0 };
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / denom;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Cyclic tridiagonal solve (Sherman-Morrison); `sub[0]` couples to the last
/// unknown and `sup[n-1]` to the first.
fn solve_cyclic_tridiagonal(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    if n == 2 {
        // 2x2 dense: [d0, sub0+sup0; sub1+sup1, d1]
        let (a, b, c, d) = (diag[0], sup[0] + sub[0], sub[1] + sup[1], diag[1]);
        let det = a * d - b * c;
        return vec![(rhs[0] * d - b * rhs[1]) / det, (a * rhs[1] - c * rhs[0]) / det];
    }
    let alpha = sup[n - 1];
    let beta = sub[0];
    let gamma = -diag[0];
    let mut dmod = diag.to_vec();
    dmod[0] -= gamma;
    dmod[n - 1] -= alpha * beta / gamma;
    let x = solve_tridiagonal(sub, &dmod, sup, rhs);
    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = alpha;
    let z = solve_tridiagonal(sub, &dmod, sup, &u);
    let fact = (x[0] + beta * x[n - 1] / gamma) / (1.0 + z[0] + beta * z[n - 1] / gamma);
    x.iter().zip(&z).map(|(xi, zi)| xi - fact * zi).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn interpolates_knots() {
        let t = [0.0, 1.0, 2.5, 3.0, 4.2];
        let y = [1.0, -2.0, 0.5, 3.0, 1.0];
        for end in [EndCondition::Natural, EndCondition::Periodic] {
            let s = CubicSpline::new(&t, &y, end).unwrap();
            for (ti, yi) in t.iter().zip(&y) {
                assert_relative_eq!(s.eval(*ti), *yi, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn natural_reproduces_lines() {
        let t = [0.0, 1.0, 2.0, 3.5];
        let y: Vec<f64> = t.iter().map(|v| 2.0 * v - 1.0).collect();
        let s = CubicSpline::new(&t, &y, EndCondition::Natural).unwrap();
        for q in [0.3, 1.7, 3.1] {
            assert_relative_eq!(s.eval(q), 2.0 * q - 1.0, epsilon = 1e-12);
            assert_relative_eq!(s.derivative(q), 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn periodic_is_c2_across_the_seam() {
        let n = 12;
        let t: Vec<f64> = (0..=n).map(|i| i as f64 * 0.7).collect();
        let y: Vec<f64> = t.iter().map(|v| (v * std::f64::consts::TAU / (n as f64 * 0.7)).sin()).collect();
        let mut y = y;
        y[n] = y[0];
        let s = CubicSpline::new(&t, &y, EndCondition::Periodic).unwrap();
        let p = s.period();
        let (a0, a1, a2) = s.eval_all(1e-9);
        let (b0, b1, b2) = s.eval_all(p - 1e-9);
        assert!((a0 - b0).abs() < 1e-7);
        assert!((a1 - b1).abs() < 1e-7);
        assert!((a2 - b2).abs() < 1e-6);
        assert_relative_eq!(s.eval(0.3 + p), s.eval(0.3), epsilon = 1e-12);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(CubicSpline::new(&[0.0], &[1.0], EndCondition::Natural).is_err());
        assert!(CubicSpline::new(&[0.0, 0.0, 1.0], &[1.0, 1.0, 1.0], EndCondition::Natural).is_err());
        assert!(CubicSpline::new(&[0.0, 1.0, 2.0], &[1.0, 2.0, 3.0], EndCondition::Periodic).is_err());
    }

    #[test]
    fn cyclic_solver_matches_dense() {
        let n = 6;
        let sub: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * i as f64).collect();
        let sup: Vec<f64> = (0..n).map(|i| 0.5 + 0.05 * i as f64).collect();
        let diag: Vec<f64> = (0..n).map(|i| 4.0 + i as f64).collect();
        let rhs: Vec<f64> = (0..n).map(|i| (i as f64).cos()).collect();
        let x = solve_cyclic_tridiagonal(&sub, &diag, &sup, &rhs);
        for i in 0..n {
            let prev = (i + n - 1) % n;
            let next = (i + 1) % n;
            let r = sub[i] * x[prev] + diag[i] * x[i] + sup[i] * x[next];
            assert_relative_eq!(r, rhs[i], epsilon = 1e-12);
        }
    }
}
