//! Dense strictly convex QP solver (Goldfarb-Idnani dual active set).
//!
//! ```text
//!     minimize    1/2 x' G x + g0' x
//!     subject to  C' x + c0 >= 0
//! ```
//!
//! Constraint normals are the columns of `ct`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QpError {
    #[error("QP Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("QP constraints are infeasible")]
    Infeasible,
    #[error("QP iteration limit reached")]
    IterationLimit,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// one multiplier per constraint, zero for inactive ones
    pub multipliers: DVector<f64>,
    pub active: Vec<usize>,
    pub iterations: usize,
}

struct Factor {
    n: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    q: usize,
    r_norm: f64,
}

impl Factor {
    /// Append the constraint whose transformed normal is `d = J' n`.
    fn add(&mut self, d: &mut DVector<f64>) -> bool {
        let n = self.n;
        let q = self.q;
        let mut jj = n;
        while jj > q + 1 {
            let j = jj - 1;
            jj -= 1;
            let (mut cc, mut ss) = (d[j - 1], d[j]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            d[j] = 0.0;
            ss /= h;
            cc /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[j - 1] = -h;
            } else {
                d[j - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[(k, j - 1)];
                let t2 = self.j[(k, j)];
                let a = t1 * cc + t2 * ss;
                self.j[(k, j - 1)] = a;
                self.j[(k, j)] = xny * (t1 + a) - t2;
            }
        }
        self.q += 1;
        for i in 0..self.q {
            self.r[(i, self.q - 1)] = d[i];
        }
        let diag = d[self.q - 1].abs();
        if diag <= f64::EPSILON * self.r_norm {
            // linearly dependent on the active set
            self.q -= 1;
            for i in 0..=self.q {
                self.r[(i, self.q)] = 0.0;
            }
            return false;
        }
        self.r_norm = self.r_norm.max(diag);
        true
    }

    /// Remove active position `pos`, re-triangularising `R`.
    fn remove(&mut self, pos: usize) {
        let n = self.n;
        let q = self.q;
        for i in pos..q - 1 {
            for j in 0..n {
                self.r[(j, i)] = self.r[(j, i + 1)];
            }
        }
        for j in 0..n {
            self.r[(j, q - 1)] = 0.0;
        }
        self.q -= 1;
        let q = self.q;
        if q == 0 {
            return;
        }
        for j in pos..q {
            let (mut cc, mut ss) = (self.r[(j, j)], self.r[(j + 1, j)]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(j + 1, j)] = 0.0;
            if cc < 0.0 {
                self.r[(j, j)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(j, j)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in j + 1..q {
                let t1 = self.r[(j, k)];
                let t2 = self.r[(j + 1, k)];
                let a = t1 * cc + t2 * ss;
                self.r[(j, k)] = a;
                self.r[(j + 1, k)] = xny * (t1 + a) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, j)];
                let t2 = self.j[(k, j + 1)];
                let a = t1 * cc + t2 * ss;
                self.j[(k, j)] = a;
                self.j[(k, j + 1)] = xny * (a + t1) - t2;
            }
        }
    }
}

pub fn solve_qp(
    g: &DMatrix<f64>,
    g0: &DVector<f64>,
    ct: &DMatrix<f64>,
    c0: &DVector<f64>,
) -> Result<QpSolution, QpError> {
    let n = g0.len();
    let m = c0.len();
    assert_eq!(g.nrows(), n);
    assert_eq!(ct.nrows(), n);
    assert_eq!(ct.ncols(), m);

    let chol = g.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    // J = L^-T so that J' G J = I
    let mut j = DMatrix::identity(n, n);
    if !chol.l().transpose().solve_upper_triangular_mut(&mut j) {
        return Err(QpError::NotPositiveDefinite);
    }
    let mut x = -chol.solve(g0);
    let mut f = Factor {
        n,
        j,
        r: DMatrix::zeros(n, n),
        q: 0,
        r_norm: 1.0,
    };
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let mut is_active = vec![false; m];
    let norms: Vec<f64> = (0..m).map(|i| ct.column(i).norm()).collect();
    let mut iterations = 0usize;
    let max_iter = 20 * (n + m) + 100;

    loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(QpError::IterationLimit);
        }
        let xnorm = x.amax();
        // most violated inactive constraint
        let mut ip = None;
        let mut worst = 0.0;
        for i in 0..m {
            if is_active[i] {
                continue;
            }
            let s = ct.column(i).dot(&x) + c0[i];
            let tol = 1e-11 * (1.0 + c0[i].abs() + norms[i] * xnorm);
            if s < -tol && s / norms[i].max(1e-300) < worst {
                worst = s / norms[i].max(1e-300);
                ip = Some(i);
            }
        }
        let Some(ip) = ip else {
            let mut multipliers = DVector::zeros(m);
            for (k, &a) in active.iter().enumerate() {
                multipliers[a] = u[k];
            }
            return Ok(QpSolution {
                x,
                multipliers,
                active,
                iterations,
            });
        };
        let np = ct.column(ip).clone_owned();
        let mut s_ip = np.dot(&x) + c0[ip];
        let mut u_plus = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(QpError::IterationLimit);
            }
            let mut d = f.j.tr_mul(&np);
            let q = f.q;
            // primal direction z = J2 d2
            let mut z = DVector::zeros(n);
            for k in q..n {
                if d[k] != 0.0 {
                    z.axpy(d[k], &f.j.column(k), 1.0);
                }
            }
            // dual direction r = R^-1 d1
            let mut r = DVector::zeros(q);
            for i in (0..q).rev() {
                let mut sum = d[i];
                for k in i + 1..q {
                    sum -= f.r[(i, k)] * r[k];
                }
                r[i] = sum / f.r[(i, i)];
            }
            // partial step (keeps dual feasibility)
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for k in 0..q {
                if r[k] > 0.0 {
                    let t = u[k] / r[k];
                    if t < t1 {
                        t1 = t;
                        drop = Some(k);
                    }
                }
            }
            // full step (makes constraint ip active)
            let zn = z.dot(&np);
            let t2 = if z.amax() > 1e-14 * (1.0 + f.j.amax()) && zn.abs() > 0.0 {
                -s_ip / zn
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible);
            }
            if !t2.is_finite() {
                // dual step only
                for k in 0..q {
                    u[k] -= t * r[k];
                }
                u_plus += t;
                let k = drop.expect("finite partial step has a blocking constraint");
                is_active[active[k]] = false;
                active.remove(k);
                u.remove(k);
                f.remove(k);
                continue;
            }
            x.axpy(t, &z, 1.0);
            for k in 0..q {
                u[k] -= t * r[k];
            }
            u_plus += t;
            if t2 <= t1 {
                if !f.add(&mut d) {
                    return Err(QpError::Infeasible);
                }
                active.push(ip);
                u.push(u_plus);
                is_active[ip] = true;
                break;
            }
            let k = drop.expect("partial step has a blocking constraint");
            is_active[active[k]] = false;
            active.remove(k);
            u.remove(k);
            f.remove(k);
            s_ip = np.dot(&x) + c0[ip];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Enumerate active sets and keep the KKT point with the lowest cost.
    fn brute_force(g: &DMatrix<f64>, g0: &DVector<f64>, ct: &DMatrix<f64>, c0: &DVector<f64>) -> Option<DVector<f64>> {
        let n = g0.len();
        let m = c0.len();
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0u32..(1 << m) {
            let idx: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            if idx.len() > n {
                continue;
            }
            let k = idx.len();
            let mut kkt = DMatrix::zeros(n + k, n + k);
            let mut rhs = DVector::zeros(n + k);
            kkt.view_mut((0, 0), (n, n)).copy_from(g);
            for (c, &i) in idx.iter().enumerate() {
                for r in 0..n {
                    kkt[(r, n + c)] = ct[(r, i)];
                    kkt[(n + c, r)] = ct[(r, i)];
                }
                rhs[n + c] = -c0[i];
            }
            for r in 0..n {
                rhs[r] = -g0[r];
            }
            let Some(sol) = kkt.lu().solve(&rhs) else { continue };
            let x = sol.rows(0, n).clone_owned();
            // multipliers: G x + g0 = C mu  -> with our sign convention mu = -sol[n..]
            let feasible = (0..m).all(|i| ct.column(i).dot(&x) + c0[i] >= -1e-9);
            let dual_ok = (0..k).all(|c| -sol[n + c] >= -1e-9);
            if feasible && dual_ok {
                let cost = 0.5 * x.dot(&(g * &x)) + g0.dot(&x);
                if best.as_ref().is_none_or(|(b, _)| cost < *b - 1e-12) {
                    best = Some((cost, x));
                }
            }
        }
        best.map(|b| b.1)
    }

    #[test]
    fn documented_example() {
        let g = DMatrix::identity(2, 2);
        let g0 = DVector::from_vec(vec![1.0, 0.0]);
        let ct = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let c0 = DVector::from_vec(vec![-1.0]);
        let sol = solve_qp(&g, &g0, &ct, &c0).unwrap();
        assert_relative_eq!(sol.x[0], -0.6, epsilon = 1e-12);
        assert_relative_eq!(sol.x[1], 0.8, epsilon = 1e-12);
        assert!(sol.multipliers[0] > 0.0);
    }

    #[test]
    fn unconstrained_minimum() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g0 = DVector::from_vec(vec![-1.0, 1.0]);
        let sol = solve_qp(&g, &g0, &DMatrix::zeros(2, 0), &DVector::zeros(0)).unwrap();
        let grad = &g * &sol.x + &g0;
        assert!(grad.amax() < 1e-12);
    }

    #[test]
    fn detects_infeasibility() {
        // x >= 1 and x <= 0
        let g = DMatrix::identity(1, 1);
        let g0 = DVector::zeros(1);
        let ct = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let c0 = DVector::from_vec(vec![-1.0, 0.0]);
        assert_eq!(solve_qp(&g, &g0, &ct, &c0).unwrap_err(), QpError::Infeasible);
    }

    #[test]
    fn rejects_indefinite_hessian() {
        let g = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let err = solve_qp(&g, &DVector::zeros(2), &DMatrix::zeros(2, 0), &DVector::zeros(0)).unwrap_err();
        assert_eq!(err, QpError::NotPositiveDefinite);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn matches_active_set_enumeration(
            seed in prop::collection::vec(-1.0f64..1.0, 3 * 3 + 3 + 6 * 3 + 6)
        ) {
            let n = 3;
            let m = 6;
            let a = DMatrix::from_column_slice(n, n, &seed[0..9]);
            let g = &a * a.transpose() + DMatrix::identity(n, n) * 0.5;
            let g0 = DVector::from_column_slice(&seed[9..12]);
            let ct = DMatrix::from_column_slice(n, m, &seed[12..30]);
            // constant terms keep the origin strictly feasible, so the QP is feasible
            let c0 = DVector::from_iterator(m, seed[30..36].iter().map(|v| v.abs() + 0.1));
            let sol = solve_qp(&g, &g0, &ct, &c0).unwrap();
            let reference = brute_force(&g, &g0, &ct, &c0).unwrap();
            prop_assert!((&sol.x - &reference).amax() < 1e-7, "{} vs {}", sol.x, reference);
            // dual feasibility and complementarity
            for i in 0..m {
                let s = ct.column(i).dot(&sol.x) + c0[i];
                prop_assert!(sol.multipliers[i] >= -1e-12);
                prop_assert!(s >= -1e-9);
                prop_assert!((sol.multipliers[i] * s).abs() < 1e-8);
            }
            let stat = &g * &sol.x + &g0 - &ct * &sol.multipliers;
            prop_assert!(stat.amax() < 1e-8);
        }
    }
}
