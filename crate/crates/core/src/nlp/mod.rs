//! Constrained nonlinear programming by sequential quadratic programming.
//!
//! Equality constraints are eliminated by a null-space step on their
//! linearisation; the remaining inequalities and box bounds go to a dense
//! dual active-set QP. Globalisation is an l1 merit line search with a
//! second-order correction. Least-squares costs use a Gauss-Newton Hessian,
//! anything else a damped BFGS approximation.

pub mod qp;
pub mod reduce;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use qp::{solve_qp, QpError};
use reduce::{eliminate, NullSpace, ZRow};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NlpError {
    #[error("problem callback `{callback}` returned a non-finite value")]
    NonFinite { callback: &'static str, iterate: Vec<f64> },
    #[error("initial guess has {got} entries, problem has {expected} variables")]
    Dimension { expected: usize, got: usize },
    #[error("bound {index} has lower > upper")]
    Bounds { index: usize },
}

/// Problem callbacks. Inequalities follow `g(z) <= 0`.
///
/// When `num_residuals() > 0` the cost must equal `0.5 * |r(z)|^2` plus
/// terms that are linear in `z`; the solver then uses `J_r' J_r` as the
/// Hessian of the cost.
pub trait NlpProblem {
    fn num_vars(&self) -> usize;

    fn num_eq(&self) -> usize {
        0
    }

    fn num_ineq(&self) -> usize {
        0
    }

    fn num_residuals(&self) -> usize {
        0
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.num_vars();
        (
            DVector::from_element(n, f64::NEG_INFINITY),
            DVector::from_element(n, f64::INFINITY),
        )
    }

    fn cost(&self, z: &DVector<f64>) -> f64;

    /// Defaults to central differences.
    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(z.len());
        let mut zp = z.clone();
        for i in 0..z.len() {
            let h = fd_step(z[i]);
            zp[i] = z[i] + h;
            let fp = self.cost(&zp);
            zp[i] = z[i] - h;
            let fm = self.cost(&zp);
            zp[i] = z[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn residuals(&self, _z: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn residual_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(0, z.len())
    }

    fn eq_constraints(&self, _z: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(0, z.len())
    }

    fn ineq_constraints(&self, _z: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    fn ineq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(0, z.len())
    }

    /// Preferred basic variable for each equality row.
    fn pivot_hint(&self) -> Option<Vec<usize>> {
        None
    }

    /// Rows that keep their linearisation when a QP subproblem is infeasible
    /// and the solver switches to elastic mode.
    fn hard_ineq(&self, _row: usize) -> bool {
        false
    }
}

fn fd_step(zi: f64) -> f64 {
    1e-6 * (1.0 + zi.abs())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_iterations: usize,
    /// KKT residual tolerance
    pub tolerance: f64,
    /// constraint violation tolerance at convergence
    pub feasibility_tolerance: f64,
    /// relative diagonal shift on the reduced Hessian
    pub regularization: f64,
    pub max_line_search: usize,
    /// slack penalty scale in elastic mode
    pub elastic_penalty: f64,
    pub hessian: HessianMode,
}

/// Hessian approximation. `Auto` picks Gauss-Newton for least-squares
/// problems and BFGS otherwise; `Bfgs` on a least-squares problem starts
/// from the Gauss-Newton matrix and then tracks the Lagrangian curvature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    #[default]
    Auto,
    Bfgs,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_iterations: 100,
            tolerance: 1e-6,
            feasibility_tolerance: 1e-6,
            regularization: 1e-9,
            max_line_search: 40,
            elastic_penalty: 1e4,
            hessian: HessianMode::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    InfeasibleStep,
}

/// Merit values around one accepted step, both at the same penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeritStep {
    pub before: f64,
    pub after: f64,
    pub penalty: f64,
    pub step_length: f64,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub z_star: DVector<f64>,
    pub cost_value: f64,
    pub status: SolveStatus,
    /// number of QP subproblems solved
    pub iterations: usize,
    pub kkt_residual: f64,
    pub eq_violation: f64,
    pub ineq_violation: f64,
    /// seconds
    pub solve_time: f64,
    pub merit: Vec<MeritStep>,
}

struct Eval {
    f: f64,
    grad: DVector<f64>,
    c: DVector<f64>,
    jeq: DMatrix<f64>,
    g: DVector<f64>,
    jin: DMatrix<f64>,
    jr: Option<DMatrix<f64>>,
}

fn finite_vec(v: &DVector<f64>, callback: &'static str, z: &DVector<f64>) -> Result<(), NlpError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NlpError::NonFinite {
            callback,
            iterate: z.iter().copied().collect(),
        })
    }
}

fn finite_mat(m: &DMatrix<f64>, callback: &'static str, z: &DVector<f64>) -> Result<(), NlpError> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(NlpError::NonFinite {
            callback,
            iterate: z.iter().copied().collect(),
        })
    }
}

fn values<P: NlpProblem + ?Sized>(p: &P, z: &DVector<f64>) -> Result<(f64, DVector<f64>, DVector<f64>), NlpError> {
    let f = p.cost(z);
    if !f.is_finite() {
        return Err(NlpError::NonFinite {
            callback: "cost",
            iterate: z.iter().copied().collect(),
        });
    }
    let c = p.eq_constraints(z);
    finite_vec(&c, "eq_constraints", z)?;
    let g = p.ineq_constraints(z);
    finite_vec(&g, "ineq_constraints", z)?;
    Ok((f, c, g))
}

fn evaluate<P: NlpProblem + ?Sized>(p: &P, z: &DVector<f64>) -> Result<Eval, NlpError> {
    let (f, c, g) = values(p, z)?;
    let grad = p.gradient(z);
    finite_vec(&grad, "gradient", z)?;
    let jeq = p.eq_jacobian(z);
    finite_mat(&jeq, "eq_jacobian", z)?;
    let jin = p.ineq_jacobian(z);
    finite_mat(&jin, "ineq_jacobian", z)?;
    let jr = if p.num_residuals() > 0 {
        let r = p.residuals(z);
        finite_vec(&r, "residuals", z)?;
        let j = p.residual_jacobian(z);
        finite_mat(&j, "residual_jacobian", z)?;
        Some(j)
    } else {
        None
    };
    Ok(Eval {
        f,
        grad,
        c,
        jeq,
        g,
        jin,
        jr,
    })
}

fn violation(c: &DVector<f64>, g: &DVector<f64>) -> f64 {
    c.iter().map(|v| v.abs()).sum::<f64>() + g.iter().map(|v| v.max(0.0)).sum::<f64>()
}

fn inf_norms(c: &DVector<f64>, g: &DVector<f64>) -> (f64, f64) {
    let eq = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let ineq = g.iter().fold(0.0f64, |a, v| a.max(*v));
    (eq, ineq)
}

#[derive(Debug, Clone, Copy)]
enum RowKind {
    Ineq(usize),
    Lower(usize),
    Upper(usize),
}

struct ReducedQp {
    h: DMatrix<f64>,
    g: DVector<f64>,
    ct: DMatrix<f64>,
    c0: DVector<f64>,
    kinds: Vec<RowKind>,
    soft: Vec<bool>,
}

fn sparse_row(m: &DMatrix<f64>, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
    (0..m.ncols()).map(move |k| (k, m[(i, k)])).filter(|(_, v)| *v != 0.0)
}

#[allow(clippy::too_many_arguments)]
fn build_qp<P: NlpProblem + ?Sized>(
    p: &P,
    ev: &Eval,
    ns: &NullSpace,
    z: &DVector<f64>,
    lb: &DVector<f64>,
    ub: &DVector<f64>,
    bfgs: Option<&DMatrix<f64>>,
    reg: f64,
) -> ReducedQp {
    let n = z.len();
    let np = ns.num_free();
    let zt_grad = ns.z_transpose_times(&ev.grad);
    let (mut h, g) = match (&ev.jr, bfgs) {
        (Some(jr), None) => {
            let mr = jr.nrows();
            let mut jrz = DMatrix::zeros(mr, np);
            let mut buf = vec![0.0; np];
            for i in 0..mr {
                ns.row_times_z(sparse_row(jr, i), &mut buf);
                for j in 0..np {
                    jrz[(i, j)] = buf[j];
                }
            }
            let jr_d0 = jr * &ns.d0;
            let h = jrz.tr_mul(&jrz);
            let g = zt_grad + jrz.tr_mul(&jr_d0);
            (h, g)
        }
        (_, Some(b)) => {
            let mut zm = DMatrix::zeros(n, np);
            for (k, row) in ns.rows.iter().enumerate() {
                match row {
                    ZRow::Unit(j) => zm[(k, *j)] = 1.0,
                    ZRow::Dense(r) => {
                        for j in 0..np {
                            zm[(k, j)] = r[j];
                        }
                    }
                }
            }
            let bz = b * &zm;
            let h = zm.tr_mul(&bz);
            let g = zm.tr_mul(&(&ev.grad + b * &ns.d0));
            (h, g)
        }
        (None, None) => unreachable!("either residuals or a quasi-Newton matrix"),
    };
    let max_diag = h.diagonal().iter().fold(0.0f64, |a, v| a.max(*v));
    let shift = reg * (1.0 + max_diag);
    for i in 0..np {
        h[(i, i)] += shift;
    }

    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut c0 = Vec::new();
    let mut kinds = Vec::new();
    let mut soft = Vec::new();
    let mut buf = vec![0.0; np];
    for i in 0..ev.g.len() {
        ns.row_times_z(sparse_row(&ev.jin, i), &mut buf);
        let lin = ev.g[i] + sparse_row(&ev.jin, i).map(|(k, v)| v * ns.d0[k]).sum::<f64>();
        let zero = buf.iter().all(|v| *v == 0.0);
        if zero && lin <= 0.0 {
            continue;
        }
        cols.push(buf.iter().map(|v| -v).collect());
        c0.push(-lin);
        kinds.push(RowKind::Ineq(i));
        soft.push(!p.hard_ineq(i));
    }
    for k in 0..n {
        let (row, basic) = match &ns.rows[k] {
            ZRow::Unit(j) => {
                let mut r = vec![0.0; np];
                r[*j] = 1.0;
                (r, false)
            }
            ZRow::Dense(r) => (r.clone(), true),
        };
        let at = z[k] + ns.d0[k];
        if lb[k].is_finite() {
            cols.push(row.clone());
            c0.push(at - lb[k]);
            kinds.push(RowKind::Lower(k));
            soft.push(basic);
        }
        if ub[k].is_finite() {
            cols.push(row.iter().map(|v| -v).collect());
            c0.push(ub[k] - at);
            kinds.push(RowKind::Upper(k));
            soft.push(basic);
        }
    }
    let mut ct = DMatrix::zeros(np, cols.len());
    for (j, col) in cols.iter().enumerate() {
        for i in 0..np {
            ct[(i, j)] = col[i];
        }
    }
    ReducedQp {
        h,
        g,
        ct,
        c0: DVector::from_vec(c0),
        kinds,
        soft,
    }
}

/// Solve the reduced QP; on infeasibility retry with slacks on the soft rows.
/// Returns (y, multipliers on the original rows, elastic flag).
fn solve_subproblem(qp: &ReducedQp, penalty: f64) -> Result<(DVector<f64>, DVector<f64>, bool), QpError> {
    match solve_qp(&qp.h, &qp.g, &qp.ct, &qp.c0) {
        Ok(s) => return Ok((s.x, s.multipliers, false)),
        Err(QpError::NotPositiveDefinite) => return Err(QpError::NotPositiveDefinite),
        Err(_) => {}
    }
    let np = qp.g.len();
    let m = qp.c0.len();
    let soft_rows: Vec<usize> = (0..m).filter(|i| qp.soft[*i]).collect();
    let ns = soft_rows.len();
    if ns == 0 {
        return Err(QpError::Infeasible);
    }
    let nt = np + ns;
    let rho = penalty;
    let mut h = DMatrix::zeros(nt, nt);
    h.view_mut((0, 0), (np, np)).copy_from(&qp.h);
    for k in 0..ns {
        h[(np + k, np + k)] = 1e-8 * rho;
    }
    let mut g = DVector::zeros(nt);
    g.rows_mut(0, np).copy_from(&qp.g);
    for k in 0..ns {
        g[np + k] = rho;
    }
    let mut ct = DMatrix::zeros(nt, m + ns);
    let mut c0 = DVector::zeros(m + ns);
    ct.view_mut((0, 0), (np, m)).copy_from(&qp.ct);
    c0.rows_mut(0, m).copy_from(&qp.c0);
    for (k, &row) in soft_rows.iter().enumerate() {
        ct[(np + k, row)] = 1.0;
        ct[(np + k, m + k)] = 1.0;
    }
    let s = solve_qp(&h, &g, &ct, &c0)?;
    Ok((s.x.rows(0, np).clone_owned(), s.multipliers.rows(0, m).clone_owned(), true))
}

struct Kkt {
    residual: f64,
    eq: f64,
    ineq: f64,
}

fn kkt_residual(ev: &Eval, ns: &NullSpace, qp: &ReducedQp, mu: &DVector<f64>, z: &DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>) -> Kkt {
    let mut stat = ns.z_transpose_times(&ev.grad);
    stat -= &qp.ct * mu;
    let (eq, ineq) = inf_norms(&ev.c, &ev.g);
    let ineq = ineq.max(0.0);
    let mut comp = 0.0f64;
    for (i, kind) in qp.kinds.iter().enumerate() {
        if mu[i] == 0.0 {
            continue;
        }
        let slack = match *kind {
            RowKind::Ineq(r) => -ev.g[r],
            RowKind::Lower(k) => z[k] - lb[k],
            RowKind::Upper(k) => ub[k] - z[k],
        };
        comp = comp.max((mu[i] * slack).abs());
    }
    Kkt {
        residual: stat.amax().max(eq).max(ineq).max(comp),
        eq,
        ineq,
    }
}

fn clamp_into(z: &mut DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>) {
    for i in 0..z.len() {
        z[i] = z[i].clamp(lb[i], ub[i]);
    }
}

/// Run SQP from `z0`. Non-finite callback output is the only error; every
/// other outcome is reported through `Solution::status`.
pub fn solve<P: NlpProblem + ?Sized>(p: &P, z0: &DVector<f64>, opts: &SolverOptions) -> Result<Solution, NlpError> {
    let start = Instant::now();
    let n = p.num_vars();
    if z0.len() != n {
        return Err(NlpError::Dimension {
            expected: n,
            got: z0.len(),
        });
    }
    let (lb, ub) = p.bounds();
    for i in 0..n {
        if lb[i] > ub[i] {
            return Err(NlpError::Bounds { index: i });
        }
    }
    let hint = p.pivot_hint();
    let mut z = z0.clone();
    clamp_into(&mut z, &lb, &ub);
    let mut ev = evaluate(p, &z)?;
    let mut bfgs = match (&ev.jr, opts.hessian) {
        (None, _) => Some(DMatrix::<f64>::identity(n, n)),
        (Some(jr), HessianMode::Bfgs) => {
            let mut b = jr.tr_mul(jr);
            let shift = 1e-6 * (1.0 + b.diagonal().amax());
            for i in 0..n {
                b[(i, i)] += shift;
            }
            Some(b)
        }
        (Some(_), HessianMode::Auto) => None,
    };
    let mut penalty = 0.0f64;
    let mut merit = Vec::new();
    let mut iterations = 0;
    let mut last_kkt = f64::INFINITY;
    // proximal shift, raised after short steps and relaxed after full ones
    let mut damping = opts.regularization;

    let finish = |z: DVector<f64>, ev: &Eval, status, iterations, kkt: f64, merit| {
        let (eq, ineq) = inf_norms(&ev.c, &ev.g);
        Solution {
            z_star: z,
            cost_value: ev.f,
            status,
            iterations,
            kkt_residual: kkt,
            eq_violation: eq,
            ineq_violation: ineq.max(0.0),
            solve_time: start.elapsed().as_secs_f64(),
            merit,
        }
    };

    loop {
        let Ok(ns) = eliminate(&ev.jeq, &ev.c, hint.as_deref()) else {
            return Ok(finish(z, &ev, SolveStatus::InfeasibleStep, iterations, last_kkt, merit));
        };
        let qp = build_qp(p, &ev, &ns, &z, &lb, &ub, bfgs.as_ref(), damping);
        let rho = opts.elastic_penalty * (1.0 + qp.g.amax() + penalty);
        iterations += 1;
        let (y, mu, elastic) = match solve_subproblem(&qp, rho) {
            Ok(s) => s,
            Err(_) => return Ok(finish(z, &ev, SolveStatus::InfeasibleStep, iterations, last_kkt, merit)),
        };
        let kkt = kkt_residual(&ev, &ns, &qp, &mu, &z, &lb, &ub);
        last_kkt = kkt.residual;
        if !elastic
            && kkt.residual <= opts.tolerance
            && kkt.eq <= opts.feasibility_tolerance
            && kkt.ineq <= opts.feasibility_tolerance
        {
            return Ok(finish(z, &ev, SolveStatus::Converged, iterations, last_kkt, merit));
        }
        if iterations > opts.max_iterations {
            return Ok(finish(z, &ev, SolveStatus::MaxIter, iterations, last_kkt, merit));
        }

        let d = ns.expand(&y);
        let viol = violation(&ev.c, &ev.g);
        let lin_c = &ev.c + &ev.jeq * &d;
        let lin_g = &ev.g + &ev.jin * &d;
        let viol_lin = violation(&lin_c, &lin_g);
        let curvature = match (&ev.jr, &bfgs) {
            (_, Some(b)) => d.dot(&(b * &d)),
            (Some(jr), None) => (jr * &d).norm_squared(),
            _ => 0.0,
        }
        .max(0.0);
        let gd = ev.grad.dot(&d);
        if viol - viol_lin > 1e-14 {
            let required = (gd + 0.5 * curvature) / (0.5 * (viol - viol_lin));
            if required > penalty {
                penalty = required * 1.1 + 1e-8;
            }
        }
        let mu_ineq = qp
            .kinds
            .iter()
            .zip(mu.iter())
            .filter(|(k, _)| matches!(k, RowKind::Ineq(_)))
            .fold(0.0f64, |a, (_, m)| a.max(*m));
        if mu_ineq * 1.1 > penalty {
            penalty = mu_ineq * 1.1;
        }
        let phi0 = ev.f + penalty * viol;
        let slope = gd + penalty * (viol_lin - viol);
        let armijo = |alpha: f64, phi: f64| {
            if slope < 0.0 {
                phi <= phi0 + 1e-4 * alpha * slope
            } else {
                phi <= phi0
            }
        };

        let mut alpha = 1.0;
        let mut accepted: Option<(DVector<f64>, f64)> = None;
        for trial in 0..opts.max_line_search {
            let mut zt = &z + &d * alpha;
            clamp_into(&mut zt, &lb, &ub);
            let (ft, ct, gt) = values(p, &zt)?;
            let phi = ft + penalty * violation(&ct, &gt);
            if armijo(alpha, phi) {
                accepted = Some((zt, phi));
                break;
            }
            if trial == 0 && !ct.is_empty() {
                let mut zs = &zt + ns.particular(&ct);
                clamp_into(&mut zs, &lb, &ub);
                let (fs, cs, gs) = values(p, &zs)?;
                let phis = fs + penalty * violation(&cs, &gs);
                if armijo(1.0, phis) {
                    accepted = Some((zs, phis));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((z_new, phi_new)) = accepted else {
            return Ok(finish(z, &ev, SolveStatus::InfeasibleStep, iterations, last_kkt, merit));
        };
        if alpha < 0.25 {
            damping = (damping * 4.0).clamp(1e-6, 1e4);
        } else if alpha == 1.0 {
            damping = (damping * 0.5).max(opts.regularization);
        }
        merit.push(MeritStep {
            before: phi0,
            after: phi_new,
            penalty,
            step_length: alpha,
        });
        let ev_new = evaluate(p, &z_new)?;
        if let Some(b) = bfgs.as_mut() {
            update_bfgs(b, &ev, &ev_new, &z, &z_new, &qp, &mu);
        }
        z = z_new;
        ev = ev_new;
    }
}

/// Powell-damped BFGS on the Lagrangian gradient.
fn update_bfgs(b: &mut DMatrix<f64>, old: &Eval, new: &Eval, z: &DVector<f64>, z_new: &DVector<f64>, qp: &ReducedQp, mu: &DVector<f64>) {
    let s = z_new - z;
    let mut y = &new.grad - &old.grad;
    let mut mu_in = DVector::zeros(old.g.len());
    for (k, kind) in qp.kinds.iter().enumerate() {
        if let RowKind::Ineq(r) = kind {
            mu_in[*r] = mu[k];
        }
    }
    if !old.g.is_empty() {
        y += (&new.jin - &old.jin).tr_mul(&mu_in);
    }
    if !old.c.is_empty() {
        // least-squares equality multipliers at the old point
        let rhs = -(&old.jeq * (&old.grad + old.jin.tr_mul(&mu_in)));
        let gram = &old.jeq * old.jeq.transpose();
        if let Some(lambda) = gram.lu().solve(&rhs) {
            y += (&new.jeq - &old.jeq).tr_mul(&lambda);
        }
    }
    let bs = &*b * &s;
    let sbs = s.dot(&bs);
    if sbs <= 1e-300 {
        return;
    }
    let sy = s.dot(&y);
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r = &y * theta + &bs * (1.0 - theta);
    let sr = s.dot(&r);
    if sr <= 1e-300 {
        return;
    }
    *b += &r * r.transpose() / sr - &bs * bs.transpose() / sbs;
}

/// Largest relative deviation between the supplied derivatives (gradient
/// and every Jacobian) and central finite differences at `z`.
pub fn check_gradient<P: NlpProblem + ?Sized>(p: &P, z: &DVector<f64>) -> f64 {
    let n = z.len();
    let mut fd_grad = DVector::zeros(n);
    let m_eq = p.num_eq();
    let m_in = p.num_ineq();
    let m_r = p.num_residuals();
    let mut fd_eq = DMatrix::zeros(m_eq, n);
    let mut fd_in = DMatrix::zeros(m_in, n);
    let mut fd_r = DMatrix::zeros(m_r, n);
    let mut zp = z.clone();
    for i in 0..n {
        let h = fd_step(z[i]);
        zp[i] = z[i] + h;
        let (fp, cp, gp, rp) = (p.cost(&zp), p.eq_constraints(&zp), p.ineq_constraints(&zp), p.residuals(&zp));
        zp[i] = z[i] - h;
        let (fm, cm, gm, rm) = (p.cost(&zp), p.eq_constraints(&zp), p.ineq_constraints(&zp), p.residuals(&zp));
        zp[i] = z[i];
        fd_grad[i] = (fp - fm) / (2.0 * h);
        fd_eq.set_column(i, &((cp - cm) / (2.0 * h)));
        fd_in.set_column(i, &((gp - gm) / (2.0 * h)));
        if m_r > 0 {
            fd_r.set_column(i, &((rp - rm) / (2.0 * h)));
        }
    }
    let grad = p.gradient(z);
    let mut worst = deviation(grad.as_slice(), fd_grad.as_slice());
    if m_eq > 0 {
        worst = worst.max(deviation(p.eq_jacobian(z).as_slice(), fd_eq.as_slice()));
    }
    if m_in > 0 {
        worst = worst.max(deviation(p.ineq_jacobian(z).as_slice(), fd_in.as_slice()));
    }
    if m_r > 0 {
        worst = worst.max(deviation(p.residual_jacobian(z).as_slice(), fd_r.as_slice()));
    }
    worst
}

/// Entrywise `|a - b| / max(|b|, floor)` where the floor scales with the
/// block so that structurally zero entries do not amplify rounding noise.
fn deviation(analytic: &[f64], fd: &[f64]) -> f64 {
    let scale = fd.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = 1e-6 + 1e-2 * scale;
    analytic
        .iter()
        .zip(fd)
        .map(|(a, b)| {
            let d = (a - b).abs() / b.abs().max(floor);
            if d.is_nan() {
                f64::INFINITY
            } else {
                d
            }
        })
        .fold(0.0, f64::max)
}
