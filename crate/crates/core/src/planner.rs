//! Offline race-line generation: receding windows of a progress-maximising
//! contouring problem over the dynamic model, stitched into a lap.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{full_step, full_step_jacobian, stable_substeps, ControlInput, FullState, VehicleParams};
use crate::nlp::{self, NlpProblem, SolveStatus, SolverOptions};
use crate::raceline::{RaceLine, RaceLineError, RaceLineSample};
use crate::track::TrackGeometry;

const NU: usize = 2;
const NX: usize = 6;
const STAGE: usize = NU + NX + 1;
const EQ_PER_STAGE: usize = NX + 1;
const INEQ_PER_STAGE: usize = 3;
const RES_PER_STAGE: usize = 4;

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("invalid planner configuration: {0}")]
    Config(String),
    #[error("planner stuck at theta = {theta:.3} m: {reason}")]
    Stuck { theta: f64, reason: String },
    #[error(transparent)]
    RaceLine(#[from] RaceLineError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlannerConfig {
    pub horizon: usize,
    /// stages committed per window
    pub advance: usize,
    pub ts: f64,
    /// contour-error weight
    pub q: f64,
    /// terminal progress reward
    pub r: f64,
    /// weight keeping theta in step with the travelled distance
    pub lag_weight: f64,
    /// weight on consecutive input differences (delta, D)
    pub input_rate_weight: [f64; 2],
    pub input_lower: [f64; 2],
    pub input_upper: [f64; 2],
    pub vx_min: f64,
    pub vy_max: f64,
    pub margin: f64,
    /// laps driven; the last one becomes the race line
    pub laps: usize,
    pub initial_speed: f64,
    /// race-line sample spacing, m
    pub sample_spacing: f64,
    /// half width of the corridor the centerline-following baseline may use, m
    pub centerline_corridor: f64,
    /// retries (each doubling q) before a window is declared stuck
    pub max_retries: usize,
    /// constraint violation accepted from a window that hit the iteration cap
    pub accept_violation: f64,
    pub solver: SolverOptions,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            horizon: 65,
            advance: 32,
            ts: 0.033,
            q: 0.025,
            r: 1.25,
            lag_weight: 1e-3,
            input_rate_weight: [1e-3, 1e-3],
            input_lower: [-PI / 6.0, -1.0],
            input_upper: [PI / 6.0, 1.0],
            vx_min: 0.5,
            vy_max: 2.0,
            margin: 0.1,
            laps: 2,
            initial_speed: 1.0,
            sample_spacing: 0.05,
            centerline_corridor: 0.05,
            max_retries: 3,
            accept_violation: 1e-4,
            solver: SolverOptions {
                max_iterations: 80,
                tolerance: 1e-6,
                ..SolverOptions::default()
            },
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        let bad = |m: String| Err(PlannerError::Config(m));
        if self.horizon < 2 {
            return bad(format!("horizon must be at least 2, got {}", self.horizon));
        }
        if self.advance < 1 || self.advance > self.horizon {
            return bad(format!("advance must lie in [1, horizon], got {}", self.advance));
        }
        if !(self.ts > 0.0) {
            return bad(format!("ts must be positive, got {}", self.ts));
        }
        if !(self.q > 0.0 && self.r > 0.0) {
            return bad("q and r must be positive".into());
        }
        if !(self.lag_weight >= 0.0) || self.input_rate_weight.iter().any(|w| !(*w >= 0.0)) {
            return bad("regularisation weights must be non-negative".into());
        }
        for i in 0..NU {
            if !(self.input_lower[i] < self.input_upper[i]) {
                return bad(format!("input bound {i} has lower >= upper"));
            }
        }
        if !(self.vx_min > 0.0 && self.vy_max > 0.0) {
            return bad("vx_min and vy_max must be positive".into());
        }
        if !(self.margin >= 0.0) {
            return bad("margin must be non-negative".into());
        }
        if self.laps < 1 {
            return bad("laps must be at least 1".into());
        }
        if !(self.initial_speed >= self.vx_min) {
            return bad("initial_speed must be at least vx_min".into());
        }
        if !(self.sample_spacing > 0.0 && self.centerline_corridor > 0.0 && self.accept_violation >= 0.0) {
            return bad("sample_spacing and centerline_corridor must be positive".into());
        }
        Ok(())
    }

    fn u_clamp(&self, u: ControlInput) -> ControlInput {
        ControlInput::new(
            u.delta.clamp(self.input_lower[0], self.input_upper[0]),
            u.duty.clamp(self.input_lower[1], self.input_upper[1]),
        )
    }
}

fn u_at(s: usize) -> usize {
    STAGE * s
}

fn x_at(s: usize) -> usize {
    STAGE * s + NU
}

fn th_at(s: usize) -> usize {
    STAGE * s + NU + NX
}

/// One planning window. Stage `s` holds `[u_s, x_{s+1}, theta_{s+1}]`;
/// `x_0`, `theta_0` and the previously applied input are fixed.
pub struct WindowProblem<'a> {
    track: &'a TrackGeometry,
    params: &'a VehicleParams,
    cfg: &'a PlannerConfig,
    q: f64,
    x0: FullState,
    theta0: f64,
    u_prev: ControlInput,
    substeps: usize,
    np: usize,
}

struct Stage {
    u: ControlInput,
    x: Vector6<f64>,
    theta: f64,
}

impl WindowProblem<'_> {
    fn stage(&self, z: &DVector<f64>, s: usize) -> Stage {
        Stage {
            u: ControlInput::new(z[u_at(s)], z[u_at(s) + 1]),
            x: z.fixed_rows::<6>(x_at(s)).into_owned(),
            theta: z[th_at(s)],
        }
    }

    /// State and progress entering stage `s`.
    fn previous(&self, z: &DVector<f64>, s: usize) -> (Vector6<f64>, f64, ControlInput) {
        if s == 0 {
            (self.x0.to_vector(), self.theta0, self.u_prev)
        } else {
            let p = self.stage(z, s - 1);
            (p.x, p.theta, p.u)
        }
    }

    fn pack(&self, inputs: &[ControlInput], states: &[FullState], theta: &[f64]) -> DVector<f64> {
        let mut z = DVector::zeros(self.num_vars());
        for s in 0..self.np {
            z[u_at(s)] = inputs[s].delta;
            z[u_at(s) + 1] = inputs[s].duty;
            z.fixed_rows_mut::<6>(x_at(s)).copy_from(&states[s].to_vector());
            z[th_at(s)] = theta[s];
        }
        z
    }

    fn unpack(&self, z: &DVector<f64>) -> (Vec<ControlInput>, Vec<FullState>, Vec<f64>) {
        let mut u = Vec::with_capacity(self.np);
        let mut x = Vec::with_capacity(self.np);
        let mut t = Vec::with_capacity(self.np);
        for s in 0..self.np {
            let st = self.stage(z, s);
            u.push(st.u);
            x.push(FullState::from_vector(&st.x));
            t.push(st.theta);
        }
        (u, x, t)
    }

    fn weights(&self) -> (f64, f64, [f64; 2]) {
        (
            (2.0 * self.q).sqrt(),
            (2.0 * self.cfg.lag_weight).sqrt(),
            self.cfg.input_rate_weight.map(|w| (2.0 * w).sqrt()),
        )
    }
}

impl NlpProblem for WindowProblem<'_> {
    fn num_vars(&self) -> usize {
        STAGE * self.np
    }

    fn num_eq(&self) -> usize {
        EQ_PER_STAGE * self.np
    }

    fn num_ineq(&self) -> usize {
        INEQ_PER_STAGE * self.np
    }

    fn num_residuals(&self) -> usize {
        RES_PER_STAGE * self.np
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.num_vars();
        let mut lb = DVector::from_element(n, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(n, f64::INFINITY);
        for s in 0..self.np {
            for j in 0..NU {
                lb[u_at(s) + j] = self.cfg.input_lower[j];
                ub[u_at(s) + j] = self.cfg.input_upper[j];
            }
            lb[x_at(s) + 3] = self.cfg.vx_min;
            lb[x_at(s) + 4] = -self.cfg.vy_max;
            ub[x_at(s) + 4] = self.cfg.vy_max;
        }
        (lb, ub)
    }

    fn cost(&self, z: &DVector<f64>) -> f64 {
        0.5 * self.residuals(z).norm_squared() - self.cfg.r * z[th_at(self.np - 1)]
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut g = self.residual_jacobian(z).tr_mul(&self.residuals(z));
        g[th_at(self.np - 1)] -= self.cfg.r;
        g
    }

    fn residuals(&self, z: &DVector<f64>) -> DVector<f64> {
        let (wq, wl, wr) = self.weights();
        let mut r = DVector::zeros(self.num_residuals());
        for s in 0..self.np {
            let st = self.stage(z, s);
            let (xp, tp, up) = self.previous(z, s);
            let row = RES_PER_STAGE * s;
            r[row] = wq * self.track.contour_error(st.x[0], st.x[1], st.theta);
            r[row + 1] = wl * (st.theta - tp - xp[3] * self.cfg.ts);
            r[row + 2] = wr[0] * (st.u.delta - up.delta);
            r[row + 3] = wr[1] * (st.u.duty - up.duty);
        }
        r
    }

    fn residual_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let (wq, wl, wr) = self.weights();
        let mut jac = DMatrix::zeros(self.num_residuals(), self.num_vars());
        for s in 0..self.np {
            let st = self.stage(z, s);
            let row = RES_PER_STAGE * s;
            let ct = self.track.contour_terms(st.x[0], st.x[1], st.theta);
            jac[(row, x_at(s))] = wq * ct.sin;
            jac[(row, x_at(s) + 1)] = -wq * ct.cos;
            jac[(row, th_at(s))] = wq * ct.d_contour_dtheta;
            jac[(row + 1, th_at(s))] = wl;
            jac[(row + 2, u_at(s))] = wr[0];
            jac[(row + 3, u_at(s) + 1)] = wr[1];
            if s > 0 {
                jac[(row + 1, th_at(s - 1))] = -wl;
                jac[(row + 1, x_at(s - 1) + 3)] = -wl * self.cfg.ts;
                jac[(row + 2, u_at(s - 1))] = -wr[0];
                jac[(row + 3, u_at(s - 1) + 1)] = -wr[1];
            }
        }
        jac
    }

    fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut c = DVector::zeros(self.num_eq());
        for s in 0..self.np {
            let st = self.stage(z, s);
            let (xp, _, _) = self.previous(z, s);
            let next = full_step(&FullState::from_vector(&xp), &st.u, self.params, self.cfg.ts, self.substeps)
                .map(|f| f.to_vector())
                .unwrap_or_else(|_| Vector6::from_element(f64::NAN));
            let row = EQ_PER_STAGE * s;
            c.fixed_rows_mut::<6>(row).copy_from(&(st.x - next));
            c[row + NX] = self.track.contour_terms(st.x[0], st.x[1], st.theta).lag;
        }
        c
    }

    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.num_eq(), self.num_vars());
        for s in 0..self.np {
            let st = self.stage(z, s);
            let (xp, _, _) = self.previous(z, s);
            let row = EQ_PER_STAGE * s;
            let (a, b) =
                match full_step_jacobian(&FullState::from_vector(&xp), &st.u, self.params, self.cfg.ts, self.substeps) {
                    Ok((_, a, b)) => (a, b),
                    Err(_) => (
                        nalgebra::Matrix6::from_element(f64::NAN),
                        nalgebra::Matrix6x2::from_element(f64::NAN),
                    ),
                };
            for r in 0..NX {
                jac[(row + r, x_at(s) + r)] = 1.0;
                for c in 0..NU {
                    jac[(row + r, u_at(s) + c)] = -b[(r, c)];
                }
                if s > 0 {
                    for c in 0..NX {
                        jac[(row + r, x_at(s - 1) + c)] = -a[(r, c)];
                    }
                }
            }
            let ct = self.track.contour_terms(st.x[0], st.x[1], st.theta);
            jac[(row + NX, x_at(s))] = ct.cos;
            jac[(row + NX, x_at(s) + 1)] = ct.sin;
            jac[(row + NX, th_at(s))] = ct.d_lag_dtheta;
        }
        jac
    }

    fn ineq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(self.num_ineq());
        for s in 0..self.np {
            let st = self.stage(z, s);
            let (_, tp, _) = self.previous(z, s);
            let e = self.track.contour_error(st.x[0], st.x[1], st.theta);
            let room = self.track.half_width(st.theta) - self.cfg.margin;
            let row = INEQ_PER_STAGE * s;
            g[row] = e - room;
            g[row + 1] = -e - room;
            g[row + 2] = tp - st.theta;
        }
        g
    }

    fn ineq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.num_ineq(), self.num_vars());
        for s in 0..self.np {
            let st = self.stage(z, s);
            let ct = self.track.contour_terms(st.x[0], st.x[1], st.theta);
            let (_, dw) = self.track.half_width_with_slope(st.theta);
            let row = INEQ_PER_STAGE * s;
            jac[(row, x_at(s))] = ct.sin;
            jac[(row, x_at(s) + 1)] = -ct.cos;
            jac[(row, th_at(s))] = ct.d_contour_dtheta - dw;
            jac[(row + 1, x_at(s))] = -ct.sin;
            jac[(row + 1, x_at(s) + 1)] = ct.cos;
            jac[(row + 1, th_at(s))] = -ct.d_contour_dtheta - dw;
            jac[(row + 2, th_at(s))] = -1.0;
            if s > 0 {
                jac[(row + 2, th_at(s - 1))] = 1.0;
            }
        }
        jac
    }

    fn pivot_hint(&self) -> Option<Vec<usize>> {
        Some(
            (0..self.np)
                .flat_map(|s| (0..NX).map(move |r| x_at(s) + r).chain(std::iter::once(th_at(s))))
                .collect(),
        )
    }
}

/// Steady-state duty cycle holding speed `v` on a straight.
pub fn cruise_duty(params: &VehicleParams, v: f64) -> f64 {
    (params.cr1 + params.cr2 * v * v) / (params.cm1 - params.cm2 * v)
}

/// Pure-pursuit rollout along the centerline used to seed windows.
fn pursuit_rollout(
    track: &TrackGeometry,
    params: &VehicleParams,
    cfg: &PlannerConfig,
    substeps: usize,
    x0: FullState,
    theta0: f64,
    steps: usize,
) -> (Vec<ControlInput>, Vec<FullState>, Vec<f64>) {
    const LATERAL_ACCEL: f64 = 4.0;
    let wheelbase = params.lf + params.lr;
    let v_cap = 0.9 * params.top_speed();
    let mut x = x0;
    let mut theta = theta0;
    let (mut us, mut xs, mut ts) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..steps {
        let lookahead = 0.4 + 0.25 * x.vx.max(0.0);
        let (tx, ty) = track.eval_centerline(theta + lookahead);
        let alpha = (ty - x.y).atan2(tx - x.x) - x.psi;
        let alpha = alpha.sin().atan2(alpha.cos());
        let delta = (2.0 * wheelbase * alpha.sin() / lookahead).atan();
        let kappa = (0..8)
            .map(|i| track.curvature(theta + 0.25 * i as f64).abs())
            .fold(0.0, f64::max);
        let v_target = v_cap.min((LATERAL_ACCEL / kappa.max(1e-6)).sqrt()).max(cfg.vx_min * 1.5);
        let duty = cruise_duty(params, v_target) + 2.0 * (v_target - x.vx);
        let u = cfg.u_clamp(ControlInput::new(delta, duty));
        x = full_step(&x, &u, params, cfg.ts, substeps).unwrap_or(x);
        x.vx = x.vx.max(cfg.vx_min);
        x.vy = x.vy.clamp(-cfg.vy_max, cfg.vy_max);
        theta = track.project(x.x, x.y, Some(theta)).max(theta);
        us.push(u);
        xs.push(x);
        ts.push(theta);
    }
    (us, xs, ts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowReport {
    pub theta_start: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub retries: usize,
    pub kkt_residual: f64,
}

/// Full planning output: the stitched trajectory and the extracted lap.
#[derive(Debug, Clone)]
pub struct PlanResult {
    pub raceline: RaceLine,
    /// committed plant states, starting with the initial state
    pub states: Vec<FullState>,
    /// `inputs[k]` drives `states[k]` to `states[k + 1]`
    pub inputs: Vec<ControlInput>,
    /// centerline progress of each committed state
    pub progress: Vec<f64>,
    /// state indices `[start, end)` of the extracted lap
    pub lap_range: (usize, usize),
    pub substeps: usize,
    pub ts: f64,
    pub windows: Vec<WindowReport>,
}

impl PlanResult {
    /// Time taken by the extracted lap along the committed trajectory.
    pub fn trajectory_lap_time(&self) -> f64 {
        (self.lap_range.1 - self.lap_range.0) as f64 * self.ts
    }
}

/// Plan a race line. Closed tracks are driven for `cfg.laps` laps from a
/// rolling start on the centerline and the last lap is extracted; open
/// tracks are driven once to near their end.
pub fn plan_raceline(
    track: &TrackGeometry,
    params: &VehicleParams,
    cfg: &PlannerConfig,
) -> Result<PlanResult, PlannerError> {
    cfg.validate()?;
    params.validate().map_err(|e| PlannerError::Config(e.to_string()))?;
    let substeps = stable_substeps(params, cfg.vx_min, cfg.ts, 4);
    let length = track.length();
    let closed = track.is_closed();
    let goal = if closed {
        cfg.laps as f64 * length
    } else {
        let reach = cfg.horizon as f64 * cfg.ts * params.top_speed();
        length - reach
    };
    if !(goal > 0.0) {
        return Err(PlannerError::Config(format!("open track of {length:.2} m is shorter than one horizon")));
    }

    let (px, py) = track.eval_centerline(0.0);
    let start = FullState {
        x: px,
        y: py,
        psi: track.heading(0.0),
        vx: cfg.initial_speed,
        vy: 0.0,
        omega: 0.0,
    };
    let mut states = vec![start];
    let mut inputs: Vec<ControlInput> = Vec::new();
    let mut progress = vec![0.0];
    let mut u_prev = ControlInput::new(0.0, cruise_duty(params, cfg.initial_speed));
    let mut warm: Option<(Vec<ControlInput>, Vec<FullState>, Vec<f64>)> = None;
    let mut windows = Vec::new();

    while *progress.last().unwrap() < goal {
        let x0 = *states.last().unwrap();
        let theta0 = *progress.last().unwrap();
        let (mut wu, mut wx, mut wt) = warm.take().unwrap_or_default();
        if wu.len() < cfg.horizon {
            let (seed_x, seed_t) = match (wx.last(), wt.last()) {
                (Some(x), Some(t)) => (*x, *t),
                _ => (x0, theta0),
            };
            let (eu, ex, et) = pursuit_rollout(track, params, cfg, substeps, seed_x, seed_t, cfg.horizon - wu.len());
            wu.extend(eu);
            wx.extend(ex);
            wt.extend(et);
        }

        let mut q = cfg.q;
        let mut retries = 0;
        let solved = loop {
            let problem = WindowProblem {
                track,
                params,
                cfg,
                q,
                x0,
                theta0,
                u_prev,
                substeps,
                np: cfg.horizon,
            };
            let z0 = problem.pack(&wu, &wx, &wt);
            let outcome = nlp::solve(&problem, &z0, &cfg.solver);
            if let Ok(sol) = &outcome {
                // a retry continues from where this attempt stopped
                (wu, wx, wt) = problem.unpack(&sol.z_star);
            }
            let feasible = match &outcome {
                Ok(sol) => {
                    sol.eq_violation <= cfg.accept_violation && sol.ineq_violation <= cfg.accept_violation
                }
                Err(_) => false,
            };
            if feasible {
                let sol = outcome.unwrap();
                if sol.status != SolveStatus::Converged {
                    log::debug!(
                        "planner window at theta {theta0:.3} stopped with {:?} (kkt {:.2e})",
                        sol.status,
                        sol.kkt_residual
                    );
                }
                windows.push(WindowReport {
                    theta_start: theta0,
                    status: sol.status,
                    iterations: sol.iterations,
                    retries,
                    kkt_residual: sol.kkt_residual,
                });
                break problem.unpack(&sol.z_star);
            }
            let reason = match outcome {
                Ok(sol) => format!(
                    "window infeasible (equality {:.2e}, inequality {:.2e})",
                    sol.eq_violation, sol.ineq_violation
                ),
                Err(e) => e.to_string(),
            };
            if retries >= cfg.max_retries {
                return Err(PlannerError::Stuck { theta: theta0, reason });
            }
            retries += 1;
            q *= 2.0;
            // even retries drop the failed iterate and restart from pursuit
            if retries % 2 == 0 {
                (wu, wx, wt) = pursuit_rollout(track, params, cfg, substeps, x0, theta0, cfg.horizon);
            }
            log::warn!("planner window at theta {theta0:.3}: {reason}; retry {retries} with contour weight {q:.3}");
        };

        let (su, sx, st) = solved;
        let keep = cfg.advance;
        // committed states are re-simulated so the stored trajectory is an
        // exact rollout of the stored inputs
        for u in &su[..keep] {
            let prev = *states.last().unwrap();
            let next = full_step(&prev, u, params, cfg.ts, substeps).map_err(|e| PlannerError::Stuck {
                theta: theta0,
                reason: e.to_string(),
            })?;
            let hint = *progress.last().unwrap();
            inputs.push(*u);
            states.push(next);
            progress.push(track.project(next.x, next.y, Some(hint)).max(hint));
        }
        u_prev = su[keep - 1];
        warm = Some((su[keep..].to_vec(), sx[keep..].to_vec(), st[keep..].to_vec()));
    }

    let lap_range = if closed {
        let lo = (cfg.laps - 1) as f64 * length;
        let hi = cfg.laps as f64 * length;
        let a = progress.partition_point(|&t| t < lo);
        let b = progress.partition_point(|&t| t < hi);
        (a, b)
    } else {
        (0, progress.partition_point(|&t| t <= goal) )
    };
    let raceline = extract_raceline(&states[lap_range.0..lap_range.1], track, closed, cfg.sample_spacing, cfg.margin)?;
    Ok(PlanResult {
        raceline,
        states,
        inputs,
        progress,
        lap_range,
        substeps,
        ts: cfg.ts,
        windows,
    })
}

/// Centerline-following baseline: the same planner confined to a narrow
/// corridor around the centerline, with identical input bounds.
pub fn plan_centerline(
    track: &TrackGeometry,
    params: &VehicleParams,
    cfg: &PlannerConfig,
) -> Result<PlanResult, PlannerError> {
    let narrowest = track
        .centerline
        .knots()
        .iter()
        .map(|&t| track.half_width(t))
        .fold(f64::INFINITY, f64::min);
    let cfg = PlannerConfig {
        margin: (narrowest - cfg.centerline_corridor).max(cfg.margin),
        ..cfg.clone()
    };
    plan_raceline(track, params, &cfg)
}

/// Build a race line from consecutive plant states; its parameter is the
/// travelled chord length.
fn extract_raceline(
    states: &[FullState],
    track: &TrackGeometry,
    closed: bool,
    spacing: f64,
    margin: f64,
) -> Result<RaceLine, PlannerError> {
    if states.len() < 4 {
        return Err(PlannerError::Stuck {
            theta: 0.0,
            reason: "too few committed states to form a race line".into(),
        });
    }
    // align the heading with the track so the first lap starts near psi(0)
    let offset = 2.0 * PI * ((states[0].psi - track.heading(0.0)) / (2.0 * PI)).round();
    let mut samples = Vec::with_capacity(states.len());
    let mut theta = 0.0;
    for (i, s) in states.iter().enumerate() {
        if i > 0 {
            let p = &states[i - 1];
            theta += (s.x - p.x).hypot(s.y - p.y);
        }
        samples.push(RaceLineSample {
            theta,
            x: s.x,
            y: s.y,
            psi: s.psi - offset,
            v: s.speed(),
        });
    }
    let last = states.last().unwrap();
    let lap_length = theta + (states[0].x - last.x).hypot(states[0].y - last.y);
    let raw = RaceLine::new(samples, lap_length, closed)?;
    let smooth = resample_raceline(&raw, spacing)?;
    // interpolation between committed states can bulge past the corridor by
    // a few millimetres in tight corners; pull such samples back along the normal
    let mut hint = None;
    let clipped: Vec<RaceLineSample> = smooth
        .samples()
        .iter()
        .map(|s| {
            let th = track.project(s.x, s.y, hint);
            hint = Some(th);
            let ct = track.contour_terms(s.x, s.y, th);
            let room = track.half_width(th) - margin;
            let excess = ct.contour.abs() - room;
            if excess <= 0.0 {
                return *s;
            }
            // (sin, -cos) is the direction of increasing contour error
            let k = excess * ct.contour.signum();
            RaceLineSample {
                x: s.x - k * ct.sin,
                y: s.y + k * ct.cos,
                ..*s
            }
        })
        .collect();
    Ok(RaceLine::new(clipped, smooth.lap_length(), closed)?)
}

/// Cubic interpolation of every race-line channel onto a uniform grid.
pub fn resample_raceline(rl: &RaceLine, d_theta: f64) -> Result<RaceLine, RaceLineError> {
    rl.resample(d_theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::track::{fit_track, Waypoint, Waypoints};

    fn straight(length: f64) -> TrackGeometry {
        let n = (length / 0.5) as usize;
        let points = (0..=n)
            .map(|i| Waypoint {
                x: length * i as f64 / n as f64,
                y: 0.0,
                half_width: 0.4,
            })
            .collect();
        fit_track(&Waypoints::new(points), false).unwrap()
    }

    #[test]
    fn cruise_duty_balances_resistance() {
        let p = VehicleParams::default();
        let v = 2.0;
        let d = cruise_duty(&p, v);
        assert!(crate::dynamics::longitudinal_force(v, d, &p).abs() < 1e-12);
    }

    #[test]
    fn window_derivatives_match_finite_differences() {
        let track = straight(20.0);
        let params = VehicleParams::default();
        let cfg = PlannerConfig {
            horizon: 6,
            ..PlannerConfig::default()
        };
        let substeps = stable_substeps(&params, cfg.vx_min, cfg.ts, 4);
        let x0 = FullState {
            x: 0.0,
            y: 0.05,
            psi: 0.1,
            vx: 1.5,
            vy: 0.05,
            omega: 0.2,
        };
        let (u, x, t) = pursuit_rollout(&track, &params, &cfg, substeps, x0, 0.0, 6);
        let problem = WindowProblem {
            track: &track,
            params: &params,
            cfg: &cfg,
            q: cfg.q,
            x0,
            theta0: 0.0,
            u_prev: ControlInput::new(0.0, 0.2),
            substeps,
            np: 6,
        };
        let z = problem.pack(&u, &x, &t);
        assert!(nlp::check_gradient(&problem, &z) <= 1e-4);
        // constraint Jacobians against central differences
        let h = 1e-6;
        let je = problem.eq_jacobian(&z);
        let ji = problem.ineq_jacobian(&z);
        for j in 0..z.len() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let fe = (problem.eq_constraints(&zp) - problem.eq_constraints(&zm)) / (2.0 * h);
            let fi = (problem.ineq_constraints(&zp) - problem.ineq_constraints(&zm)) / (2.0 * h);
            assert!((fe - je.column(j)).amax() < 1e-5, "eq column {j}");
            assert!((fi - ji.column(j)).amax() < 1e-5, "ineq column {j}");
        }
    }

    #[test]
    fn straight_reaches_top_speed() {
        let track = straight(40.0);
        let params = VehicleParams::default();
        let cfg = PlannerConfig::default();
        let plan = plan_raceline(&track, &params, &cfg).unwrap();
        let vmax = plan.states.iter().map(|s| s.vx).fold(0.0, f64::max);
        let root = params.top_speed();
        assert!(vmax <= root * 1.001, "{vmax} exceeds {root}");
        assert!(vmax >= 0.98 * root, "{vmax} short of {root}");
        // full throttle until close to the root
        let saturated = plan.inputs.iter().take(20).all(|u| u.duty >= 0.999);
        assert!(saturated);
        for s in &plan.states {
            assert!(s.y.abs() <= 0.3 + 1e-6);
        }
    }
}
