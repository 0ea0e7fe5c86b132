//! Receding-horizon tracking controller on the kinematic model.
//!
//! Multiple-shooting transcription over input increments: the decision
//! vector holds, per stage `k = 0..N-1`, the increment `du_k` followed by the
//! state `x_{k+1}`. The applied input of stage `k` is
//! `u_k = u_prev + du_0 + ... + du_k`, and `x_0` is the current estimate.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{reduced_step_jacobian, ControlInput, ReducedState, VehicleParams};
use crate::nlp::{self, NlpProblem, SolveStatus, SolverOptions};
use crate::raceline::RaceLine;
use crate::track::TrackGeometry;

const NX: usize = 4;
const NU: usize = 2;
const STAGE: usize = NX + NU;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("invalid controller configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmpcConfig {
    pub horizon: usize,
    pub ts: f64,
    /// diagonal of Q over (X, Y, psi, v)
    pub q: [f64; 4],
    /// diagonal of R over (d delta, d D)
    pub r: [f64; 2],
    /// diagonal of the terminal weight P
    pub p: [f64; 4],
    pub input_lower: [f64; 2],
    pub input_upper: [f64; 2],
    /// symmetric per-step increment bounds
    pub rate_max: [f64; 2],
    pub v_min: f64,
    /// distance kept from each boundary, m
    pub margin: f64,
    pub solver: SolverOptions,
}

impl Default for NmpcConfig {
    fn default() -> Self {
        let q = [0.015, 0.015, 0.0, 0.0];
        NmpcConfig {
            horizon: 16,
            ts: 0.033,
            q,
            r: [0.3, 0.0025],
            p: [10.0 * q[0], 10.0 * q[1], 0.0, 0.0],
            input_lower: [-PI / 6.0, -1.0],
            input_upper: [PI / 6.0, 1.0],
            rate_max: [0.12, 0.2],
            v_min: 0.0,
            margin: 0.05,
            solver: SolverOptions {
                max_iterations: 15,
                tolerance: 1e-6,
                ..SolverOptions::default()
            },
        }
    }
}

impl NmpcConfig {
    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |m: String| Err(ControlError::Config(m));
        if self.horizon < 1 {
            return bad("horizon must be at least 1".into());
        }
        if !(self.ts > 0.0) {
            return bad(format!("ts must be positive, got {}", self.ts));
        }
        if self.q.iter().chain(&self.r).chain(&self.p).any(|w| !(*w >= 0.0)) {
            return bad("weights must be non-negative".into());
        }
        for i in 0..NU {
            if !(self.input_lower[i] < self.input_upper[i]) {
                return bad(format!("input bound {i} has lower >= upper"));
            }
            if !(self.rate_max[i] > 0.0) {
                return bad(format!("rate bound {i} must be positive"));
            }
        }
        if !(self.margin >= 0.0) {
            return bad("margin must be non-negative".into());
        }
        Ok(())
    }
}

/// Targets `r_1..r_N` and their race-line parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWindow {
    pub theta: Vec<f64>,
    pub states: Vec<ReducedState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    /// x_1..x_N
    pub states: Vec<Vector4<f64>>,
    /// du_0..du_{N-1}
    pub increments: Vec<Vector2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControllerState {
    pub last_input: ControlInput,
    pub warm: Option<WarmStart>,
    /// previous race-line projection
    pub theta_hint: Option<f64>,
    /// previous centerline projection
    pub track_hint: Option<f64>,
}

/// Additive one-step correction on top of the nominal kinematic prediction.
pub trait PredictionModel: Send + Sync {
    fn name(&self) -> &str;

    fn correction(&self, x: &ReducedState, u: &ControlInput) -> Vector4<f64>;
}

/// Uncorrected kinematic prediction.
#[derive(Debug, Clone, Copy, Default)]
pub struct NominalModel;

impl PredictionModel for NominalModel {
    fn name(&self) -> &str {
        "nominal"
    }

    fn correction(&self, _x: &ReducedState, _u: &ControlInput) -> Vector4<f64> {
        Vector4::zeros()
    }
}

pub fn build_reference(rl: &RaceLine, x_hat: &ReducedState, cs: &ControllerState, cfg: &NmpcConfig) -> ReferenceWindow {
    let theta0 = rl.project(x_hat.x, x_hat.y, cs.theta_hint);
    let mut theta = Vec::with_capacity(cfg.horizon);
    let mut states = Vec::with_capacity(cfg.horizon);
    let mut t = theta0;
    for _ in 0..cfg.horizon {
        t += rl.speed(t).max(1e-3) * cfg.ts;
        let mut pose = rl.pose(t);
        pose.psi = unwrap_near(pose.psi, x_hat.psi);
        theta.push(t);
        states.push(pose);
    }
    ReferenceWindow { theta, states }
}

fn unwrap_near(angle: f64, reference: f64) -> f64 {
    angle + 2.0 * PI * ((reference - angle) / (2.0 * PI)).round()
}

/// One residual `weight * (z[index] - target)`.
#[derive(Debug, Clone, Copy)]
struct Residual {
    index: usize,
    weight: f64,
    target: f64,
}

/// Linear boundary row `sin (X - xr) - cos (Y - yr)` bounded by `limit`.
#[derive(Debug, Clone, Copy)]
struct Boundary {
    sin: f64,
    cos: f64,
    xr: f64,
    yr: f64,
    limit: f64,
}

/// The tracking NLP for one sampling instant.
pub struct TrackingOcp {
    params: VehicleParams,
    n: usize,
    ts: f64,
    x0: Vector4<f64>,
    u_prev: Vector2<f64>,
    offsets: Vec<Vector4<f64>>,
    residuals: Vec<Residual>,
    boundaries: Vec<Boundary>,
    input_lower: [f64; 2],
    input_upper: [f64; 2],
    rate_max: [f64; 2],
    v_min: f64,
}

fn du_index(k: usize) -> usize {
    STAGE * k
}

/// Position of `x_j`, `j = 1..N`.
fn x_index(j: usize) -> usize {
    STAGE * (j - 1) + NU
}

impl TrackingOcp {
    pub fn horizon(&self) -> usize {
        self.n
    }

    fn state(&self, z: &DVector<f64>, j: usize) -> Vector4<f64> {
        if j == 0 {
            self.x0
        } else {
            let i = x_index(j);
            Vector4::new(z[i], z[i + 1], z[i + 2], z[i + 3])
        }
    }

    fn inputs(&self, z: &DVector<f64>) -> Vec<Vector2<f64>> {
        let mut u = self.u_prev;
        (0..self.n)
            .map(|k| {
                let i = du_index(k);
                u += Vector2::new(z[i], z[i + 1]);
                u
            })
            .collect()
    }

    /// Decision vector from a warm start.
    pub fn pack(&self, warm: &WarmStart) -> DVector<f64> {
        let mut z = DVector::zeros(STAGE * self.n);
        for k in 0..self.n {
            z.fixed_rows_mut::<2>(du_index(k)).copy_from(&warm.increments[k]);
            z.fixed_rows_mut::<4>(x_index(k + 1)).copy_from(&warm.states[k]);
        }
        z
    }

    pub fn unpack(&self, z: &DVector<f64>) -> WarmStart {
        WarmStart {
            states: (1..=self.n).map(|j| self.state(z, j)).collect(),
            increments: (0..self.n)
                .map(|k| Vector2::new(z[du_index(k)], z[du_index(k) + 1]))
                .collect(),
        }
    }

    /// Applied inputs `u_0..u_{N-1}` of a decision vector.
    pub fn applied_inputs(&self, z: &DVector<f64>) -> Vec<ControlInput> {
        self.inputs(z).iter().map(ControlInput::from_vector).collect()
    }

    fn step(&self, x: &Vector4<f64>, u: &Vector2<f64>) -> (Vector4<f64>, nalgebra::Matrix4<f64>, nalgebra::Matrix4x2<f64>) {
        match reduced_step_jacobian(&ReducedState::from_vector(x), &ControlInput::from_vector(u), &self.params, self.ts) {
            Ok(r) => r,
            Err(_) => (
                Vector4::from_element(f64::NAN),
                nalgebra::Matrix4::from_element(f64::NAN),
                nalgebra::Matrix4x2::from_element(f64::NAN),
            ),
        }
    }
}

impl NlpProblem for TrackingOcp {
    fn num_vars(&self) -> usize {
        STAGE * self.n
    }

    fn num_eq(&self) -> usize {
        NX * self.n
    }

    fn num_ineq(&self) -> usize {
        2 * NU * self.n + 2 * self.boundaries.len()
    }

    fn num_residuals(&self) -> usize {
        self.residuals.len()
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let nv = self.num_vars();
        let mut lb = DVector::from_element(nv, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(nv, f64::INFINITY);
        for k in 0..self.n {
            for i in 0..NU {
                lb[du_index(k) + i] = -self.rate_max[i];
                ub[du_index(k) + i] = self.rate_max[i];
            }
            lb[x_index(k + 1) + 3] = self.v_min;
        }
        (lb, ub)
    }

    fn cost(&self, z: &DVector<f64>) -> f64 {
        self.residuals
            .iter()
            .map(|r| {
                let e = r.weight * (z[r.index] - r.target);
                0.5 * e * e
            })
            .sum()
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(z.len());
        for r in &self.residuals {
            g[r.index] += r.weight * r.weight * (z[r.index] - r.target);
        }
        g
    }

    fn residuals(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.residuals.len(),
            self.residuals.iter().map(|r| r.weight * (z[r.index] - r.target)),
        )
    }

    fn residual_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.residuals.len(), z.len());
        for (row, r) in self.residuals.iter().enumerate() {
            j[(row, r.index)] = r.weight;
        }
        j
    }

    fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        let u = self.inputs(z);
        let mut c = DVector::zeros(NX * self.n);
        for k in 0..self.n {
            let (next, _, _) = self.step(&self.state(z, k), &u[k]);
            let r = self.state(z, k + 1) - next - self.offsets[k];
            c.fixed_rows_mut::<4>(NX * k).copy_from(&r);
        }
        c
    }

    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let u = self.inputs(z);
        let mut jac = DMatrix::zeros(NX * self.n, z.len());
        for k in 0..self.n {
            let (_, a, b) = self.step(&self.state(z, k), &u[k]);
            let row = NX * k;
            for i in 0..NX {
                jac[(row + i, x_index(k + 1) + i)] = 1.0;
            }
            if k > 0 {
                let col = x_index(k);
                for i in 0..NX {
                    for j in 0..NX {
                        jac[(row + i, col + j)] = -a[(i, j)];
                    }
                }
            }
            for m in 0..=k {
                let col = du_index(m);
                for i in 0..NX {
                    for j in 0..NU {
                        jac[(row + i, col + j)] = -b[(i, j)];
                    }
                }
            }
        }
        jac
    }

    fn ineq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        let u = self.inputs(z);
        let mut g = DVector::zeros(self.num_ineq());
        let mut row = 0;
        for uk in &u {
            for i in 0..NU {
                g[row] = self.input_lower[i] - uk[i];
                g[row + 1] = uk[i] - self.input_upper[i];
                row += 2;
            }
        }
        for (j, b) in self.boundaries.iter().enumerate() {
            let x = self.state(z, j + 1);
            let e = b.sin * (x[0] - b.xr) - b.cos * (x[1] - b.yr);
            g[row] = e - b.limit;
            g[row + 1] = -e - b.limit;
            row += 2;
        }
        g
    }

    fn ineq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.num_ineq(), z.len());
        let mut row = 0;
        for k in 0..self.n {
            for i in 0..NU {
                for m in 0..=k {
                    jac[(row, du_index(m) + i)] = -1.0;
                    jac[(row + 1, du_index(m) + i)] = 1.0;
                }
                row += 2;
            }
        }
        for (j, b) in self.boundaries.iter().enumerate() {
            let col = x_index(j + 1);
            jac[(row, col)] = b.sin;
            jac[(row, col + 1)] = -b.cos;
            jac[(row + 1, col)] = -b.sin;
            jac[(row + 1, col + 1)] = b.cos;
            row += 2;
        }
        jac
    }

    fn pivot_hint(&self) -> Option<Vec<usize>> {
        Some((0..self.n).flat_map(|k| (0..NX).map(move |i| x_index(k + 1) + i)).collect())
    }

    fn hard_ineq(&self, row: usize) -> bool {
        row < 2 * NU * self.n
    }
}

/// Warm start, or the cold-start rule (replicated estimate, zero increments).
fn initial_guess(x_hat: &ReducedState, cs: &ControllerState, n: usize) -> WarmStart {
    match &cs.warm {
        Some(w) if w.states.len() == n && w.increments.len() == n => w.clone(),
        _ => WarmStart {
            states: vec![x_hat.to_vector(); n],
            increments: vec![Vector2::zeros(); n],
        },
    }
}

#[allow(clippy::too_many_arguments)]
pub fn build_ocp(
    x_hat: &ReducedState,
    reference: &ReferenceWindow,
    cs: &ControllerState,
    cfg: &NmpcConfig,
    params: &VehicleParams,
    model: &dyn PredictionModel,
    track: Option<&TrackGeometry>,
) -> (TrackingOcp, DVector<f64>) {
    let n = cfg.horizon;
    let warm = initial_guess(x_hat, cs, n);
    let u_prev = cs.last_input.to_vector();

    let mut offsets = Vec::with_capacity(n);
    let mut u = u_prev;
    for k in 0..n {
        u += warm.increments[k];
        let xk = if k == 0 {
            *x_hat
        } else {
            ReducedState::from_vector(&warm.states[k - 1])
        };
        offsets.push(model.correction(&xk, &ControlInput::from_vector(&u)));
    }

    let mut residuals = Vec::new();
    for j in 1..=n {
        let r = reference.states[j - 1].to_vector();
        for i in 0..NX {
            let mut w2 = 2.0 * cfg.q[i];
            if j == n {
                w2 += 2.0 * cfg.p[i];
            }
            if w2 > 0.0 {
                residuals.push(Residual {
                    index: x_index(j) + i,
                    weight: w2.sqrt(),
                    target: r[i],
                });
            }
        }
    }
    for k in 0..n {
        for i in 0..NU {
            if cfg.r[i] > 0.0 {
                residuals.push(Residual {
                    index: du_index(k) + i,
                    weight: (2.0 * cfg.r[i]).sqrt(),
                    target: 0.0,
                });
            }
        }
    }

    let mut boundaries = Vec::new();
    if let Some(track) = track {
        let mut hint = Some(track.project(x_hat.x, x_hat.y, cs.track_hint));
        for s in &warm.states {
            let th = track.project(s[0], s[1], hint);
            hint = Some(th);
            let terms = track.contour_terms(s[0], s[1], th);
            let (xr, yr) = track.eval_centerline(th);
            boundaries.push(Boundary {
                sin: terms.sin,
                cos: terms.cos,
                xr,
                yr,
                limit: (track.half_width(th) - cfg.margin).max(0.0),
            });
        }
    }

    let ocp = TrackingOcp {
        params: *params,
        n,
        ts: cfg.ts,
        x0: x_hat.to_vector(),
        u_prev,
        offsets,
        residuals,
        boundaries,
        input_lower: cfg.input_lower,
        input_upper: cfg.input_upper,
        rate_max: cfg.rate_max,
        v_min: cfg.v_min,
    };
    let z0 = ocp.pack(&warm);
    (ocp, z0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlDiagnostics {
    pub cost: f64,
    pub kkt_residual: f64,
    /// seconds, around the NLP solve only
    pub solve_time: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    /// the solver hit its cap, failed a step or errored
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlOutput {
    pub input: ControlInput,
    pub reference: ReferenceWindow,
    /// predicted x_1..x_N
    pub predicted: Vec<ReducedState>,
    pub diagnostics: ControlDiagnostics,
}

/// One controller update: reference, transcription, warm-started solve,
/// first increment applied, state shifted for the next call.
#[allow(clippy::too_many_arguments)]
pub fn step(
    cs: &mut ControllerState,
    x_hat: &ReducedState,
    rl: &RaceLine,
    cfg: &NmpcConfig,
    params: &VehicleParams,
    model: &dyn PredictionModel,
    track: Option<&TrackGeometry>,
) -> ControlOutput {
    let reference = build_reference(rl, x_hat, cs, cfg);
    let (ocp, z0) = build_ocp(x_hat, &reference, cs, cfg, params, model, track);
    cs.theta_hint = Some(rl.project(x_hat.x, x_hat.y, cs.theta_hint));
    if let Some(track) = track {
        cs.track_hint = Some(track.project(x_hat.x, x_hat.y, cs.track_hint));
    }
    let started = std::time::Instant::now();
    let result = nlp::solve(&ocp, &z0, &cfg.solver);
    let solve_time = started.elapsed().as_secs_f64();
    let n = cfg.horizon;
    match result {
        Ok(sol) if sol.status == SolveStatus::InfeasibleStep && cs.warm.is_some() => {
            log::debug!("tracking solve stopped on an infeasible step; following the previous plan");
            fallback_output(x_hat, reference, cs, cfg, solve_time, sol.iterations)
        }
        Ok(sol) => {
            let inputs = ocp.applied_inputs(&sol.z_star);
            let mut u0 = inputs[0];
            u0.delta = u0.delta.clamp(cfg.input_lower[0], cfg.input_upper[0]);
            u0.duty = u0.duty.clamp(cfg.input_lower[1], cfg.input_upper[1]);
            let w = ocp.unpack(&sol.z_star);
            let predicted = w.states.iter().map(ReducedState::from_vector).collect();
            let mut states = w.states[1..].to_vec();
            states.push(w.states[n - 1]);
            let mut increments = w.increments[1..].to_vec();
            increments.push(w.increments[n - 1]);
            cs.warm = Some(WarmStart { states, increments });
            cs.last_input = u0;
            let degraded = sol.status != SolveStatus::Converged;
            ControlOutput {
                input: u0,
                reference,
                predicted,
                diagnostics: ControlDiagnostics {
                    cost: sol.cost_value,
                    kkt_residual: sol.kkt_residual,
                    solve_time,
                    status: sol.status,
                    iterations: sol.iterations,
                    degraded,
                },
            }
        }
        Err(err) => {
            log::warn!("tracking solve failed: {err}");
            fallback_output(x_hat, reference, cs, cfg, solve_time, 0)
        }
    }
}

/// Apply the next input of the previous plan and shift that plan; holds the
/// last input when no plan is left.
fn fallback_output(
    x_hat: &ReducedState,
    reference: ReferenceWindow,
    cs: &mut ControllerState,
    cfg: &NmpcConfig,
    solve_time: f64,
    iterations: usize,
) -> ControlOutput {
    let n = cfg.horizon;
    let mut input = cs.last_input;
    let mut predicted = vec![*x_hat; n];
    if let Some(w) = cs.warm.take() {
        let du = w.increments[0];
        input.delta = (input.delta + du[0]).clamp(cfg.input_lower[0], cfg.input_upper[0]);
        input.duty = (input.duty + du[1]).clamp(cfg.input_lower[1], cfg.input_upper[1]);
        predicted = std::iter::once(*x_hat)
            .chain(w.states.iter().take(n - 1).map(ReducedState::from_vector))
            .collect();
        if w.increments.len() > 1 {
            let mut states = w.states[1..].to_vec();
            states.push(w.states[w.states.len() - 1]);
            let mut increments = w.increments[1..].to_vec();
            increments.push(Vector2::zeros());
            cs.warm = Some(WarmStart { states, increments });
        }
    }
    cs.last_input = input;
    ControlOutput {
        input,
        predicted,
        reference,
        diagnostics: ControlDiagnostics {
            cost: f64::NAN,
            kkt_residual: f64::INFINITY,
            solve_time,
            status: SolveStatus::InfeasibleStep,
            iterations,
            degraded: true,
        },
    }
}

/// Tracking controller bound to its configuration and prediction model.
pub struct Nmpc {
    pub cfg: NmpcConfig,
    pub params: VehicleParams,
    model: Box<dyn PredictionModel>,
    pub state: ControllerState,
}

impl Nmpc {
    pub fn new(cfg: NmpcConfig, params: VehicleParams) -> Result<Self, ControlError> {
        cfg.validate()?;
        Ok(Nmpc {
            cfg,
            params,
            model: Box::new(NominalModel),
            state: ControllerState::default(),
        })
    }

    pub fn model(&self) -> &dyn PredictionModel {
        self.model.as_ref()
    }

    pub fn set_model(&mut self, model: Box<dyn PredictionModel>) {
        self.model = model;
    }

    pub fn reset(&mut self, last_input: ControlInput) {
        self.state = ControllerState {
            last_input,
            ..ControllerState::default()
        };
    }

    pub fn step(&mut self, x_hat: &ReducedState, rl: &RaceLine, track: Option<&TrackGeometry>) -> ControlOutput {
        step(&mut self.state, x_hat, rl, &self.cfg, &self.params, self.model.as_ref(), track)
    }
}
