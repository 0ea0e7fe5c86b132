//! Vehicle models: the six-state dynamic bicycle model with Pacejka lateral
//! tires (used as the simulated plant and by the offline planner) and the
//! four-state slip-free kinematic model used by the controller and estimator.

use nalgebra::{Matrix4, Matrix4x2, Matrix6, Matrix6x2, SVector, Vector2, Vector4, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum longitudinal speed magnitude used in the slip-angle quotients.
pub const SLIP_SPEED_GUARD: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("non-finite {field} ({value}) passed to {op}")]
    NonFinite {
        op: &'static str,
        field: &'static str,
        value: f64,
    },
    #[error("integration produced a non-finite state after a {ts} s step")]
    Integration { ts: f64 },
    #[error("invalid vehicle parameters: {0}")]
    Params(String),
}

/// Sign convention for the front lateral force in the lateral velocity ODE.
///
/// `AsPrinted` subtracts `Fyf cos(delta)`; with `lf == lr` that variant has
/// zero steady-state yaw gain, so the default is the usual bicycle-model
/// form which adds it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FrontForceSign {
    #[default]
    Standard,
    AsPrinted,
}

impl FrontForceSign {
    fn factor(self) -> f64 {
        match self {
            FrontForceSign::Standard => 1.0,
            FrontForceSign::AsPrinted => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    pub m: f64,
    pub iz: f64,
    pub lf: f64,
    pub lr: f64,
    pub bf: f64,
    pub cf: f64,
    pub df: f64,
    pub br: f64,
    pub cr: f64,
    pub dr: f64,
    pub cm1: f64,
    pub cm2: f64,
    /// Constant rolling resistance (specific force).
    pub cr1: f64,
    /// Quadratic drag coefficient.
    pub cr2: f64,
    pub front_force_sign: FrontForceSign,
}

impl Default for VehicleParams {
    fn default() -> Self {
        VehicleParams {
            m: 1.98,
            iz: 0.1217,
            lf: 0.125,
            lr: 0.125,
            bf: 29.5,
            cf: 0.087,
            df: 42.53,
            br: 26.97,
            cr: 0.163,
            dr: 161.59,
            cm1: 12.0,
            cm2: 2.17,
            cr1: 0.6,
            cr2: 0.1,
            front_force_sign: FrontForceSign::Standard,
        }
    }
}

impl VehicleParams {
    pub fn g1(&self) -> f64 {
        self.lr / (self.lr + self.lf)
    }

    pub fn g2(&self) -> f64 {
        1.0 / (self.lr + self.lf)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [
            ("m", self.m),
            ("iz", self.iz),
            ("lf", self.lf),
            ("lr", self.lr),
            ("bf", self.bf),
            ("cf", self.cf),
            ("df", self.df),
            ("br", self.br),
            ("cr", self.cr),
            ("dr", self.dr),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(DynamicsError::Params(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("cm1", self.cm1), ("cm2", self.cm2), ("cr1", self.cr1), ("cr2", self.cr2)] {
            if !v.is_finite() {
                return Err(DynamicsError::Params(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    /// Speed at which full throttle balances drag and rolling resistance on a
    /// straight (positive root of the steady-state longitudinal equation).
    pub fn top_speed(&self) -> f64 {
        // cr2 v^2 + cm2 v - (cm1 - cr1) = 0
        let (a, b, c) = (self.cr2, self.cm2, -(self.cm1 - self.cr1));
        if a.abs() < 1e-15 {
            return -c / b;
        }
        (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)
    }

    /// Upper bound on the magnitude of the lateral-dynamics eigenvalues at
    /// speed `vx`, used to pick stable integration sub-steps.
    pub fn lateral_stiffness(&self, vx: f64) -> f64 {
        let ca_f = self.bf * self.cf * self.df;
        let ca_r = self.br * self.cr * self.dr;
        let v = vx.abs().max(SLIP_SPEED_GUARD);
        ((ca_f + ca_r) / self.m + (ca_f * self.lf * self.lf + ca_r * self.lr * self.lr) / self.iz) / v
    }
}

/// Plant state: global position, heading (unwrapped), body-frame velocities
/// and yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FullState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub vx: f64,
    pub vy: f64,
    pub omega: f64,
}

/// Controller/estimator state: position, heading and speed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReducedState {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

/// Steering angle and motor duty cycle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub delta: f64,
    pub duty: f64,
}

/// Time derivative of an `N`-dimensional state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative<const N: usize>(pub SVector<f64, N>);

impl<const N: usize> StateDerivative<N> {
    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl FullState {
    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.x, self.y, self.psi, self.vx, self.vy, self.omega)
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        FullState {
            x: v[0],
            y: v[1],
            psi: v[2],
            vx: v[3],
            vy: v[4],
            omega: v[5],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }

    pub fn speed(&self) -> f64 {
        self.vx.hypot(self.vy)
    }
}

impl ReducedState {
    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.x, self.y, self.psi, self.v)
    }

    pub fn from_vector(v: &Vector4<f64>) -> Self {
        ReducedState {
            x: v[0],
            y: v[1],
            psi: v[2],
            v: v[3],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

impl ControlInput {
    pub fn new(delta: f64, duty: f64) -> Self {
        ControlInput { delta, duty }
    }

    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.delta, self.duty)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        ControlInput {
            delta: v[0],
            duty: v[1],
        }
    }
}

fn check_finite(op: &'static str, fields: &[(&'static str, f64)]) -> Result<(), DynamicsError> {
    for &(field, value) in fields {
        if !value.is_finite() {
            return Err(DynamicsError::NonFinite { op, field, value });
        }
    }
    Ok(())
}

fn guarded_vx(vx: f64) -> (f64, f64) {
    // returns (guarded value, d guarded / d vx)
    if vx.abs() >= SLIP_SPEED_GUARD {
        (vx, 1.0)
    } else if vx < 0.0 {
        (-SLIP_SPEED_GUARD, 0.0)
    } else {
        (SLIP_SPEED_GUARD, 0.0)
    }
}

/// Front and rear tire slip angles.
pub fn slip_angles(state: &FullState, delta: f64, params: &VehicleParams) -> Result<(f64, f64), DynamicsError> {
    check_finite(
        "slip_angles",
        &[
            ("vx", state.vx),
            ("vy", state.vy),
            ("omega", state.omega),
            ("delta", delta),
        ],
    )?;
    let (vx, _) = guarded_vx(state.vx);
    let alpha_f = delta - ((state.vy + params.lf * state.omega) / vx).atan();
    let alpha_r = ((params.lr * state.omega - state.vy) / vx).atan();
    Ok((alpha_f, alpha_r))
}

fn pacejka(alpha: f64, b: f64, c: f64, d: f64) -> f64 {
    d * (c * (b * alpha).atan()).sin()
}

fn pacejka_slope(alpha: f64, b: f64, c: f64, d: f64) -> f64 {
    let ba = b * alpha;
    d * (c * ba.atan()).cos() * c * b / (1.0 + ba * ba)
}

/// Pacejka lateral forces (N) for front and rear axle.
pub fn tire_lateral_forces(alpha_f: f64, alpha_r: f64, params: &VehicleParams) -> (f64, f64) {
    (
        pacejka(alpha_f, params.bf, params.cf, params.df),
        pacejka(alpha_r, params.br, params.cr, params.dr),
    )
}

/// Rear drive force per unit mass (m/s^2): DC motor with rolling resistance and drag.
pub fn longitudinal_force(vx: f64, duty: f64, params: &VehicleParams) -> f64 {
    (params.cm1 - params.cm2 * vx) * duty - params.cr1 - params.cr2 * vx * vx
}

/// Right-hand side of the dynamic bicycle model.
pub fn full_dynamics(
    state: &FullState,
    u: &ControlInput,
    params: &VehicleParams,
) -> Result<StateDerivative<6>, DynamicsError> {
    check_finite("full_dynamics", &[("x", state.x), ("y", state.y), ("psi", state.psi), ("duty", u.duty)])?;
    let (alpha_f, alpha_r) = slip_angles(state, u.delta, params)?;
    let (fyf, fyr) = tire_lateral_forces(alpha_f, alpha_r, params);
    let fx = longitudinal_force(state.vx, u.duty, params);
    let (s, c) = state.psi.sin_cos();
    let (sd, cd) = u.delta.sin_cos();
    let m = params.m;
    let mut dvx = (m * fx - fyf * sd + m * state.vy * state.omega) / m;
    if state.vx <= 0.0 && dvx < 0.0 {
        dvx = 0.0;
    }
    let sign = params.front_force_sign.factor();
    Ok(StateDerivative(Vector6::new(
        state.vx * c - state.vy * s,
        state.vx * s + state.vy * c,
        state.omega,
        dvx,
        (fyr + sign * fyf * cd - m * state.vx * state.omega) / m,
        (fyf * params.lf * cd - fyr * params.lr) / params.iz,
    )))
}

/// Analytic Jacobians of [`full_dynamics`] with respect to state and input.
pub fn full_dynamics_jacobian(
    state: &FullState,
    u: &ControlInput,
    params: &VehicleParams,
) -> Result<(StateDerivative<6>, Matrix6<f64>, Matrix6x2<f64>), DynamicsError> {
    let f = full_dynamics(state, u, params)?;
    let (vxg, dvxg) = guarded_vx(state.vx);
    let (lf, lr, m, iz) = (params.lf, params.lr, params.m, params.iz);
    let (vy, om, delta) = (state.vy, state.omega, u.delta);

    // front slip: alpha_f = delta - atan(qf), qf = (vy + lf om)/vxg
    let qf = (vy + lf * om) / vxg;
    let df_datan = 1.0 / (1.0 + qf * qf);
    let daf_dvy = -df_datan / vxg;
    let daf_dom = -df_datan * lf / vxg;
    let daf_dvx = df_datan * qf / vxg * dvxg;
    let daf_ddelta = 1.0;
    // rear slip: alpha_r = atan(qr), qr = (lr om - vy)/vxg
    let qr = (lr * om - vy) / vxg;
    let dr_datan = 1.0 / (1.0 + qr * qr);
    let dar_dvy = -dr_datan / vxg;
    let dar_dom = dr_datan * lr / vxg;
    let dar_dvx = -dr_datan * qr / vxg * dvxg;

    let (alpha_f, alpha_r) = slip_angles(state, delta, params)?;
    let (fyf, _fyr) = tire_lateral_forces(alpha_f, alpha_r, params);
    let kf = pacejka_slope(alpha_f, params.bf, params.cf, params.df);
    let kr = pacejka_slope(alpha_r, params.br, params.cr, params.dr);

    // d Fyf / d (vx, vy, om, delta), d Fyr / d (vx, vy, om)
    let dfyf = [kf * daf_dvx, kf * daf_dvy, kf * daf_dom, kf * daf_ddelta];
    let dfyr = [kr * dar_dvx, kr * dar_dvy, kr * dar_dom];

    let (s, c) = state.psi.sin_cos();
    let (sd, cd) = delta.sin_cos();
    let sign = params.front_force_sign.factor();

    let mut a = Matrix6::zeros();
    let mut b = Matrix6x2::zeros();
    // X
    a[(0, 2)] = -state.vx * s - vy * c;
    a[(0, 3)] = c;
    a[(0, 4)] = -s;
    // Y
    a[(1, 2)] = state.vx * c - vy * s;
    a[(1, 3)] = s;
    a[(1, 4)] = c;
    // psi
    a[(2, 5)] = 1.0;
    // vx
    let clamped = state.vx <= 0.0 && f.0[3] == 0.0;
    if !clamped {
        a[(3, 3)] = -params.cm2 * u.duty - 2.0 * params.cr2 * state.vx - dfyf[0] * sd / m;
        a[(3, 4)] = -dfyf[1] * sd / m + om;
        a[(3, 5)] = -dfyf[2] * sd / m + vy;
        b[(3, 0)] = -(dfyf[3] * sd + fyf * cd) / m;
        b[(3, 1)] = params.cm1 - params.cm2 * state.vx;
    }
    // vy
    a[(4, 3)] = (dfyr[0] + sign * dfyf[0] * cd) / m - om;
    a[(4, 4)] = (dfyr[1] + sign * dfyf[1] * cd) / m;
    a[(4, 5)] = (dfyr[2] + sign * dfyf[2] * cd) / m - state.vx;
    b[(4, 0)] = sign * (dfyf[3] * cd - fyf * sd) / m;
    // omega
    a[(5, 3)] = (dfyf[0] * lf * cd - dfyr[0] * lr) / iz;
    a[(5, 4)] = (dfyf[1] * lf * cd - dfyr[1] * lr) / iz;
    a[(5, 5)] = (dfyf[2] * lf * cd - dfyr[2] * lr) / iz;
    b[(5, 0)] = (dfyf[3] * lf * cd - fyf * lf * sd) / iz;
    Ok((f, a, b))
}

/// Right-hand side of the slip-free kinematic model.
pub fn reduced_dynamics(state: &ReducedState, u: &ControlInput, params: &VehicleParams) -> StateDerivative<4> {
    let g1 = params.g1();
    let g2 = params.g2();
    let (s, c) = (state.psi + g1 * u.delta).sin_cos();
    let v = state.v;
    let vd = v * u.delta;
    let mut dv = (params.cm1 - params.cm2 * v) * u.duty - params.cr2 * v * v - params.cr1 - vd * vd * g1 * g1 * g2;
    if v <= 0.0 && dv < 0.0 {
        dv = 0.0;
    }
    StateDerivative(Vector4::new(v * c, v * s, v * u.delta * g2, dv))
}

/// Analytic Jacobians of [`reduced_dynamics`].
pub fn reduced_dynamics_jacobian(
    state: &ReducedState,
    u: &ControlInput,
    params: &VehicleParams,
) -> (StateDerivative<4>, Matrix4<f64>, Matrix4x2<f64>) {
    let f = reduced_dynamics(state, u, params);
    let g1 = params.g1();
    let g2 = params.g2();
    let (s, c) = (state.psi + g1 * u.delta).sin_cos();
    let (v, delta) = (state.v, u.delta);
    let mut a = Matrix4::zeros();
    let mut b = Matrix4x2::zeros();
    a[(0, 2)] = -v * s;
    a[(0, 3)] = c;
    b[(0, 0)] = -v * s * g1;
    a[(1, 2)] = v * c;
    a[(1, 3)] = s;
    b[(1, 0)] = v * c * g1;
    a[(2, 3)] = delta * g2;
    b[(2, 0)] = v * g2;
    let clamped = v <= 0.0 && f.0[3] == 0.0;
    if !clamped {
        a[(3, 3)] = -params.cm2 * u.duty - 2.0 * params.cr2 * v - 2.0 * v * delta * delta * g1 * g1 * g2;
        b[(3, 0)] = -2.0 * v * v * delta * g1 * g1 * g2;
        b[(3, 1)] = params.cm1 - params.cm2 * v;
    }
    (f, a, b)
}

/// Collapse the plant state onto the controller state (`v = |(vx, vy)|`).
pub fn reduce_state(s: &FullState) -> ReducedState {
    ReducedState {
        x: s.x,
        y: s.y,
        psi: s.psi,
        v: s.speed(),
    }
}

/// One classical Runge-Kutta step of `x' = f(x)` (inputs held constant by the caller's closure).
pub fn rk4_step<const N: usize, F>(f: F, x: &SVector<f64, N>, ts: f64) -> Result<SVector<f64, N>, DynamicsError>
where
    F: Fn(&SVector<f64, N>) -> Result<SVector<f64, N>, DynamicsError>,
{
    assert!(ts > 0.0, "rk4 step must be positive");
    let k1 = f(x)?;
    let k2 = f(&(x + k1 * (ts / 2.0)))?;
    let k3 = f(&(x + k2 * (ts / 2.0)))?;
    let k4 = f(&(x + k3 * ts))?;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (ts / 6.0);
    if next.iter().all(|v| v.is_finite()) {
        Ok(next)
    } else {
        Err(DynamicsError::Integration { ts })
    }
}

/// Runge-Kutta step together with the sensitivities of the end state with
/// respect to the initial state and the (held) input.
///
/// `f` returns the derivative and its state/input Jacobians.
pub fn rk4_step_with_jacobian<const N: usize, const M: usize, F>(
    f: F,
    x: &SVector<f64, N>,
    ts: f64,
) -> Result<
    (
        SVector<f64, N>,
        nalgebra::SMatrix<f64, N, N>,
        nalgebra::SMatrix<f64, N, M>,
    ),
    DynamicsError,
>
where
    F: Fn(
        &SVector<f64, N>,
    ) -> Result<
        (
            SVector<f64, N>,
            nalgebra::SMatrix<f64, N, N>,
            nalgebra::SMatrix<f64, N, M>,
        ),
        DynamicsError,
    >,
{
    use nalgebra::SMatrix;
    let h = ts;
    let eye = SMatrix::<f64, N, N>::identity();
    let (k1, a1, b1) = f(x)?;
    let dk1_dx = a1;
    let dk1_du = b1;
    let (k2, a2, b2) = f(&(x + k1 * (h / 2.0)))?;
    let dk2_dx = a2 * (eye + dk1_dx * (h / 2.0));
    let dk2_du = a2 * dk1_du * (h / 2.0) + b2;
    let (k3, a3, b3) = f(&(x + k2 * (h / 2.0)))?;
    let dk3_dx = a3 * (eye + dk2_dx * (h / 2.0));
    let dk3_du = a3 * dk2_du * (h / 2.0) + b3;
    let (k4, a4, b4) = f(&(x + k3 * h))?;
    let dk4_dx = a4 * (eye + dk3_dx * h);
    let dk4_du = a4 * dk3_du * h + b4;
    let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if !next.iter().all(|v| v.is_finite()) {
        return Err(DynamicsError::Integration { ts });
    }
    let ax = eye + (dk1_dx + dk2_dx * 2.0 + dk3_dx * 2.0 + dk4_dx) * (h / 6.0);
    let bu = (dk1_du + dk2_du * 2.0 + dk3_du * 2.0 + dk4_du) * (h / 6.0);
    Ok((next, ax, bu))
}

/// Kinematic model discretised with one RK4 step.
pub fn reduced_step(x: &ReducedState, u: &ControlInput, params: &VehicleParams, ts: f64) -> ReducedState {
    let next = rk4_step(|s| Ok(reduced_dynamics(&ReducedState::from_vector(s), u, params).0), &x.to_vector(), ts)
        .unwrap_or_else(|_| x.to_vector());
    ReducedState::from_vector(&next)
}

/// Kinematic one-step map and its Jacobians.
pub fn reduced_step_jacobian(
    x: &ReducedState,
    u: &ControlInput,
    params: &VehicleParams,
    ts: f64,
) -> Result<(Vector4<f64>, Matrix4<f64>, Matrix4x2<f64>), DynamicsError> {
    rk4_step_with_jacobian(
        |s| {
            let (f, a, b) = reduced_dynamics_jacobian(&ReducedState::from_vector(s), u, params);
            Ok((f.0, a, b))
        },
        &x.to_vector(),
        ts,
    )
}

/// Number of RK4 sub-steps that keeps the stiff lateral modes of the
/// dynamic model inside the RK4 stability region over an interval `ts`.
pub fn stable_substeps(params: &VehicleParams, vx: f64, ts: f64, min_steps: usize) -> usize {
    // RK4 is stable on the negative real axis up to |h lambda| ~ 2.78
    let needed = (ts * params.lateral_stiffness(vx) / 2.0).ceil() as usize;
    needed.clamp(min_steps.max(1), 2000)
}

/// Integrates the dynamic model over `ts` with `substeps` equal RK4 steps.
pub fn full_step(
    x: &FullState,
    u: &ControlInput,
    params: &VehicleParams,
    ts: f64,
    substeps: usize,
) -> Result<FullState, DynamicsError> {
    let h = ts / substeps as f64;
    let mut v = x.to_vector();
    for _ in 0..substeps {
        v = rk4_step(|s| full_dynamics(&FullState::from_vector(s), u, params).map(|d| d.0), &v, h)?;
    }
    Ok(FullState::from_vector(&v))
}

/// Dynamic-model step with sensitivities, composed across sub-steps.
pub fn full_step_jacobian(
    x: &FullState,
    u: &ControlInput,
    params: &VehicleParams,
    ts: f64,
    substeps: usize,
) -> Result<(Vector6<f64>, Matrix6<f64>, Matrix6x2<f64>), DynamicsError> {
    let h = ts / substeps as f64;
    let mut v = x.to_vector();
    let mut ax = Matrix6::identity();
    let mut bu = Matrix6x2::zeros();
    for _ in 0..substeps {
        let (next, a, b) = rk4_step_with_jacobian(
            |s| {
                let (f, a, b) = full_dynamics_jacobian(&FullState::from_vector(s), u, params)?;
                Ok((f.0, a, b))
            },
            &v,
            h,
        )?;
        bu = a * bu + b;
        ax = a * ax;
        v = next;
    }
    Ok((v, ax, bu))
}
