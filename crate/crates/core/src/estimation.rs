//! Moving-horizon estimation of the kinematic state from noisy full-state
//! and input measurements.

use std::collections::VecDeque;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{reduced_step, reduced_step_jacobian, ControlInput, ReducedState, VehicleParams};
use crate::nlp::{self, NlpProblem, SolveStatus, SolverOptions};

const NX: usize = 4;
const NU: usize = 2;
const STAGE: usize = NX + NU;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimationError {
    #[error("invalid estimator configuration: {0}")]
    Config(String),
    #[error("measurement buffer is empty")]
    EmptyBuffer,
}

/// Default weights from standard deviations `sigma`: `1 / sigma^2` is the
/// maximum-likelihood weighting, `1 / sigma` divides by the printed values
/// directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseWeighting {
    #[default]
    InverseVariance,
    InverseSigma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MheConfig {
    /// number of model steps in a full window (the window holds one more
    /// measurement than this)
    pub window: usize,
    pub ts: f64,
    /// output noise over (X, Y, psi, v)
    pub sigma_y: [f64; 4],
    /// input noise over (delta, D)
    pub sigma_u: [f64; 2],
    /// how default weights follow from the noise levels
    pub weighting: NoiseWeighting,
    /// output weight diagonal; overrides `weighting`
    pub v: Option<[f64; 4]>,
    /// input weight diagonal; overrides `weighting`
    pub w: Option<[f64; 2]>,
    pub input_lower: [f64; 2],
    pub input_upper: [f64; 2],
    pub v_min: f64,
    pub solver: SolverOptions,
}

impl Default for MheConfig {
    fn default() -> Self {
        MheConfig {
            window: 6,
            ts: 0.033,
            sigma_y: [0.05, 0.05, 0.035, 0.1],
            sigma_u: [0.2, 0.035],
            weighting: NoiseWeighting::default(),
            v: None,
            w: None,
            input_lower: [-PI / 6.0, -1.0],
            input_upper: [PI / 6.0, 1.0],
            v_min: 0.0,
            solver: SolverOptions {
                max_iterations: 15,
                tolerance: 1e-8,
                ..SolverOptions::default()
            },
        }
    }
}

impl MheConfig {
    pub fn weights(&self) -> ([f64; 4], [f64; 2]) {
        let inv = |s: f64| match self.weighting {
            NoiseWeighting::InverseVariance => 1.0 / (s * s),
            NoiseWeighting::InverseSigma => 1.0 / s,
        };
        let v = self.v.unwrap_or(self.sigma_y.map(inv));
        let w = self.w.unwrap_or(self.sigma_u.map(inv));
        (v, w)
    }

    pub fn validate(&self) -> Result<(), EstimationError> {
        let bad = |m: String| Err(EstimationError::Config(m));
        if self.window < 1 {
            return bad("window must be at least 1".into());
        }
        if !(self.ts > 0.0) {
            return bad(format!("ts must be positive, got {}", self.ts));
        }
        if self.sigma_y.iter().chain(&self.sigma_u).any(|s| !(*s >= 0.0)) {
            return bad("noise levels must be non-negative".into());
        }
        let (v, w) = self.weights();
        if v.iter().chain(&w).any(|x| !(x.is_finite() && *x > 0.0)) {
            return bad("weights must be finite and positive (give explicit weights for zero noise)".into());
        }
        for i in 0..NU {
            if !(self.input_lower[i] < self.input_upper[i]) {
                return bad(format!("input bound {i} has lower >= upper"));
            }
        }
        Ok(())
    }
}

/// One sample: measured state at `step` and the measured input applied over
/// the interval that ended at `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub step: u64,
    pub y: ReducedState,
    pub u: ControlInput,
}

/// Chronological ring buffer holding at most `window + 1` measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBuffer {
    capacity: usize,
    items: VecDeque<Measurement>,
}

impl MeasurementBuffer {
    pub fn new(window: usize) -> Self {
        MeasurementBuffer {
            capacity: window + 1,
            items: VecDeque::with_capacity(window + 1),
        }
    }

    pub fn push(&mut self, m: Measurement) {
        if let Some(last) = self.items.back() {
            assert!(m.step > last.step, "measurements must arrive in order");
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(m);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Measurement> {
        self.items.iter()
    }

    pub fn latest(&self) -> Option<&Measurement> {
        self.items.back()
    }
}

/// Estimated window, kept as the next warm start.
#[derive(Debug, Clone, PartialEq)]
pub struct MheWindow {
    pub first_step: u64,
    pub states: Vec<Vector4<f64>>,
    pub inputs: Vec<Vector2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MheDiagnostics {
    pub cost: f64,
    pub kkt_residual: f64,
    /// seconds, around the NLP solve only
    pub solve_time: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MheEstimate {
    pub state: ReducedState,
    pub window: MheWindow,
    pub diagnostics: MheDiagnostics,
}

/// Window fit: states `x_0..x_M` and inputs `u_0..u_{M-1}` laid out as
/// `[x_0, u_0, x_1, u_1, ..., x_M]`.
pub struct WindowProblem {
    params: VehicleParams,
    ts: f64,
    m: usize,
    y: Vec<Vector4<f64>>,
    /// `u_meas[i]` is the measured input over `[i, i + 1]`
    u_meas: Vec<Vector2<f64>>,
    v_sqrt: [f64; 4],
    w_sqrt: [f64; 2],
    input_lower: [f64; 2],
    input_upper: [f64; 2],
    v_min: f64,
}

fn xi(i: usize) -> usize {
    STAGE * i
}

fn ui(i: usize) -> usize {
    STAGE * i + NX
}

impl WindowProblem {
    fn state(&self, z: &DVector<f64>, i: usize) -> Vector4<f64> {
        z.fixed_rows::<4>(xi(i)).into_owned()
    }

    fn input(&self, z: &DVector<f64>, i: usize) -> Vector2<f64> {
        z.fixed_rows::<2>(ui(i)).into_owned()
    }

    fn pack(&self, states: &[Vector4<f64>], inputs: &[Vector2<f64>]) -> DVector<f64> {
        let mut z = DVector::zeros(self.num_vars());
        for i in 0..=self.m {
            z.fixed_rows_mut::<4>(xi(i)).copy_from(&states[i]);
            if i < self.m {
                z.fixed_rows_mut::<2>(ui(i)).copy_from(&inputs[i]);
            }
        }
        z
    }
}

impl NlpProblem for WindowProblem {
    fn num_vars(&self) -> usize {
        STAGE * self.m + NX
    }

    fn num_eq(&self) -> usize {
        NX * self.m
    }

    fn num_residuals(&self) -> usize {
        NX * (self.m + 1) + NU * self.m
    }

    fn bounds(&self) -> (DVector<f64>, DVector<f64>) {
        let n = self.num_vars();
        let mut lb = DVector::from_element(n, f64::NEG_INFINITY);
        let mut ub = DVector::from_element(n, f64::INFINITY);
        for i in 0..=self.m {
            lb[xi(i) + 3] = self.v_min;
            if i < self.m {
                for j in 0..NU {
                    lb[ui(i) + j] = self.input_lower[j];
                    ub[ui(i) + j] = self.input_upper[j];
                }
            }
        }
        (lb, ub)
    }

    fn cost(&self, z: &DVector<f64>) -> f64 {
        0.5 * self.residuals(z).norm_squared()
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        self.residual_jacobian(z).tr_mul(&self.residuals(z))
    }

    fn residuals(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut r = DVector::zeros(self.num_residuals());
        let mut row = 0;
        for i in 0..=self.m {
            let x = self.state(z, i);
            for j in 0..NX {
                r[row] = self.v_sqrt[j] * (x[j] - self.y[i][j]);
                row += 1;
            }
        }
        for i in 0..self.m {
            let u = self.input(z, i);
            for j in 0..NU {
                r[row] = self.w_sqrt[j] * (u[j] - self.u_meas[i][j]);
                row += 1;
            }
        }
        r
    }

    fn residual_jacobian(&self, _z: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.num_residuals(), self.num_vars());
        let mut row = 0;
        for i in 0..=self.m {
            for j in 0..NX {
                jac[(row, xi(i) + j)] = self.v_sqrt[j];
                row += 1;
            }
        }
        for i in 0..self.m {
            for j in 0..NU {
                jac[(row, ui(i) + j)] = self.w_sqrt[j];
                row += 1;
            }
        }
        jac
    }

    fn eq_constraints(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut c = DVector::zeros(NX * self.m);
        for i in 0..self.m {
            let x = ReducedState::from_vector(&self.state(z, i));
            let u = ControlInput::from_vector(&self.input(z, i));
            let next = match reduced_step_jacobian(&x, &u, &self.params, self.ts) {
                Ok((n, _, _)) => n,
                Err(_) => Vector4::from_element(f64::NAN),
            };
            c.fixed_rows_mut::<4>(NX * i).copy_from(&(self.state(z, i + 1) - next));
        }
        c
    }

    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(NX * self.m, self.num_vars());
        for i in 0..self.m {
            let x = ReducedState::from_vector(&self.state(z, i));
            let u = ControlInput::from_vector(&self.input(z, i));
            let (a, b) = match reduced_step_jacobian(&x, &u, &self.params, self.ts) {
                Ok((_, a, b)) => (a, b),
                Err(_) => (
                    nalgebra::Matrix4::from_element(f64::NAN),
                    nalgebra::Matrix4x2::from_element(f64::NAN),
                ),
            };
            let row = NX * i;
            for r in 0..NX {
                jac[(row + r, xi(i + 1) + r)] = 1.0;
                for c in 0..NX {
                    jac[(row + r, xi(i) + c)] = -a[(r, c)];
                }
                for c in 0..NU {
                    jac[(row + r, ui(i) + c)] = -b[(r, c)];
                }
            }
        }
        jac
    }

    fn pivot_hint(&self) -> Option<Vec<usize>> {
        Some((0..self.m).flat_map(|i| (0..NX).map(move |r| xi(i + 1) + r)).collect())
    }
}

/// Build the window problem and its warm-started initial guess.
pub fn build_window(
    buf: &MeasurementBuffer,
    cfg: &MheConfig,
    params: &VehicleParams,
    prev: Option<&MheWindow>,
) -> Result<(WindowProblem, DVector<f64>, u64), EstimationError> {
    let items: Vec<&Measurement> = buf.iter().collect();
    let first = items.first().ok_or(EstimationError::EmptyBuffer)?;
    let m = items.len() - 1;
    let y: Vec<Vector4<f64>> = items.iter().map(|s| s.y.to_vector()).collect();
    // the input recorded with sample i + 1 drove the interval [i, i + 1]
    let u_meas: Vec<Vector2<f64>> = items[1..].iter().map(|s| s.u.to_vector()).collect();
    let (v, w) = cfg.weights();
    let problem = WindowProblem {
        params: *params,
        ts: cfg.ts,
        m,
        y: y.clone(),
        u_meas: u_meas.clone(),
        v_sqrt: v.map(|x| (2.0 * x).sqrt()),
        w_sqrt: w.map(|x| (2.0 * x).sqrt()),
        input_lower: cfg.input_lower,
        input_upper: cfg.input_upper,
        v_min: cfg.v_min,
    };

    let lookup_state = |step: u64| {
        prev.and_then(|p| {
            let k = step.checked_sub(p.first_step)? as usize;
            p.states.get(k).copied()
        })
    };
    let lookup_input = |step: u64| {
        prev.and_then(|p| {
            let k = step.checked_sub(p.first_step)? as usize;
            p.inputs.get(k).copied()
        })
    };
    let clamp_u = |u: Vector2<f64>| {
        Vector2::new(
            u[0].clamp(cfg.input_lower[0], cfg.input_upper[0]),
            u[1].clamp(cfg.input_lower[1], cfg.input_upper[1]),
        )
    };
    let mut states = Vec::with_capacity(m + 1);
    let mut inputs = Vec::with_capacity(m);
    for (i, s) in items.iter().enumerate() {
        if i > 0 {
            inputs.push(clamp_u(lookup_input(items[i - 1].step).unwrap_or(u_meas[i - 1])));
        }
        let guess = match lookup_state(s.step) {
            Some(x) => x,
            None if i > 0 => {
                let prev_x = ReducedState::from_vector(&states[i - 1]);
                reduced_step(&prev_x, &ControlInput::from_vector(&inputs[i - 1]), params, cfg.ts).to_vector()
            }
            None => y[i],
        };
        let mut guess = guess;
        guess[3] = guess[3].max(cfg.v_min);
        states.push(guess);
    }
    let z0 = problem.pack(&states, &inputs);
    Ok((problem, z0, first.step))
}

pub fn estimate(
    buf: &MeasurementBuffer,
    cfg: &MheConfig,
    params: &VehicleParams,
    prev: Option<&MheWindow>,
) -> Result<MheEstimate, EstimationError> {
    let (problem, z0, first_step) = build_window(buf, cfg, params, prev)?;
    let started = std::time::Instant::now();
    let result = nlp::solve(&problem, &z0, &cfg.solver);
    let solve_time = started.elapsed().as_secs_f64();
    let m = problem.m;
    let (z, diagnostics) = match result {
        Ok(sol) => {
            let degraded = sol.status != SolveStatus::Converged;
            (
                sol.z_star,
                MheDiagnostics {
                    cost: sol.cost_value,
                    kkt_residual: sol.kkt_residual,
                    solve_time,
                    status: sol.status,
                    iterations: sol.iterations,
                    degraded,
                },
            )
        }
        Err(err) => {
            log::warn!("estimation solve failed: {err}");
            (
                z0.clone(),
                MheDiagnostics {
                    cost: problem.cost(&z0),
                    kkt_residual: f64::INFINITY,
                    solve_time,
                    status: SolveStatus::InfeasibleStep,
                    iterations: 0,
                    degraded: true,
                },
            )
        }
    };
    let window = MheWindow {
        first_step,
        states: (0..=m).map(|i| problem.state(&z, i)).collect(),
        inputs: (0..m).map(|i| problem.input(&z, i)).collect(),
    };
    Ok(MheEstimate {
        state: ReducedState::from_vector(&window.states[m]),
        window,
        diagnostics,
    })
}

/// Estimator instance owning its buffer and warm start.
#[derive(Debug, Clone)]
pub struct Mhe {
    pub cfg: MheConfig,
    pub params: VehicleParams,
    pub buffer: MeasurementBuffer,
    prev: Option<MheWindow>,
}

impl Mhe {
    pub fn new(cfg: MheConfig, params: VehicleParams) -> Result<Self, EstimationError> {
        cfg.validate()?;
        let buffer = MeasurementBuffer::new(cfg.window);
        Ok(Mhe {
            cfg,
            params,
            buffer,
            prev: None,
        })
    }

    pub fn push(&mut self, m: Measurement) {
        self.buffer.push(m);
    }

    pub fn estimate(&mut self) -> Result<MheEstimate, EstimationError> {
        let est = estimate(&self.buffer, &self.cfg, &self.params, self.prev.as_ref())?;
        self.prev = Some(est.window.clone());
        Ok(est)
    }
}
