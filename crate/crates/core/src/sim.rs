//! Closed-loop harness: plant, measurement noise, estimator, controller,
//! logging and metrics.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{ControlOutput, Nmpc, NmpcConfig};
use crate::dynamics::{
    full_step, reduce_state, reduced_dynamics, rk4_step, stable_substeps, ControlInput, DynamicsError, FullState,
    ReducedState, VehicleParams,
};
use crate::estimation::{Measurement, Mhe, MheConfig};
use crate::learning::{attach_correction, collect_mismatch, train_gp, GpConfig, GpSet, LearningError};
use crate::nlp::SolveStatus;
use crate::planner::cruise_duty;
use crate::raceline::RaceLine;
use crate::track::TrackGeometry;

pub const METRICS_SCHEMA: &str = "racing-metrics/1";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation configuration: {0}")]
    Config(String),
    #[error("plant integration failed at step {step}: {source}")]
    Plant {
        step: u64,
        #[source]
        source: DynamicsError,
    },
    #[error("GP training after lap {lap} failed: {source}")]
    Training {
        lap: usize,
        #[source]
        source: LearningError,
    },
    #[error("cannot access `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed trace `{path}`: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("malformed metrics file `{path}`: {reason}")]
    Metrics { path: PathBuf, reason: String },
}

// ---------------------------------------------------------------- plants

/// Ground-truth vehicle advanced once per control interval.
pub trait Plant: Send + Sync {
    fn name(&self) -> &str;

    fn step(&self, x: &FullState, u: &ControlInput, ts: f64) -> Result<FullState, DynamicsError>;
}

/// Dynamic bicycle model with tire forces; RK4 sub-steps sized from the
/// current speed.
#[derive(Debug, Clone)]
pub struct FullPlant {
    pub params: VehicleParams,
}

impl Plant for FullPlant {
    fn name(&self) -> &str {
        "full"
    }

    fn step(&self, x: &FullState, u: &ControlInput, ts: f64) -> Result<FullState, DynamicsError> {
        let n = stable_substeps(&self.params, x.vx.max(0.2), ts, 4);
        full_step(x, u, &self.params, ts, n)
    }
}

/// Kinematic model as the plant, with an optional constant derivative bias.
/// The lifted full state has `vy = 0` and the kinematic yaw rate.
#[derive(Debug, Clone)]
pub struct KinematicPlant {
    pub params: VehicleParams,
    pub bias: [f64; 4],
    name: &'static str,
}

impl KinematicPlant {
    pub fn new(params: VehicleParams) -> Self {
        KinematicPlant {
            params,
            bias: [0.0; 4],
            name: "kinematic",
        }
    }

    pub fn biased(params: VehicleParams, bias: [f64; 4]) -> Self {
        KinematicPlant {
            params,
            bias,
            name: "biased",
        }
    }
}

impl Plant for KinematicPlant {
    fn name(&self) -> &str {
        self.name
    }

    fn step(&self, x: &FullState, u: &ControlInput, ts: f64) -> Result<FullState, DynamicsError> {
        let bias = nalgebra::Vector4::from(self.bias);
        let next = rk4_step(
            |s| Ok(reduced_dynamics(&ReducedState::from_vector(s), u, &self.params).0 + bias),
            &reduce_state(x).to_vector(),
            ts,
        )?;
        let r = ReducedState::from_vector(&next);
        Ok(FullState {
            x: r.x,
            y: r.y,
            psi: r.psi,
            vx: r.v,
            vy: 0.0,
            omega: r.v * u.delta * self.params.g2(),
        })
    }
}

// ---------------------------------------------------------------- noise

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub enabled: bool,
    /// standard deviations over (X, Y, psi, v)
    pub sigma_y: [f64; 4],
    /// standard deviations over (delta, D)
    pub sigma_u: [f64; 2],
}

impl Default for NoiseConfig {
    fn default() -> Self {
        let mhe = MheConfig::default();
        NoiseConfig {
            enabled: true,
            sigma_y: mhe.sigma_y,
            sigma_u: mhe.sigma_u,
        }
    }
}

/// Add zero-mean Gaussian noise drawn from stream `stream` of the generator
/// seeded with `seed`; the same `(seed, stream)` always yields the same draw.
pub fn inject_noise(
    y: &ReducedState,
    u: &ControlInput,
    sigma_y: &[f64; 4],
    sigma_u: &[f64; 2],
    seed: u64,
    stream: u64,
) -> (ReducedState, ControlInput) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut draw = |s: f64| {
        let z: f64 = std_normal.sample(&mut rng);
        if s > 0.0 {
            s * z
        } else {
            0.0
        }
    };
    let ny = ReducedState {
        x: y.x + draw(sigma_y[0]),
        y: y.y + draw(sigma_y[1]),
        psi: y.psi + draw(sigma_y[2]),
        v: y.v + draw(sigma_y[3]),
    };
    let nu = ControlInput::new(u.delta + draw(sigma_u[0]), u.duty + draw(sigma_u[1]));
    (ny, nu)
}

// ---------------------------------------------------------------- controllers

/// Per-lap training record of a learning controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub after_lap: usize,
    pub samples: usize,
    /// held-out R^2 per channel; NaN where undefined
    pub r2: Vec<f64>,
}

/// Tracking strategy driven by the closed loop.
pub trait Controller {
    fn name(&self) -> &str;

    fn reset(&mut self, last_input: ControlInput);

    fn step(&mut self, x_hat: &ReducedState, rl: &RaceLine, track: &TrackGeometry) -> ControlOutput;

    /// Called once per completed lap with that lap's rows.
    fn end_of_lap(&mut self, _lap: usize, _rows: &[TraceRow]) -> Result<Option<TrainingReport>, SimError> {
        Ok(None)
    }
}

/// Baseline NMPC on the nominal kinematic model.
pub struct MpcController {
    pub nmpc: Nmpc,
}

impl Controller for MpcController {
    fn name(&self) -> &str {
        "mpc"
    }

    fn reset(&mut self, last_input: ControlInput) {
        self.nmpc.reset(last_input);
    }

    fn step(&mut self, x_hat: &ReducedState, rl: &RaceLine, track: &TrackGeometry) -> ControlOutput {
        self.nmpc.step(x_hat, rl, Some(track))
    }
}

/// NMPC whose prediction model gains GP mismatch corrections trained on the
/// designated lap.
pub struct LearningMpcController {
    pub nmpc: Nmpc,
    pub gp: GpConfig,
    pub train_lap: usize,
    pub seed: u64,
    pub trained: Option<GpSet>,
}

impl Controller for LearningMpcController {
    fn name(&self) -> &str {
        "l-mpc"
    }

    fn reset(&mut self, last_input: ControlInput) {
        self.nmpc.reset(last_input);
    }

    fn step(&mut self, x_hat: &ReducedState, rl: &RaceLine, track: &TrackGeometry) -> ControlOutput {
        self.nmpc.step(x_hat, rl, Some(track))
    }

    fn end_of_lap(&mut self, lap: usize, rows: &[TraceRow]) -> Result<Option<TrainingReport>, SimError> {
        if lap != self.train_lap {
            return Ok(None);
        }
        let data = collect_mismatch(rows, &self.nmpc.params, self.nmpc.cfg.ts);
        let set = train_gp(&data, self.seed, &self.gp).map_err(|source| SimError::Training { lap, source })?;
        let report = TrainingReport {
            after_lap: lap,
            samples: data.len(),
            r2: set.r2.iter().map(|r| r.unwrap_or(f64::NAN)).collect(),
        };
        log::info!("GP trained after lap {lap} on {} samples, R^2 {:?}", data.len(), set.r2);
        let corr = attach_correction(set.models.clone()).map_err(|source| SimError::Training { lap, source })?;
        self.nmpc.set_model(Box::new(corr));
        self.trained = Some(set);
        Ok(Some(report))
    }
}

// ---------------------------------------------------------------- trace

/// One control interval. The plant, measurement and estimate refer to time
/// `step * ts`; the command is applied over `[step, step + 1)`; the
/// reference is the target the previous solve set for this step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub time: f64,
    pub lap: usize,
    pub plant_x: f64,
    pub plant_y: f64,
    pub plant_psi: f64,
    pub plant_vx: f64,
    pub plant_vy: f64,
    pub plant_omega: f64,
    pub meas_x: f64,
    pub meas_y: f64,
    pub meas_psi: f64,
    pub meas_v: f64,
    pub est_x: f64,
    pub est_y: f64,
    pub est_psi: f64,
    pub est_v: f64,
    pub ref_x: f64,
    pub ref_y: f64,
    pub ref_psi: f64,
    pub ref_v: f64,
    pub ref_theta: f64,
    pub delta: f64,
    pub duty: f64,
    pub meas_delta: f64,
    pub meas_duty: f64,
    pub nmpc_time: f64,
    pub mhe_time: f64,
    pub nmpc_status: SolveStatus,
    pub mhe_status: SolveStatus,
    pub nmpc_iterations: usize,
    pub mhe_iterations: usize,
    /// signed distance to the centerline
    pub contour_error: f64,
    /// unwrapped centerline progress
    pub progress: f64,
}

/// Column order of the trace CSV.
pub const TRACE_COLUMNS: [&str; 34] = [
    "step",
    "time",
    "lap",
    "plant_x",
    "plant_y",
    "plant_psi",
    "plant_vx",
    "plant_vy",
    "plant_omega",
    "meas_x",
    "meas_y",
    "meas_psi",
    "meas_v",
    "est_x",
    "est_y",
    "est_psi",
    "est_v",
    "ref_x",
    "ref_y",
    "ref_psi",
    "ref_v",
    "ref_theta",
    "delta",
    "duty",
    "meas_delta",
    "meas_duty",
    "nmpc_time",
    "mhe_time",
    "nmpc_status",
    "mhe_status",
    "nmpc_iterations",
    "mhe_iterations",
    "contour_error",
    "progress",
];

impl TraceRow {
    pub fn plant(&self) -> FullState {
        FullState {
            x: self.plant_x,
            y: self.plant_y,
            psi: self.plant_psi,
            vx: self.plant_vx,
            vy: self.plant_vy,
            omega: self.plant_omega,
        }
    }

    pub fn measured(&self) -> ReducedState {
        ReducedState {
            x: self.meas_x,
            y: self.meas_y,
            psi: self.meas_psi,
            v: self.meas_v,
        }
    }

    pub fn estimated(&self) -> ReducedState {
        ReducedState {
            x: self.est_x,
            y: self.est_y,
            psi: self.est_psi,
            v: self.est_v,
        }
    }

    pub fn command(&self) -> ControlInput {
        ControlInput::new(self.delta, self.duty)
    }
}

/// How a run ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    OffTrack { step: u64, contour_error: f64, half_width: f64 },
    Timeout { steps: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub rows: Vec<TraceRow>,
    pub outcome: Outcome,
    pub training: Vec<TrainingReport>,
    pub ts: f64,
}

impl SimTrace {
    pub fn lap_rows(&self, lap: usize) -> &[TraceRow] {
        let start = self.rows.partition_point(|r| r.lap < lap);
        let end = self.rows.partition_point(|r| r.lap <= lap);
        &self.rows[start..end]
    }

    /// Number of laps completed.
    pub fn completed_laps(&self) -> usize {
        let last = self.rows.last().map_or(0, |r| r.lap);
        if self.outcome == Outcome::Completed {
            last + 1
        } else {
            last
        }
    }
}

pub fn export_trace(rows: &[TraceRow], path: &Path) -> Result<(), SimError> {
    let csv_err = |source| SimError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    w.write_record(TRACE_COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| SimError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn import_trace(path: &Path) -> Result<Vec<TraceRow>, SimError> {
    let csv_err = |source| SimError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    if headers.iter().ne(TRACE_COLUMNS) {
        return Err(SimError::Metrics {
            path: path.to_path_buf(),
            reason: "trace header does not match the expected column order".into(),
        });
    }
    r.deserialize().collect::<Result<Vec<TraceRow>, _>>().map_err(csv_err)
}

// ---------------------------------------------------------------- closed loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub ts: f64,
    pub laps: usize,
    pub initial_speed: f64,
    /// steps allowed per lap, as a multiple of the race line's lap time
    pub lap_time_factor: f64,
    /// multiplier on the race line's speed profile for the tracking reference
    pub speed_scale: f64,
    pub noise: NoiseConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            ts: 0.033,
            laps: 2,
            initial_speed: 1.0,
            lap_time_factor: 3.0,
            speed_scale: 0.5,
            noise: NoiseConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.ts > 0.0) || self.laps < 1 || !(self.initial_speed >= 0.0) || !(self.lap_time_factor >= 1.0) {
            return Err(SimError::Config("ts > 0, laps >= 1, initial_speed >= 0 and lap_time_factor >= 1 are required".into()));
        }
        if !(self.speed_scale > 0.0 && self.speed_scale <= 1.0) {
            return Err(SimError::Config(format!("speed_scale must be in (0, 1], got {}", self.speed_scale)));
        }
        if self.noise.sigma_y.iter().chain(&self.noise.sigma_u).any(|s| !(*s >= 0.0)) {
            return Err(SimError::Config("noise standard deviations must be non-negative".into()));
        }
        Ok(())
    }
}

fn wrap_half(d: f64, period: f64) -> f64 {
    d - period * (d / period).round()
}

/// Run `cfg.laps` laps from a flying start on the race line at `theta = 0`.
/// Each step: measure (noised) -> estimate -> control -> integrate the
/// plant. The run aborts when the plant leaves the track.
#[allow(clippy::too_many_arguments)]
pub fn run_closed_loop(
    track: &TrackGeometry,
    raceline: &RaceLine,
    plant: &dyn Plant,
    controller: &mut dyn Controller,
    mhe_cfg: &MheConfig,
    params: &VehicleParams,
    cfg: &SimConfig,
    seed: u64,
) -> Result<SimTrace, SimError> {
    cfg.validate()?;
    if !raceline.is_closed() || !track.is_closed() {
        return Err(SimError::Config("closed-loop laps need a closed track and race line".into()));
    }
    let mut mhe = Mhe::new(mhe_cfg.clone(), *params).map_err(|e| SimError::Config(e.to_string()))?;
    let scaled;
    let raceline = if cfg.speed_scale == 1.0 {
        raceline
    } else {
        scaled = raceline
            .with_speed_scale(cfg.speed_scale)
            .map_err(|e| SimError::Config(e.to_string()))?;
        &scaled
    };
    let lap_len = raceline.lap_length();
    let pose = raceline.pose(0.0);
    let mut x = FullState {
        x: pose.x,
        y: pose.y,
        psi: pose.psi,
        vx: cfg.initial_speed,
        vy: 0.0,
        omega: 0.0,
    };
    let mut u_prev = ControlInput::new(0.0, cruise_duty(params, cfg.initial_speed));
    controller.reset(u_prev);

    let max_steps = (cfg.laps as f64 * cfg.lap_time_factor * raceline.lap_time() / cfg.ts).ceil() as u64 + 100;
    let mut rows: Vec<TraceRow> = Vec::new();
    let mut training = Vec::new();
    let mut rl_hint = Some(0.0);
    let mut rl_unwrapped = wrap_half(raceline.project(x.x, x.y, rl_hint), lap_len);
    let mut track_hint = None;
    let mut progress = 0.0;
    let mut reference = (raceline.pose(rl_unwrapped.rem_euclid(lap_len)), rl_unwrapped);
    let mut lap = 0usize;
    let mut lap_start = 0usize;
    let mut outcome = Outcome::Timeout { steps: max_steps };

    for k in 0..max_steps {
        let truth = reduce_state(&x);
        let (y_meas, u_meas) = if cfg.noise.enabled {
            inject_noise(&truth, &u_prev, &cfg.noise.sigma_y, &cfg.noise.sigma_u, seed, k)
        } else {
            (truth, u_prev)
        };
        mhe.push(Measurement {
            step: k,
            y: y_meas,
            u: u_meas,
        });
        assert!(
            mhe.buffer.iter().all(|m| m.step <= k) && mhe.buffer.latest().map(|m| m.step) == Some(k),
            "estimator buffer holds a measurement from the future"
        );
        let (x_hat, mhe_time, mhe_status, mhe_iterations) = match mhe.estimate() {
            Ok(est) => (
                est.state,
                est.diagnostics.solve_time,
                est.diagnostics.status,
                est.diagnostics.iterations,
            ),
            Err(err) => {
                log::warn!("estimator failed at step {k}: {err}; using the raw measurement");
                (y_meas, 0.0, SolveStatus::InfeasibleStep, 0)
            }
        };
        let out = controller.step(&x_hat, raceline, track);
        let u = out.input;

        let theta_c = track.project(x.x, x.y, track_hint);
        if let Some(prev) = track_hint {
            progress += wrap_half(theta_c - prev, track.length());
        } else {
            progress = theta_c;
        }
        track_hint = Some(theta_c);
        let contour = track.contour_error(x.x, x.y, theta_c);
        rows.push(TraceRow {
            step: k,
            time: k as f64 * cfg.ts,
            lap,
            plant_x: x.x,
            plant_y: x.y,
            plant_psi: x.psi,
            plant_vx: x.vx,
            plant_vy: x.vy,
            plant_omega: x.omega,
            meas_x: y_meas.x,
            meas_y: y_meas.y,
            meas_psi: y_meas.psi,
            meas_v: y_meas.v,
            est_x: x_hat.x,
            est_y: x_hat.y,
            est_psi: x_hat.psi,
            est_v: x_hat.v,
            ref_x: reference.0.x,
            ref_y: reference.0.y,
            ref_psi: reference.0.psi,
            ref_v: reference.0.v,
            ref_theta: reference.1,
            delta: u.delta,
            duty: u.duty,
            meas_delta: u_meas.delta,
            meas_duty: u_meas.duty,
            nmpc_time: out.diagnostics.solve_time,
            mhe_time,
            nmpc_status: out.diagnostics.status,
            mhe_status,
            nmpc_iterations: out.diagnostics.iterations,
            mhe_iterations,
            contour_error: contour,
            progress,
        });
        let hw = track.half_width(theta_c);
        if contour.abs() > hw {
            outcome = Outcome::OffTrack {
                step: k,
                contour_error: contour,
                half_width: hw,
            };
            break;
        }
        if let (Some(s), Some(t)) = (out.reference.states.first(), out.reference.theta.first()) {
            reference = (*s, *t);
        }

        x = plant.step(&x, &u, cfg.ts).map_err(|source| SimError::Plant { step: k, source })?;
        u_prev = u;

        let th = raceline.project(x.x, x.y, rl_hint);
        rl_hint = Some(th);
        rl_unwrapped += wrap_half(th - rl_unwrapped.rem_euclid(lap_len), lap_len);
        let now_lap = (rl_unwrapped / lap_len).floor().max(0.0) as usize;
        if now_lap > lap {
            if let Some(report) = controller.end_of_lap(lap, &rows[lap_start..])? {
                training.push(report);
            }
            lap = now_lap;
            lap_start = rows.len();
            if lap >= cfg.laps {
                outcome = Outcome::Completed;
                break;
            }
        }
    }
    if let Outcome::OffTrack { step, contour_error, .. } = outcome {
        log::warn!("vehicle left the track at step {step} (contour error {contour_error:.3} m)");
    }
    Ok(SimTrace {
        rows,
        outcome,
        training,
        ts: cfg.ts,
    })
}

// ---------------------------------------------------------------- metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LapMetrics {
    /// lap index, or `None` for the whole run
    pub lap: Option<usize>,
    pub steps: usize,
    pub lap_time: f64,
    pub distance: f64,
    pub rmse_total: f64,
    pub rmse_lateral: f64,
    pub rmse_longitudinal: f64,
    pub max_speed: f64,
    pub avg_speed: f64,
    /// race-line progress per second over the interval
    pub lap_speed: f64,
    pub nmpc_time_median: f64,
    pub nmpc_time_mean: f64,
    pub nmpc_time_p90: f64,
    pub mhe_time_median: f64,
    pub mhe_time_mean: f64,
    pub mhe_time_p90: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metrics {
    pub schema: String,
    pub controller: String,
    pub track: String,
    pub seed: u64,
    pub outcome: Outcome,
    pub total: LapMetrics,
    pub laps: Vec<LapMetrics>,
    #[serde(default)]
    pub training: Vec<TrainingReport>,
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        (v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64).sqrt()
    }
}

/// Median by linear interpolation between order statistics.
pub fn percentile(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Per-sample tracking errors against the race line: the signed lateral
/// distance at the nearest race-line point and the along-track offset from
/// the time-indexed reference parameter.
pub fn tracking_errors(rows: &[TraceRow], raceline: &RaceLine) -> Vec<(f64, f64)> {
    let len = raceline.lap_length();
    let path = raceline.path();
    let mut hint = None;
    rows.iter()
        .map(|r| {
            let th = raceline.project(r.plant_x, r.plant_y, hint);
            hint = Some(th);
            let lat = path.contour_error(r.plant_x, r.plant_y, th);
            let lon = if raceline.is_closed() {
                wrap_half(th - r.ref_theta, len)
            } else {
                th - r.ref_theta
            };
            (lat, lon)
        })
        .collect()
}

/// Unwrapped race-line parameter of each plant position.
pub fn raceline_progress(rows: &[TraceRow], raceline: &RaceLine) -> Vec<f64> {
    let len = raceline.lap_length();
    let mut hint = None;
    let mut unwrapped = 0.0;
    rows.iter()
        .map(|r| {
            let th = raceline.project(r.plant_x, r.plant_y, hint);
            unwrapped = match hint {
                Some(prev) if raceline.is_closed() => unwrapped + wrap_half(th - prev, len),
                Some(prev) => unwrapped + th - prev,
                None => th,
            };
            hint = Some(th);
            unwrapped
        })
        .collect()
}

/// Progress speed between rows `start` and `end` (the first row after the
/// interval when it exists).
fn progress_speed(progress: &[f64], start: usize, end: usize, ts: f64) -> f64 {
    let last = end.min(progress.len().saturating_sub(1));
    if last <= start {
        return 0.0;
    }
    (progress[last] - progress[start]) / ((last - start) as f64 * ts)
}

fn lap_metrics(
    lap: Option<usize>,
    rows: &[TraceRow],
    errors: &[(f64, f64)],
    lap_speed: f64,
    ts: f64,
) -> LapMetrics {
    let lat: Vec<f64> = errors.iter().map(|e| e.0).collect();
    let lon: Vec<f64> = errors.iter().map(|e| e.1).collect();
    let total: Vec<f64> = errors.iter().map(|e| e.0.hypot(e.1)).collect();
    let speeds: Vec<f64> = rows.iter().map(|r| r.plant().speed()).collect();
    let distance: f64 = rows
        .windows(2)
        .map(|w| (w[1].plant_x - w[0].plant_x).hypot(w[1].plant_y - w[0].plant_y))
        .sum();
    let nmpc: Vec<f64> = rows.iter().map(|r| r.nmpc_time).collect();
    let mhe: Vec<f64> = rows.iter().map(|r| r.mhe_time).collect();
    LapMetrics {
        lap,
        steps: rows.len(),
        lap_time: rows.len() as f64 * ts,
        distance,
        rmse_total: rms(&total),
        rmse_lateral: rms(&lat),
        rmse_longitudinal: rms(&lon),
        max_speed: speeds.iter().copied().fold(0.0, f64::max),
        avg_speed: mean(&speeds),
        lap_speed,
        nmpc_time_median: percentile(&nmpc, 0.5),
        nmpc_time_mean: mean(&nmpc),
        nmpc_time_p90: percentile(&nmpc, 0.9),
        mhe_time_median: percentile(&mhe, 0.5),
        mhe_time_mean: mean(&mhe),
        mhe_time_p90: percentile(&mhe, 0.9),
    }
}

/// Whole-run and per-lap metrics. Only laps that were completed are listed
/// per lap.
pub fn compute_metrics(
    trace: &SimTrace,
    raceline: &RaceLine,
    controller: &str,
    track: &str,
    seed: u64,
) -> Metrics {
    let errors = tracking_errors(&trace.rows, raceline);
    let progress = raceline_progress(&trace.rows, raceline);
    let n = trace.rows.len();
    let total = lap_metrics(None, &trace.rows, &errors, progress_speed(&progress, 0, n, trace.ts), trace.ts);
    let last_lap = trace.rows.last().map_or(0, |r| r.lap);
    let complete = if trace.outcome == Outcome::Completed { last_lap + 1 } else { last_lap };
    let mut laps = Vec::new();
    for lap in 0..complete {
        let start = trace.rows.partition_point(|r| r.lap < lap);
        let end = trace.rows.partition_point(|r| r.lap <= lap);
        let speed = progress_speed(&progress, start, end, trace.ts);
        laps.push(lap_metrics(Some(lap), &trace.rows[start..end], &errors[start..end], speed, trace.ts));
    }
    Metrics {
        schema: METRICS_SCHEMA.into(),
        controller: controller.into(),
        track: track.into(),
        seed,
        outcome: trace.outcome.clone(),
        total,
        laps,
        training: trace.training.clone(),
    }
}

pub fn export_metrics(m: &Metrics, path: &Path) -> Result<(), SimError> {
    let text = toml::to_string(m).map_err(|e| SimError::Metrics {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|source| SimError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn import_metrics(path: &Path) -> Result<Metrics, SimError> {
    let text = std::fs::read_to_string(path).map_err(|source| SimError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let m: Metrics = toml::from_str(&text).map_err(|e| SimError::Metrics {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if m.schema != METRICS_SCHEMA {
        return Err(SimError::Metrics {
            path: path.to_path_buf(),
            reason: format!("schema `{}` is not `{METRICS_SCHEMA}`", m.schema),
        });
    }
    Ok(m)
}

/// Controller pair for a closed-loop run, built from configuration.
pub fn build_controller(
    kind: &str,
    nmpc: &NmpcConfig,
    gp: &GpConfig,
    params: &VehicleParams,
    seed: u64,
) -> Result<Box<dyn Controller>, SimError> {
    crate::registry::controllers()
        .get(kind)
        .map_err(|e| SimError::Config(e.to_string()))?(&crate::registry::ControllerSettings {
        nmpc: nmpc.clone(),
        gp: gp.clone(),
        params: *params,
        seed,
    })
}
