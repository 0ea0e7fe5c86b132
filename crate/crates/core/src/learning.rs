//! Gaussian-process regression of the one-step mismatch between the plant
//! and the kinematic prediction model.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Vector4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::PredictionModel;
use crate::dynamics::{reduce_state, reduced_step, ControlInput, ReducedState, VehicleParams};
use crate::sim::TraceRow;

pub const INPUT_DIM: usize = 6;
pub const CHANNELS: [&str; 4] = ["x", "y", "psi", "v"];
const FORMAT: &str = "racing-gp";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LearningError {
    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("R^2 is undefined: truths have zero variance but residuals are nonzero")]
    UndefinedR2,
    #[error("R^2 needs equal-length inputs of at least 2 entries")]
    R2Length,
    #[error("expected {expected} regressors (x, y, psi, v), got {got}")]
    MissingRegressor { expected: usize, got: usize },
    #[error("invalid GP configuration: {0}")]
    Config(String),
    #[error("kernel matrix is not positive definite even with jitter")]
    Factorization,
    #[error("cannot access `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model file `{path}`: {reason}")]
    Format { path: PathBuf, reason: String },
}

/// One regression sample: `(X, Y, psi, v, delta, D)` mapped to the per-state
/// mismatch of one prediction step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MismatchSample {
    pub z: [f64; INPUT_DIM],
    pub e: [f64; 4],
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Regression input for a state and input; the heading is wrapped so later
/// laps share the training range.
pub fn gp_input(x: &ReducedState, u: &ControlInput) -> [f64; INPUT_DIM] {
    [x.x, x.y, wrap_angle(x.psi), x.v, u.delta, u.duty]
}

/// Mismatch targets from consecutive trace rows. Rows whose successor is
/// not the next step are skipped.
pub fn collect_mismatch(rows: &[TraceRow], params: &VehicleParams, ts: f64) -> Vec<MismatchSample> {
    let mut out = Vec::with_capacity(rows.len().saturating_sub(1));
    for pair in rows.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if b.step != a.step + 1 {
            log::warn!("trace gap between steps {} and {}; sample skipped", a.step, b.step);
            continue;
        }
        let xa = reduce_state(&a.plant());
        let xb = reduce_state(&b.plant());
        let u = a.command();
        let pred = reduced_step(&xa, &u, params, ts);
        let e = xb.to_vector() - pred.to_vector();
        out.push(MismatchSample {
            z: gp_input(&xa, &u),
            e: [e[0], e[1], e[2], e[3]],
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparams {
    pub constant_variance: f64,
    pub length_scales: Vec<f64>,
    pub noise_variance: f64,
}

impl GpHyperparams {
    fn from_log(v: &[f64]) -> Self {
        let d = v.len() - 2;
        GpHyperparams {
            constant_variance: v[0].exp(),
            length_scales: v[1..=d].iter().map(|l| l.exp()).collect(),
            noise_variance: v[d + 1].exp(),
        }
    }
}

/// Constant times anisotropic RBF, plus `noise_variance` when both
/// arguments are the same training point.
pub fn kernel(a: &[f64], b: &[f64], h: &GpHyperparams, same_point: bool) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(&h.length_scales)
        .map(|((x, y), l)| {
            let d = (x - y) / l;
            d * d
        })
        .sum();
    let k = h.constant_variance * (-0.5 * r2).exp();
    if same_point {
        k + h.noise_variance
    } else {
        k
    }
}

fn gram(z: &[Vec<f64>], h: &GpHyperparams) -> DMatrix<f64> {
    let n = z.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel(&z[i], &z[j], h, i == j);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn factor(mut k: DMatrix<f64>, scale: f64) -> Result<Cholesky<f64, Dyn>, LearningError> {
    let mut jitter = 0.0;
    for _ in 0..8 {
        if let Some(c) = Cholesky::new(k.clone()) {
            return Ok(c);
        }
        let add = if jitter == 0.0 { 1e-10 * scale.max(1e-12) } else { jitter * 9.0 };
        for i in 0..k.nrows() {
            k[(i, i)] += add;
        }
        jitter += add;
    }
    Err(LearningError::Factorization)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    pub target_mean: f64,
    pub target_scale: f64,
}

impl Standardization {
    fn fit(z: &[[f64; INPUT_DIM]], y: &[f64]) -> Self {
        let n = z.len() as f64;
        let mut input_mean = vec![0.0; INPUT_DIM];
        let mut input_scale = vec![0.0; INPUT_DIM];
        for d in 0..INPUT_DIM {
            let m = z.iter().map(|r| r[d]).sum::<f64>() / n;
            let s = (z.iter().map(|r| (r[d] - m).powi(2)).sum::<f64>() / n).sqrt();
            input_mean[d] = m;
            input_scale[d] = if s > 1e-12 { s } else { 1.0 };
        }
        let m = y.iter().sum::<f64>() / n;
        let s = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        Standardization {
            input_mean,
            input_scale,
            target_mean: m,
            target_scale: s,
        }
    }

    fn input(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.input_mean)
            .zip(&self.input_scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }

    fn degenerate(&self) -> bool {
        !(self.target_scale > 1e-12)
    }
}

/// Trained single-output regressor.
#[derive(Debug, Clone)]
pub struct GpModel {
    pub channel: String,
    pub hyper: GpHyperparams,
    pub standardization: Standardization,
    /// standardized training inputs
    pub inputs: Vec<Vec<f64>>,
    /// dual weights `(K + noise I)^-1 y` in standardized units
    pub alpha: Vec<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
}

#[derive(Serialize, Deserialize)]
struct GpFile {
    format: String,
    version: u32,
    channel: String,
    hyper: GpHyperparams,
    standardization: Standardization,
    inputs: Vec<Vec<f64>>,
    alpha: Vec<f64>,
}

impl GpModel {
    /// Condition a model on standardized data with fixed hyperparameters.
    fn condition(
        channel: &str,
        hyper: GpHyperparams,
        standardization: Standardization,
        inputs: Vec<Vec<f64>>,
        y: &[f64],
    ) -> Result<Self, LearningError> {
        if standardization.degenerate() {
            return Ok(GpModel {
                channel: channel.into(),
                hyper,
                standardization,
                inputs: Vec::new(),
                alpha: Vec::new(),
                chol: None,
            });
        }
        let chol = factor(gram(&inputs, &hyper), hyper.constant_variance)?;
        let alpha = chol.solve(&DVector::from_column_slice(y));
        Ok(GpModel {
            channel: channel.into(),
            hyper,
            standardization,
            inputs,
            alpha: alpha.iter().copied().collect(),
            chol: Some(chol),
        })
    }

    /// Fit with the given hyperparameters (no likelihood optimisation).
    pub fn with_hyperparams(
        channel: &str,
        z: &[[f64; INPUT_DIM]],
        y: &[f64],
        hyper: GpHyperparams,
    ) -> Result<Self, LearningError> {
        if z.is_empty() || z.len() != y.len() {
            return Err(LearningError::InsufficientData { needed: 1, got: z.len() });
        }
        let st = Standardization::fit(z, y);
        let zs: Vec<Vec<f64>> = z.iter().map(|r| st.input(r)).collect();
        let ys = standardize_targets(&st, y);
        GpModel::condition(channel, hyper, st, zs, &ys)
    }

    /// Posterior mean in target units.
    pub fn mean(&self, z: &[f64]) -> f64 {
        let st = &self.standardization;
        if self.chol.is_none() {
            return st.target_mean;
        }
        let q = st.input(z);
        let m: f64 = self
            .inputs
            .iter()
            .zip(&self.alpha)
            .map(|(t, a)| kernel(&q, t, &self.hyper, false) * a)
            .sum();
        st.target_mean + st.target_scale * m
    }

    /// Posterior mean and latent variance, in target units.
    pub fn predict(&self, z: &[f64]) -> (f64, f64) {
        let st = &self.standardization;
        let Some(chol) = &self.chol else {
            return (st.target_mean, 0.0);
        };
        let q = st.input(z);
        let ks = DVector::from_iterator(self.inputs.len(), self.inputs.iter().map(|t| kernel(&q, t, &self.hyper, false)));
        let mean: f64 = ks.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        let v = chol.l().solve_lower_triangular(&ks).unwrap_or_else(|| DVector::zeros(ks.len()));
        let var = (self.hyper.constant_variance - v.norm_squared()).max(0.0);
        (
            st.target_mean + st.target_scale * mean,
            var * st.target_scale * st.target_scale,
        )
    }

    /// Variance of a new noisy observation at `z`.
    pub fn predictive_variance(&self, z: &[f64]) -> f64 {
        let (_, var) = self.predict(z);
        let s = self.standardization.target_scale;
        if self.chol.is_none() {
            0.0
        } else {
            var + self.hyper.noise_variance * s * s
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), LearningError> {
        let file = GpFile {
            format: FORMAT.into(),
            version: VERSION,
            channel: self.channel.clone(),
            hyper: self.hyper.clone(),
            standardization: self.standardization.clone(),
            inputs: self.inputs.clone(),
            alpha: self.alpha.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| LearningError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        std::fs::write(path, text).map_err(|source| LearningError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, LearningError> {
        let text = std::fs::read_to_string(path).map_err(|source| LearningError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let bad = |reason: String| LearningError::Format {
            path: path.to_path_buf(),
            reason,
        };
        let f: GpFile = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        if f.format != FORMAT || f.version != VERSION {
            return Err(bad(format!("expected {FORMAT} version {VERSION}, found {} version {}", f.format, f.version)));
        }
        if f.alpha.len() != f.inputs.len() || f.inputs.iter().any(|r| r.len() != f.hyper.length_scales.len()) {
            return Err(bad("inconsistent dimensions".into()));
        }
        let chol = if f.inputs.is_empty() {
            None
        } else {
            Some(factor(gram(&f.inputs, &f.hyper), f.hyper.constant_variance)?)
        };
        Ok(GpModel {
            channel: f.channel,
            hyper: f.hyper,
            standardization: f.standardization,
            inputs: f.inputs,
            alpha: f.alpha,
            chol,
        })
    }
}

fn standardize_targets(st: &Standardization, y: &[f64]) -> Vec<f64> {
    if st.degenerate() {
        vec![0.0; y.len()]
    } else {
        y.iter().map(|v| (v - st.target_mean) / st.target_scale).collect()
    }
}

/// Log marginal likelihood and, on request, its gradient in
/// log-hyperparameters.
fn log_marginal(z: &[Vec<f64>], y: &DVector<f64>, theta: &[f64], with_grad: bool) -> Option<(f64, Vec<f64>)> {
    let h = GpHyperparams::from_log(theta);
    let n = z.len();
    let k = gram(z, &h);
    let chol = Cholesky::new(k.clone())?;
    let alpha = chol.solve(y);
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let lml = -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * PI).ln();
    if !lml.is_finite() {
        return None;
    }
    if !with_grad {
        return Some((lml, Vec::new()));
    }
    let kinv = chol.inverse();
    let d = h.length_scales.len();
    let inv_l2: Vec<f64> = h.length_scales.iter().map(|l| 1.0 / (l * l)).collect();
    let mut grad = vec![0.0; d + 2];
    for i in 0..n {
        for j in 0..i {
            // off-diagonal pairs count twice; their noise term is zero
            let w = 2.0 * (alpha[i] * alpha[j] - kinv[(i, j)]);
            let wk = w * k[(i, j)];
            grad[0] += wk;
            for dd in 0..d {
                let diff = z[i][dd] - z[j][dd];
                grad[dd + 1] += wk * diff * diff * inv_l2[dd];
            }
        }
        let w = alpha[i] * alpha[i] - kinv[(i, i)];
        grad[0] += w * h.constant_variance;
        grad[d + 1] += w * h.noise_variance;
    }
    grad.iter_mut().for_each(|g| *g *= 0.5);
    Some((lml, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub restarts: usize,
    pub max_iterations: usize,
    pub train_fraction: f64,
    /// samples kept after uniform subsampling
    pub max_samples: usize,
    /// training points used for the likelihood fit; the final model is
    /// conditioned on the whole training split
    pub fit_subset: usize,
    pub min_samples: usize,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            restarts: 8,
            max_iterations: 200,
            train_fraction: 0.85,
            max_samples: 2000,
            fit_subset: 200,
            min_samples: 20,
        }
    }
}

impl GpConfig {
    pub fn validate(&self) -> Result<(), LearningError> {
        if self.restarts < 1 || self.max_iterations < 1 {
            return Err(LearningError::Config("restarts and max_iterations must be at least 1".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(LearningError::Config("train_fraction must lie in (0, 1)".into()));
        }
        if self.max_samples < self.min_samples || self.fit_subset < 2 || self.min_samples < 2 {
            return Err(LearningError::Config("sample limits are inconsistent".into()));
        }
        Ok(())
    }
}

// log-parameter box: constant variance, length scales, noise variance
const LOG_C: (f64, f64) = (-9.21, 9.21);
const LOG_L: (f64, f64) = (-6.91, 6.91);
const LOG_N: (f64, f64) = (-13.82, 2.3);

fn clamp_theta(theta: &mut [f64]) {
    let d = theta.len() - 2;
    theta[0] = theta[0].clamp(LOG_C.0, LOG_C.1);
    for t in &mut theta[1..=d] {
        *t = t.clamp(LOG_L.0, LOG_L.1);
    }
    theta[d + 1] = theta[d + 1].clamp(LOG_N.0, LOG_N.1);
}

/// Outcome of one multistart run.
#[derive(Debug, Clone, PartialEq)]
pub struct RestartTrace {
    pub initial: f64,
    pub best: f64,
}

/// Quasi-Newton ascent with a backtracking line search inside the
/// log-parameter box; only improving steps are taken, so the returned value
/// never falls below the starting one.
fn ascend(z: &[Vec<f64>], y: &DVector<f64>, start: Vec<f64>, iterations: usize) -> Option<(Vec<f64>, RestartTrace)> {
    let p = start.len();
    let mut theta = start;
    clamp_theta(&mut theta);
    let (mut f, mut g) = log_marginal(z, y, &theta, true)?;
    let initial = f;
    // inverse Hessian approximation of -lml
    let mut hinv = DMatrix::<f64>::identity(p, p);
    for _ in 0..iterations {
        let gv = DVector::from_column_slice(&g);
        if gv.amax() < 1e-6 {
            break;
        }
        let mut dir = &hinv * &gv;
        if dir.dot(&gv) <= 0.0 {
            hinv = DMatrix::identity(p, p);
            dir = gv.clone();
        }
        let scale = dir.amax();
        if scale > 2.0 {
            dir *= 2.0 / scale;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..20 {
            let mut cand: Vec<f64> = theta.iter().zip(dir.iter()).map(|(t, d)| t + step * d).collect();
            clamp_theta(&mut cand);
            if let Some((fc, _)) = log_marginal(z, y, &cand, false) {
                if fc > f + 1e-4 * step * dir.dot(&gv).max(0.0) {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, fc)) = accepted else { break };
        let (_, gc) = log_marginal(z, y, &cand, true)?;
        let s_vec = DVector::from_iterator(p, cand.iter().zip(&theta).map(|(a, b)| a - b));
        // curvature of -lml along the step
        let y_vec = DVector::from_iterator(p, g.iter().zip(&gc).map(|(a, b)| a - b));
        let sy = s_vec.dot(&y_vec);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(p, p);
            let a = &i - rho * &s_vec * y_vec.transpose();
            hinv = &a * &hinv * a.transpose() + rho * &s_vec * s_vec.transpose();
        }
        let gain = fc - f;
        theta = cand;
        f = fc;
        g = gc;
        if gain < 1e-9 * (1.0 + f.abs()) {
            break;
        }
    }
    Some((theta, RestartTrace { initial, best: f }))
}

/// Maximise the marginal likelihood over `restarts` starting points.
pub fn fit_hyperparams(
    z: &[Vec<f64>],
    y: &[f64],
    cfg: &GpConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(GpHyperparams, Vec<RestartTrace>), LearningError> {
    let d = z.first().map_or(0, |r| r.len());
    let yv = DVector::from_column_slice(y);
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut traces = Vec::new();
    for r in 0..cfg.restarts {
        let start = if r == 0 {
            let mut s = vec![0.0; d + 2];
            s[d + 1] = (0.1f64).ln();
            s
        } else {
            let mut s = vec![rng.random_range(-2.3..2.3)];
            s.extend((0..d).map(|_| rng.random_range(-1.2..2.3)));
            s.push(rng.random_range(-9.2..-0.7));
            s
        };
        if let Some((theta, trace)) = ascend(z, &yv, start, cfg.max_iterations) {
            if best.as_ref().is_none_or(|(b, _)| trace.best > *b) {
                best = Some((trace.best, theta));
            }
            traces.push(trace);
        }
    }
    let (_, theta) = best.ok_or(LearningError::Factorization)?;
    Ok((GpHyperparams::from_log(&theta), traces))
}

/// Coefficient of determination.
pub fn r2_score(predictions: &[f64], truths: &[f64]) -> Result<f64, LearningError> {
    if predictions.len() != truths.len() || truths.len() < 2 {
        return Err(LearningError::R2Length);
    }
    let n = truths.len() as f64;
    let mean = truths.iter().sum::<f64>() / n;
    let ss_tot: f64 = truths.iter().map(|t| (t - mean).powi(2)).sum();
    let ss_res: f64 = predictions.iter().zip(truths).map(|(p, t)| (p - t).powi(2)).sum();
    if ss_tot <= 0.0 {
        return if ss_res <= 0.0 { Ok(1.0) } else { Err(LearningError::UndefinedR2) };
    }
    Ok(1.0 - ss_res / ss_tot)
}

/// Four per-state regressors with their held-out scores.
#[derive(Debug, Clone)]
pub struct GpSet {
    pub models: Vec<GpModel>,
    /// test R^2 per channel; `None` when undefined
    pub r2: Vec<Option<f64>>,
    pub n_train: usize,
    pub n_test: usize,
    pub restarts: Vec<Vec<RestartTrace>>,
}

impl GpSet {
    pub fn save_dir(&self, dir: &Path) -> Result<Vec<PathBuf>, LearningError> {
        std::fs::create_dir_all(dir).map_err(|source| LearningError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let mut paths = Vec::new();
        for m in &self.models {
            let p = dir.join(model_file_name(&m.channel));
            m.save(&p)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

pub fn model_file_name(channel: &str) -> String {
    format!("gp_{channel}.json")
}

/// Load the four channel models written by [`GpSet::save_dir`].
pub fn load_models(dir: &Path) -> Result<Vec<GpModel>, LearningError> {
    CHANNELS.iter().map(|c| GpModel::load(&dir.join(model_file_name(c)))).collect()
}

/// Random 85/15 split, per-channel likelihood fit and held-out R^2.
pub fn train_gp(dataset: &[MismatchSample], seed: u64, cfg: &GpConfig) -> Result<GpSet, LearningError> {
    cfg.validate()?;
    if dataset.len() < cfg.min_samples {
        return Err(LearningError::InsufficientData {
            needed: cfg.min_samples,
            got: dataset.len(),
        });
    }
    let data: Vec<MismatchSample> = if dataset.len() > cfg.max_samples {
        let stride = dataset.len() as f64 / cfg.max_samples as f64;
        (0..cfg.max_samples).map(|i| dataset[(i as f64 * stride) as usize]).collect()
    } else {
        dataset.to_vec()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    let n_train = ((data.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, data.len() - 1);
    let (train_idx, test_idx) = idx.split_at(n_train);
    let ztr: Vec<[f64; INPUT_DIM]> = train_idx.iter().map(|&i| data[i].z).collect();
    let zte: Vec<[f64; INPUT_DIM]> = test_idx.iter().map(|&i| data[i].z).collect();

    let mut models = Vec::new();
    let mut r2 = Vec::new();
    let mut restarts = Vec::new();
    for (c, name) in CHANNELS.iter().enumerate() {
        let ytr: Vec<f64> = train_idx.iter().map(|&i| data[i].e[c]).collect();
        let yte: Vec<f64> = test_idx.iter().map(|&i| data[i].e[c]).collect();
        let st = Standardization::fit(&ztr, &ytr);
        let zs: Vec<Vec<f64>> = ztr.iter().map(|r| st.input(r)).collect();
        let ys = standardize_targets(&st, &ytr);
        let (hyper, traces) = if st.degenerate() {
            (
                GpHyperparams {
                    constant_variance: 1.0,
                    length_scales: vec![1.0; INPUT_DIM],
                    noise_variance: 1.0,
                },
                Vec::new(),
            )
        } else {
            let m = zs.len().min(cfg.fit_subset);
            let stride = zs.len() as f64 / m as f64;
            let pick: Vec<usize> = (0..m).map(|i| (i as f64 * stride) as usize).collect();
            let zf: Vec<Vec<f64>> = pick.iter().map(|&i| zs[i].clone()).collect();
            let yf: Vec<f64> = pick.iter().map(|&i| ys[i]).collect();
            fit_hyperparams(&zf, &yf, cfg, &mut rng)?
        };
        let model = GpModel::condition(name, hyper, st, zs, &ys)?;
        let preds: Vec<f64> = zte.iter().map(|z| model.mean(z)).collect();
        r2.push(r2_score(&preds, &yte).ok());
        models.push(model);
        restarts.push(traces);
    }
    Ok(GpSet {
        models,
        r2,
        n_train,
        n_test: data.len() - n_train,
        restarts,
    })
}

/// Prediction-model correction: the GP posterior means added to the
/// kinematic step.
#[derive(Debug, Clone)]
pub struct GpCorrection {
    models: Vec<GpModel>,
}

impl GpCorrection {
    pub fn models(&self) -> &[GpModel] {
        &self.models
    }
}

impl PredictionModel for GpCorrection {
    fn name(&self) -> &str {
        "gp"
    }

    fn correction(&self, x: &ReducedState, u: &ControlInput) -> Vector4<f64> {
        let z = gp_input(x, u);
        Vector4::from_iterator(self.models.iter().map(|m| m.mean(&z)))
    }
}

/// Build the corrected prediction model; needs exactly the four state
/// channels in order.
pub fn attach_correction(models: Vec<GpModel>) -> Result<GpCorrection, LearningError> {
    if models.len() != CHANNELS.len() {
        return Err(LearningError::MissingRegressor {
            expected: CHANNELS.len(),
            got: models.len(),
        });
    }
    for (m, c) in models.iter().zip(CHANNELS) {
        if m.channel != c {
            return Err(LearningError::Config(format!("expected channel `{c}`, found `{}`", m.channel)));
        }
    }
    Ok(GpCorrection { models })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn hyper(c: f64, l: f64, n: f64) -> GpHyperparams {
        GpHyperparams {
            constant_variance: c,
            length_scales: vec![l; INPUT_DIM],
            noise_variance: n,
        }
    }

    fn random_inputs(rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; INPUT_DIM]> {
        (0..n)
            .map(|_| {
                let mut z = [0.0; INPUT_DIM];
                z.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
                z
            })
            .collect()
    }

    fn dataset(z: &[[f64; INPUT_DIM]], f: impl Fn(&[f64; INPUT_DIM], usize) -> f64) -> Vec<MismatchSample> {
        z.iter()
            .map(|zi| MismatchSample {
                z: *zi,
                e: [f(zi, 0), f(zi, 1), f(zi, 2), f(zi, 3)],
            })
            .collect()
    }

    #[test]
    fn kernel_basics() {
        let h = hyper(2.0, 0.5, 0.1);
        let a = [0.1, 0.2, -0.3, 0.4, 0.0, 1.0];
        assert_eq!(kernel(&a, &a, &h, true), 2.1);
        assert_eq!(kernel(&a, &a, &h, false), 2.0);
        let far = a.map(|v| v + 20.0 * 0.5);
        assert!(kernel(&a, &far, &h, false) <= 1e-12);
        let b = [0.5, -0.2, 0.3, 0.1, 0.9, -1.0];
        assert_eq!(kernel(&a, &b, &h, false), kernel(&b, &a, &h, false));
        // closed form for one differing coordinate
        let mut c = a;
        c[0] += 0.5;
        assert!((kernel(&a, &c, &h, false) - 2.0 * (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn single_point_posterior() {
        let z0 = [0.3, -0.1, 0.2, 1.0, 0.05, 0.4];
        let m = GpModel::with_hyperparams("v", &[z0], &[0.7], hyper(1.0, 1.0, 1e-10)).unwrap();
        // degenerate target spread: a single point predicts its value
        let (mean, var) = m.predict(&z0);
        assert!((mean - 0.7).abs() < 1e-12);
        assert!(var <= 1e-9);
    }

    #[test]
    fn one_point_closed_form_in_standard_units() {
        // two points far apart act as independent one-point GPs
        let a = [0.0; INPUT_DIM];
        let mut b = [0.0; INPUT_DIM];
        b[0] = 1000.0;
        let h = hyper(1.0, 1e-3, 1e-10);
        let m = GpModel::with_hyperparams("x", &[a, b], &[1.0, -1.0], h).unwrap();
        let (mean, var) = m.predict(&a);
        assert!((mean - 1.0).abs() < 1e-6);
        // latent variance c * s / (c + s) with s = 1e-10, times the target scale
        assert!((var - 1e-10 / (1.0 + 1e-10)).abs() < 1e-12);
        // far from both points: prior mean and prior variance
        let mut far = a;
        far[1] = 50.0;
        let (mean, var) = m.predict(&far);
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn interpolates_training_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random_inputs(&mut rng, 40);
        let y: Vec<f64> = z.iter().map(|r| (2.0 * r[0]).sin() + r[3] * r[4]).collect();
        let m = GpModel::with_hyperparams("x", &z, &y, hyper(1.0, 0.8, 1e-10)).unwrap();
        let s = m.standardization.target_scale;
        for (zi, yi) in z.iter().zip(&y) {
            assert!(((m.predict(zi).0 - yi) / s).abs() <= 1e-6);
            assert!(m.predict(zi).1 <= m.hyper.constant_variance * s * s);
        }
    }

    #[test]
    fn gram_is_positive_semidefinite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let z: Vec<Vec<f64>> = random_inputs(&mut rng, 30).iter().map(|r| r.to_vec()).collect();
            let h = hyper(rng.random_range(0.1..3.0), rng.random_range(0.1..2.0), 0.0);
            let k = gram(&z, &h);
            assert_eq!(k, k.transpose());
            let min = k.symmetric_eigenvalues().min();
            assert!(min >= -1e-8, "{min}");
        }
    }

    #[test]
    fn likelihood_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z: Vec<Vec<f64>> = random_inputs(&mut rng, 25).iter().map(|r| r.to_vec()).collect();
        let y = DVector::from_iterator(25, z.iter().map(|r| r[0] - 0.5 * r[2]));
        let theta = vec![0.2, 0.1, -0.3, 0.4, 0.0, 0.2, -0.1, -2.0];
        let (_, g) = log_marginal(&z, &y, &theta, true).unwrap();
        for i in 0..theta.len() {
            let h = 1e-6;
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let fd = (log_marginal(&z, &y, &tp, false).unwrap().0 - log_marginal(&z, &y, &tm, false).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * (1.0 + fd.abs()), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn r2_values() {
        assert_eq!(r2_score(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(r2_score(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(r2_score(&[1.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).unwrap(), 0.5);
        assert_eq!(r2_score(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 1.0);
        assert!(matches!(r2_score(&[1.0, 2.0], &[1.0, 1.0]), Err(LearningError::UndefinedR2)));
        assert!(r2_score(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn linear_targets_are_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = random_inputs(&mut rng, 200);
        let data = dataset(&z, |r, c| (c as f64 + 1.0) * r[0] - 0.5 * r[3] + 0.2 * r[5] + 0.1 * c as f64);
        let cfg = GpConfig {
            restarts: 3,
            max_iterations: 60,
            ..GpConfig::default()
        };
        let set = train_gp(&data, 1, &cfg).unwrap();
        for r in &set.r2 {
            assert!(r.unwrap() >= 0.99, "{r:?}");
        }
        assert_eq!(set.n_train + set.n_test, 200);
        assert_eq!(set.n_train, 170);
        for traces in &set.restarts {
            for t in traces {
                assert!(t.best >= t.initial);
            }
        }
    }

    #[test]
    fn pure_noise_is_not_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z = random_inputs(&mut rng, 200);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let noise: Vec<[f64; 4]> = (0..200).map(|_| [0; 4].map(|_: i32| normal.sample(&mut rng))).collect();
        let data: Vec<MismatchSample> = z.iter().zip(&noise).map(|(z, e)| MismatchSample { z: *z, e: *e }).collect();
        let cfg = GpConfig {
            restarts: 3,
            max_iterations: 60,
            ..GpConfig::default()
        };
        let set = train_gp(&data, 2, &cfg).unwrap();
        for r in &set.r2 {
            assert!(r.unwrap() <= 0.2, "{r:?}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z = random_inputs(&mut rng, 60);
        let data = dataset(&z, |r, c| r[c].sin());
        let cfg = GpConfig {
            restarts: 2,
            max_iterations: 30,
            ..GpConfig::default()
        };
        let a = train_gp(&data, 4, &cfg).unwrap();
        let b = train_gp(&data, 4, &cfg).unwrap();
        assert_eq!(a.r2, b.r2);
        for (ma, mb) in a.models.iter().zip(&b.models) {
            assert_eq!(ma.hyper, mb.hyper);
        }
    }

    #[test]
    fn degenerate_targets_predict_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let z = random_inputs(&mut rng, 40);
        let data = dataset(&z, |_, _| 0.0);
        let set = train_gp(&data, 0, &GpConfig::default()).unwrap();
        assert!(set.r2.iter().all(|r| *r == Some(1.0)));
        let corr = attach_correction(set.models).unwrap();
        let c = corr.correction(&ReducedState::default(), &ControlInput::default());
        assert!(c.amax() <= 1e-9);
    }

    #[test]
    fn persistence_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let z = random_inputs(&mut rng, 50);
        let data = dataset(&z, |r, c| r[0] * (c as f64 + 1.0) + r[1].powi(2));
        let cfg = GpConfig {
            restarts: 1,
            max_iterations: 20,
            ..GpConfig::default()
        };
        let set = train_gp(&data, 5, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save_dir(dir.path()).unwrap();
        let back = load_models(dir.path()).unwrap();
        let q = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        for (a, b) in set.models.iter().zip(&back) {
            assert_eq!(a.predict(&q).0, b.predict(&q).0);
        }
        let text = std::fs::read_to_string(dir.path().join("gp_x.json")).unwrap();
        assert!(text.starts_with("{\"format\":\"racing-gp\",\"version\":1"));
        let tampered = text.replace("\"version\":1", "\"version\":9");
        std::fs::write(dir.path().join("gp_x.json"), tampered).unwrap();
        assert!(matches!(load_models(dir.path()), Err(LearningError::Format { .. })));
    }

    #[test]
    fn attach_needs_four_channels() {
        let m = GpModel::with_hyperparams("x", &[[0.0; 6]], &[0.0], hyper(1.0, 1.0, 0.1)).unwrap();
        assert!(matches!(
            attach_correction(vec![m.clone(), m.clone(), m]),
            Err(LearningError::MissingRegressor { expected: 4, got: 3 })
        ));
    }

    #[test]
    fn interval_coverage_on_gaussian_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let z = random_inputs(&mut rng, 600);
        let data: Vec<MismatchSample> = z
            .iter()
            .map(|r| {
                let f = (1.5 * r[0]).sin() + 0.5 * r[1];
                MismatchSample {
                    z: *r,
                    e: [0; 4].map(|_: i32| f + normal.sample(&mut rng)),
                }
            })
            .collect();
        let cfg = GpConfig {
            restarts: 2,
            max_iterations: 80,
            train_fraction: 0.5,
            ..GpConfig::default()
        };
        let set = train_gp(&data[..300], 7, &cfg).unwrap();
        let m = &set.models[0];
        let hits = data[300..]
            .iter()
            .filter(|s| {
                let (mean, _) = m.predict(&s.z);
                (s.e[0] - mean).abs() <= 1.96 * m.predictive_variance(&s.z).sqrt()
            })
            .count();
        let coverage = hits as f64 / 300.0;
        assert!((0.90..=0.99).contains(&coverage), "{coverage}");
    }
}
