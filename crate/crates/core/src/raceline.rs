//! Planned reference: positions, heading and speed indexed by the race
//! line's own arc length.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::ReducedState;
use crate::spline::{CubicSpline, EndCondition};
use crate::track::{ArcPath, TrackError};

#[derive(Debug, Error)]
pub enum RaceLineError {
    #[error("invalid race line: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geometry(#[from] TrackError),
    #[error("cannot open `{path}`: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed race line file `{path}`: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaceLineSample {
    pub theta: f64,
    pub x: f64,
    pub y: f64,
    pub psi: f64,
    pub v: f64,
}

/// Race line with interpolating splines through every channel. Closed race
/// lines wrap at `lap_length`; the closing segment runs from the last
/// sample back to the first.
#[derive(Debug, Clone)]
pub struct RaceLine {
    samples: Vec<RaceLineSample>,
    lap_length: f64,
    closed: bool,
    path: ArcPath,
    psi: CubicSpline,
    speed: CubicSpline,
    winding: f64,
}

impl RaceLine {
    pub fn new(samples: Vec<RaceLineSample>, lap_length: f64, closed: bool) -> Result<Self, RaceLineError> {
        if samples.len() < 4 {
            return Err(RaceLineError::Invalid(format!("need at least 4 samples, got {}", samples.len())));
        }
        if samples[0].theta.abs() > 1e-9 {
            return Err(RaceLineError::Invalid(format!("first theta must be 0, got {}", samples[0].theta)));
        }
        for (i, s) in samples.iter().enumerate() {
            if ![s.theta, s.x, s.y, s.psi, s.v].iter().all(|v| v.is_finite()) {
                return Err(RaceLineError::Invalid(format!("non-finite sample {i}")));
            }
            if s.v < 0.0 {
                return Err(RaceLineError::Invalid(format!("negative speed at sample {i}")));
            }
            if i > 0 && s.theta <= samples[i - 1].theta {
                return Err(RaceLineError::Invalid(format!("theta not increasing at sample {i}")));
            }
        }
        let last = samples.last().unwrap();
        if closed && lap_length <= last.theta {
            return Err(RaceLineError::Invalid(format!(
                "lap length {lap_length} does not exceed last theta {}",
                last.theta
            )));
        }
        let mut theta: Vec<f64> = samples.iter().map(|s| s.theta).collect();
        theta[0] = 0.0;
        let mut xs: Vec<f64> = samples.iter().map(|s| s.x).collect();
        let mut ys: Vec<f64> = samples.iter().map(|s| s.y).collect();
        let mut psi: Vec<f64> = samples.iter().map(|s| s.psi).collect();
        let mut v: Vec<f64> = samples.iter().map(|s| s.v).collect();
        let mut winding = 0.0;
        if closed {
            winding = ((last.psi - samples[0].psi) / TAU).round() * TAU;
            theta.push(lap_length);
            xs.push(xs[0]);
            ys.push(ys[0]);
            psi.push(psi[0] + winding);
            v.push(v[0]);
        }
        let end = if closed { EndCondition::Periodic } else { EndCondition::Natural };
        let path = ArcPath::from_arc_samples(&theta, &xs, &ys, closed)?;
        let psi = CubicSpline::new(&theta, &psi, EndCondition::Natural).map_err(TrackError::from)?;
        let speed = CubicSpline::new(&theta, &v, end).map_err(TrackError::from)?;
        let lap_length = if closed { lap_length } else { last.theta };
        Ok(RaceLine {
            samples,
            lap_length,
            closed,
            path,
            psi,
            speed,
            winding,
        })
    }

    /// Same geometry with every speed multiplied by `factor` (> 0).
    pub fn with_speed_scale(&self, factor: f64) -> Result<RaceLine, RaceLineError> {
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(RaceLineError::Invalid(format!("speed scale must be positive, got {factor}")));
        }
        let samples = self.samples.iter().map(|s| RaceLineSample { v: s.v * factor, ..*s }).collect();
        RaceLine::new(samples, self.lap_length, self.closed)
    }

    pub fn samples(&self) -> &[RaceLineSample] {
        &self.samples
    }

    pub fn lap_length(&self) -> f64 {
        self.lap_length
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn path(&self) -> &ArcPath {
        &self.path
    }

    /// Lap time implied by the speed profile (trapezoidal in 1/v).
    pub fn lap_time(&self) -> f64 {
        let mut t = 0.0;
        let n = self.samples.len();
        let segments = if self.closed { n } else { n - 1 };
        for i in 0..segments {
            let a = &self.samples[i];
            let (theta_b, v_b) = if i + 1 < n {
                (self.samples[i + 1].theta, self.samples[i + 1].v)
            } else {
                (self.lap_length, self.samples[0].v)
            };
            let vm = 0.5 * (a.v + v_b);
            if vm <= 0.0 {
                return f64::INFINITY;
            }
            t += (theta_b - a.theta) / vm;
        }
        t
    }

    fn split(&self, theta: f64) -> (f64, f64) {
        if self.closed {
            let laps = (theta / self.lap_length).floor();
            (theta - laps * self.lap_length, laps)
        } else {
            (theta.clamp(0.0, self.lap_length), 0.0)
        }
    }

    pub fn speed(&self, theta: f64) -> f64 {
        let (t, _) = self.split(theta);
        self.speed.eval(t).max(0.0)
    }

    pub fn heading(&self, theta: f64) -> f64 {
        let (t, laps) = self.split(theta);
        self.psi.eval(t) + laps * self.winding
    }

    pub fn position(&self, theta: f64) -> (f64, f64) {
        self.path.eval(theta)
    }

    pub fn pose(&self, theta: f64) -> ReducedState {
        let (x, y) = self.position(theta);
        ReducedState {
            x,
            y,
            psi: self.heading(theta),
            v: self.speed(theta),
        }
    }

    /// Nearest race-line parameter, on the hint's lap when a hint is given.
    pub fn project(&self, x: f64, y: f64, hint: Option<f64>) -> f64 {
        self.path.project(x, y, hint)
    }

    /// Cubic interpolation of every channel onto `theta = k * d_theta`.
    pub fn resample(&self, d_theta: f64) -> Result<RaceLine, RaceLineError> {
        if !(d_theta > 0.0) {
            return Err(RaceLineError::Invalid(format!("resample step must be positive, got {d_theta}")));
        }
        let mut samples = Vec::new();
        let mut k = 0usize;
        loop {
            let theta = d_theta * k as f64;
            let beyond = if self.closed {
                theta >= self.lap_length - 1e-9 * self.lap_length
            } else {
                theta > self.lap_length + 1e-9 * self.lap_length
            };
            if beyond {
                break;
            }
            let (x, y) = self.position(theta);
            samples.push(RaceLineSample {
                theta,
                x,
                y,
                psi: self.psi.eval(theta),
                v: self.speed.eval(theta).max(0.0),
            });
            k += 1;
        }
        RaceLine::new(samples, self.lap_length, self.closed)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), RaceLineError> {
        let mut w = csv::Writer::from_path(path).map_err(|source| RaceLineError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        for s in &self.samples {
            w.serialize(s).map_err(|source| RaceLineError::Csv {
                path: path.to_path_buf(),
                source,
            })?;
        }
        w.flush().map_err(|source| RaceLineError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Closed race lines close from the last sample back to the first.
    pub fn read_csv(path: &Path, closed: bool) -> Result<RaceLine, RaceLineError> {
        let file = std::fs::File::open(path).map_err(|source| RaceLineError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut r = csv::Reader::from_reader(file);
        let header = r.headers().map_err(|source| RaceLineError::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        if header != vec!["theta", "x", "y", "psi", "v"] {
            return Err(RaceLineError::Invalid(format!(
                "`{}` header must be theta,x,y,psi,v",
                path.display()
            )));
        }
        let mut samples = Vec::new();
        for row in r.deserialize() {
            samples.push(row.map_err(|source| RaceLineError::Csv {
                path: path.to_path_buf(),
                source,
            })?);
        }
        let lap_length = match (closed, samples.first(), samples.last()) {
            (true, Some(a), Some(b)) => {
                let b: &RaceLineSample = b;
                let a: &RaceLineSample = a;
                b.theta + (a.x - b.x).hypot(a.y - b.y)
            }
            _ => samples.last().map_or(0.0, |s: &RaceLineSample| s.theta),
        };
        RaceLine::new(samples, lap_length, closed)
    }
}
