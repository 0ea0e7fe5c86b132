//! Track geometry: arc-length parameterised centerline and boundaries,
//! projection onto the centerline and the contouring error.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::spline::{CubicSpline, EndCondition, SplineError};

/// Target spacing of the arc-length knots, m.
const KNOT_SPACING: f64 = 0.05;

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("invalid waypoints: {0}")]
    Waypoints(String),
    #[error("offset boundary self-intersects for theta in [{from:.3}, {to:.3}] m (half width x curvature >= 1)")]
    SelfIntersection { from: f64, to: f64 },
    #[error("invalid track synthesis request: {0}")]
    Synthesis(String),
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("track file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("track file {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
    pub half_width: f64,
}

/// Ordered track samples; the closing segment of a loop is implicit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Waypoints {
    pub points: Vec<Waypoint>,
}

impl Waypoints {
    pub fn new(points: Vec<Waypoint>) -> Self {
        Waypoints { points }
    }

    pub fn validate(&self) -> Result<(), TrackError> {
        if self.points.len() < 4 {
            return Err(TrackError::Waypoints(format!("need at least 4 points, got {}", self.points.len())));
        }
        for (i, p) in self.points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.half_width.is_finite()) {
                return Err(TrackError::Waypoints(format!("non-finite value at row {i}")));
            }
            if p.half_width <= 0.0 {
                return Err(TrackError::Waypoints(format!("half width must be positive at row {i}")));
            }
        }
        for (i, w) in self.points.windows(2).enumerate() {
            if (w[1].x - w[0].x).hypot(w[1].y - w[0].y) < 1e-9 {
                return Err(TrackError::Waypoints(format!("rows {i} and {} coincide", i + 1)));
            }
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, TrackError> {
        let p = path.display().to_string();
        let file = std::fs::File::open(path).map_err(|source| TrackError::Io { path: p.clone(), source })?;
        let mut rdr = csv::Reader::from_reader(file);
        let mut points = Vec::new();
        for row in rdr.deserialize() {
            points.push(row.map_err(|source| TrackError::Csv { path: p.clone(), source })?);
        }
        Ok(Waypoints { points })
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrackError> {
        let p = path.display().to_string();
        let mut w = csv::Writer::from_path(path).map_err(|source| TrackError::Csv { path: p.clone(), source })?;
        for pt in &self.points {
            w.serialize(pt).map_err(|source| TrackError::Csv { path: p.clone(), source })?;
        }
        w.flush().map_err(|source| TrackError::Io { path: p, source })
    }
}

/// Reference point on a parameterised curve together with the derivatives
/// the planner and controller constraints need.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub x: f64,
    pub y: f64,
    pub dx: f64,
    pub dy: f64,
    pub ddx: f64,
    pub ddy: f64,
}

impl CurvePoint {
    pub fn heading_raw(&self) -> f64 {
        self.dy.atan2(self.dx)
    }

    /// d(heading)/d(theta)
    pub fn heading_rate(&self) -> f64 {
        (self.dx * self.ddy - self.dy * self.ddx) / (self.dx * self.dx + self.dy * self.dy)
    }

    pub fn curvature(&self) -> f64 {
        let n = (self.dx * self.dx + self.dy * self.dy).sqrt();
        (self.dx * self.ddy - self.dy * self.ddx) / (n * n * n)
    }
}

/// Contouring (lateral) and lag (along-track) errors of a point relative to
/// the curve at a given parameter, with their parameter derivatives.
///
/// Partial derivatives with respect to the position are `(sin, -cos)` for the
/// contour error and `(cos, sin)` for the lag error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContourTerms {
    pub contour: f64,
    pub lag: f64,
    pub sin: f64,
    pub cos: f64,
    pub d_contour_dtheta: f64,
    pub d_lag_dtheta: f64,
}

/// A planar curve parameterised by arc length (open or closed).
#[derive(Debug, Clone)]
pub struct ArcPath {
    x: CubicSpline,
    y: CubicSpline,
    closed: bool,
    length: f64,
    /// unwrapped tangent heading at each knot
    knot_heading: Vec<f64>,
    /// heading gained over one lap (closed paths)
    winding: f64,
}

impl ArcPath {
    /// Fit through `(x, y)` samples, re-parameterising by arc length.
    /// For closed paths the last sample connects back to the first.
    pub fn fit(points: &[(f64, f64)], closed: bool) -> Result<Self, TrackError> {
        if points.len() < 4 {
            return Err(TrackError::Waypoints(format!("need at least 4 points, got {}", points.len())));
        }
        Ok(fit_arc_length(points, closed)?.0)
    }

    /// Build directly from samples whose parameter already is arc length,
    /// starting at 0. Closed paths repeat the first point as the last sample.
    pub fn from_arc_samples(theta: &[f64], xs: &[f64], ys: &[f64], closed: bool) -> Result<Self, TrackError> {
        let end = if closed { EndCondition::Periodic } else { EndCondition::Natural };
        let x = CubicSpline::new(theta, xs, end)?;
        let y = CubicSpline::new(theta, ys, end)?;
        let length = *theta.last().unwrap();
        let mut knot_heading = Vec::with_capacity(theta.len());
        let mut prev = None::<f64>;
        for &t in theta {
            let raw = y.derivative(t).atan2(x.derivative(t));
            let h = match prev {
                Some(p) => unwrap_near(raw, p),
                None => raw,
            };
            knot_heading.push(h);
            prev = Some(h);
        }
        let winding = if closed {
            let total = knot_heading.last().unwrap() - knot_heading[0];
            (total / TAU).round() * TAU
        } else {
            0.0
        };
        Ok(ArcPath {
            x,
            y,
            closed,
            length,
            knot_heading,
            winding,
        })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn knots(&self) -> &[f64] {
        self.x.knots()
    }

    /// Wraps (closed) or clamps (open) a parameter into `[0, L]`.
    pub fn normalize(&self, theta: f64) -> f64 {
        if self.closed {
            theta.rem_euclid(self.length)
        } else {
            theta.clamp(0.0, self.length)
        }
    }

    pub fn point(&self, theta: f64) -> CurvePoint {
        let t = self.normalize(theta);
        let (x, dx, ddx) = self.x.eval_all(t);
        let (y, dy, ddy) = self.y.eval_all(t);
        CurvePoint { x, y, dx, dy, ddx, ddy }
    }

    pub fn eval(&self, theta: f64) -> (f64, f64) {
        let p = self.point(theta);
        (p.x, p.y)
    }

    /// Tangent heading, continuous in theta (adds the lap winding for closed paths).
    pub fn heading(&self, theta: f64) -> f64 {
        let t = self.normalize(theta);
        let laps = if self.closed { (theta / self.length).floor() } else { 0.0 };
        let knots = self.x.knots();
        let idx = knots.partition_point(|&k| k <= t).saturating_sub(1).min(knots.len() - 1);
        let raw = self.point(t).heading_raw();
        unwrap_near(raw, self.knot_heading[idx]) + laps * self.winding
    }

    pub fn curvature(&self, theta: f64) -> f64 {
        self.point(theta).curvature()
    }

    pub fn contour_terms(&self, px: f64, py: f64, theta: f64) -> ContourTerms {
        let p = self.point(theta);
        let norm = p.dx.hypot(p.dy);
        let (sin, cos) = (p.dy / norm, p.dx / norm);
        let rate = p.heading_rate();
        let (ex, ey) = (px - p.x, py - p.y);
        ContourTerms {
            contour: sin * ex - cos * ey,
            lag: cos * ex + sin * ey,
            sin,
            cos,
            d_contour_dtheta: cos * rate * ex + sin * rate * ey - sin * p.dx + cos * p.dy,
            d_lag_dtheta: -sin * rate * ex + cos * rate * ey - cos * p.dx - sin * p.dy,
        }
    }

    /// Signed orthogonal distance; positive to the right of the travel direction.
    pub fn contour_error(&self, px: f64, py: f64, theta: f64) -> f64 {
        self.contour_terms(px, py, theta).contour
    }

    fn dist2(&self, px: f64, py: f64, theta: f64) -> f64 {
        let (x, y) = self.eval(theta);
        (px - x) * (px - x) + (py - y) * (py - y)
    }

    /// Closest-point parameter. With a hint the search is local around it
    /// and the result is returned on the hint's lap; otherwise a global grid
    /// search over `[0, L)` seeds the refinement.
    pub fn project(&self, px: f64, py: f64, hint: Option<f64>) -> f64 {
        let (lo, hi, samples) = match hint {
            Some(h) => {
                let w = (1.5f64).min(self.length / 2.0);
                (h - w, h + w, 151)
            }
            None => {
                let n = 512usize.max((self.length / 0.02).ceil() as usize);
                (0.0, self.length, n)
            }
        };
        let (lo, hi) = if self.closed {
            (lo, hi)
        } else {
            (lo.max(0.0), hi.min(self.length))
        };
        let step = (hi - lo) / samples as f64;
        let mut best = lo;
        let mut best_d = f64::INFINITY;
        for i in 0..=samples {
            let t = lo + step * i as f64;
            let d = self.dist2(px, py, t);
            if d < best_d {
                best_d = d;
                best = t;
            }
        }
        let refined = self.newton_refine(px, py, best, (best - step).max(lo), (best + step).min(hi));
        let result = if self.dist2(px, py, refined) <= best_d { refined } else { best };
        match hint {
            Some(_) => result,
            None if self.closed => result.rem_euclid(self.length),
            None => result,
        }
    }

    fn newton_refine(&self, px: f64, py: f64, start: f64, lo: f64, hi: f64) -> f64 {
        let mut t = start;
        for _ in 0..30 {
            let p = self.point(t);
            let (ex, ey) = (px - p.x, py - p.y);
            let g = -(ex * p.dx + ey * p.dy);
            let h = p.dx * p.dx + p.dy * p.dy - (ex * p.ddx + ey * p.ddy);
            let step = if h > 1e-12 { g / h } else { g };
            let next = (t - step).clamp(lo, hi);
            if (next - t).abs() < 1e-13 * (1.0 + self.length) {
                return next;
            }
            t = next;
        }
        t
    }
}

fn unwrap_near(angle: f64, reference: f64) -> f64 {
    angle + TAU * ((reference - angle) / TAU).round()
}

fn gauss_legendre_5(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    const NODES: [f64; 5] = [0.0, -0.538_469_310_105_683, 0.538_469_310_105_683, -0.906_179_845_938_664, 0.906_179_845_938_664];
    const WEIGHTS: [f64; 5] = [
        0.568_888_888_888_889,
        0.478_628_670_499_366,
        0.478_628_670_499_366,
        0.236_926_885_056_189,
        0.236_926_885_056_189,
    ];
    let (m, r) = ((a + b) / 2.0, (b - a) / 2.0);
    NODES.iter().zip(WEIGHTS).map(|(n, w)| w * f(m + r * n)).sum::<f64>() * r
}

/// Chord-parameterised fit, then resampling at equal arc length and a refit
/// in the arc-length parameter. Returns the path, the arc-length knots and
/// the chord parameter of each resampled knot.
fn fit_arc_length(points: &[(f64, f64)], closed: bool) -> Result<(ArcPath, Vec<f64>, Vec<f64>), TrackError> {
    let mut pts: Vec<(f64, f64)> = points.to_vec();
    if closed {
        pts.push(points[0]);
    }
    let mut chord = vec![0.0];
    for w in pts.windows(2) {
        let d = (w[1].0 - w[0].0).hypot(w[1].1 - w[0].1);
        if d < 1e-12 {
            return Err(TrackError::Waypoints("consecutive points coincide".into()));
        }
        chord.push(chord.last().unwrap() + d);
    }
    let end = if closed { EndCondition::Periodic } else { EndCondition::Natural };
    let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let sx = CubicSpline::new(&chord, &xs, end)?;
    let sy = CubicSpline::new(&chord, &ys, end)?;
    let speed = |t: f64| sx.derivative(t).hypot(sy.derivative(t));

    // cumulative arc length at fine sub-intervals of each chord segment
    const SUB: usize = 8;
    let mut fine_t = vec![chord[0]];
    let mut fine_s = vec![0.0];
    for w in chord.windows(2) {
        let h = (w[1] - w[0]) / SUB as f64;
        for j in 0..SUB {
            let a = w[0] + h * j as f64;
            let s = fine_s.last().unwrap() + gauss_legendre_5(speed, a, a + h);
            fine_t.push(a + h);
            fine_s.push(s);
        }
    }
    let total = *fine_s.last().unwrap();
    let count = ((total / KNOT_SPACING).ceil() as usize).max(8 * points.len()).max(16);
    let ds = total / count as f64;

    let mut theta = Vec::with_capacity(count + 1);
    let mut rx = Vec::with_capacity(count + 1);
    let mut ry = Vec::with_capacity(count + 1);
    let mut chord_of_knot = Vec::with_capacity(count + 1);
    let mut seg = 0usize;
    for j in 0..=count {
        let target = ds * j as f64;
        while seg + 1 < fine_s.len() - 1 && fine_s[seg + 1] < target {
            seg += 1;
        }
        // Newton on s(t) = target inside [fine_t[seg], fine_t[seg+1]]
        let (t0, t1) = (fine_t[seg], fine_t[seg + 1]);
        let (s0, s1) = (fine_s[seg], fine_s[seg + 1]);
        let mut t = if s1 > s0 { t0 + (t1 - t0) * (target - s0) / (s1 - s0) } else { t0 };
        for _ in 0..20 {
            let s = s0 + gauss_legendre_5(speed, t0, t);
            let step = (s - target) / speed(t).max(1e-12);
            t = (t - step).clamp(t0, t1);
            if step.abs() < 1e-14 {
                break;
            }
        }
        theta.push(target);
        chord_of_knot.push(t);
        rx.push(sx.eval(t));
        ry.push(sy.eval(t));
    }
    if closed {
        // exact periodic closure
        rx[count] = rx[0];
        ry[count] = ry[0];
    }
    theta[count] = total;
    let path = ArcPath::from_arc_samples(&theta, &rx, &ry, closed)?;
    Ok((path, theta, chord_of_knot))
}

/// Fitted track: centerline, half width and boundary curves, all indexed by
/// centerline arc length.
#[derive(Debug, Clone)]
pub struct TrackGeometry {
    pub centerline: ArcPath,
    half_width: CubicSpline,
    left: (CubicSpline, CubicSpline),
    right: (CubicSpline, CubicSpline),
}

impl TrackGeometry {
    pub fn length(&self) -> f64 {
        self.centerline.length()
    }

    pub fn is_closed(&self) -> bool {
        self.centerline.is_closed()
    }

    pub fn eval_centerline(&self, theta: f64) -> (f64, f64) {
        self.centerline.eval(theta)
    }

    pub fn heading(&self, theta: f64) -> f64 {
        self.centerline.heading(theta)
    }

    pub fn curvature(&self, theta: f64) -> f64 {
        self.centerline.curvature(theta)
    }

    pub fn half_width(&self, theta: f64) -> f64 {
        self.half_width.eval(self.centerline.normalize(theta))
    }

    /// Half width and its derivative with respect to theta.
    pub fn half_width_with_slope(&self, theta: f64) -> (f64, f64) {
        let (w, dw, _) = self.half_width.eval_all(self.centerline.normalize(theta));
        (w, dw)
    }

    pub fn left_boundary(&self, theta: f64) -> (f64, f64) {
        let t = self.centerline.normalize(theta);
        (self.left.0.eval(t), self.left.1.eval(t))
    }

    pub fn right_boundary(&self, theta: f64) -> (f64, f64) {
        let t = self.centerline.normalize(theta);
        (self.right.0.eval(t), self.right.1.eval(t))
    }

    pub fn project(&self, x: f64, y: f64, hint: Option<f64>) -> f64 {
        self.centerline.project(x, y, hint)
    }

    pub fn contour_error(&self, x: f64, y: f64, theta: f64) -> f64 {
        self.centerline.contour_error(x, y, theta)
    }

    pub fn contour_terms(&self, x: f64, y: f64, theta: f64) -> ContourTerms {
        self.centerline.contour_terms(x, y, theta)
    }

    /// Axis-aligned bounding box of the boundaries: (min x, min y, max x, max y).
    pub fn bounding_box(&self) -> (f64, f64, f64, f64) {
        let mut bb = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &t in self.centerline.knots() {
            for (x, y) in [self.left_boundary(t), self.right_boundary(t)] {
                bb = (bb.0.min(x), bb.1.min(y), bb.2.max(x), bb.3.max(y));
            }
        }
        bb
    }
}

/// Fit the centerline spline, re-parameterise by arc length and offset the
/// boundaries along the normal.
pub fn fit_track(w: &Waypoints, closed: bool) -> Result<TrackGeometry, TrackError> {
    w.validate()?;
    if closed {
        let (a, b) = (w.points[0], *w.points.last().unwrap());
        if (a.x - b.x).hypot(a.y - b.y) < 1e-9 {
            return Err(TrackError::Waypoints("closed tracks must not repeat the first point".into()));
        }
    }
    let pts: Vec<(f64, f64)> = w.points.iter().map(|p| (p.x, p.y)).collect();
    let (centerline, theta, chord_t) = fit_arc_length(&pts, closed)?;

    // half width interpolated in the chord parameter, then carried to the arc-length knots
    let mut chord = vec![0.0];
    let mut hw: Vec<f64> = w.points.iter().map(|p| p.half_width).collect();
    let mut cpts = pts.clone();
    if closed {
        cpts.push(pts[0]);
        hw.push(hw[0]);
    }
    for wd in cpts.windows(2) {
        chord.push(chord.last().unwrap() + (wd[1].0 - wd[0].0).hypot(wd[1].1 - wd[0].1));
    }
    let end = if closed { EndCondition::Periodic } else { EndCondition::Natural };
    let hw_chord = CubicSpline::new(&chord, &hw, end)?;
    let mut hw_knots: Vec<f64> = chord_t.iter().map(|&t| hw_chord.eval(t)).collect();
    if closed {
        let last = hw_knots.len() - 1;
        hw_knots[last] = hw_knots[0];
    }
    let half_width = CubicSpline::new(&theta, &hw_knots, end)?;

    // offset validity: the boundary folds where half width * |curvature| >= 1
    let mut bad: Option<(f64, f64)> = None;
    for (&t, &h) in theta.iter().zip(&hw_knots) {
        if h <= 0.0 {
            return Err(TrackError::Waypoints(format!("half width non-positive at theta {t:.3}")));
        }
        if h * centerline.curvature(t).abs() >= 1.0 {
            bad = Some(match bad {
                Some((a, _)) => (a, t),
                None => (t, t),
            });
        } else if let Some((from, to)) = bad {
            return Err(TrackError::SelfIntersection { from, to });
        }
    }
    if let Some((from, to)) = bad {
        return Err(TrackError::SelfIntersection { from, to });
    }

    let mut lx = Vec::with_capacity(theta.len());
    let mut ly = Vec::with_capacity(theta.len());
    let mut rx = Vec::with_capacity(theta.len());
    let mut ry = Vec::with_capacity(theta.len());
    for (&t, &h) in theta.iter().zip(&hw_knots) {
        let p = centerline.point(t);
        let n = p.dx.hypot(p.dy);
        let (nx, ny) = (-p.dy / n, p.dx / n);
        lx.push(p.x + h * nx);
        ly.push(p.y + h * ny);
        rx.push(p.x - h * nx);
        ry.push(p.y - h * ny);
    }
    if closed {
        let k = theta.len() - 1;
        lx[k] = lx[0];
        ly[k] = ly[0];
        rx[k] = rx[0];
        ry[k] = ry[0];
    }
    Ok(TrackGeometry {
        half_width,
        left: (CubicSpline::new(&theta, &lx, end)?, CubicSpline::new(&theta, &ly, end)?),
        right: (CubicSpline::new(&theta, &rx, end)?, CubicSpline::new(&theta, &ry, end)?),
        centerline,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackKind {
    LShape,
    Oval,
}

impl TrackKind {
    pub fn name(self) -> &'static str {
        match self {
            TrackKind::LShape => "l_shape",
            TrackKind::Oval => "oval",
        }
    }
}

/// Parameters of a synthesised test track.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackSpec {
    pub kind: TrackKind,
    /// Straight length (oval) or outer side length (L-shape), m.
    pub scale: f64,
    /// Full track width, m.
    pub width: f64,
    /// Corner fillet radius for the L-shape; defaults to `scale / 6`.
    #[serde(default)]
    pub fillet: Option<f64>,
}

impl TrackSpec {
    pub fn new(kind: TrackKind, scale: f64, width: f64) -> Self {
        TrackSpec {
            kind,
            scale,
            width,
            fillet: None,
        }
    }

    /// Oval corner radius for this scale.
    pub fn oval_radius(&self) -> f64 {
        self.scale / 4.0
    }
}

const SYNTH_SPACING: f64 = 0.25;

/// Deterministic waypoints for the two test tracks (counter-clockwise,
/// starting in the middle of a straight).
pub fn synthesize_track(spec: &TrackSpec) -> Result<Waypoints, TrackError> {
    if !(spec.scale.is_finite() && spec.scale > 0.0 && spec.width.is_finite() && spec.width > 0.0) {
        return Err(TrackError::Synthesis("scale and width must be positive".into()));
    }
    let hw = spec.width / 2.0;
    let pts = match spec.kind {
        TrackKind::Oval => {
            let r = spec.oval_radius();
            if hw >= r {
                return Err(TrackError::Synthesis(format!("width {} too large for corner radius {r}", spec.width)));
            }
            let s = spec.scale;
            let mut pts = Vec::new();
            line(&mut pts, (0.0, -r), (s / 2.0, -r));
            arc(&mut pts, (s / 2.0, 0.0), r, -PI / 2.0, PI / 2.0);
            line(&mut pts, (s / 2.0, r), (-s / 2.0, r));
            arc(&mut pts, (-s / 2.0, 0.0), r, PI / 2.0, 3.0 * PI / 2.0);
            line(&mut pts, (-s / 2.0, -r), (0.0, -r));
            pts
        }
        TrackKind::LShape => {
            let s = spec.scale;
            let rf = spec.fillet.unwrap_or(s / 6.0);
            if !(rf > 0.0) {
                return Err(TrackError::Synthesis("L-shape corners need a positive fillet radius".into()));
            }
            if hw >= rf {
                return Err(TrackError::Synthesis(format!("width {} too large for fillet radius {rf}", spec.width)));
            }
            if rf > s / 4.0 {
                return Err(TrackError::Synthesis(format!("fillet radius {rf} does not fit the {s} m layout")));
            }
            let corners = [(0.0, 0.0), (s, 0.0), (s, s / 2.0), (s / 2.0, s / 2.0), (s / 2.0, s), (0.0, s)];
            filleted_polygon(&corners, rf)
        }
    };
    let mut points: Vec<Waypoint> = pts
        .into_iter()
        .map(|(x, y)| Waypoint { x, y, half_width: hw })
        .collect();
    // drop the closing duplicate
    if let (Some(a), Some(b)) = (points.first(), points.last()) {
        if (a.x - b.x).hypot(a.y - b.y) < 1e-9 {
            points.pop();
        }
    }
    Ok(Waypoints { points })
}

fn line(pts: &mut Vec<(f64, f64)>, a: (f64, f64), b: (f64, f64)) {
    let len = (b.0 - a.0).hypot(b.1 - a.1);
    let n = ((len / SYNTH_SPACING).ceil() as usize).max(1);
    let start = if pts.is_empty() { 0 } else { 1 };
    for i in start..=n {
        let f = i as f64 / n as f64;
        pts.push((a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1)));
    }
}

fn arc(pts: &mut Vec<(f64, f64)>, c: (f64, f64), r: f64, from: f64, to: f64) {
    let len = r * (to - from).abs();
    let n = ((len / SYNTH_SPACING).ceil() as usize).max(2);
    for i in 1..=n {
        let a = from + (to - from) * i as f64 / n as f64;
        pts.push((c.0 + r * a.cos(), c.1 + r * a.sin()));
    }
}

fn filleted_polygon(corners: &[(f64, f64)], rf: f64) -> Vec<(f64, f64)> {
    let n = corners.len();
    let sub = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0, a.1 - b.1);
    let unit = |v: (f64, f64)| {
        let l = v.0.hypot(v.1);
        (v.0 / l, v.1 / l)
    };
    // tangent points and arc for each corner
    struct Fillet {
        enter: (f64, f64),
        exit: (f64, f64),
        center: (f64, f64),
        from: f64,
        to: f64,
    }
    let fillets: Vec<Fillet> = (0..n)
        .map(|i| {
            let v = corners[i];
            let a = unit(sub(v, corners[(i + n - 1) % n]));
            let b = unit(sub(corners[(i + 1) % n], v));
            let cross = a.0 * b.1 - a.1 * b.0;
            let turn = cross.atan2(a.0 * b.0 + a.1 * b.1);
            let t = rf * (turn.abs() / 2.0).tan();
            let enter = (v.0 - a.0 * t, v.1 - a.1 * t);
            let exit = (v.0 + b.0 * t, v.1 + b.1 * t);
            let left = turn > 0.0;
            let normal = if left { (-a.1, a.0) } else { (a.1, -a.0) };
            let center = (enter.0 + normal.0 * rf, enter.1 + normal.1 * rf);
            let from = (enter.1 - center.1).atan2(enter.0 - center.0);
            Fillet {
                enter,
                exit,
                center,
                from,
                to: from + turn,
            }
        })
        .collect();
    let mut pts = Vec::new();
    // start in the middle of the first edge
    let mid = (
        (corners[0].0 + corners[1].0) / 2.0,
        (corners[0].1 + corners[1].1) / 2.0,
    );
    line(&mut pts, mid, fillets[1].enter);
    for k in 1..=n {
        let i = k % n;
        let f = &fillets[i];
        arc(&mut pts, f.center, rf, f.from, f.to);
        let next = &fillets[(i + 1) % n];
        if i == 0 {
            line(&mut pts, f.exit, mid);
        } else {
            line(&mut pts, f.exit, next.enter);
        }
    }
    pts
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn straight(n: usize, spacing: f64) -> Waypoints {
        Waypoints::new(
            (0..n)
                .map(|i| Waypoint {
                    x: i as f64 * spacing,
                    y: 0.0,
                    half_width: 0.5,
                })
                .collect(),
        )
    }

    fn circle(r: f64, n: usize) -> Waypoints {
        Waypoints::new(
            (0..n)
                .map(|i| {
                    let a = TAU * i as f64 / n as f64;
                    Waypoint {
                        x: r * a.cos(),
                        y: r * a.sin(),
                        half_width: 0.3,
                    }
                })
                .collect(),
        )
    }

    #[test]
    fn straight_track() {
        let t = fit_track(&straight(4, 1.0), false).unwrap();
        assert_relative_eq!(t.length(), 3.0, epsilon = 1e-9);
        let (x, y) = t.eval_centerline(1.5);
        assert_relative_eq!(x, 1.5, epsilon = 1e-9);
        assert!(y.abs() < 1e-12);
        assert!(t.heading(1.0).abs() < 1e-12);
        assert_relative_eq!(t.project(2.0, 1.0, None), 2.0, epsilon = 1e-9);
        assert_relative_eq!(t.contour_error(2.0, 1.0, 2.0), -1.0, epsilon = 1e-9);
    }

    #[test]
    fn vertical_track_heading() {
        let w = Waypoints::new(
            (0..5)
                .map(|i| Waypoint {
                    x: 0.0,
                    y: i as f64,
                    half_width: 0.5,
                })
                .collect(),
        );
        let t = fit_track(&w, false).unwrap();
        assert_relative_eq!(t.heading(2.0), PI / 2.0, epsilon = 1e-12);
    }

    #[test]
    fn circle_track() {
        let r = 2.0;
        let t = fit_track(&circle(r, 40), true).unwrap();
        assert_relative_eq!(t.length(), TAU * r, max_relative = 1e-4);
        for i in 0..50 {
            let th = t.length() * i as f64 / 50.0;
            assert!((t.curvature(th) - 1.0 / r).abs() < 0.02 / r);
            assert_relative_eq!(t.heading(th) - t.heading(0.0), th / r, epsilon = 2e-3);
        }
        let (x, y) = t.eval_centerline(t.length());
        let (x0, y0) = t.eval_centerline(0.0);
        assert_relative_eq!(x, x0, epsilon = 1e-12);
        assert_relative_eq!(y, y0, epsilon = 1e-12);
        // half way round the circle is the antipode of the start point
        let (xh, yh) = t.eval_centerline(t.length() / 2.0);
        assert_relative_eq!(xh, -r, epsilon = 1e-3);
        assert!(yh.abs() < 1e-3);
        // second lap keeps the heading continuous
        assert_relative_eq!(t.heading(t.length() + 0.1) - t.heading(0.1), TAU, epsilon = 1e-9);
    }

    #[test]
    fn offset_self_intersection_is_rejected() {
        let mut w = circle(0.5, 24);
        for p in &mut w.points {
            p.half_width = 0.6;
        }
        assert!(matches!(fit_track(&w, true), Err(TrackError::SelfIntersection { .. })));
    }

    #[test]
    fn waypoint_validation() {
        assert!(fit_track(&straight(3, 1.0), false).is_err());
        let mut w = straight(5, 1.0);
        w.points[2] = w.points[1];
        assert!(fit_track(&w, false).is_err());
    }

    #[test]
    fn synthesized_oval_length() {
        let spec = TrackSpec::new(TrackKind::Oval, 6.0, 0.8);
        let w = synthesize_track(&spec).unwrap();
        let t = fit_track(&w, true).unwrap();
        let expected = 2.0 * 6.0 + TAU * spec.oval_radius();
        assert!((t.length() - expected).abs() < 0.05 * expected);
        assert_eq!(w, synthesize_track(&spec).unwrap());
    }

    #[test]
    fn synthesized_l_shape() {
        let mut spec = TrackSpec::new(TrackKind::LShape, 6.0, 0.8);
        let w = synthesize_track(&spec).unwrap();
        let t = fit_track(&w, true).unwrap();
        // six 90 degree corners: perimeter minus the fillet savings
        let rf = 1.0;
        let expected = 24.0 - 6.0 * (2.0 * rf - PI * rf / 2.0);
        assert!((t.length() - expected).abs() < 0.02 * expected, "{}", t.length());
        spec.fillet = Some(0.0);
        assert!(synthesize_track(&spec).is_err());
        spec.fillet = Some(0.3);
        assert!(synthesize_track(&spec).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("track.csv");
        let w = synthesize_track(&TrackSpec::new(TrackKind::Oval, 6.0, 0.8)).unwrap();
        w.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("x,y,half_width\n"));
        assert_eq!(Waypoints::read_csv(&path).unwrap(), w);
    }
}
