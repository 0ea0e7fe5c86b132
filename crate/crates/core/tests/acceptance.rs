//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the lines always print and so the
//! timing criterion sees a single busy thread. Exits non-zero when a
//! criterion fails that is not listed in `EXPECTED_FAILURES`.

use std::time::Instant;

use nalgebra::{Vector2, Vector4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use racing_core::control::{build_ocp, ControllerState, NmpcConfig, NominalModel, ReferenceWindow, WarmStart};
use racing_core::dynamics::{
    reduce_state, reduced_dynamics, rk4_step, tire_lateral_forces, ControlInput, ReducedState, VehicleParams,
};
use racing_core::estimation::{build_window, estimate, Measurement, MeasurementBuffer, MheConfig};
use racing_core::learning::{train_gp, wrap_angle, GpConfig, MismatchSample, INPUT_DIM};
use racing_core::nlp::{self, SolverOptions};
use racing_core::planner::{plan_centerline, plan_raceline, PlanResult, PlannerConfig};
use racing_core::registry::{self, PlantSettings};
use racing_core::sim::{
    build_controller, compute_metrics, run_closed_loop, Metrics, Outcome, SimConfig, SimTrace, TraceRow,
};
use racing_core::track::{fit_track, synthesize_track, TrackGeometry, Waypoint, Waypoints};

/// Criteria that fail with the shipped model pair; see the project notes.
const EXPECTED_FAILURES: &[&str] = &["3"];

const BUDGET: f64 = 0.033;
const SEED: u64 = 1;

struct Verdicts {
    failed: Vec<String>,
}

impl Verdicts {
    fn record(&mut self, id: &str, title: &str, pass: bool, detail: String) {
        let tag = match (pass, EXPECTED_FAILURES.contains(&id)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (expected)",
            (false, false) => "FAIL",
        };
        println!("{tag} [{id}] {title}: {detail}");
        if !pass && !EXPECTED_FAILURES.contains(&id) {
            self.failed.push(id.to_string());
        }
    }
}

struct TrackRun {
    name: &'static str,
    track: TrackGeometry,
    plan: PlanResult,
    center: PlanResult,
    mpc: (SimTrace, Metrics),
    lmpc: (SimTrace, Metrics),
}

fn synthesized(name: &str) -> TrackGeometry {
    let spec = registry::tracks().get(name).unwrap()(6.0, 0.8);
    fit_track(&synthesize_track(&spec).unwrap(), true).unwrap()
}

fn simulate(track: &TrackGeometry, plan: &PlanResult, controller: &str, laps: usize, seed: u64) -> SimTrace {
    let params = VehicleParams::default();
    let plant = registry::plants().get("full").unwrap()(&PlantSettings { params, bias: [0.0; 4] });
    let mut ctl = build_controller(controller, &NmpcConfig::default(), &GpConfig::default(), &params, seed).unwrap();
    let cfg = SimConfig {
        laps,
        ..SimConfig::default()
    };
    run_closed_loop(track, &plan.raceline, plant.as_ref(), ctl.as_mut(), &MheConfig::default(), &params, &cfg, seed)
        .unwrap()
}

fn run_track(name: &'static str) -> TrackRun {
    let track = synthesized(name);
    let params = VehicleParams::default();
    let cfg = PlannerConfig::default();
    let t = Instant::now();
    let plan = plan_raceline(&track, &params, &cfg).unwrap();
    let center = plan_centerline(&track, &params, &cfg).unwrap();
    eprintln!("{name}: planned in {:.1} s", t.elapsed().as_secs_f64());
    let [mpc, lmpc] = ["mpc", "l-mpc"].map(|c| {
        let trace = simulate(&track, &plan, c, 2, SEED);
        let m = compute_metrics(&trace, &plan.raceline, c, name, SEED);
        (trace, m)
    });
    TrackRun {
        name,
        track,
        plan,
        center,
        mpc,
        lmpc,
    }
}

fn without_timing(rows: &[TraceRow]) -> Vec<TraceRow> {
    rows.iter()
        .map(|r| TraceRow {
            nmpc_time: 0.0,
            mhe_time: 0.0,
            ..r.clone()
        })
        .collect()
}

fn inside(trace: &SimTrace, track: &TrackGeometry) -> bool {
    trace
        .rows
        .iter()
        .all(|r| r.contour_error.abs() <= track.half_width(track.project(r.plant_x, r.plant_y, None)))
}

// ---------------------------------------------------------------- criteria

fn timing(v: &mut Verdicts, runs: &[TrackRun]) {
    let mut pass = true;
    let mut worst = (0.0f64, 0.0f64, 0.0f64);
    for r in runs {
        for (_, m) in [&r.mpc, &r.lmpc] {
            for l in &m.laps {
                pass &= l.nmpc_time_median < BUDGET
                    && l.nmpc_time_p90 < BUDGET
                    && l.mhe_time_median < l.nmpc_time_median;
                worst.0 = worst.0.max(l.nmpc_time_median);
                worst.1 = worst.1.max(l.nmpc_time_p90);
                worst.2 = worst.2.max(l.mhe_time_median / l.nmpc_time_median);
            }
        }
    }
    v.record(
        "1",
        "real-time budget",
        pass,
        format!(
            "worst lap NMPC median {:.2} ms, p90 {:.2} ms (< 33 ms); worst MHE/NMPC median ratio {:.2} (< 1)",
            worst.0 * 1e3,
            worst.1 * 1e3,
            worst.2
        ),
    );
}

fn tracking(v: &mut Verdicts, runs: &[TrackRun]) {
    let mut pass = true;
    let mut detail = Vec::new();
    for r in runs {
        let (a, b) = (&r.mpc.1, &r.lmpc.1);
        let ok = a.laps.len() == 2 && b.laps.len() == 2 && {
            let (a, b) = (&a.laps[1], &b.laps[1]);
            b.rmse_total < a.rmse_total && b.rmse_lateral < a.rmse_lateral && a.rmse_total < 0.2 && b.rmse_total < 0.2
        };
        pass &= ok;
        if let (Some(a), Some(b)) = (a.laps.get(1), b.laps.get(1)) {
            detail.push(format!(
                "{} lap 1 total {:.4} vs {:.4}, lateral {:.4} vs {:.4}",
                r.name, b.rmse_total, a.rmse_total, b.rmse_lateral, a.rmse_lateral
            ));
        } else {
            detail.push(format!("{} did not complete two laps", r.name));
        }
    }
    v.record("2", "L-MPC tracks better than MPC (L-MPC vs MPC, m)", pass, detail.join("; "));
}

fn speed(v: &mut Verdicts, runs: &[TrackRun]) {
    let mut pass = true;
    let mut detail = Vec::new();
    for r in runs {
        let complete = r.mpc.0.outcome == Outcome::Completed
            && r.lmpc.0.outcome == Outcome::Completed
            && r.mpc.0.completed_laps() == 2
            && r.lmpc.0.completed_laps() == 2
            && inside(&r.mpc.0, &r.track)
            && inside(&r.lmpc.0, &r.track);
        let (a, b) = (r.mpc.1.laps.get(1), r.lmpc.1.laps.get(1));
        let faster = matches!((a, b), (Some(a), Some(b)) if b.lap_speed >= a.lap_speed);
        pass &= complete && faster;
        if let (Some(a), Some(b)) = (a, b) {
            detail.push(format!(
                "{} lap 1 speed {:.4} vs {:.4} m/s, contained {}",
                r.name, b.lap_speed, a.lap_speed, complete
            ));
        }
    }
    v.record("3", "L-MPC lap speed >= MPC (L-MPC vs MPC)", pass, detail.join("; "));
}

fn state_rmse(rows: &[TraceRow]) -> ([f64; 4], [f64; 4]) {
    let mut est = [0.0; 4];
    let mut meas = [0.0; 4];
    for r in rows {
        let truth = reduce_state(&r.plant());
        let e = r.estimated();
        let m = r.measured();
        let de = [e.x - truth.x, e.y - truth.y, wrap_angle(e.psi - truth.psi), e.v - truth.v];
        let dm = [m.x - truth.x, m.y - truth.y, wrap_angle(m.psi - truth.psi), m.v - truth.v];
        for i in 0..4 {
            est[i] += de[i] * de[i];
            meas[i] += dm[i] * dm[i];
        }
    }
    let n = rows.len() as f64;
    (est.map(|s| (s / n).sqrt()), meas.map(|s| (s / n).sqrt()))
}

fn estimation(v: &mut Verdicts, oval: &TrackRun) -> SimTrace {
    let mut pass = true;
    let mut ratios = [0.0f64; 4];
    let mut seed2 = None;
    for seed in 1..=5u64 {
        let trace = if seed == SEED {
            oval.mpc.0.clone()
        } else {
            simulate(&oval.track, &oval.plan, "mpc", 1, seed)
        };
        let (est, meas) = state_rmse(trace.lap_rows(0));
        for i in 0..4 {
            pass &= est[i] < meas[i];
            ratios[i] = ratios[i].max(est[i] / meas[i]);
        }
        if seed == 2 {
            seed2 = Some(trace);
        }
    }
    // noiseless window generated by the estimator's own model
    let p = VehicleParams::default();
    let cfg = MheConfig {
        solver: SolverOptions {
            tolerance: 1e-12,
            max_iterations: 50,
            ..SolverOptions::default()
        },
        ..MheConfig::default()
    };
    let mut x = ReducedState {
        x: 1.0,
        y: -0.5,
        psi: 0.3,
        v: 1.8,
    };
    let mut buf = MeasurementBuffer::new(cfg.window);
    buf.push(Measurement {
        step: 0,
        y: x,
        u: ControlInput::default(),
    });
    for k in 1..=cfg.window as u64 {
        let u = ControlInput::new(0.15 * (k as f64).sin(), 0.4);
        x = racing_core::dynamics::reduced_step(&x, &u, &p, cfg.ts);
        buf.push(Measurement { step: k, y: x, u });
    }
    let exact = estimate(&buf, &cfg, &p, None).unwrap();
    let err = (exact.state.to_vector() - x.to_vector()).amax();
    pass &= err <= 1e-6;
    v.record(
        "4",
        "MHE beats raw measurements",
        pass,
        format!(
            "worst estimate/measurement RMSE ratio over 5 seeds (X, Y, psi, v) = ({:.3}, {:.3}, {:.3}, {:.3}); noiseless window error {err:.1e}",
            ratios[0], ratios[1], ratios[2], ratios[3]
        ),
    );
    seed2.expect("seed 2 ran")
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

fn learning(v: &mut Verdicts, runs: &[TrackRun]) {
    let mut pass = true;
    let mut real = Vec::new();
    for r in runs {
        match r.lmpc.1.training.first() {
            Some(t) => {
                pass &= t.r2.iter().all(|x| *x >= 0.6);
                real.push(format!(
                    "{} [{}]",
                    r.name,
                    t.r2.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ")
                ));
            }
            None => {
                pass = false;
                real.push(format!("{} untrained", r.name));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let linear: Vec<MismatchSample> = random_inputs(&mut rng, 300)
        .into_iter()
        .map(|z| MismatchSample {
            z,
            e: [0, 1, 2, 3].map(|c| (c as f64 + 1.0) * z[0] - 0.7 * z[2] + 0.3 * z[4] + 0.05 * c as f64),
        })
        .collect();
    let set = train_gp(&linear, SEED, &GpConfig::default()).unwrap();
    let oracle = set.r2.iter().map(|r| r.unwrap_or(f64::NAN)).fold(f64::INFINITY, f64::min);
    pass &= oracle >= 0.99;

    let normal = Normal::new(0.0, 0.1).unwrap();
    let data: Vec<MismatchSample> = random_inputs(&mut rng, 800)
        .into_iter()
        .map(|z| {
            let f = (1.5 * z[0]).sin() + 0.5 * z[1];
            MismatchSample {
                z,
                e: [0; 4].map(|_: i32| f + normal.sample(&mut rng)),
            }
        })
        .collect();
    let (fit, held) = data.split_at(400);
    let set = train_gp(fit, SEED, &GpConfig::default()).unwrap();
    let m = &set.models[0];
    let hits = held
        .iter()
        .filter(|s| {
            let (mean, _) = m.predict(&s.z);
            (s.e[0] - mean).abs() <= 1.96 * m.predictive_variance(&s.z).sqrt()
        })
        .count();
    let coverage = hits as f64 / held.len() as f64;
    pass &= (0.90..=0.99).contains(&coverage);
    v.record(
        "5",
        "GP quality",
        pass,
        format!(
            "held-out R^2 on lap data {} (>= 0.6); linear oracle min R^2 {oracle:.4} (>= 0.99); 95% coverage {coverage:.3} (in [0.90, 0.99])",
            real.join(", ")
        ),
    );
}

/// Positive root of the full-throttle balance on a straight, by bisection.
fn bisect_top_speed(p: &VehicleParams) -> f64 {
    let f = |v: f64| (p.cm1 - p.cm2 * v) - p.cr1 - p.cr2 * v * v;
    let (mut lo, mut hi) = (0.0, 100.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

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

fn planner(v: &mut Verdicts, runs: &[TrackRun]) -> (PlanResult, PlanResult) {
    let mut pass = true;
    let mut detail = Vec::new();
    for r in runs {
        let (a, b) = (r.plan.trajectory_lap_time(), r.center.trajectory_lap_time());
        pass &= a < b;
        detail.push(format!("{} {a:.3} s vs centerline {b:.3} s", r.name));
    }
    let p = VehicleParams::default();
    let root = bisect_top_speed(&p);
    let track = straight(40.0);
    let cfg = PlannerConfig::default();
    let s1 = plan_raceline(&track, &p, &cfg).unwrap();
    let s2 = plan_raceline(&track, &p, &cfg).unwrap();
    let vmax = s1.states.iter().map(|s| s.vx).fold(0.0, f64::max);
    let rel = (vmax - root).abs() / root;
    pass &= rel <= 0.02;
    v.record(
        "6",
        "planner sanity",
        pass,
        format!(
            "{}; straight top speed {vmax:.4} m/s vs root {root:.4} m/s ({:.2}%, <= 2%)",
            detail.join(", "),
            rel * 100.0
        ),
    );
    (s1, s2)
}

fn rk4_order_ratio() -> f64 {
    let p = VehicleParams::default();
    let u = ControlInput::new(0.25, 0.6);
    let x0 = Vector4::new(0.0, 0.0, 0.3, 1.5);
    let run = |h: f64| {
        let n = (1.0 / h).round() as usize;
        let mut x = x0;
        for _ in 0..n {
            x = rk4_step(|s| Ok(reduced_dynamics(&ReducedState::from_vector(s), &u, &p).0), &x, h).unwrap();
        }
        x
    };
    let ts = 1.0 / 30.0;
    let reference = run(ts / 64.0);
    (run(ts) - reference).norm() / (run(ts / 2.0) - reference).norm()
}

fn projection_error(track: &TrackGeometry, rng: &mut ChaCha8Rng) -> f64 {
    let l = track.length();
    let dense: Vec<(f64, f64, f64)> = (0..100_000)
        .map(|i| {
            let t = l * i as f64 / 1e5;
            let (x, y) = track.eval_centerline(t);
            (t, x, y)
        })
        .collect();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let t = rng.random_range(0.0..l);
        let off = rng.random_range(-0.35..0.35);
        let (x, y) = track.eval_centerline(t);
        let h = track.heading(t);
        let (px, py) = (x - off * h.sin(), y + off * h.cos());
        let oracle = dense
            .iter()
            .min_by(|a, b| {
                let da = (a.1 - px).powi(2) + (a.2 - py).powi(2);
                let db = (b.1 - px).powi(2) + (b.2 - py).powi(2);
                da.total_cmp(&db)
            })
            .unwrap()
            .0;
        let d = (track.project(px, py, None) - oracle).rem_euclid(l);
        worst = worst.max(d.min(l - d));
    }
    worst
}

fn gradient_errors() -> (f64, f64) {
    let p = VehicleParams::default();
    let cfg = NmpcConfig::default();
    let n = cfg.horizon;
    let x = ReducedState {
        x: 0.3,
        y: -0.2,
        psi: 0.4,
        v: 1.7,
    };
    let reference = ReferenceWindow {
        theta: (1..=n).map(|k| k as f64 * 0.05).collect(),
        states: (1..=n)
            .map(|k| ReducedState {
                x: 0.3 + 0.05 * k as f64,
                y: -0.2,
                psi: 0.0,
                v: 1.7,
            })
            .collect(),
    };
    let cs = ControllerState {
        last_input: ControlInput::new(0.1, 0.4),
        warm: Some(WarmStart {
            states: (0..n)
                .map(|k| Vector4::new(0.3 + 0.05 * k as f64, -0.2, 0.4 - 0.02 * k as f64, 1.7))
                .collect(),
            increments: (0..n).map(|k| Vector2::new(0.01 * (k as f64).cos(), 0.01)).collect(),
        }),
        ..ControllerState::default()
    };
    let (ocp, z0) = build_ocp(&x, &reference, &cs, &cfg, &p, &NominalModel, None);
    let control = nlp::check_gradient(&ocp, &z0);

    let mcfg = MheConfig::default();
    let mut buf = MeasurementBuffer::new(mcfg.window);
    let mut s = x;
    for k in 0..=mcfg.window as u64 {
        let u = ControlInput::new(0.1, 0.3);
        buf.push(Measurement {
            step: k,
            y: ReducedState {
                x: s.x + 0.01 * (k as f64).sin(),
                ..s
            },
            u,
        });
        s = racing_core::dynamics::reduced_step(&s, &u, &p, mcfg.ts);
    }
    let (problem, z0, _) = build_window(&buf, &mcfg, &p, None).unwrap();
    let z = z0.map(|v| v * 1.01 + 0.01);
    (control, nlp::check_gradient(&problem, &z))
}

fn hygiene(v: &mut Verdicts, runs: &[TrackRun], straights: &(PlanResult, PlanResult), seed2: &SimTrace) {
    let p = VehicleParams::default();
    let mut tire = true;
    for i in 0..=2000 {
        let a = -2.0 + 4.0 * i as f64 / 2000.0;
        let (f, r) = tire_lateral_forces(a, a, &p);
        let (fm, rm) = tire_lateral_forces(-a, -a, &p);
        tire &= fm == -f && rm == -r && f.abs() <= p.df && r.abs() <= p.dr;
    }
    let ratio = rk4_order_ratio();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let proj = runs
        .iter()
        .map(|r| projection_error(&r.track, &mut rng) / (2.0 * r.track.length() / 1e5))
        .fold(0.0, f64::max);
    let (g_ctl, g_mhe) = gradient_errors();

    let (a, b) = straights;
    let plan_replay = a.raceline.samples() == b.raceline.samples() && a.inputs == b.inputs;
    let oval = &runs[0];
    let again = simulate(&oval.track, &oval.plan, "mpc", 1, 2);
    let sim_replay = without_timing(&again.rows) == without_timing(&seed2.rows);
    let ocp_cfg = NmpcConfig::default();
    let x = ReducedState {
        x: 0.0,
        y: 0.1,
        psi: 0.2,
        v: 1.5,
    };
    let reference = ReferenceWindow {
        theta: (1..=ocp_cfg.horizon).map(|k| 0.05 * k as f64).collect(),
        states: (1..=ocp_cfg.horizon)
            .map(|k| ReducedState {
                x: 0.05 * k as f64,
                y: 0.0,
                psi: 0.0,
                v: 1.5,
            })
            .collect(),
    };
    let (ocp, z0) = build_ocp(&x, &reference, &ControllerState::default(), &ocp_cfg, &p, &NominalModel, None);
    let s1 = nlp::solve(&ocp, &z0, &ocp_cfg.solver).unwrap();
    let s2 = nlp::solve(&ocp, &z0, &ocp_cfg.solver).unwrap();
    let nlp_replay = s1.z_star == s2.z_star;

    let pass = tire
        && (12.0..=20.0).contains(&ratio)
        && proj <= 1.0
        && g_ctl <= 1e-4
        && g_mhe <= 1e-4
        && plan_replay
        && sim_replay
        && nlp_replay;
    v.record(
        "7",
        "numerical hygiene",
        pass,
        format!(
            "tire odd/saturated {tire}; RK4 order ratio {ratio:.2} (in [12, 20]); projection error {proj:.3} x 2L/1e5 (<= 1); gradient check NMPC {g_ctl:.1e}, MHE {g_mhe:.1e} (<= 1e-4); bitwise replay planner {plan_replay}, sim {sim_replay}, NLP {nlp_replay}"
        ),
    );
}

fn main() {
    let start = Instant::now();
    let runs = [run_track("oval"), run_track("l_shape")];
    let mut v = Verdicts { failed: Vec::new() };
    timing(&mut v, &runs);
    tracking(&mut v, &runs);
    speed(&mut v, &runs);
    let seed2 = estimation(&mut v, &runs[0]);
    learning(&mut v, &runs);
    let straights = planner(&mut v, &runs);
    hygiene(&mut v, &runs, &straights, &seed2);
    println!("acceptance finished in {:.0} s", start.elapsed().as_secs_f64());
    if !v.failed.is_empty() {
        println!("unexpected failures: {}", v.failed.join(", "));
        std::process::exit(1);
    }
}
