//! `racer`: plan race lines, run closed-loop simulations, train GP
//! corrections and compare runs.
//!
//! Exit codes: 0 success, 1 other failure, 2 missing input file, 3 vehicle
//! left the track (partial trace written), 4 insufficient training data,
//! 5 malformed or mismatched metrics file.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use racing_core::config::{ConfigError, RunConfig};
use racing_core::learning::{collect_mismatch, train_gp, LearningError, CHANNELS};
use racing_core::planner::plan_raceline;
use racing_core::raceline::RaceLine;
use racing_core::registry;
use racing_core::sim::{
    build_controller, compute_metrics, export_metrics, export_trace, import_metrics, import_trace, run_closed_loop,
    LapMetrics, Metrics, Outcome, SimError,
};

#[derive(Parser, Debug)]
#[command(name = "racer", version, about = "Race-line planning, NMPC tracking and GP-corrected control")]
struct Cli {
    /// run configuration (TOML); omitted keys take the built-in defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// registered track name (oval, l_shape) or a waypoint CSV path
    #[arg(long, global = true)]
    track: Option<String>,
    /// controller name (mpc, l-mpc)
    #[arg(long, global = true)]
    controller: Option<String>,
    #[arg(long, global = true)]
    laps: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Plan the race line offline and write it with a summary.
    Plan,
    /// Run the closed loop on a planned race line; writes trace and metrics.
    Simulate,
    /// Fit the four mismatch regressors from a trace.
    TrainGp {
        /// trace CSV written by `simulate`
        #[arg(long)]
        trace: PathBuf,
        /// use only this lap of the trace
        #[arg(long)]
        lap: Option<usize>,
    },
    /// Compare metrics files side by side.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }

    fn missing(path: &Path) -> Self {
        Failure::new(2, format!("file not found: {}", path.display()))
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::MissingFile(p) => Failure::missing(&p),
            e => Failure::new(1, e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Command::Report { metrics } = &cli.command {
        return cmd_report(metrics, cli.out.as_deref());
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Plan => cmd_plan(&cfg),
        Command::Simulate => cmd_simulate(&cfg),
        Command::TrainGp { trace, lap } => cmd_train_gp(&cfg, trace, *lap),
        Command::Report { .. } => unreachable!(),
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(t) = &cli.track {
        if registry::tracks().get(t).is_ok() {
            cfg.track.name = t.clone();
            cfg.track.file = None;
        } else {
            let p = PathBuf::from(t);
            if !p.exists() {
                return Err(Failure::missing(&p));
            }
            cfg.track.file = Some(p);
        }
    }
    if let Some(c) = &cli.controller {
        cfg.controller = c.clone();
    }
    if let Some(l) = cli.laps {
        cfg.laps = l;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Print to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn create_out_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::new(1, format!("cannot create {}: {e}", dir.display())))
}

fn write_toml<T: Serialize>(value: &T, path: &Path) -> Result<(), Failure> {
    let text = toml::to_string(value).map_err(|e| Failure::new(1, e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Failure::new(1, format!("cannot write {}: {e}", path.display())))
}

#[derive(Serialize)]
struct PlanSummary {
    track: String,
    track_length: f64,
    raceline_length: f64,
    predicted_lap_time: f64,
    trajectory_lap_time: f64,
    windows: usize,
    retries: usize,
}

fn cmd_plan(cfg: &RunConfig) -> Result<(), Failure> {
    let track = cfg.track.geometry()?;
    let started = Instant::now();
    let plan = plan_raceline(&track, &cfg.vehicle, &cfg.planner)
        .map_err(|e| Failure::new(1, format!("planning failed: {e}")))?;
    log::info!("planned in {:.1} s", started.elapsed().as_secs_f64());
    create_out_dir(&cfg.out_dir)?;
    let path = cfg.raceline_path();
    plan.raceline.write_csv(&path).map_err(|e| Failure::new(1, e.to_string()))?;
    let summary = PlanSummary {
        track: cfg.track.label(),
        track_length: track.length(),
        raceline_length: plan.raceline.lap_length(),
        predicted_lap_time: plan.raceline.lap_time(),
        trajectory_lap_time: plan.trajectory_lap_time(),
        windows: plan.windows.len(),
        retries: plan.windows.iter().map(|w| w.retries).sum(),
    };
    write_toml(&summary, &cfg.out_dir.join("plan_summary.toml"))?;
    emit(&format!(
        "race line {}: length {:.3} m, predicted lap time {:.3} s",
        path.display(),
        summary.raceline_length,
        summary.predicted_lap_time
    ));
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig) -> Result<(), Failure> {
    let rl_path = cfg.raceline_path();
    if !rl_path.exists() {
        return Err(Failure::missing(&rl_path));
    }
    let raceline = RaceLine::read_csv(&rl_path, cfg.track.closed).map_err(|e| Failure::new(1, e.to_string()))?;
    let track = cfg.track.geometry()?;
    let plant_factory = *registry::plants().get(&cfg.plant).map_err(|e| Failure::new(1, e.to_string()))?;
    let plant = plant_factory(&cfg.plant_settings());
    let mut controller = build_controller(&cfg.controller, &cfg.nmpc, &cfg.gp, &cfg.vehicle, cfg.seed)
        .map_err(|e| Failure::new(1, e.to_string()))?;
    let trace = run_closed_loop(
        &track,
        &raceline,
        plant.as_ref(),
        controller.as_mut(),
        &cfg.mhe,
        &cfg.vehicle,
        &cfg.sim_config(),
        cfg.seed,
    )
    .map_err(|e| match &e {
        SimError::Training {
            source: LearningError::InsufficientData { .. },
            ..
        } => Failure::new(4, e.to_string()),
        _ => Failure::new(1, e.to_string()),
    })?;
    create_out_dir(&cfg.out_dir)?;
    let name = &cfg.controller;
    let trace_path = cfg.out_dir.join(format!("trace_{name}.csv"));
    export_trace(&trace.rows, &trace_path).map_err(|e| Failure::new(1, e.to_string()))?;
    let metrics = compute_metrics(&trace, &raceline, name, &cfg.track.label(), cfg.seed);
    let metrics_path = cfg.out_dir.join(format!("metrics_{name}.toml"));
    export_metrics(&metrics, &metrics_path).map_err(|e| Failure::new(1, e.to_string()))?;
    emit(&format_report(&[(metrics_path.display().to_string(), metrics)]));
    match trace.outcome {
        Outcome::Completed => Ok(()),
        Outcome::OffTrack {
            step,
            contour_error,
            half_width,
        } => Err(Failure::new(
            3,
            format!(
                "vehicle left the track at step {step} (|contour error| {:.3} m > half width {half_width:.3} m); partial trace in {}",
                contour_error.abs(),
                trace_path.display()
            ),
        )),
        Outcome::Timeout { steps } => Err(Failure::new(1, format!("no lap completion within {steps} steps"))),
    }
}

#[derive(Serialize)]
struct GpReport {
    samples: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
    /// held-out R^2 per channel; NaN where undefined
    r2: Vec<f64>,
    channels: Vec<String>,
}

fn cmd_train_gp(cfg: &RunConfig, trace: &Path, lap: Option<usize>) -> Result<(), Failure> {
    if !trace.exists() {
        return Err(Failure::missing(trace));
    }
    let rows = import_trace(trace).map_err(|e| Failure::new(1, e.to_string()))?;
    let rows: Vec<_> = match lap {
        Some(l) => rows.into_iter().filter(|r| r.lap == l).collect(),
        None => rows,
    };
    let data = collect_mismatch(&rows, &cfg.vehicle, cfg.sim.ts);
    let set = train_gp(&data, cfg.seed, &cfg.gp).map_err(|e| match e {
        LearningError::InsufficientData { .. } => Failure::new(4, format!("insufficient data: {e}")),
        e => Failure::new(1, e.to_string()),
    })?;
    let dir = cfg.out_dir.join("gp");
    set.save_dir(&dir).map_err(|e| Failure::new(1, e.to_string()))?;
    let report = GpReport {
        samples: data.len(),
        n_train: set.n_train,
        n_test: set.n_test,
        seed: cfg.seed,
        r2: set.r2.iter().map(|r| r.unwrap_or(f64::NAN)).collect(),
        channels: CHANNELS.iter().map(|c| c.to_string()).collect(),
    };
    write_toml(&report, &dir.join("r2.toml"))?;
    let mut table = String::from("channel,r2");
    for (c, r) in CHANNELS.iter().zip(&report.r2) {
        let _ = write!(table, "\n{c},{r:.6}");
    }
    emit(&table);
    Ok(())
}

fn cmd_report(paths: &[PathBuf], out: Option<&Path>) -> Result<(), Failure> {
    let mut runs = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(Failure::missing(p));
        }
        let m = import_metrics(p).map_err(|e| Failure::new(5, e.to_string()))?;
        runs.push((p.display().to_string(), m));
    }
    emit(&format_report(&runs));
    if let Some(dir) = out {
        create_out_dir(dir)?;
        let path = dir.join("report.csv");
        std::fs::write(&path, report_csv(&runs)).map_err(|e| Failure::new(1, format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

type Field = (&'static str, fn(&LapMetrics) -> f64);

const FIELDS: [Field; 13] = [
    ("lap_time", |m| m.lap_time),
    ("distance", |m| m.distance),
    ("rmse_total", |m| m.rmse_total),
    ("rmse_lateral", |m| m.rmse_lateral),
    ("rmse_longitudinal", |m| m.rmse_longitudinal),
    ("max_speed", |m| m.max_speed),
    ("avg_speed", |m| m.avg_speed),
    ("lap_speed", |m| m.lap_speed),
    ("nmpc_time_median", |m| m.nmpc_time_median),
    ("nmpc_time_mean", |m| m.nmpc_time_mean),
    ("nmpc_time_p90", |m| m.nmpc_time_p90),
    ("mhe_time_median", |m| m.mhe_time_median),
    ("mhe_time_mean", |m| m.mhe_time_mean),
];

/// (section, metric, value per run); sections are the whole run and each
/// completed lap index present in any run.
fn report_rows(runs: &[(String, Metrics)]) -> Vec<(String, &'static str, Vec<Option<f64>>)> {
    let mut sections: Vec<Option<usize>> = vec![None];
    let max_lap = runs.iter().map(|(_, m)| m.laps.len()).max().unwrap_or(0);
    sections.extend((0..max_lap).map(Some));
    let mut rows = Vec::new();
    for s in sections {
        let label = s.map_or("total".to_string(), |l| format!("lap {l}"));
        for (name, get) in FIELDS {
            let values = runs
                .iter()
                .map(|(_, m)| match s {
                    None => Some(get(&m.total)),
                    Some(l) => m.laps.get(l).map(get),
                })
                .collect();
            rows.push((label.clone(), name, values));
        }
    }
    rows
}

fn format_report(runs: &[(String, Metrics)]) -> String {
    let mut s = String::new();
    for (i, (path, m)) in runs.iter().enumerate() {
        let outcome = match &m.outcome {
            Outcome::Completed => "completed".to_string(),
            Outcome::OffTrack { step, .. } => format!("off track at step {step}"),
            Outcome::Timeout { steps } => format!("timeout after {steps} steps"),
        };
        let _ = writeln!(s, "[{i}] {path}: {} on {} (seed {}), {outcome}", m.controller, m.track, m.seed);
    }
    let mut header = format!("{:<8} {:<18}", "section", "metric");
    for i in 0..runs.len() {
        let _ = write!(header, " {:>12}", format!("[{i}]"));
    }
    for i in 1..runs.len() {
        let _ = write!(header, " {:>12}", format!("[{i}]-[0]"));
    }
    let _ = writeln!(s, "{header}");
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.5}"));
    for (section, name, values) in report_rows(runs) {
        let _ = write!(s, "{section:<8} {name:<18}");
        for v in &values {
            let _ = write!(s, " {:>12}", cell(*v));
        }
        for v in values.iter().skip(1) {
            let d = match (v, values[0]) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            };
            let _ = write!(s, " {:>12}", cell(d));
        }
        let _ = writeln!(s);
    }
    s
}

fn report_csv(runs: &[(String, Metrics)]) -> String {
    let mut s = String::from("section,metric");
    for i in 0..runs.len() {
        let _ = write!(s, ",run{i}");
    }
    for i in 1..runs.len() {
        let _ = write!(s, ",delta{i}");
    }
    s.push('\n');
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    for (section, name, values) in report_rows(runs) {
        let _ = write!(s, "{section},{name}");
        for v in &values {
            let _ = write!(s, ",{}", cell(*v));
        }
        for v in values.iter().skip(1) {
            let d = match (v, values[0]) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            };
            let _ = write!(s, ",{}", cell(d));
        }
        s.push('\n');
    }
    s
}
