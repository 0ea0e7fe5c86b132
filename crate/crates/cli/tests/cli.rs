use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn racer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_racer"))
        .args(args)
        .output()
        .expect("racer runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// One planned oval shared by every test in this binary.
fn planned() -> &'static (tempfile::TempDir, PathBuf) {
    static PLAN: OnceLock<(tempfile::TempDir, PathBuf)> = OnceLock::new();
    PLAN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("plan");
        let o = racer(&["plan", "--track", "oval", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (dir, out.join("raceline.csv"))
    })
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn sim_config(dir: &Path, extra: &str) -> PathBuf {
    let rl = &planned().1;
    let body = format!("raceline = {:?}\nout_dir = \"out\"\n{extra}", rl.to_str().unwrap());
    write_config(dir, "run.toml", &body)
}

#[test]
fn plan_writes_a_valid_raceline_and_is_repeatable() {
    let (_, rl) = planned();
    let text = std::fs::read_to_string(rl).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "theta,x,y,psi,v");
    assert!(rows.len() > 100);
    let mut last = -1.0;
    for r in &rows[1..] {
        let cols: Vec<f64> = r.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols.len(), 5);
        assert!(cols[0] > last, "theta must increase");
        assert!(cols[4] > 0.0 && cols[4] < 4.5, "speed {}", cols[4]);
        last = cols[0];
    }
    let summary = std::fs::read_to_string(rl.parent().unwrap().join("plan_summary.toml")).unwrap();
    assert!(summary.contains("predicted_lap_time"));

    let dir = tempfile::tempdir().unwrap();
    let o = racer(&["plan", "--track", "oval", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("raceline.csv")).unwrap(), std::fs::read(rl).unwrap());
}

#[test]
fn plan_with_missing_track_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.csv");
    let o = racer(&["plan", "--track", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nowhere.csv"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", "[nmpc]\nhorizn = 4\n");
    let o = racer(&["plan", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("horizn"), "{}", stderr(&o));
}

/// Trace cells with wall-clock solve times blanked; everything else must repeat.
fn without_timing(trace: &[u8]) -> Vec<Vec<String>> {
    let text = std::str::from_utf8(trace).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let skip: Vec<usize> = ["nmpc_time", "mhe_time"]
        .iter()
        .map(|c| header.iter().position(|h| h == c).unwrap())
        .collect();
    text.lines()
        .map(|l| {
            l.split(',')
                .enumerate()
                .map(|(i, c)| if skip.contains(&i) { String::new() } else { c.to_string() })
                .collect()
        })
        .collect()
}

#[test]
fn simulate_is_deterministic_and_writes_trace_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sim_config(dir.path(), "");
    let mut traces = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = racer(&[
            "simulate",
            "--config",
            cfg.to_str().unwrap(),
            "--laps",
            "1",
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("rmse_total"));
        let metrics = std::fs::read_to_string(out.join("metrics_mpc.toml")).unwrap();
        assert!(metrics.contains("schema = \"racing-metrics/1\""));
        traces.push(std::fs::read(out.join("trace_mpc.csv")).unwrap());
    }
    assert_eq!(without_timing(&traces[0]), without_timing(&traces[1]));
    let text = String::from_utf8(traces.swap_remove(0)).unwrap();
    let widths: Vec<usize> = text.lines().map(|l| l.split(',').count()).collect();
    assert!(widths.iter().all(|w| *w == widths[0]));
}

#[test]
fn simulate_without_raceline_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = racer(&["simulate", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("raceline.csv"), "{}", stderr(&o));
}

#[test]
fn off_track_run_exits_3_and_keeps_the_partial_trace() {
    let dir = tempfile::tempdir().unwrap();
    // a 20 rad/s yaw drift overwhelms any steering the controller has
    let cfg = sim_config(dir.path(), "plant = \"biased\"\nplant_bias = [0.0, 0.0, 20.0, 0.0]\n");
    let o = racer(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("left the track"));
    let trace = std::fs::read_to_string(dir.path().join("out").join("trace_mpc.csv")).unwrap();
    assert!(trace.lines().count() > 1);
}

#[test]
fn train_gp_recovers_a_synthetic_bias_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sim_config(
        dir.path(),
        "plant = \"biased\"\nplant_bias = [0.0, 0.0, 0.0, 0.4]\nlaps = 1\n[sim.noise]\nenabled = false\n",
    );
    let o = racer(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let trace = dir.path().join("out").join("trace_mpc.csv");
    let mut models = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = racer(&[
            "train-gp",
            "--config",
            cfg.to_str().unwrap(),
            "--trace",
            trace.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let text = stdout(&o);
        for line in text.lines().skip(1) {
            let r2: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert!(r2 >= 0.99, "{line}");
        }
        models.push(std::fs::read(out.join("gp").join("gp_v.json")).unwrap());
    }
    assert_eq!(models[0], models[1]);
}

#[test]
fn train_gp_on_an_empty_trace_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("empty.csv");
    racing_core::sim::export_trace(&[], &trace).unwrap();
    let o = racer(&["train-gp", "--trace", trace.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn report_echoes_compares_and_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = sim_config(dir.path(), "laps = 1\n");
    let o = racer(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = dir.path().join("out").join("metrics_mpc.toml");
    let metrics = racing_core::sim::import_metrics(&m).unwrap();

    let o = racer(&["report", m.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let line = stdout(&o)
        .lines()
        .find(|l| l.starts_with("total") && l.contains("rmse_total"))
        .unwrap()
        .to_string();
    assert!(line.contains(&format!("{:.5}", metrics.total.rmse_total)), "{line}");
    assert!(!stdout(&o).contains("[1]-[0]"));

    let rep = dir.path().join("rep");
    let o = racer(&["report", m.to_str().unwrap(), m.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("[1]-[0]"));
    let csv = std::fs::read_to_string(rep.join("report.csv")).unwrap();
    assert!(csv.starts_with("section,metric,run0,run1,delta1"));
    assert!(csv.lines().any(|l| l.starts_with("total,rmse_total,") && l.ends_with(",0")));

    let bad = write_config(dir.path(), "bad.toml", "schema = \"racing-metrics/1\"\n");
    assert_eq!(code(&racer(&["report", bad.to_str().unwrap()])), 5);
    let text = std::fs::read_to_string(&m).unwrap().replace("racing-metrics/1", "racing-metrics/0");
    let old = write_config(dir.path(), "old.toml", &text);
    let o = racer(&["report", old.to_str().unwrap()]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("schema"));
}
