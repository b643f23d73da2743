use std::path::Path;
use std::process::{Command, Output};

fn quadtank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quadtank")).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    assert!(!out.status.success());
    serde_json::from_slice(&out.stderr).unwrap()
}

fn short_scenario(dir: &Path) -> String {
    let path = dir.join("short.toml");
    std::fs::write(
        &path,
        "base = \"sim1\"\nduration = 400.0\nseeds = [1, 2]\ncontrollers = [\"pid\", \"lmpc\"]\n\
         setpoints = [{ t = 0.0, value = [35.92, 35.92] }, { t = 100.0, value = [38.0, 35.92] }]\n",
    )
    .unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_writes_csvs_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_scenario(dir.path());
    let out = dir.path().join("out");
    let v = stdout_json(&quadtank(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]));
    assert_eq!(v["files"].as_array().unwrap().len(), 5);
    for name in ["sim1_pid_seed1.csv", "sim1_lmpc_seed2.csv", "metrics.json"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let header = std::fs::read_to_string(out.join("sim1_pid_seed1.csv")).unwrap();
    assert!(header.starts_with("t,y1,y2,y3,y4,zbar1,zbar2,u1,u2,d1,d2,d3,d4,x1,x2,x3,x4\n"));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(m["aggregate"]["lmpc"]["nise"]["mean"].as_f64().unwrap() > 0.0);

    // `metrics` recomputes the same numbers from the CSV.
    let again = stdout_json(&quadtank(&["metrics", out.join("sim1_pid_seed1.csv").to_str().unwrap()]));
    let run = m["runs"].as_array().unwrap().iter().find(|r| r["controller"] == "pid" && r["seed"] == 1).unwrap();
    assert_eq!(again[0]["metrics"], run["metrics"]);
}

#[test]
fn simulate_then_identify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_scenario(dir.path());
    let out = dir.path().join("sim");
    stdout_json(&quadtank(&["simulate", "--config", &cfg, "--controller", "pid", "--seed", "3", "--out", out.to_str().unwrap()]));
    let csv = out.join("sim1_pid_seed3.csv");
    let params = dir.path().join("est.toml");
    let v = stdout_json(&quadtank(&[
        "identify",
        "--data",
        csv.to_str().unwrap(),
        "--max-iter",
        "30",
        "--out",
        params.to_str().unwrap(),
    ]));
    assert!(v["nll"].as_f64().unwrap().is_finite());
    assert_eq!(v["fit_per_channel"].as_array().unwrap().len(), 4);
    let text = std::fs::read_to_string(&params).unwrap();
    assert!(quadtank::params::parse_params_toml(&text).is_ok());
}

#[test]
fn tune_reports_simc_gains() {
    let v = stdout_json(&quadtank(&["tune", "--tc", "50"]));
    let loops = v["loops"].as_array().unwrap();
    assert_eq!(loops.len(), 2);
    assert!(loops[0]["gains"]["kp"].as_f64().unwrap() > 0.0);
    assert_eq!(loops[0]["pairing"], "y1 -> u2");
}

#[test]
fn failures_are_reported_as_json() {
    let e = stderr_json(&quadtank(&["run", "--scenario", "sim9"]));
    assert_eq!(e["error"]["kind"], "unknown_scenario");
    let e = stderr_json(&quadtank(&["metrics", "/nonexistent/file.csv"]));
    assert_eq!(e["error"]["kind"], "io");
    let e = stderr_json(&quadtank(&["tune", "--u-op", "300"]));
    assert_eq!(e["error"]["kind"], "invalid_input");
    let e = stderr_json(&quadtank(&["frobnicate"]));
    assert_eq!(e["error"]["kind"], "usage");
    let e = stderr_json(&quadtank(&["simulate", "--controller", "mpc"]));
    assert_eq!(e["error"]["kind"], "usage");
}
