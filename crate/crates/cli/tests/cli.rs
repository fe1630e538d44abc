use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_oedct"));
    c.env_remove("OEDCT_THREADS");
    c
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn assert_ok(out: &Output) {
    assert!(out.status.success(), "status {:?}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
}

fn error_line(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn full_width(n: usize, m: usize, step: f64) -> Value {
    json!({
        "grid": {"n": n},
        "beam": {"detectors": m, "width": 1.0},
        "prior": {"gamma": 1.0, "ell": 0.05},
        "noise": {"sigma": 0.05},
        "design_grid": {"angle_step_deg": step},
        "criterion": "A",
        "rounds": 10
    })
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn design_writes_designs_landscapes_and_stamps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &full_width(20, 9, 1.0));
    let out_dir = dir.path().join("run");
    let out = run(&["design", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--threads", "1"]);
    assert_ok(&out);

    let p = csv_rows(&out_dir.join("P.csv"));
    assert_eq!(p.len(), 10);
    assert!(p.iter().all(|r| r[1].parse::<f64>().unwrap() == 0.0));
    assert!(fs::read_to_string(out_dir.join("P.csv")).unwrap().starts_with("angle_deg,offset\n"));

    for k in 1..=10 {
        let l = out_dir.join(format!("landscapes/round_{k:02}.csv"));
        let text = fs::read_to_string(&l).unwrap();
        assert!(text.starts_with("angle_deg,offset,phi_A,display_value\n"));
        assert_eq!(text.lines().count(), 181);
    }
    assert_eq!(csv_rows(&out_dir.join("targets.csv")).len(), 10);
    assert!(fs::read_to_string(out_dir.join("VERSION")).unwrap().starts_with("oedct "));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "design");
    assert_eq!(manifest["threads"], 1);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);

    // The copied config reproduces the run.
    let again = dir.path().join("again");
    let out = run(&["design", "--config", out_dir.join("config.json").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_ok(&out);
    assert_eq!(fs::read(again.join("P.csv")).unwrap(), fs::read(out_dir.join("P.csv")).unwrap());
    assert_eq!(fs::read(again.join("targets.csv")).unwrap(), fs::read(out_dir.join("targets.csv")).unwrap());
}

#[test]
fn zero_rounds_gives_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &full_width(10, 5, 10.0));
    let out_dir = dir.path().join("run");
    let out = run(&["design", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--rounds", "0", "--criterion", "D"]);
    assert_ok(&out);
    assert_eq!(fs::read_to_string(out_dir.join("P.csv")).unwrap(), "angle_deg,offset\n");
    let cfg_copy: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg_copy["rounds"], 0);
    assert_eq!(cfg_copy["criterion"], "D");
}

#[test]
fn config_errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = full_width(10, 5, 10.0);
    cfg["beam"]["width"] = json!(1.5);
    let path = write_config(dir.path(), &cfg);
    let out = run(&["design", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_line(&out);
    assert_eq!(e["code"], "InadmissibleDesign");
    assert!(e["message"].as_str().unwrap().contains("|c| + w/2 <= 0.5"));

    let mut cfg = full_width(10, 5, 10.0);
    cfg["prior"]["colour"] = json!(1);
    let path = write_config(dir.path(), &cfg);
    let out = run(&["design", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["field"], "prior.colour");

    let out = run(&["design", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["code"], "InvalidConfig");
}

#[test]
fn numerical_failure_exits_with_status_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = full_width(10, 5, 30.0);
    cfg["obstruction"] = json!({"kind": "full"});
    cfg["roi"] = json!({"kind": "full"});
    let path = write_config(dir.path(), &cfg);
    let out = run(&["design", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["code"], "AllCandidatesBlocked");
}

#[test]
fn study_three_policies_and_coarse_option() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = full_width(12, 7, 15.0);
    cfg["rounds"] = json!(3);
    cfg["study"] = json!({"replications": 3, "random_sequences": 2});
    let path = write_config(dir.path(), &cfg);
    let out_dir = dir.path().join("study");
    let out = run(&["study", "--config", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_ok(&out);
    let text = fs::read_to_string(out_dir.join("errors.csv")).unwrap();
    assert!(text.starts_with("policy,k,mean_error,std_error\n"));
    let rows = csv_rows(&out_dir.join("errors.csv"));
    assert_eq!(rows.len(), 3 * 4);
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names.iter().filter(|n| **n == "A").count(), 4);
    assert_eq!(names.iter().filter(|n| **n == "D").count(), 4);
    assert_eq!(names.iter().filter(|n| **n == "random").count(), 4);
    let m: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 1);

    // Coarse designs are added next to the dense ones.
    let mut cfg = cfg.clone();
    cfg["beam"]["width"] = json!(0.5);
    cfg["obstruction"] = json!({"kind": "rect", "lo": [0.0, 0.45], "hi": [0.5, 0.55]});
    cfg["roi"] = json!({"kind": "outside_obstruction"});
    cfg["study"] = json!({"replications": 2, "policies": ["A"], "coarse": {"n": 6, "detectors": 3}});
    let path = write_config(dir.path(), &cfg);
    let out_dir = dir.path().join("coarse");
    let out = run(&["study", "--config", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_ok(&out);
    let rows = csv_rows(&out_dir.join("errors.csv"));
    assert_eq!(rows.iter().filter(|r| r[0] == "A_coarse").count(), 4);
    assert_eq!(csv_rows(&out_dir.join("P_A_coarse.csv")).len(), 3);

    let out = run(&["study", "--config", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--policies", "A,E"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn study_smoke_at_desk_scale_is_quick() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &full_width(50, 23, 1.0));
    let out_dir = dir.path().join("smoke");
    let t = Instant::now();
    let out = run(&[
        "study",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--replications",
        "1",
        "--sequences",
        "1",
    ]);
    let elapsed = t.elapsed();
    assert_ok(&out);
    assert_eq!(csv_rows(&out_dir.join("errors.csv")).len(), 33);
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
}

fn estimate_config() -> Value {
    let mut cfg = full_width(16, 9, 10.0);
    cfg["prior"]["ell"] = json!(0.15);
    cfg["estimate"] = json!({"replications": 1});
    cfg
}

#[test]
fn estimate_simulated_trace_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &estimate_config());
    let mut traces = Vec::new();
    for name in ["a", "b"] {
        let out_dir = dir.path().join(name);
        let out = run(&["estimate", "--config", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--simulate", "--compare"]);
        assert_ok(&out);
        let rows = csv_rows(&out_dir.join("hyper_trace.csv"));
        assert_eq!(rows.len(), 10);
        assert!(rows.iter().all(|r| {
            let ell: f64 = r[1].parse().unwrap();
            (0.005..=0.5).contains(&ell)
        }));
        for f in ["truth.pgm", "recon_estimated.pgm", "recon_fixed.pgm", "reconstructions.csv", "hyper_summary.csv", "errors.csv"] {
            assert!(out_dir.join(f).exists(), "{f} missing");
        }
        let errors = csv_rows(&out_dir.join("errors.csv"));
        assert_eq!(errors.iter().filter(|r| r[0] == "fixed").count(), 11);
        traces.push(fs::read(out_dir.join("hyper_trace.csv")).unwrap());
    }
    assert_eq!(traces[0], traces[1]);

    let out = run(&["estimate", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn estimate_from_data_directory() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_config(dir.path(), &estimate_config());
    let data = dir.path().join("data");
    fs::create_dir_all(&data).unwrap();
    fs::write(data.join("P.csv"), "angle_deg,offset\n0,0\n90,0\n45,0\n").unwrap();
    for k in 1..=3 {
        let y: Vec<String> = (0..9).map(|i| format!("{}", ((i * 3 + k) % 7) as f64 * 0.05 - 0.1)).collect();
        fs::write(data.join(format!("y_{k:02}.csv")), y.join("\n")).unwrap();
    }
    let out_dir = dir.path().join("est");
    let out = run(&[
        "estimate",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--compare",
    ]);
    assert_ok(&out);
    assert_eq!(csv_rows(&out_dir.join("hyper_trace.csv")).len(), 3);
    let recon = csv_rows(&out_dir.join("reconstructions.csv"));
    assert_eq!(recon.len(), 256);
    assert_eq!(recon[0].len(), 3);

    fs::write(data.join("y_02.csv"), "1\n2\n").unwrap();
    let out = run(&["estimate", "--config", path.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(error_line(&out)["code"], "DimensionMismatch");
}

#[test]
fn serve_reports_bind_failure() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let out = run(&["serve", "--bind", &addr]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(error_line(&out)["code"], "BindFailure");
}

#[test]
fn threads_fall_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &full_width(8, 5, 30.0));
    let out_dir = dir.path().join("run");
    let out = bin()
        .args(["design", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap(), "--rounds", "2"])
        .env("OEDCT_THREADS", "2")
        .output()
        .unwrap();
    assert_ok(&out);
    let m: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["threads"], 2);
}
