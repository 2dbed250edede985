use std::process::{Command, Output};

use serde_json::Value;

fn recollide(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recollide")).args(args).env_remove("RECOLLIDE_SEED").output().expect("binary runs")
}

fn json(o: &Output) -> Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).expect("valid json")
}

#[test]
fn bounce_example_is_a_two_row_trace() {
    let o = recollide(&["bounce", "--u", "0,1,0", "--xi", "10", "--v", "1,0,0", "--r", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# recollide v"));
    let body = lines.collect::<Vec<_>>().join("\n");
    let mut rdr = csv::Reader::from_reader(body.as_bytes());
    assert_eq!(rdr.headers().unwrap(), vec!["k", "tau", "x", "y", "z", "wx", "wy", "wz", "sphere_id"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[1][1], "10");
    assert_eq!(&rows[1][8], "1");
}

#[test]
fn bounce_json_reports_head_on_recollision() {
    let v = json(&recollide(&["bounce", "--u", "0,1,0", "--xi", "10", "--v", "0,-1,0", "--format", "json"]));
    assert!(v["n"].as_u64().unwrap() >= 3);
    assert_eq!(v["recollision"], Value::Bool(true));
}

#[test]
fn trap_n3_tail_slope_is_near_minus_one() {
    let v = json(&recollide(&["tails", "--regime", "trap-n3", "--s", "20,40,80,160", "--budget", "2e6", "--seed", "7"]));
    let slope = v["slope"].as_f64().unwrap();
    assert!((slope + 1.0).abs() < 0.25, "slope {slope}");
    assert_eq!(v["seed"].as_u64(), Some(7));
    assert_eq!(v["stderr"].as_array().unwrap().len(), 4);
}

#[test]
fn config_errors_exit_with_two() {
    for args in [
        &["tails", "--regime", "sideways"][..],
        &["tails", "--budget", "1.5"],
        &["bounce", "--u", "1,0,0", "--xi", "3", "--v", "0,1,0"],
        &["gas", "--eps", "2"],
        &["frobnicate"],
    ] {
        let o = recollide(args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert_eq!(String::from_utf8_lossy(&o.stderr).trim().lines().count(), 1, "{args:?}");
    }
}

#[test]
fn estimator_failure_exits_with_one_and_leaves_no_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tails.json");
    let o = recollide(&[
        "tails",
        "--regime",
        "long-n4plus",
        "--s",
        "100,200,300,400",
        "--budget",
        "1000",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn output_file_is_written_whole() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ind.csv");
    let o = recollide(&["indirect", "--budget", "1e5", "--format", "csv", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# recollide v"));
    assert!(text.contains("seed=1"));
    assert_eq!(text.lines().nth(1), Some("eps,p_mc,stderr,hits,p_quadrature"));
    assert_eq!(text.lines().count(), 5);
}

#[test]
fn seed_falls_back_to_environment() {
    let o = Command::new(env!("CARGO_BIN_EXE_recollide"))
        .args(["indirect", "--budget", "1e4", "--eps-grid", "0.5"])
        .env("RECOLLIDE_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(json(&o)["seed"].as_u64(), Some(42));
    let o = Command::new(env!("CARGO_BIN_EXE_recollide"))
        .args(["indirect", "--budget", "1e4", "--eps-grid", "0.5", "--seed", "5"])
        .env("RECOLLIDE_SEED", "42")
        .output()
        .unwrap();
    assert_eq!(json(&o)["seed"].as_u64(), Some(5));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "eps_grid = 0.2,0.1\nbudget = 2e4\nseed = 3\n").unwrap();
    let v = json(&recollide(&["indirect", "--config", cfg.to_str().unwrap(), "--seed", "4"]));
    assert_eq!(v["seed"].as_u64(), Some(4));
    assert_eq!(v["eps"].as_array().unwrap().len(), 2);
    assert_eq!(v["config"]["budget"], Value::String("20000".into()));
}

#[test]
fn json_is_identical_across_thread_counts() {
    let strip = |o: Output| {
        String::from_utf8(o.stdout).unwrap().lines().filter(|l| !l.contains("wall_time_s")).collect::<Vec<_>>().join("\n")
    };
    let base = ["tails", "--regime", "short", "--s", "1,2,4,8", "--budget", "2e5", "--seed", "11"];
    let a = strip(recollide(&[&base[..], &["--threads", "1"]].concat()));
    let b = strip(recollide(&[&base[..], &["--threads", "2"]].concat()));
    assert_eq!(a, b);
    assert!(a.contains("\"slope\""));
}

#[test]
fn gas_dumps_paths_and_reports_mismatches() {
    let dir = tempfile::tempdir().unwrap();
    let dump = dir.path().join("paths.csv");
    let v = json(&recollide(&[
        "gas",
        "--eps",
        "0.1",
        "--horizon",
        "10",
        "--n-paths",
        "50",
        "--dump-paths",
        dump.to_str().unwrap(),
    ]));
    assert!(v["mismatch_rate"].as_f64().unwrap() >= 0.0);
    assert!(v["mismatch_rate_stderr"].is_number());
    assert_eq!(v["msd_x"].as_array().unwrap().len(), 10);
    let text = std::fs::read_to_string(&dump).unwrap();
    assert_eq!(text.lines().nth(1), Some("path_id,process,t,x,y,z"));
    for p in ["X", "Y", "Z"] {
        assert!(text.lines().any(|l| l.split(',').nth(1) == Some(p)));
    }
}

#[test]
fn gas_without_mechanisms_has_no_mismatch() {
    let v = json(&recollide(&[
        "gas",
        "--eps",
        "0.2",
        "--horizon",
        "30",
        "--n-paths",
        "100",
        "--no-classifiers",
        "--no-thinning",
        "--no-placed",
    ]));
    assert_eq!(v["mismatch_paths"].as_u64(), Some(0));
    assert_eq!(v["msd_x"], v["msd_y"]);
    assert_eq!(v["msd_z"], v["msd_y"]);
}

#[test]
fn selftest_exits_zero() {
    let o = recollide(&["selftest", "--seed", "1"]);
    let v = json(&o);
    assert_eq!(v["all_passed"], Value::Bool(true));
}

#[test]
fn exit_dist_reports_slope_and_uncertainty() {
    let v = json(&recollide(&["exit-dist", "--budget", "1e6", "--seed", "2"]));
    let tv = v["tv_hat"].as_array().unwrap();
    assert_eq!(tv.len(), 4);
    assert!(tv[0].as_f64().unwrap() > tv[3].as_f64().unwrap());
    assert!(v["slope"].is_number());
    assert_eq!(v["stderr"].as_array().unwrap().len(), 4);
}
