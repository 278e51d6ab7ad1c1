use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn sim(args: &[&str]) -> Output {
    sim_env(args, None)
}

fn sim_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_shai-sim"));
    cmd.args(args).env_remove("SHAI_SIM_SEED");
    if let Some(s) = seed {
        cmd.env("SHAI_SIM_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sim(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn corpus() -> (TempDir, String) {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c");
    ok(&["gen", "--out", p(&c), "--users", "24", "--docs", "300", "--seed", "3"]);
    (dir, p(&c).to_owned())
}

/// Column `name` of every row whose mode matches.
fn column(csv: &str, mode: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.filter(|l| l.starts_with(&format!("{mode},"))).map(|l| l.split(',').nth(i).unwrap().to_owned()).collect()
}

#[test]
fn gen_writes_the_corpus_layout() {
    let (_d, c) = corpus();
    let c = Path::new(&c);
    for f in ["policies.pol", "manifest.txt", "metadata/clock", "vocabulary.txt", "sessions.txt"] {
        assert!(c.join(f).is_file(), "{f}");
    }
    assert!(c.join("metadata/lists").read_dir().unwrap().count() > 0);
    assert!(c.join("corpus/docs").is_dir());
}

#[test]
fn analysis_feeds_a_run() {
    let (d, c) = corpus();
    let oa = d.path().join("oa.txt");
    let out = sim(&[
        "oa",
        "--manifest",
        &format!("{c}/manifest.txt"),
        "--policies",
        &format!("{c}/policies.pol"),
        "--metadata",
        &format!("{c}/metadata"),
        "--out",
        p(&oa),
        "--parallel",
        "2",
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checks"));
    assert!(std::fs::read_to_string(&oa).unwrap().starts_with("oa-v1 "));

    let fresh = ok(&["run", "--corpus", &c, "--mode", "shai", "--sessions", "4x10"]);
    let loaded = ok(&["run", "--corpus", &c, "--mode", "shai", "--sessions", "4x10", "--oa", p(&oa)]);
    assert_eq!(fresh, loaded);
}

#[test]
fn run_reports_every_mode_and_point() {
    let (d, c) = corpus();
    let logs = d.path().join("logs");
    let csv = ok(&["run", "--corpus", &c, "--sessions", "1x10,8x10", "--log-dir", p(&logs)]);
    assert!(csv.starts_with(
        "mode,session_len,sessions,interceptions_total,interceptions_per_query,fastpath_opens,slowpath_opens,denials,reset_ticks,rm_ticks\n"
    ));
    assert_eq!(csv.lines().count(), 7);
    assert_eq!(column(&csv, "baseline", "interceptions_total"), ["0", "0"]);
    let shai: Vec<f64> = column(&csv, "shai", "interceptions_per_query").iter().map(|v| v.parse().unwrap()).collect();
    assert!(shai[1] < shai[0]);
    for mode in ["baseline", "dynamic", "shai"] {
        let log = std::fs::read_to_string(logs.join(format!("{mode}.csv"))).unwrap();
        assert!(log.starts_with("session_id,kind,task,conduit,decision,tick\n"));
    }
}

#[test]
fn predictions_close_the_loop() {
    let (d, c) = corpus();
    let pred = d.path().join("pred.txt");
    let oa = d.path().join("oa.txt");
    let first = ok(&[
        "run",
        "--corpus",
        &c,
        "--mode",
        "shai",
        "--sessions",
        "8x10",
        "--mispredict",
        "1",
        "--predictions-out",
        p(&pred),
    ]);
    assert!(!std::fs::read_to_string(&pred).unwrap().is_empty());
    ok(&[
        "oa",
        "--manifest",
        &format!("{c}/manifest.txt"),
        "--policies",
        &format!("{c}/policies.pol"),
        "--metadata",
        &format!("{c}/metadata"),
        "--out",
        p(&oa),
        "--predictions",
        p(&pred),
    ]);
    let second = ok(&[
        "run",
        "--corpus",
        &c,
        "--mode",
        "shai",
        "--sessions",
        "8x10",
        "--mispredict",
        "1",
        "--oa",
        p(&oa),
        "--predictions",
        p(&pred),
    ]);
    let slow = |csv: &str| column(csv, "shai", "slowpath_opens")[0].parse::<u64>().unwrap();
    assert!(slow(&first) > 0);
    assert_eq!(slow(&second), 0);
}

#[test]
fn sweep_and_report() {
    let (d, c) = corpus();
    let csv = ok(&["sweep", "--corpus", &c, "--sessions", "4x10", "--mispredict", "0,1"]);
    assert!(csv.starts_with("mode,mispredict,sessions,session_len,slowpath_interceptions\n"));
    assert_eq!(csv.lines().count(), 5);

    let m = d.path().join("m.csv");
    ok(&["run", "--corpus", &c, "--sessions", "2x5", "--out", p(&m)]);
    let back = ok(&["report", "--in", p(&m), "--format", "csv"]);
    assert_eq!(back, std::fs::read_to_string(&m).unwrap());
    assert!(ok(&["report", "--in", p(&m)]).contains("per query"));
}

#[test]
fn scripted_sessions_run_per_session() {
    let (_d, c) = corpus();
    let csv = ok(&["run", "--corpus", &c, "--mode", "dynamic", "--script", &format!("{c}/sessions.txt")]);
    assert_eq!(csv.lines().count(), 21);
    assert!(csv.lines().skip(1).all(|l| l.starts_with("dynamic,")));
}

#[test]
fn faults_exit_status() {
    let (_d, c) = corpus();
    let out = sim(&["faults", "--corpus", &c]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains(" blocked")).count(), 12);

    let out = sim(&["faults", "--corpus", &c, "--mode", "baseline"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8(out.stdout).unwrap().contains("LEAKED"));
}

#[test]
fn usage_errors_exit_2() {
    let (_d, c) = corpus();
    for args in [
        vec!["run", "--corpus", &c, "--sessions", "8"],
        vec!["run", "--corpus", &c, "--mode", "fast"],
        vec!["run", "--corpus", &c, "--mispredict", "1.5"],
        vec!["faults", "--corpus", &c, "--fault", "F9"],
        vec!["run", "--corpus", &c, "--format", "xml"],
        vec!["frobnicate"],
        vec!["oa", "--manifest", "m"],
    ] {
        assert_eq!(sim(&args).status.code(), Some(2), "{args:?}");
    }
    assert_eq!(sim(&["run", "--corpus", "/nonexistent/corpus"]).status.code(), Some(1));
}

#[test]
fn seed_env_overrides_the_flag() {
    let (_d, c) = corpus();
    let args = |seed: &'static str| {
        ["run", "--corpus", &c, "--mode", "shai", "--sessions", "8x20", "--mispredict", "0.5", "--seed", seed]
            .map(str::to_owned)
    };
    let run = |seed, env| {
        let a = args(seed);
        let a: Vec<&str> = a.iter().map(String::as_str).collect();
        String::from_utf8(sim_env(&a, env).stdout).unwrap()
    };
    assert_eq!(run("1", Some("2")), run("2", None));
    assert_eq!(run("1", None), run("1", None));
    assert_ne!(run("1", None), run("2", None));
    assert_eq!(sim_env(&["run", "--corpus", &c], Some("x")).status.code(), Some(2));
}
