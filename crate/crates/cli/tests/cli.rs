use std::path::PathBuf;
use std::process::Command;

fn sim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sim"))
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn run_writes_trace_and_report() {
    let dir = std::env::temp_dir().join(format!("bft-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let trace = dir.join("trace.ndjson");
    let report = dir.join("report.json");
    let out = sim()
        .args(["run", "--scenario"])
        .arg(scenario("dropped-commits.json"))
        .arg("--out")
        .arg(&trace)
        .arg("--report")
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(report["trials"][0]["terminate_view"], 1);
    assert_eq!(report["trials"][0]["checks"]["refinement"], "ok");
    let lines = std::fs::read_to_string(&trace).unwrap();
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["index"], 0);
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn same_seed_same_report() {
    let a = sim().args(["suite", "--f", "1", "--trials", "2", "--seed", "5"]).output().unwrap();
    let b = sim().args(["suite", "--f", "1", "--trials", "2", "--seed", "5"]).output().unwrap();
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn regressions_exit_zero() {
    let out = sim().arg("regressions").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let verdicts: Vec<serde_json::Value> = serde_json::from_slice(&out.stdout).unwrap();
    assert!(verdicts.iter().all(|v| v["detected"] == true && v["false_positive"] == false));
}

#[test]
fn failing_checker_gives_nonzero_exit() {
    let dir = std::env::temp_dir().join(format!("bft-cli-mut-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("dual.json");
    let text = std::fs::read_to_string(scenario("dropped-commits.json")).unwrap();
    let mut sc: serde_json::Value = serde_json::from_str(&text).unwrap();
    sc["f"] = 1.into();
    sc["drop_rules"] = serde_json::json!([
        { "kinds": [3], "min_tag": 0, "max_tag": 0, "to": [2, 3], "fate": "drop" },
        { "kinds": [4], "min_tag": 0, "max_tag": 0, "fate": "drop" }
    ]);
    sc["mutation"] = "DualViewChange".into();
    std::fs::write(&path, sc.to_string()).unwrap();
    let out = sim().args(["run", "--scenario"]).arg(&path).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("single_view_change failed"));
    let _ = std::fs::remove_dir_all(dir);
}

#[test]
fn bad_scenario_file_is_an_error() {
    let out = sim().args(["run", "--scenario", "/nonexistent.json"]).output().unwrap();
    assert!(!out.status.success());
}
