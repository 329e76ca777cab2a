use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"{"workload":{"scale":0.2,"params":{"realtime_tasks":25}},"sim":{"horizon":80}}"#;

fn cropmesh(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cropmesh"))
        .env("CROPMESH_OUT", out)
        .env_remove("RUST_LOG")
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, body).unwrap();
    p
}

fn run_dir(root: &Path) -> PathBuf {
    let mut dirs: Vec<PathBuf> =
        fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs.pop().unwrap()
}

#[test]
fn fit_writes_all_modes_and_anchor_residuals() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cropmesh(tmp.path(), &["fit"]);
    assert!(o.status.success());
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("ac5@80m"), "{stdout}");
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("models.json")).unwrap()).unwrap();
    assert_eq!(m.as_object().unwrap().len(), 4);
}

#[test]
fn fit_warns_on_missing_mode() {
    let tmp = tempfile::tempdir().unwrap();
    let trace = tmp.path().join("trace.csv");
    let full = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/farm_trace.csv")).unwrap();
    let kept: Vec<&str> = full.lines().filter(|l| !l.starts_with("uc5")).collect();
    fs::write(&trace, kept.join("\n")).unwrap();
    let o = cropmesh(tmp.path(), &["fit", "--trace", trace.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("uc5"));
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("models.json")).unwrap()).unwrap();
    assert_eq!(m.as_object().unwrap().len(), 3);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for root in [&a, &b] {
        let o = cropmesh(root, &["run", "--config", cfg.to_str().unwrap(), "--seed", "4", "--policy", "central"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (da, db) = (run_dir(&a), run_dir(&b));
    assert_eq!(da.file_name(), db.file_name());
    for f in ["report.csv", "summary.json", "plans.jsonl", "ledger.csv", "config.json"] {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn emitted_workload_replays_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let first = tmp.path().join("first");
    let o = cropmesh(&first, &["run", "--config", cfg.to_str().unwrap(), "--policy", "naive", "--emit-workload"]);
    assert!(o.status.success());
    let d = run_dir(&first);
    let replay = d.join("replay.json");
    let second = tmp.path().join("second");
    let o = cropmesh(&second, &["run", "--config", replay.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read(d.join("report.csv")).unwrap(), fs::read(run_dir(&second).join("report.csv")).unwrap());
}

#[test]
fn invalid_channel_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"topology":{"channels":{"0":13}}}"#);
    let o = cropmesh(tmp.path(), &["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("channel 13"));
    assert!(fs::read_dir(tmp.path()).unwrap().all(|e| !e.unwrap().path().is_dir()));
}

#[test]
fn unknown_policy_and_missing_config_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(cropmesh(tmp.path(), &["run", "--policy", "ospf"]).status.code(), Some(2));
    assert_eq!(cropmesh(tmp.path(), &["run", "--config", "/nonexistent/cfg.json"]).status.code(), Some(2));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let blocker = tmp.path().join("blocker");
    fs::write(&blocker, "").unwrap();
    let o = cropmesh(&blocker, &["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn sweep_cardinality_and_empty_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let c = cfg.to_str().unwrap();
    let o = cropmesh(
        tmp.path(),
        &["sweep", "--config", c, "--policies", "naive,central", "--seeds", "0..2", "--threads", "2"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_dir(tmp.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_string_lossy().starts_with("sweep-"))
        .unwrap();
    let text = fs::read_to_string(csv).unwrap();
    let lines: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(lines.iter().filter(|l| l.starts_with("run,")).count(), 4);
    assert_eq!(lines.iter().filter(|l| l.starts_with("median,")).count(), 2);
    let o = cropmesh(tmp.path(), &["sweep", "--config", c, "--seeds", ""]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn oracle_gap_writes_report() {
    let tmp = tempfile::tempdir().unwrap();
    let o = cropmesh(tmp.path(), &["oracle-gap", "--count", "5", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("oracle-gap-n5-s3.json")).unwrap()).unwrap();
    assert_eq!(r["rows"].as_array().unwrap().len(), 5);
    assert_eq!(r["above_optimal"], 0);
}
