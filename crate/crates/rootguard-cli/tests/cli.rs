//! End-to-end checks of the installed binary: each subcommand is invoked
//! the way a user would and its file outputs are read back.

use std::path::Path;
use std::process::{Command, Output};

fn rootguard(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rootguard"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn synth_output_loads_back_as_a_population() {
    let dir = tempfile::tempdir().unwrap();
    let out = rootguard(
        dir.path(),
        &["synth", "--template", "homa", "--patients", "25", "--seed", "11", "--out", "pop"],
    );
    assert_ok(&out);
    let csv = dir.path().join("pop/HOMA.csv");
    let template = rootguard::templates::by_name(rootguard::templates::TemplateName::Homa).unwrap();
    let pop = rootguard::population::load_csv(&csv, &template).unwrap();
    assert_eq!(pop.test.len() + pop.holdout.len(), 25);
}

#[test]
fn rq1_writes_rows_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = rootguard(
        dir.path(),
        &[
            "rq1", "--template", "nlr", "--mechanism", "exp", "--method", "m-opt", "--eps",
            "0.5", "--budget-mult", "2", "--patients", "10", "--seed", "3", "--m", "300",
            "--out", "res",
        ],
    );
    assert_ok(&out);
    let rows = std::fs::read_to_string(dir.path().join("res/rq1_rows.csv")).unwrap();
    assert_eq!(rows.lines().count(), 11, "header plus one row per patient");
    let summary = std::fs::read_to_string(dir.path().join("res/rq1_summary.json")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&summary).unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 1);
    assert!(parsed[0]["wmape"].as_f64().unwrap().is_finite());
}

#[test]
fn rq2_writes_flat_csv_and_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = rootguard(
        dir.path(),
        &[
            "rq2", "--template", "nlr", "--mechanism", "exp", "--method", "m-all", "--eps",
            "0.2", "--q", "1", "--q", "4", "--strategy", "b", "--prior", "uniform",
            "--patients", "10", "--seed", "3", "--m", "300", "--out", "res",
        ],
    );
    assert_ok(&out);
    let csv = std::fs::read_to_string(dir.path().join("res/rq2_summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header plus one row per q");
    assert!(csv.lines().next().unwrap().contains("recon_wmape"));
    let parsed: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("res/rq2_summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(parsed.as_array().unwrap().len(), 2);
}

#[test]
fn table_renders_both_summary_flavors() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&rootguard(
        dir.path(),
        &[
            "rq1", "--template", "homa", "--mechanism", "exp", "--method", "m-roots", "--eps",
            "0.5", "--budget-mult", "2", "--patients", "5", "--seed", "3", "--m", "200",
            "--out", "res",
        ],
    ));
    let out = rootguard(dir.path(), &["table", "res/rq1_summary.json"]);
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("wMAPE") && text.contains("HOMA"), "got: {text}");
}

#[test]
fn toml_config_drives_a_sweep_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("sweep.toml"),
        r#"
templates = ["Homa"]
mechanisms = ["Exponential"]
methods = ["MOpt"]
epsilons = [0.5]
multipliers = [2]
patients = 8
seed = 4
m = 250
"#,
    )
    .unwrap();
    let out = rootguard(
        dir.path(),
        &["rq1", "--config", "sweep.toml", "--patients", "6", "--out", "res"],
    );
    assert_ok(&out);
    let summary: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("res/rq1_summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary[0]["template"], "HOMA");
    // the flag wins over the file
    assert_eq!(summary[0]["patients"], 6);
}

#[test]
fn validate_exits_zero_and_reports_each_check() {
    let dir = tempfile::tempdir().unwrap();
    let out = rootguard(dir.path(), &["validate"]);
    assert_ok(&out);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 5);
    assert!(!text.contains("FAIL"));
}

#[test]
fn alloc_dump_writes_one_row_per_root() {
    let dir = tempfile::tempdir().unwrap();
    let out = rootguard(
        dir.path(),
        &["alloc-dump", "--mechanism", "stair", "--eps", "0.1", "--m", "300", "--out", "alloc.csv"],
    );
    assert_ok(&out);
    let csv = std::fs::read_to_string(dir.path().join("alloc.csv")).unwrap();
    // 8 templates with 3+4+3+3+2+2+2+2 roots
    assert_eq!(csv.lines().count(), 22, "header plus 21 root rows");
}
