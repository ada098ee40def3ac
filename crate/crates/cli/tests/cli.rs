//! End-to-end checks of the command-line interface: exit codes, printed
//! values, and file outputs.

use std::process::{Command, Output};

fn sdfeel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdfeel"))
        .args(args)
        .output()
        .expect("binary must run")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const TINY_RUN: &str = r#"
schemes = ["sdfeel"]
seeds = [1]
target_loss = 0.05
output = "OUTDIR"

[data]
classes = 3
per_class = 12
dim = 2
eval_per_class = 4

[partition]
kind = "iid"
clients = 4

[topology]
kind = "full"
servers = 2

[sync]
k = 4
tau1 = 2
tau2 = 1
alpha = 1
eta = 0.05
batch = 4
"#;

#[test]
fn topology_ring_six_prints_the_known_gap() {
    let out = sdfeel(&["topology", "--kind", "ring", "--servers", "6"]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    let zeta_line = text
        .lines()
        .find(|l| l.starts_with("zeta = "))
        .unwrap_or_else(|| panic!("no zeta line in output:\n{text}"));
    let zeta: f64 = zeta_line.trim_start_matches("zeta = ").parse().unwrap();
    assert!(
        (zeta - 0.60).abs() <= 0.01,
        "six-server ring gap {zeta} must be 0.60 within 0.01"
    );
    assert!(text.contains("P ="), "mixing matrix must be printed:\n{text}");
}

#[test]
fn oracle_check_agrees_on_the_reference_schedule() {
    let out = sdfeel(&["oracle-check", "--k", "12", "--tau1", "2", "--tau2", "3"]);
    assert!(
        out.status.success(),
        "stdout: {} stderr: {}",
        stdout(&out),
        stderr(&out)
    );
    assert!(stdout(&out).contains("max abs diff"), "{}", stdout(&out));
}

#[test]
fn unknown_flags_exit_with_usage() {
    let out = sdfeel(&["topology", "--bogus"]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(
        stderr(&out).contains("Usage"),
        "usage text expected, got: {}",
        stderr(&out)
    );
}

#[test]
fn inconsistent_config_exits_two_with_a_field_path() {
    // No [topology] block: the default ten servers conflict with four
    // clients, and the error must say where.
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(
        &path,
        "schemes = [\"sdfeel\"]\nseeds = [1]\noutput = \"o\"\n[partition]\nclients = 4\n",
    )
    .unwrap();
    let out = sdfeel(&["run", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(
        stderr(&out).contains("partition.clients"),
        "field path expected, got: {}",
        stderr(&out)
    );
}

#[test]
fn run_writes_traces_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("runs");
    let config = TINY_RUN.replace("OUTDIR", out_dir.to_str().unwrap());
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, config).unwrap();
    let out = sdfeel(&["run", path.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("scheme,seed,"), "{summary}");
    let trace = std::fs::read_to_string(out_dir.join("sdfeel_seed1.csv")).unwrap();
    assert!(trace.starts_with("k,"), "{trace}");
}

#[test]
fn partition_reports_label_histograms() {
    let dir = tempfile::tempdir().unwrap();
    let config = TINY_RUN.replace("OUTDIR", "unused");
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, config).unwrap();
    let out = sdfeel(&["partition", path.to_str().unwrap()]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("client 0 cluster"), "{text}");
    assert!(text.contains("(9 samples)"), "36 samples over 4 clients: {text}");
}

#[test]
fn bounds_writes_a_grid_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = format!(
        "{}\n[bounds]\nl = 1.0\nsigma2 = 1.0\nkappa2 = 1.0\ndelta = 1.0\n",
        TINY_RUN.replace("OUTDIR", "unused")
    );
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, config).unwrap();
    let csv_path = dir.path().join("grid.csv");
    let out = sdfeel(&[
        "bounds",
        path.to_str().unwrap(),
        "--output",
        csv_path.to_str().unwrap(),
        "--grid",
        "3",
    ]);
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "tau1,tau2,lambda,v1,v2,v3,phi0,phi,theorem1_rhs,lr_feasible"
    );
    assert_eq!(lines.count(), 9, "3 x 3 grid rows expected:\n{text}");
}

#[test]
fn bounds_without_the_block_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = TINY_RUN.replace("OUTDIR", "unused");
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, config).unwrap();
    let out = sdfeel(&["bounds", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("bounds"), "{}", stderr(&out));
}
