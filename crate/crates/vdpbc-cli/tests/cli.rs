//! End-to-end tests of the binary: scenario runs, sweeps, verification,
//! exit codes and output formats.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vdpbc"))
}

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name)
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("vdpbc-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn run_stiff_scenario_produces_csv_and_summary() {
    let out_dir = temp_dir("run-k31");
    let out = bin()
        .args(["run", scenario_path("table1_k31.scn").to_str().unwrap()])
        .args(["--out", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let csv = std::fs::read_to_string(out_dir.join("table1_k31.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,q_l,q_m,p_l,p_m,u,u_ff,u_fb,err_q_l,err_q_m,sigma_l,sigma_m,H,V,dVdt"
    );
    // dt 1e-4 for 10 s at stride 10: 10_001 rows.
    assert_eq!(lines.count(), 10_001);

    let summary = std::fs::read_to_string(out_dir.join("table1_k31_summary.txt")).unwrap();
    assert!(summary.contains("beta (guaranteed) = 9.903226"));
    assert!(summary.contains("beta_hat (measured)"));
    assert!(summary.contains("transient time"));
    assert!(stdout(&out).contains("peak |u|"));

    // Convergence: the reported transient is well inside the horizon.
    let transient_line = summary
        .lines()
        .find(|l| l.starts_with("transient time"))
        .unwrap();
    assert!(!transient_line.contains("not reached"));
}

#[test]
fn golden_first_rows_of_the_stiff_run() {
    let out_dir = temp_dir("golden");
    let out = bin()
        .args(["run", scenario_path("table1_k31.scn").to_str().unwrap()])
        .args(["--out", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("table1_k31.csv")).unwrap();
    let head: Vec<&str> = csv.lines().take(11).collect();
    let golden = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR"))
            .join("tests/golden")
            .join("table1_k31_head.csv"),
    )
    .unwrap();
    let golden_lines: Vec<&str> = golden.lines().collect();
    assert_eq!(head, golden_lines);
}

#[test]
fn soft_joint_converges_with_strictly_larger_peak_control() {
    let out_dir = temp_dir("run-k3p1");
    let run = |name: &str| -> String {
        let out = bin()
            .args(["run", scenario_path(name).to_str().unwrap()])
            .args(["--out", out_dir.to_str().unwrap()])
            .args(["--t-end", "6"])
            .output()
            .unwrap();
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        stdout(&out)
    };
    let stiff = run("table1_k31.scn");
    let soft = run("table1_k3p1.scn");
    let peak = |s: &str| -> f64 {
        s.lines()
            .find(|l| l.starts_with("peak |u|"))
            .and_then(|l| l.split('=').nth(1))
            .and_then(|v| v.trim().trim_end_matches(" N·m").parse::<f64>().ok())
            .unwrap()
    };
    assert!(!soft.contains("not reached"));
    assert!(
        peak(&soft) > peak(&stiff),
        "soft {} vs stiff {}",
        peak(&soft),
        peak(&stiff)
    );
}

#[test]
fn malformed_scenario_names_the_offending_field() {
    let dir = temp_dir("bad-scn");
    let bad = dir.join("bad.scn");
    let text = std::fs::read_to_string(scenario_path("table1_k31.scn"))
        .unwrap()
        .replace("model.link_inertia = 0.031", "model.link_inertia = -0.031");
    std::fs::write(&bad, text).unwrap();
    let out = bin().args(["run", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("model.link_inertia"), "{}", stderr(&out));
}

#[test]
fn unknown_scenario_key_is_rejected() {
    let dir = temp_dir("unknown-key");
    let bad = dir.join("bad.scn");
    let mut text = std::fs::read_to_string(scenario_path("table1_k31.scn")).unwrap();
    text.push_str("model.gear_ratio = 3\n");
    std::fs::write(&bad, text).unwrap();
    let out = bin().args(["run", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("model.gear_ratio"));
}

#[test]
fn oversized_step_exits_with_divergence_code() {
    let out_dir = temp_dir("diverge");
    let out = bin()
        .args(["run", scenario_path("table1_k31.scn").to_str().unwrap()])
        .args(["--out", out_dir.to_str().unwrap()])
        .args(["--dt", "0.05"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("diverged at t ="), "{}", stderr(&out));
}

#[test]
fn verify_two_link_passes() {
    let out = bin()
        .args(["verify", "--model", "two-link"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("overall: PASS"));
    assert!(text.contains("workless-force gradient identity"));
}

#[test]
fn verify_benchmark_model_passes_within_budget() {
    let out_dir = temp_dir("verify-table1");
    let start = std::time::Instant::now();
    let out = bin()
        .args(["verify", "--model", "table1"])
        .args(["--out", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert!(elapsed < 60.0, "suite took {elapsed:.1} s");
    let text = stdout(&out);
    assert!(text.contains("overall: PASS"));
    // Report is also written as an artifact.
    let written = std::fs::read_to_string(out_dir.join("certification_table1.txt")).unwrap();
    assert_eq!(written, text);
}

#[test]
fn verify_broken_model_fails_with_certification_code() {
    let out = bin()
        .args(["verify", "--model", "two-link-broken"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(stdout(&out).contains("FAIL"));
}

#[test]
fn verify_unknown_model_is_a_validation_error() {
    let out = bin().args(["verify", "--model", "bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn stiffness_sweep_reproduces_both_cases() {
    let out_dir = temp_dir("sweep-k");
    let out = bin()
        .args(["sweep", scenario_path("table1_k31.scn").to_str().unwrap()])
        .args(["--param", "model.stiffness", "--values", "3.1,31"])
        .args(["--t-end", "6", "--out", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("sweep_model_stiffness.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    let field = |row: &str, idx: usize| -> f64 {
        row.split(',').nth(idx).unwrap().parse::<f64>().unwrap()
    };
    // Columns: param,value,status,beta,beta_hat,transient_time,peak_u,...
    let soft = rows.iter().find(|r| field(r, 1) == 3.1).unwrap();
    let stiff = rows.iter().find(|r| field(r, 1) == 31.0).unwrap();
    assert!(soft.contains(",ok,") && stiff.contains(",ok,"));
    assert!(field(soft, 6) > field(stiff, 6), "peak control ordering");
    // Per-run artifacts exist.
    assert!(out_dir.join("table1_k31_model_stiffness_3p1.csv").exists());
    assert!(out_dir.join("table1_k31_model_stiffness_31.csv").exists());
}

#[test]
fn damping_injection_sweep_reports_monotone_guaranteed_rate() {
    let out_dir = temp_dir("sweep-kd");
    let out = bin()
        .args(["sweep", scenario_path("table1_k31.scn").to_str().unwrap()])
        .args(["--param", "control.kd_link", "--values", "0.3,0.6,1.2"])
        .args(["--t-end", "2", "--out", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("sweep_control_kd_link.csv")).unwrap();
    let betas: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|r| r.split(',').nth(3).unwrap().parse::<f64>().unwrap())
        .collect();
    assert_eq!(betas.len(), 3);
    for w in betas.windows(2) {
        assert!(w[1] >= w[0], "beta not monotone: {betas:?}");
    }
}

#[test]
fn empty_sweep_values_are_rejected() {
    let out = bin()
        .args(["sweep", scenario_path("table1_k31.scn").to_str().unwrap()])
        .args(["--param", "model.stiffness", "--values", ""])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("empty sweep value list"));
}
