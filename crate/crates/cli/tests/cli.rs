use std::path::Path;
use std::process::{Command, Output};

use pentrail_cli::app::{prepare, Cli, EXIT_CONFIG, EXIT_IO};
use pentrail_core::orchestrator::Ablation;
use pentrail_core::sim::BUNDLED_PACKS_DIR;

use clap::Parser;

fn pentrail(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pentrail"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

#[test]
fn golden_scenario_exits_zero_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = pentrail(&["--scenario", "lame", "--mock-llm", "lame.llm", "--non-interactive"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["stop"], "no_steps_remaining");
    assert_eq!(summary["metrics"]["loops"], 0);
    let report = std::fs::read_to_string(dir.path().join("pentrail-run/report.csv")).unwrap();
    assert!(report.contains("CVE-2007-2447"));
}

#[test]
fn pack_suffix_and_path_both_resolve() {
    let dir = tempfile::tempdir().unwrap();
    let pack = format!("{BUNDLED_PACKS_DIR}/lame");
    for name in ["lame.pack", pack.as_str()] {
        let out = pentrail(&["--scenario", name, "--non-interactive", "--out-dir", "o"], dir.path());
        assert_eq!(out.status.code(), Some(0), "{name}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn missing_target_is_a_config_error_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = pentrail(&["--non-interactive"], dir.path());
    assert_eq!(out.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage:"));
}

#[test]
fn bad_flags_and_files_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[run]\nmax_iteration = 1\n").unwrap();
    for args in [
        &["--scenario", "lame", "--ablation", "Q"][..],
        &["--scenario", "no-such-pack"],
        &["--scenario", "lame", "--mock-llm", "missing.llm"],
        &["--target", "10.0.0.1", "--config", "bad.toml"],
        &["--target", "10.0.0.1", "--mock-llm", "x.llm"],
        &["--scenario", "lame", "--max-iterations", "0"],
        &["--scenario", "lame", "--serve", "0.0.0.0:0"],
    ] {
        let out = pentrail(args, dir.path());
        assert_eq!(out.status.code(), Some(EXIT_CONFIG), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn unwritable_log_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pentrail(
        &["--scenario", "lame", "--non-interactive", "--log-out", "/proc/pentrail/run.jsonl"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(EXIT_IO), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn ablation_flag_implies_reasoning() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().display().to_string();
    let cases = [
        ("R,L", Ablation { reasoning: true, rag: true, repetition: true, verifier: false }),
        ("B*", Ablation { reasoning: true, ..Ablation::BASE }),
        ("base", Ablation::BASE),
        ("V", Ablation { reasoning: true, verifier: true, ..Ablation::BASE }),
    ];
    for (flag, want) in cases {
        let cli = Cli::try_parse_from(["pentrail", "--scenario", "lame", "--ablation", flag, "--out-dir", &out_dir]).unwrap();
        let launcher = vec![env!("CARGO_BIN_EXE_pentrail").to_string(), "fake-tool".to_string()];
        let prepared = prepare(&cli, &launcher).unwrap();
        assert_eq!(prepared.cfg.ablation, want, "{flag}");
    }
}

#[test]
fn hidden_fake_tool_mode() {
    let dir = tempfile::tempdir().unwrap();
    let pack = format!("{BUNDLED_PACKS_DIR}/lame");
    let out = pentrail(&["fake-tool", "--pack", &pack, "--tool", "nmap", "--", "-sV", "-p-", "10.10.10.3"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("vsftpd 2.3.4"));
    let out = pentrail(&["fake-tool", "--pack", &pack, "--tool", "nmap", "--", "-A"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("UNMATCHED"));
}
