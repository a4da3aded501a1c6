use std::path::Path;

use pentrail_core::orchestrator::Ablation;
use pentrail_core::runlog::{RunLog, StopReason};
use pentrail_core::sim::{assert_checklist, Scenario, ScenarioPack};

fn launcher() -> Vec<String> {
    vec![env!("CARGO_BIN_EXE_pentrail-fake-tool").to_string()]
}

fn scenario(name: &str, dir: &Path) -> Scenario {
    Scenario::prepare(ScenarioPack::resolve(name).unwrap(), dir, &launcher(), None).unwrap()
}

#[test]
fn lame_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario("lame", dir.path());
    let out = sc.run(Ablation::FULL).unwrap();
    let log = RunLog::read(&out.log_path).unwrap();
    for c in sc.backend.calls().iter().filter(|c| c.reply.is_none()) {
        eprintln!("unanswered {:?}: {}", c.role, c.message);
    }
    let check = assert_checklist(&sc.pack, &log);
    assert_eq!(out.stop, StopReason::NoStepsRemaining, "{}", log.render());
    assert_eq!((check.passed, check.total), (4, 4), "{check:?}\n{}", log.render());
    assert_eq!(out.metrics.loops, 0);
    assert_eq!(out.metrics.incomplete_commands, 0);
    assert!(out.records.len() <= 6);
    assert_eq!(out.report.rows.len(), 1);
}

