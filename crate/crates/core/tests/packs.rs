use pentrail_core::events::{EventKind, EventLog};
use pentrail_core::operator::NonInteractive;
use pentrail_core::orchestrator::{run, Ablation, RunOutcome};
use pentrail_core::phase::{first_illegal, Phase};
use pentrail_core::runlog::RunLog;
use pentrail_core::sim::{assert_checklist, canonicalize_log, Scenario, ScenarioPack};

fn run_pack(name: &str, dir: &std::path::Path, events: &EventLog) -> (Scenario, RunOutcome) {
    let launcher = vec![env!("CARGO_BIN_EXE_pentrail-fake-tool").to_string()];
    let sc = Scenario::prepare(ScenarioPack::resolve(name).unwrap(), dir, &launcher, None).unwrap();
    let out = run(&sc.config(Ablation::FULL), sc.pipeline(&NonInteractive, events)).unwrap();
    (sc, out)
}

#[test]
fn every_pack_meets_its_expectations() {
    for name in ScenarioPack::bundled_names() {
        let dir = tempfile::tempdir().unwrap();
        let events = EventLog::new();
        let (sc, out) = run_pack(&name, dir.path(), &events);
        let unanswered: Vec<_> = sc.backend.calls().into_iter().filter(|c| c.reply.is_none()).collect();
        assert!(unanswered.is_empty(), "{name}: unanswered model calls {unanswered:#?}");

        let log = RunLog::read(&out.log_path).unwrap();
        let check = assert_checklist(&sc.pack, &log);
        assert_eq!(check.passed, check.total, "{name}: {check:?}\n{}", log.render());

        let expected = sc.pack.manifest.expected.unwrap_or_default();
        if let Some(steps) = expected.steps {
            assert_eq!(out.metrics.steps, steps, "{name} steps");
        }
        if let Some(loops) = expected.loops {
            assert_eq!(out.metrics.loops, loops, "{name} loops");
        }
        if let Some(incomplete) = expected.incomplete {
            assert_eq!(out.metrics.incomplete_commands, incomplete, "{name} incomplete");
        }

        let phases: Vec<Phase> = events
            .since(0)
            .iter()
            .filter(|e| e.kind == EventKind::PhaseChange)
            .filter_map(|e| serde_json::from_value(e.payload["phase"].clone()).ok())
            .collect();
        assert_eq!(phases.first(), Some(&Phase::START), "{name}");
        assert_eq!(phases.last(), Some(&Phase::Done), "{name}");
        assert_eq!(first_illegal(&phases), None, "{name}");
    }
}

#[test]
fn runs_are_reproducible() {
    for name in ["lame", "loop-bait"] {
        let logs: Vec<String> = (0..2)
            .map(|_| {
                let dir = tempfile::tempdir().unwrap();
                let (_, out) = run_pack(name, dir.path(), &EventLog::new());
                let text = std::fs::read_to_string(&out.log_path).unwrap();
                // The work directory differs between runs.
                canonicalize_log(&text).replace(&dir.path().display().to_string(), "<work>")
            })
            .collect();
        assert_eq!(logs[0], logs[1], "{name}");
    }
}

#[test]
fn vm_sweep_report_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (_, out) = run_pack("vm-sweep", dir.path(), &EventLog::new());
    let cves: Vec<&str> = out.report.rows.iter().map(|r| r.cve_number.as_str()).collect();
    assert_eq!(cves, ["CVE-2011-2523", "CVE-2018-15473", "CVE-2007-2447", "CVE-2011-4862"]);
    assert!(out.report.rows.iter().all(|r| r.ip_address == "192.168.56.101"));
}
