use pentrail_core::orchestrator::Ablation;
use pentrail_core::runlog::RunLog;
use pentrail_core::sim::{Scenario, ScenarioPack};

fn run(ablation: &str) -> (u32, u32, String) {
    let dir = tempfile::tempdir().unwrap();
    let launcher = vec![env!("CARGO_BIN_EXE_pentrail-fake-tool").to_string()];
    let sc = Scenario::prepare(ScenarioPack::resolve("loop-bait").unwrap(), dir.path(), &launcher, None).unwrap();
    let out = sc.run(ablation.parse::<Ablation>().unwrap()).unwrap();
    for c in sc.backend.calls().iter().filter(|c| c.reply.is_none()) {
        eprintln!("unanswered {:?}: {}", c.role, c.message);
    }
    let log = RunLog::read(&out.log_path).unwrap();
    (out.metrics.loops, out.metrics.incomplete_commands, log.render())
}

#[test]
fn full_config() {
    let (loops, incomplete, log) = run("B*,R,L,V");
    println!("{log}");
    assert_eq!((loops, incomplete), (1, 0));
}

#[test]
fn reasoning_only() {
    let (loops, incomplete, log) = run("B*");
    println!("{log}");
    assert_eq!((loops, incomplete), (2, 1));
}

#[test]
fn without_verifier() {
    let (loops, incomplete, log) = run("B*,R,L");
    println!("{log}");
    assert_eq!((loops, incomplete), (1, 1));
}
