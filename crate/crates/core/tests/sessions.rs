use std::io::Cursor;

use adapterfed::session::{report, run, Mode, SessionConfig};
use adapterfed::trace::{SessionTrace, TraceEvent};

/// A random backbone keeps the classifier-only start well below 0.9, so the
/// configurator has to keep upgrading.
#[test]
fn plateau_below_target_forces_upgrades() {
    let mut cfg = SessionConfig::default();
    cfg.seed = 5;
    cfg.targets.absolute = Some(0.9);
    cfg.budget.max_rounds = 100_000;
    cfg.budget.max_clock_s = 300.0;
    let r = run(&cfg).unwrap();
    assert!(!r.converged());
    let visited = &r.outcome.configs_visited;
    assert!(visited.len() >= 3, "expected at least 2 upgrades, visited {visited:?}");
    assert_eq!(visited[0], (0, 8));
}

#[test]
fn report_agrees_with_the_summary() {
    let mut cfg = SessionConfig::default();
    cfg.seed = 8;
    cfg.mode = Mode::FixedAdapter { depth: 1, width: 8 };
    cfg.num_clients = 15;
    cfg.budget.max_rounds = 12;
    cfg.targets.absolute = Some(0.3);
    let r = run(&cfg).unwrap();
    let trace = SessionTrace::read_jsonl(Cursor::new(r.trace.to_jsonl())).unwrap();
    let rep = report(&trace, None, &[0.9]).unwrap();
    let Some(TraceEvent::Summary { total_bytes, rounds, converged, .. }) = trace.summary() else {
        panic!("no summary");
    };
    assert_eq!(rep.total_bytes, *total_bytes);
    assert_eq!(rep.rounds, *rounds);
    assert_eq!(rep.converged, *converged);
    assert_eq!(rep.client_bytes.values().sum::<usize>(), *total_bytes);
    assert_eq!(rep.time_to_relative, vec![(0.9, None)]);
}
