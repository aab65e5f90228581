//! One progressive session: watch the configurator trial deeper and wider
//! adapters and upgrade when a trial track leads.

use adapterfed::configurator::{SessionObserver, TrialTrack};
use adapterfed::model::ModelState;
use adapterfed::session::{run_observed, SessionConfig};
use adapterfed::trace::TraceEvent;

struct Dispatches;

impl SessionObserver for Dispatches {
    fn on_dispatch(&mut self, winner: &ModelState, tracks: &[TrialTrack]) {
        let shapes: Vec<String> = tracks.iter().map(|t| format!("{:?}{:?}", t.kind, t.shape())).collect();
        println!("dispatch  base {:?}  tracks {}", winner.adapter_config(), shapes.join(" "));
    }
}

fn main() -> adapterfed::Result<()> {
    let mut cfg = SessionConfig::default();
    cfg.seed = 5;
    cfg.budget.max_rounds = 100_000;
    cfg.budget.max_clock_s = 300.0;
    let result = run_observed(&cfg, &mut Dispatches)?;

    for e in &result.trace.events {
        if let TraceEvent::Decision { clock, winner, depth, width, accuracies, .. } = e {
            let accs: Vec<String> = accuracies.iter().map(|(k, a)| format!("{k:?}={a:.3}")).collect();
            println!("t={clock:>8.1}s  winner {winner:?} -> ({depth},{width})  [{}]", accs.join(", "));
        }
    }
    let o = &result.outcome;
    println!(
        "\nconverged {}  rounds {}  best {:.3}  traffic {:.2} MB  configs {:?}",
        o.converged,
        o.rounds,
        o.best_accuracy,
        result.trace.total_bytes() as f64 / 1e6,
        o.configs_visited
    );
    Ok(())
}
