//! Progressive adapters against the fixed baselines under one clock budget.

use adapterfed::session::{run, Mode, SessionConfig};

fn main() -> adapterfed::Result<()> {
    let modes = [
        Mode::Autofed,
        Mode::FixedAdapter { depth: 4, width: 32 },
        Mode::LayerFreeze { frozen: 2 },
        Mode::FullFt,
    ];
    println!("{:<22} {:>7} {:>9} {:>11} {:>10}", "mode", "rounds", "best acc", "traffic MB", "energy kJ");
    for mode in modes {
        let mut cfg = SessionConfig::default();
        cfg.seed = 2;
        cfg.mode = mode;
        cfg.budget.max_rounds = 100_000;
        cfg.budget.max_clock_s = 120.0;
        let r = run(&cfg)?;
        println!(
            "{:<22} {:>7} {:>9.3} {:>11.2} {:>10.2}",
            mode.label(),
            r.outcome.rounds,
            r.outcome.best_accuracy,
            r.trace.total_bytes() as f64 / 1e6,
            r.trace.total_joules() / 1e3
        );
    }
    Ok(())
}
