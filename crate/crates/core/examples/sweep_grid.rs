//! Fixed-adapter sweep over (depth, width) on a short round budget.

use adapterfed::session::{full_grid, sweep, SessionConfig};

fn main() -> adapterfed::Result<()> {
    let mut cfg = SessionConfig::default();
    cfg.seed = 1;
    cfg.budget.max_rounds = 40;
    cfg.targets.absolute = Some(0.6);
    let grid = full_grid(cfg.model.num_layers, 16, 32);
    println!("depth\twidth\tconverged\ttime_s\tbytes\tbest");
    for r in sweep(&cfg, &grid)? {
        let t = r.time_to_target.map_or("-".into(), |t| format!("{t:.1}"));
        println!("{}\t{}\t{}\t{t}\t{}\t{:.3}", r.depth, r.width, r.converged, r.total_bytes, r.best_accuracy);
    }
    Ok(())
}
