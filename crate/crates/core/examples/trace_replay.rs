//! Same seed, same trace, byte for byte. A written trace reads back into an
//! identical report.

use std::io::Cursor;

use adapterfed::session::{report, run, SessionConfig};
use adapterfed::trace::SessionTrace;

fn main() -> adapterfed::Result<()> {
    let mut cfg = SessionConfig::default();
    cfg.seed = 11;
    cfg.budget.max_rounds = 60;

    let a = run(&cfg)?.trace.to_jsonl();
    let b = run(&cfg)?.trace.to_jsonl();
    println!("trace {} bytes, {} lines", a.len(), a.iter().filter(|&&c| c == b'\n').count());
    println!("identical across runs: {}", a == b);
    assert_eq!(a, b);

    cfg.seed = 12;
    let c = run(&cfg)?.trace.to_jsonl();
    println!("differs under another seed: {}", a != c);

    let parsed = SessionTrace::read_jsonl(Cursor::new(&a))?;
    assert_eq!(parsed.to_jsonl(), a);
    let r = report(&parsed, Some(0.8), &[0.9])?;
    println!(
        "report: {} rounds, {} bytes, {:.1} J, {} clients touched",
        r.rounds,
        r.total_bytes,
        r.total_joules,
        r.client_bytes.len()
    );
    Ok(())
}
