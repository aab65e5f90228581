//! Activation caching changes cost, never results.
//!
//! Two identical servers train the same adapter model for a few rounds, one
//! with the activation cache and one without. Payloads and logits must match
//! bit for bit while the cached run reports less compute.

use adapterfed::adapter::{insert_adapters, AdapterConfig};
use adapterfed::fed::TrackAssignment;
use adapterfed::payload::AdapterPayload;
use adapterfed::rng::SeededRng;
use adapterfed::session::{build_server, SessionConfig};

fn main() -> adapterfed::Result<()> {
    let mut cfg = SessionConfig::default();
    cfg.seed = 3;
    cfg.num_clients = 12;
    cfg.participants_per_group = 1;
    let mut cached = build_server(&cfg)?;
    cfg.training.cache = false;
    let mut plain = build_server(&cfg)?;

    let model = insert_adapters(
        &cached.backbone,
        AdapterConfig::new(2, 16),
        cfg.configurator.stacking(),
        &mut SeededRng::new(9),
    )?;
    let mut pa = AdapterPayload::from_model(&model);
    let mut pb = pa.clone();
    let probe: Vec<Vec<usize>> = cached.evaluator.samples().iter().take(8).map(|s| s.tokens.clone()).collect();

    println!("round  hits  misses  compute(cached)  compute(plain)  identical");
    for round in 0..4 {
        // Every client participates so later rounds can hit their caches.
        let ra = cached.run_round(&[TrackAssignment { payload: &pa, participants: 12 }])?;
        let rb = plain.run_round(&[TrackAssignment { payload: &pb, participants: 12 }])?;
        pa = ra.tracks[0].payload.clone().expect("aggregated");
        pb = rb.tracks[0].payload.clone().expect("aggregated");
        let la = pa.materialize(&cached.backbone)?.forward(&probe)?;
        let lb = pb.materialize(&plain.backbone)?.forward(&probe)?;
        let same = pa == pb && la.bit_eq(&lb);
        let cost = |r: &adapterfed::fed::RoundReport| r.tracks[0].round_time_s;
        println!(
            "{round:>5} {:>5} {:>7} {:>16.3} {:>15.3}  {same}",
            ra.tracks[0].cache.hits,
            ra.tracks[0].cache.misses(),
            cost(&ra),
            cost(&rb)
        );
        assert!(same, "cache changed the training result");
    }
    Ok(())
}
