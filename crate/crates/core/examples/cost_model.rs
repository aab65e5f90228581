//! Emulated per-batch and per-round cost of each tuning configuration on the
//! bundled device profiles.

use adapterfed::adapter::{insert_adapters, AdapterConfig, Stacking};
use adapterfed::costmodel::{
    compute_time_per_batch, energy_joules, payload_bytes, round_time, ClientRoundCost, DeviceProfile,
    NetworkProfile,
};
use adapterfed::model::{build_model, ModelSpec, TuningMode};
use adapterfed::rng::SeededRng;

fn main() -> adapterfed::Result<()> {
    let spec = ModelSpec::default();
    let d_max = spec.num_layers;
    let base = build_model(&spec, 0)?;
    let net = NetworkProfile::default();
    let batches = 6.0;

    println!("per-batch compute (s), D = {d_max}");
    println!("{:>7} {:>6} {:>8} {:>8}", "device", "depth", "no cache", "cache");
    for p in ["tx2", "nano", "rpi4b"].map(|n| DeviceProfile::by_name(n).expect("bundled")) {
        for d in 0..=d_max {
            println!(
                "{:>7} {d:>6} {:>8.3} {:>8.3}",
                p.name,
                compute_time_per_batch(&p, d_max, d, false),
                compute_time_per_batch(&p, d_max, d, true)
            );
        }
    }

    let tx2 = DeviceProfile::tx2();
    println!("\none tx2 client, {batches} batches, cache warm, 1 MB/s");
    println!("{:>12} {:>8} {:>9} {:>9}", "config", "bytes", "round_s", "joules");
    let mut rng = SeededRng::new(0);
    let mut rows = Vec::new();
    for (d, w) in [(0, 8), (1, 8), (2, 16), (4, 32)] {
        let m = insert_adapters(&base, AdapterConfig::new(d, w), Stacking::Vertical { step: 8 }, &mut rng)?;
        rows.push((format!("({d},{w})"), payload_bytes(&m), batches * compute_time_per_batch(&tx2, d_max, d, true)));
    }
    let mut full = base.clone();
    full.set_tuning_mode(TuningMode::Full)?;
    rows.push(("full".into(), payload_bytes(&full), batches * compute_time_per_batch(&tx2, d_max, d_max, false)));
    for (name, bytes, compute) in rows {
        let c = ClientRoundCost::new(&net, compute, bytes);
        println!(
            "{name:>12} {bytes:>8} {:>9.3} {:>9.2}",
            round_time(&[c]),
            energy_joules(c.compute_s, c.transfer_s(), &tx2)
        );
    }
    Ok(())
}
