//! Dirichlet label skew across clients at three concentrations.
//!
//! Smaller concentrations give each client a more lopsided label mix. The
//! mean total-variation distance to the global label distribution shrinks
//! as the concentration grows.

use adapterfed::data::{generate_task, partition_noniid, SyntheticTaskSpec};
use adapterfed::rng::SeededRng;

fn main() -> adapterfed::Result<()> {
    let spec = SyntheticTaskSpec {
        samples_per_label: 2000,
        ..SyntheticTaskSpec::default()
    };
    let data = generate_task(&spec, &mut SeededRng::new(1))?;
    let c = spec.num_labels;
    let mut global = vec![0.0; c];
    for s in &data {
        global[s.label] += 1.0 / data.len() as f64;
    }

    for a in [1.0, 10.0, 100.0] {
        let shards = partition_noniid(&data, 40, a, &mut SeededRng::new(2))?;
        assert_eq!(shards.iter().map(Vec::len).sum::<usize>(), data.len());
        let mut tv_sum = 0.0;
        println!("concentration {a}");
        for (id, shard) in shards.iter().enumerate() {
            let mut hist = vec![0usize; c];
            for s in shard {
                hist[s.label] += 1;
            }
            let tv: f64 = hist
                .iter()
                .zip(&global)
                .map(|(&h, g)| (h as f64 / shard.len() as f64 - g).abs())
                .sum::<f64>()
                / 2.0;
            tv_sum += tv;
            if id < 4 {
                println!("  client {id:>2}  labels {hist:?}  tv {tv:.3}");
            }
        }
        println!("  mean tv over 40 clients: {:.3}\n", tv_sum / shards.len() as f64);
    }
    Ok(())
}
