//! Trainable-parameter and payload accounting for adapter configurations.
//!
//! Prints the closed-form counts for BERT-base and DistilBERT shapes, then
//! builds a small model and checks the formula against the enumerated
//! buffers for every (depth, width) on its grid.

use adapterfed::adapter::{adapter_trainable_count, insert_adapters, trainable_param_count, AdapterConfig, Stacking};
use adapterfed::costmodel::{forward_share, payload_bytes};
use adapterfed::model::{build_model, ModelSpec};
use adapterfed::rng::SeededRng;

fn main() -> adapterfed::Result<()> {
    for (name, spec) in [("bert-base", ModelSpec::bert_base(20)), ("distilbert", ModelSpec::distilbert(20))] {
        let all = AdapterConfig::new(spec.num_layers, 32);
        let count = adapter_trainable_count(spec.hidden, spec.num_labels, all, Stacking::Monolithic);
        println!(
            "{name:>10}: D={} n={} backbone={:.2}M adapters(m=32, every layer)={count} ({:.2}e6)",
            spec.num_layers,
            spec.hidden,
            spec.backbone_param_count() as f64 / 1e6,
            count as f64 / 1e6
        );
    }
    println!("forward share at D=12, d=2, no cache: {:.0}%", 100.0 * forward_share(12, 2));

    let spec = ModelSpec::default();
    let base = build_model(&spec, 0)?;
    let stacking = Stacking::Vertical { step: 8 };
    let mut rng = SeededRng::new(1);
    println!("\n{:>5} {:>5} {:>9} {:>9} {:>9}", "depth", "width", "formula", "counted", "bytes");
    for depth in 0..=spec.num_layers {
        for width in [8, 16, 32] {
            if depth == 0 && width > 8 {
                continue;
            }
            let cfg = AdapterConfig::new(depth, width);
            let m = insert_adapters(&base, cfg, stacking, &mut rng)?;
            let formula = adapter_trainable_count(spec.hidden, spec.num_labels, cfg, stacking);
            let counted = trainable_param_count(&m);
            assert_eq!(formula, counted);
            println!("{depth:>5} {width:>5} {formula:>9} {counted:>9} {:>9}", payload_bytes(&m));
        }
    }
    Ok(())
}
