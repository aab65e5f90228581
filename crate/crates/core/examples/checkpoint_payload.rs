//! Wire formats: adapter payloads at two scalar widths and full-model
//! checkpoints.

use adapterfed::adapter::{insert_adapters, AdapterConfig, Stacking};
use adapterfed::checkpoint::{decode_checkpoint, encode_checkpoint};
use adapterfed::model::{build_model, ModelSpec};
use adapterfed::payload::{AdapterPayload, ScalarWidth};
use adapterfed::rng::SeededRng;

fn main() -> adapterfed::Result<()> {
    let backbone = build_model(&ModelSpec::default(), 4)?;
    let model = insert_adapters(
        &backbone,
        AdapterConfig::new(3, 24),
        Stacking::Vertical { step: 8 },
        &mut SeededRng::new(1),
    )?;

    let payload = AdapterPayload::from_model(&model);
    let wide = payload.encode(ScalarWidth::F64);
    let narrow = payload.encode(ScalarWidth::F32);
    println!("payload scalars {}", payload.len());
    println!("  f64 encoding {} bytes", wide.len());
    println!("  f32 encoding {} bytes (charged on the emulated wire)", narrow.len());
    assert_eq!(AdapterPayload::decode(&wide)?, payload);
    let lossy = AdapterPayload::decode(&narrow)?;
    let worst = payload
        .values
        .iter()
        .zip(&lossy.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("  f32 round trip max error {worst:.2e}");

    // A fresh client installs the payload onto its own backbone copy.
    let installed = payload.materialize(&backbone)?;
    assert_eq!(AdapterPayload::from_model(&installed), payload);

    let ckpt = encode_checkpoint(&model);
    let back = decode_checkpoint(&ckpt)?;
    println!("checkpoint {} bytes, bit-exact: {}", ckpt.len(), back == model);
    assert_eq!(back, model);

    let mut corrupt = ckpt.clone();
    corrupt[0] = b'X';
    println!("corrupted magic: {}", decode_checkpoint(&corrupt).unwrap_err());
    Ok(())
}
