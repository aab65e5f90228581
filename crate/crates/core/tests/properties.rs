use adapterfed::adapter::{deepen, insert_adapters, widen, AdapterConfig, Stacking};
use adapterfed::data::{generate_task, partition_noniid, split_train_test, SyntheticTaskSpec};
use adapterfed::fed::{fedavg, select_clients};
use adapterfed::model::{build_model, evaluate, ModelInput, ModelSpec, ModelState, TuningMode};
use adapterfed::payload::{AdapterPayload, PayloadKind};
use adapterfed::rng::SeededRng;
use adapterfed::tensor::Tensor;
use proptest::prelude::*;

fn mini() -> ModelSpec {
    ModelSpec {
        num_layers: 3,
        hidden: 16,
        heads: 2,
        vocab: 20,
        seqlen: 6,
        num_labels: 3,
        ..ModelSpec::default()
    }
}

fn tokens(spec: &ModelSpec, rows: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    (0..rows)
        .map(|_| (0..spec.seqlen).map(|_| rng.below(spec.vocab)).collect())
        .collect()
}

fn payloads_strategy() -> impl Strategy<Value = Vec<(Vec<f64>, usize)>> {
    (1usize..6, 1usize..8).prop_flat_map(|(len, k)| {
        prop::collection::vec((prop::collection::vec(-1e3f64..1e3, len), 1usize..50), k)
    })
}

fn as_payloads(raw: &[(Vec<f64>, usize)]) -> Vec<AdapterPayload> {
    raw.iter()
        .map(|(v, _)| AdapterPayload {
            kind: PayloadKind::Full,
            values: v.clone(),
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fedavg_stays_in_the_hull_and_ignores_order(raw in payloads_strategy(), rot in 0usize..8) {
        let ps = as_payloads(&raw);
        let updates: Vec<(usize, &AdapterPayload, usize)> =
            ps.iter().zip(&raw).enumerate().map(|(i, (p, r))| (i, p, r.1)).collect();
        let avg = fedavg(&updates).unwrap();
        for j in 0..avg.len() {
            let lo = raw.iter().map(|r| r.0[j]).fold(f64::INFINITY, f64::min);
            let hi = raw.iter().map(|r| r.0[j]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(lo <= avg.values[j] && avg.values[j] <= hi);
        }
        let mut shuffled = updates.clone();
        let n = shuffled.len();
        shuffled.rotate_left(rot % n);
        prop_assert_eq!(fedavg(&shuffled).unwrap(), avg);
    }

    #[test]
    fn fedavg_of_copies_is_the_copy(raw in payloads_strategy()) {
        let p = &as_payloads(&raw)[0];
        let updates: Vec<(usize, &AdapterPayload, usize)> =
            raw.iter().enumerate().map(|(i, r)| (i, p, r.1)).collect();
        prop_assert_eq!(&fedavg(&updates).unwrap(), p);
    }

    #[test]
    fn partition_is_complete_and_balanced(clients in 1usize..30, a in 0.05f64..200.0, seed in 0u64..1000) {
        let spec = SyntheticTaskSpec { samples_per_label: 30, ..SyntheticTaskSpec::default() };
        let data = generate_task(&spec, &mut SeededRng::new(seed)).unwrap();
        let shards = partition_noniid(&data, clients, a, &mut SeededRng::new(seed + 1)).unwrap();
        prop_assert_eq!(shards.len(), clients);
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut seen: Vec<Vec<usize>> = shards.concat().into_iter().map(|s| s.tokens).collect();
        let mut all: Vec<Vec<usize>> = data.into_iter().map(|s| s.tokens).collect();
        seen.sort();
        all.sort();
        prop_assert_eq!(seen, all);
    }

    #[test]
    fn split_keeps_every_sample(n in 5usize..60, seed in 0u64..1000) {
        let spec = SyntheticTaskSpec { samples_per_label: 20, ..SyntheticTaskSpec::default() };
        let data = generate_task(&spec, &mut SeededRng::new(seed)).unwrap();
        let shard = split_train_test(7, &data[..n], 0.8, &mut SeededRng::new(seed)).unwrap();
        prop_assert_eq!(shard.train.len() + shard.test.len(), n);
        prop_assert_eq!(shard.client_id, 7);
    }

    #[test]
    fn selection_is_distinct_and_in_range(pop in 1usize..100, frac in 0.0f64..=1.0, seed in 0u64..1000) {
        let k = (frac * pop as f64) as usize;
        let ids = select_clients(pop, k, &mut SeededRng::new(seed)).unwrap();
        prop_assert_eq!(ids.len(), k);
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        prop_assert!(ids.iter().all(|&i| i < pop));
    }

    #[test]
    fn upgrades_inherit_the_prefix(seed in 0u64..500, deeper in any::<bool>()) {
        let base = build_model(&mini(), seed).unwrap();
        let mut rng = SeededRng::new(seed);
        let m = insert_adapters(&base, AdapterConfig::new(1, 16), Stacking::Vertical { step: 8 }, &mut rng).unwrap();
        let up = if deeper { deepen(&m, 1, &mut rng) } else { widen(&m, 8, &mut rng) }.unwrap();
        for p in m.parameters() {
            let q = up.parameter(&p.name).expect("inherited parameter");
            prop_assert!(p.value.bit_eq(&q.value), "{} changed", p.name);
        }
        let (d, w) = (up.adapter_config().depth, up.adapter_config().width);
        prop_assert!(d >= 1 && w >= 16 && d + w > 17);
    }
}

#[test]
fn dirichlet_skew_falls_with_concentration() {
    let spec = SyntheticTaskSpec {
        samples_per_label: 1000,
        ..SyntheticTaskSpec::default()
    };
    let data = generate_task(&spec, &mut SeededRng::new(0)).unwrap();
    let c = spec.num_labels;
    let mean_tv = |a: f64| {
        let shards = partition_noniid(&data, 20, a, &mut SeededRng::new(1)).unwrap();
        shards
            .iter()
            .map(|s| {
                let mut h = vec![0.0; c];
                for x in s {
                    h[x.label] += 1.0 / s.len() as f64;
                }
                h.iter().map(|p| (p - 1.0 / c as f64).abs()).sum::<f64>() / 2.0
            })
            .sum::<f64>()
            / shards.len() as f64
    };
    let tv: Vec<f64> = [1.0, 10.0, 100.0].iter().map(|&a| mean_tv(a)).collect();
    assert!(tv[0] > tv[1] && tv[1] > tv[2], "{tv:?}");
}

#[test]
fn selection_frequency_is_uniform() {
    let (pop, k, trials) = (20usize, 5usize, 20_000usize);
    let mut rng = SeededRng::new(3);
    let mut hits = vec![0usize; pop];
    for _ in 0..trials {
        for i in select_clients(pop, k, &mut rng).unwrap() {
            hits[i] += 1;
        }
    }
    let p = k as f64 / pop as f64;
    let mean = trials as f64 * p;
    let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
    for (i, &h) in hits.iter().enumerate() {
        assert!((h as f64 - mean).abs() < 3.5 * sigma, "client {i}: {h} vs {mean}");
    }
}

#[test]
fn random_model_scores_near_chance() {
    let spec = ModelSpec::default();
    let task = SyntheticTaskSpec {
        samples_per_label: 250,
        ..SyntheticTaskSpec::default()
    };
    let data = generate_task(&task, &mut SeededRng::new(8)).unwrap();
    let accs: Vec<f64> = (0..5)
        .map(|seed| evaluate(&build_model(&spec, seed).unwrap(), &data).unwrap())
        .collect();
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    let chance = 1.0 / spec.num_labels as f64;
    assert!((mean - chance).abs() < 0.1, "mean accuracy {mean} vs {chance}");
}

#[test]
fn zeroed_up_projection_makes_widening_the_identity() {
    let spec = mini();
    let mut rng = SeededRng::new(2);
    let base = build_model(&spec, 2).unwrap();
    let m = insert_adapters(&base, AdapterConfig::new(2, 8), Stacking::Vertical { step: 8 }, &mut rng).unwrap();
    let mut wide = widen(&m, 8, &mut rng).unwrap();
    for p in wide.parameters_mut().filter(|p| p.name.ends_with("adapter1.up")) {
        p.value.data_mut().fill(0.0);
    }
    for p in wide.parameters_mut().filter(|p| p.name.ends_with("adapter1.up_bias")) {
        p.value.data_mut().fill(0.0);
    }
    let x = tokens(&spec, 4, &mut rng);
    assert!(m.forward(&x).unwrap().bit_eq(&wide.forward(&x).unwrap()));
}

/// One SGD step on a single sample, checked against a hand update built from
/// the reported gradients.
#[test]
fn single_sample_sgd_matches_the_update_rule() {
    let spec = mini();
    let mut rng = SeededRng::new(4);
    let mut m = insert_adapters(
        &build_model(&spec, 4).unwrap(),
        AdapterConfig::new(1, 8),
        Stacking::Vertical { step: 8 },
        &mut rng,
    )
    .unwrap();
    let x = tokens(&spec, 1, &mut rng);
    m.zero_grads();
    m.loss_and_grads(ModelInput::Tokens(&x), &[1]).unwrap();
    let lr = 0.3;
    let expected: Vec<(String, Vec<f64>)> = m
        .parameters()
        .filter(|p| p.trainable)
        .map(|p| {
            let g = p.grad.as_ref().expect("trainable has grad");
            (p.name.clone(), p.value.data().iter().zip(g).map(|(v, g)| v - lr * g).collect())
        })
        .collect();
    let frozen: Vec<(String, Tensor)> = m
        .parameters()
        .filter(|p| !p.trainable)
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    m.sgd_step(lr).unwrap();
    for (name, want) in expected {
        assert_eq!(m.parameter(&name).unwrap().value.data(), &want[..], "{name}");
    }
    for (name, v) in frozen {
        assert!(m.parameter(&name).unwrap().value.bit_eq(&v), "{name} moved");
    }
}

#[test]
fn payload_roundtrip_preserves_the_model() {
    let spec = mini();
    let mut rng = SeededRng::new(6);
    let base = build_model(&spec, 6).unwrap();
    for mode in [TuningMode::Full, TuningMode::LayerFreeze { frozen: 2 }] {
        let mut m: ModelState = base.clone();
        m.set_tuning_mode(mode).unwrap();
        let p = AdapterPayload::from_model(&m);
        assert_eq!(p.materialize(&base).unwrap(), m);
    }
    let m = insert_adapters(&base, AdapterConfig::new(3, 16), Stacking::Vertical { step: 8 }, &mut rng).unwrap();
    let x = tokens(&spec, 3, &mut rng);
    let back = AdapterPayload::from_model(&m).materialize(&base).unwrap();
    assert!(m.forward(&x).unwrap().bit_eq(&back.forward(&x).unwrap()));
}
