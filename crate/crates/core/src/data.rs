//! Synthetic text-classification tasks and non-IID client partitioning.
//!
//! Tasks have planted structure: the content vocabulary is split into one
//! topic group per label, a sample for label `y` draws a share of its tokens
//! from `y`'s topic group, and a hidden teacher (a near-identity linear map
//! over per-topic token counts) assigns the final label.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Token id placed at position 0 of every sequence; classification reads it.
pub const CLS_TOKEN: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub vocab: usize,
    pub seqlen: usize,
    pub num_labels: usize,
    pub teacher_seed: u64,
    pub samples_per_label: usize,
    /// Fraction of labels replaced by a different label.
    #[serde(default)]
    pub noise_rate: f64,
    /// Probability that a content token comes from the sample's topic group.
    #[serde(default = "default_signal")]
    pub signal: f64,
}

fn default_signal() -> f64 {
    0.3
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab: 64,
            seqlen: 16,
            num_labels: 4,
            teacher_seed: 0,
            samples_per_label: 100,
            noise_rate: 0.0,
            signal: default_signal(),
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_labels < 2 {
            return bad(format!("need at least 2 labels, got {}", self.num_labels));
        }
        if !(0.0..0.5).contains(&self.noise_rate) {
            return bad(format!("noise rate {} must lie in [0, 0.5)", self.noise_rate));
        }
        if !(0.0..=1.0).contains(&self.signal) {
            return bad(format!("signal {} must lie in [0, 1]", self.signal));
        }
        if self.seqlen < 2 {
            return bad("seqlen must leave room for content after the CLS token".into());
        }
        if self.vocab < 1 + self.num_labels {
            return bad(format!(
                "vocab {} cannot hold a topic group for each of {} labels",
                self.vocab, self.num_labels
            ));
        }
        Ok(())
    }

    /// Content tokens per topic group.
    pub fn topic_size(&self) -> usize {
        (self.vocab - 1) / self.num_labels
    }

    /// Topic group of a token, if it belongs to one.
    pub fn topic_of(&self, token: usize) -> Option<usize> {
        if token == CLS_TOKEN {
            return None;
        }
        let g = (token - 1) / self.topic_size();
        (g < self.num_labels).then_some(g)
    }
}

/// Near-identity linear map over per-topic token counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Teacher {
    spec: SyntheticTaskSpec,
    weights: Vec<f64>,
}

impl Teacher {
    pub fn new(spec: &SyntheticTaskSpec) -> Self {
        let c = spec.num_labels;
        let mut rng = SeededRng::new(spec.teacher_seed).fork("teacher");
        let mut weights = rng.normal_vec(c * c, 0.0, 0.01);
        for i in 0..c {
            weights[i * c + i] += 1.0;
        }
        Self {
            spec: spec.clone(),
            weights,
        }
    }

    pub fn features(&self, tokens: &[usize]) -> Vec<f64> {
        let mut counts = vec![0.0; self.spec.num_labels];
        for &t in tokens {
            if let Some(g) = self.spec.topic_of(t) {
                counts[g] += 1.0;
            }
        }
        counts
    }

    pub fn scores(&self, tokens: &[usize]) -> Vec<f64> {
        let c = self.spec.num_labels;
        let phi = self.features(tokens);
        (0..c)
            .map(|j| (0..c).map(|i| phi[i] * self.weights[i * c + j]).sum())
            .collect()
    }

    pub fn label(&self, tokens: &[usize]) -> usize {
        let s = self.scores(tokens);
        let mut best = 0;
        for (j, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = j;
            }
        }
        best
    }
}

/// Generate `samples_per_label * num_labels` samples.
pub fn generate_task(spec: &SyntheticTaskSpec, rng: &mut SeededRng) -> Result<Vec<Sample>> {
    spec.validate()?;
    let teacher = Teacher::new(spec);
    let topic = spec.topic_size();
    let mut out = Vec::with_capacity(spec.samples_per_label * spec.num_labels);
    for i in 0..spec.samples_per_label * spec.num_labels {
        let intended = i % spec.num_labels;
        let mut tokens = Vec::with_capacity(spec.seqlen);
        tokens.push(CLS_TOKEN);
        for _ in 1..spec.seqlen {
            let t = if rng.uniform() < spec.signal {
                1 + intended * topic + rng.below(topic)
            } else {
                1 + rng.below(spec.vocab - 1)
            };
            tokens.push(t);
        }
        let mut label = teacher.label(&tokens);
        if spec.noise_rate > 0.0 && rng.uniform() < spec.noise_rate {
            label = (label + 1 + rng.below(spec.num_labels - 1)) % spec.num_labels;
        }
        out.push(Sample { tokens, label });
    }
    Ok(out)
}

/// Split `dataset` across `num_clients` with per-client label mixtures drawn
/// from a symmetric Dirichlet with concentration `concentration`.
///
/// Client sizes differ by at most one. Each client fills its quota by
/// sampling labels from its mixture, restricted to labels with samples left.
pub fn partition_noniid(
    dataset: &[Sample],
    num_clients: usize,
    concentration: f64,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<Sample>>> {
    if num_clients == 0 {
        return Err(Error::Partition("need at least one client".into()));
    }
    if !(concentration > 0.0) {
        return Err(Error::Partition(format!(
            "concentration must be positive, got {concentration}"
        )));
    }
    if dataset.len() < num_clients {
        return Err(Error::Partition(format!(
            "{} samples cannot give each of {num_clients} clients one sample",
            dataset.len()
        )));
    }
    let num_labels = dataset.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); num_labels];
    for (i, s) in dataset.iter().enumerate() {
        pools[s.label].push(i);
    }
    for pool in &mut pools {
        rng.shuffle(pool);
    }
    let base = dataset.len() / num_clients;
    let extra = dataset.len() % num_clients;
    let mut shards = Vec::with_capacity(num_clients);
    for c in 0..num_clients {
        let quota = base + usize::from(c < extra);
        let mix = rng.dirichlet(num_labels, concentration);
        let mut shard = Vec::with_capacity(quota);
        for _ in 0..quota {
            let mass: f64 = (0..num_labels)
                .filter(|&l| !pools[l].is_empty())
                .map(|l| mix[l])
                .sum();
            let label = if mass > 0.0 {
                let mut u = rng.uniform() * mass;
                let mut pick = None;
                for l in (0..num_labels).filter(|&l| !pools[l].is_empty()) {
                    pick = Some(l);
                    if u < mix[l] {
                        break;
                    }
                    u -= mix[l];
                }
                pick.expect("some pool is non-empty")
            } else {
                // mixture has no mass on the remaining labels
                let left: Vec<usize> = (0..num_labels).filter(|&l| !pools[l].is_empty()).collect();
                left[rng.below(left.len())]
            };
            let idx = pools[label].pop().expect("non-empty pool");
            shard.push(dataset[idx].clone());
        }
        shards.push(shard);
    }
    Ok(shards)
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shard {
    pub client_id: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub const TRAIN_FRACTION: f64 = 0.8;

/// Split one client's samples into train and test, stratified by label when
/// the counts allow it.
pub fn split_train_test(
    client_id: usize,
    samples: &[Sample],
    ratio: f64,
    rng: &mut SeededRng,
) -> Result<Shard> {
    if samples.len() < 5 {
        return Err(Error::Data(format!(
            "client {client_id} has {} samples; at least 5 are needed for a train/test split",
            samples.len()
        )));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("train ratio {ratio} must lie in (0, 1)")));
    }
    let n = samples.len();
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let n_test = n - n_train;

    let num_labels = samples.iter().map(|s| s.label).max().unwrap_or(0) + 1;
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); num_labels];
    for (i, s) in samples.iter().enumerate() {
        by_label[s.label].push(i);
    }
    for g in &mut by_label {
        rng.shuffle(g);
    }
    // largest-remainder allocation of test slots across labels
    let share = n_test as f64 / n as f64;
    let mut alloc: Vec<usize> = by_label
        .iter()
        .map(|g| (g.len() as f64 * share).floor() as usize)
        .collect();
    let mut order: Vec<usize> = (0..num_labels).collect();
    order.sort_by(|&a, &b| {
        let ra = by_label[a].len() as f64 * share - alloc[a] as f64;
        let rb = by_label[b].len() as f64 * share - alloc[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut remaining = n_test - alloc.iter().sum::<usize>();
    for &l in order.iter().cycle().take(num_labels * 2) {
        if remaining == 0 {
            break;
        }
        if alloc[l] < by_label[l].len() {
            alloc[l] += 1;
            remaining -= 1;
        }
    }
    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n_test);
    for (l, g) in by_label.iter().enumerate() {
        for (k, &i) in g.iter().enumerate() {
            if k < alloc[l] {
                test.push(samples[i].clone());
            } else {
                train.push(samples[i].clone());
            }
        }
    }
    // Grouped by label at this point; local SGD walks train in stored order.
    rng.shuffle(&mut train);
    rng.shuffle(&mut test);
    Ok(Shard {
        client_id,
        train,
        test,
    })
}

/// Write samples as JSON lines, one `{"tokens": [...], "label": k}` per line.
pub fn export_samples<W: Write>(samples: &[Sample], mut out: W) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut out, s).map_err(|e| Error::Codec(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn import_samples<R: BufRead>(input: R) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::TraceParse {
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(noise: f64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            samples_per_label: 250,
            noise_rate: noise,
            ..SyntheticTaskSpec::default()
        }
    }

    #[test]
    fn teacher_is_perfect_without_noise() {
        let spec = task(0.0);
        let data = generate_task(&spec, &mut SeededRng::new(1)).unwrap();
        let teacher = Teacher::new(&spec);
        assert!(data.iter().all(|s| teacher.label(&s.tokens) == s.label));
    }

    #[test]
    fn noise_flips_roughly_the_requested_fraction() {
        let spec = task(0.2);
        let data = generate_task(&spec, &mut SeededRng::new(1)).unwrap();
        let teacher = Teacher::new(&spec);
        let flipped = data.iter().filter(|s| teacher.label(&s.tokens) != s.label).count();
        let p = flipped as f64 / data.len() as f64;
        assert!((p - 0.2).abs() < 3.0 * (0.2f64 * 0.8 / data.len() as f64).sqrt());
    }

    #[test]
    fn label_marginals_are_uniform() {
        let spec = task(0.0);
        let data = generate_task(&spec, &mut SeededRng::new(3)).unwrap();
        let n = data.len() as f64;
        let p = 1.0 / spec.num_labels as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for l in 0..spec.num_labels {
            let count = data.iter().filter(|s| s.label == l).count() as f64;
            assert!((count - n * p).abs() < 3.0 * sigma, "label {l}: {count}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = task(0.1);
        let a = generate_task(&spec, &mut SeededRng::new(5)).unwrap();
        let b = generate_task(&spec, &mut SeededRng::new(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_client_gets_everything() {
        let data = generate_task(&task(0.0), &mut SeededRng::new(1)).unwrap();
        let shards = partition_noniid(&data, 1, 1.0, &mut SeededRng::new(2)).unwrap();
        assert_eq!(shards.len(), 1);
        let mut a = shards[0].clone();
        let mut b = data.clone();
        a.sort_by(|x, y| x.tokens.cmp(&y.tokens));
        b.sort_by(|x, y| x.tokens.cmp(&y.tokens));
        assert_eq!(a, b);
    }

    #[test]
    fn too_small_dataset_fails() {
        let data = generate_task(
            &SyntheticTaskSpec {
                samples_per_label: 1,
                ..task(0.0)
            },
            &mut SeededRng::new(1),
        )
        .unwrap();
        assert!(matches!(
            partition_noniid(&data, 10, 1.0, &mut SeededRng::new(1)),
            Err(Error::Partition(_))
        ));
    }

    #[test]
    fn split_ten_is_eight_two() {
        let data = generate_task(&task(0.0), &mut SeededRng::new(1)).unwrap();
        let shard = split_train_test(3, &data[..10], 0.8, &mut SeededRng::new(4)).unwrap();
        assert_eq!(shard.train.len(), 8);
        assert_eq!(shard.test.len(), 2);
        let again = split_train_test(3, &data[..10], 0.8, &mut SeededRng::new(4)).unwrap();
        assert_eq!(shard, again);
        assert!(matches!(
            split_train_test(0, &data[..4], 0.8, &mut SeededRng::new(4)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn export_import_roundtrip() {
        let data = generate_task(&task(0.0), &mut SeededRng::new(1)).unwrap();
        let mut buf = Vec::new();
        export_samples(&data[..20], &mut buf).unwrap();
        assert_eq!(import_samples(&buf[..]).unwrap(), data[..20].to_vec());
    }
}
