//! Synchronous parameter-server federation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{ActivationCache, CacheStats, DepthHistory, Watermark};
use crate::costmodel::{
    batch_compute_time, energy_joules, payload_bytes_for, round_time, ClientRoundCost, DeviceProfile,
    NetworkProfile, WIRE_SCALAR_BYTES,
};
use crate::data::{Sample, Shard};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, ModelInput, ModelState, EVAL_BATCH};
use crate::payload::{AdapterPayload, PayloadKind};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Batch size the device latencies were measured at.
pub const REFERENCE_BATCH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingParams {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Full passes over the local train split per round.
    pub local_epochs: usize,
    pub cache: bool,
}

impl Default for TrainingParams {
    fn default() -> Self {
        Self {
            batch_size: 4,
            learning_rate: 0.1,
            local_epochs: 1,
            cache: true,
        }
    }
}

impl TrainingParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::ConfigField {
                field: "training.batch_size".into(),
                reason: "must be at least 1".into(),
            });
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::ConfigField {
                field: "training.learning_rate".into(),
                reason: format!("must be a finite non-negative number, got {}", self.learning_rate),
            });
        }
        if self.local_epochs == 0 {
            return Err(Error::ConfigField {
                field: "training.local_epochs".into(),
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub shard: Shard,
    pub profile: DeviceProfile,
    pub cache: ActivationCache,
    pub last_participation: Option<usize>,
}

impl ClientState {
    pub fn new(shard: Shard, profile: DeviceProfile) -> Self {
        Self {
            id: shard.client_id,
            shard,
            profile,
            cache: ActivationCache::new(),
            last_participation: None,
        }
    }
}

/// Counters for one client's local training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LocalStats {
    pub batches: usize,
    pub forward_layers: usize,
    pub backward_layers: usize,
    pub compute_s: f64,
    pub cache: CacheStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub client_id: usize,
    pub payload: AdapterPayload,
    pub samples: usize,
    pub stats: LocalStats,
}

/// Pick `k` distinct client ids uniformly without replacement, in sampled order.
pub fn select_clients(population: usize, k: usize, rng: &mut SeededRng) -> Result<Vec<usize>> {
    if k > population {
        return Err(Error::Selection {
            requested: k,
            population,
        });
    }
    let mut ids: Vec<usize> = (0..population).collect();
    // partial Fisher-Yates
    for i in 0..k {
        let j = i + rng.below(population - i);
        ids.swap(i, j);
    }
    ids.truncate(k);
    Ok(ids)
}

/// Tuning depth implied by which layers train (`D` minus the deepest frozen boundary).
pub fn tuning_depth(model: &ModelState) -> usize {
    let d = model.spec().num_layers;
    if model.lowest_trainable_layer() == 0 {
        d
    } else {
        d - model.max_boundary().min(d)
    }
}

/// Run `E` passes of mini-batch SGD over the client's train split.
///
/// Batches are consecutive slices of the train split in stored order, so
/// batch `i` always holds the same samples and its cached activations stay
/// addressable across rounds.
pub fn local_train(
    client: &mut ClientState,
    backbone: &ModelState,
    payload: &AdapterPayload,
    params: &TrainingParams,
    watermark: Watermark,
    round: usize,
) -> Result<LocalUpdate> {
    if client.shard.train.is_empty() {
        return Err(Error::Training(format!("client {} has no training samples", client.id)));
    }
    let mut model = payload.materialize(backbone)?;
    let spec_layers = model.spec().num_layers;
    let depth = tuning_depth(&model);
    // Caching the embeddings saves nothing, so the cache needs a boundary of at least 1.
    let use_cache = params.cache && model.lowest_trainable_layer() > 1;
    let mut stats = LocalStats::default();
    for _ in 0..params.local_epochs {
        for (batch_id, batch) in client.shard.train.chunks(params.batch_size).enumerate() {
            let tokens: Vec<Vec<usize>> = batch.iter().map(|s| s.tokens.clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let scale = batch.len() as f64 / REFERENCE_BATCH as f64;
            let (forward, reload) = if use_cache {
                let f = client.cache.fetch_or_recompute(&model, batch_id, &tokens, watermark, round)?;
                stats.cache.record(f.outcome);
                let (layer, hit) = (f.boundary, !f.recomputed());
                let acts = f.activations.clone();
                model.loss_and_grads(ModelInput::Boundary { layer, activations: &acts }, &labels)?;
                if hit {
                    (spec_layers - layer, true)
                } else {
                    (spec_layers, false)
                }
            } else {
                model.loss_and_grads(ModelInput::Tokens(&tokens), &labels)?;
                (spec_layers, false)
            };
            model.sgd_step(params.learning_rate)?;
            stats.batches += 1;
            stats.forward_layers += forward;
            stats.backward_layers += depth;
            stats.compute_s += scale * batch_compute_time(&client.profile, spec_layers, forward, depth, reload);
        }
    }
    client.last_participation = Some(round);
    Ok(LocalUpdate {
        client_id: client.id,
        payload: AdapterPayload::from_model(&model),
        samples: client.shard.train.len(),
        stats,
    })
}

/// Sample-weighted coordinate-wise mean. Inputs are summed in client-id order.
pub fn fedavg(updates: &[(usize, &AdapterPayload, usize)]) -> Result<AdapterPayload> {
    let Some(&(_, first, _)) = updates.first() else {
        return Err(Error::Aggregation("no updates to aggregate".into()));
    };
    let total: usize = updates.iter().map(|u| u.2).sum();
    if total == 0 {
        return Err(Error::Aggregation("updates carry zero samples".into()));
    }
    for &(id, p, _) in updates {
        if p.kind != first.kind || p.len() != first.len() {
            return Err(Error::Aggregation(format!(
                "client {id} sent {:?} with {} values; expected {:?} with {}",
                p.kind,
                p.len(),
                first.kind,
                first.len()
            )));
        }
        if p.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Aggregation(format!("client {id} sent non-finite values")));
        }
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].0);
    let mut values = vec![0.0; first.len()];
    for i in order {
        let (_, p, n) = updates[i];
        let w = n as f64 / total as f64;
        for (acc, v) in values.iter_mut().zip(&p.values) {
            *acc += w * v;
        }
    }
    // Rounding must not push the mean outside the inputs' range.
    for (j, acc) in values.iter_mut().enumerate() {
        let (lo, hi) = updates.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), u| {
            (lo.min(u.1.values[j]), hi.max(u.1.values[j]))
        });
        *acc = acc.clamp(lo, hi);
    }
    Ok(AdapterPayload {
        kind: first.kind,
        values,
    })
}

/// Server-side evaluation on the union of clients' test splits. Frozen
/// bottom-layer outputs are computed once and reused.
#[derive(Debug, Clone)]
pub struct Evaluator {
    samples: Vec<Sample>,
    /// `layers[c][l]` = output of layer `l` for chunk `c`.
    layers: Vec<Vec<Tensor>>,
}

impl Evaluator {
    pub fn new(backbone: &ModelState, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Evaluation("no held-out samples to evaluate on".into()));
        }
        let d = backbone.spec().num_layers;
        let layers = samples
            .par_chunks(EVAL_BATCH)
            .map(|chunk| {
                let tokens: Vec<Vec<usize>> = chunk.iter().map(|s| s.tokens.clone()).collect();
                let mut outs = vec![backbone.layer_output(&tokens, 0)?];
                for l in 1..=d {
                    outs.push(backbone.apply_layer(l, outs[l - 1].clone())?);
                }
                Ok(outs)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples, layers })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Accuracy of `model`, which must share the evaluator's backbone.
    pub fn accuracy(&self, model: &ModelState) -> Result<f64> {
        let boundary = if model.lowest_trainable_layer() == 0 {
            None
        } else {
            Some(model.max_boundary())
        };
        let mut correct = 0;
        for (chunk, outs) in self.samples.chunks(EVAL_BATCH).zip(&self.layers) {
            let logits = match boundary {
                Some(l) => model.forward_from_boundary(l, &outs[l])?,
                None => {
                    let tokens: Vec<Vec<usize>> = chunk.iter().map(|s| s.tokens.clone()).collect();
                    model.forward(&tokens)?
                }
            };
            correct += argmax_rows(&logits)
                .iter()
                .zip(chunk)
                .filter(|(p, s)| **p == s.label)
                .count();
        }
        Ok(correct as f64 / self.samples.len() as f64)
    }
}

/// One track's work for a round.
#[derive(Debug, Clone, Copy)]
pub struct TrackAssignment<'a> {
    pub payload: &'a AdapterPayload,
    pub participants: usize,
}

/// Outcome of one track's round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRoundReport {
    pub participants: Vec<usize>,
    pub payload_bytes: usize,
    pub round_time_s: f64,
    pub bytes: usize,
    pub joules: f64,
    pub samples: usize,
    pub cache: CacheStats,
    #[serde(skip)]
    pub payload: Option<AdapterPayload>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub watermark: usize,
    pub tracks: Vec<TrackRoundReport>,
}

/// The parameter server and its client registry.
#[derive(Debug, Clone)]
pub struct Server {
    pub backbone: ModelState,
    pub clients: Vec<ClientState>,
    pub network: NetworkProfile,
    pub params: TrainingParams,
    pub evaluator: Evaluator,
    pub depth_history: DepthHistory,
    round: usize,
    rng: SeededRng,
}

impl Server {
    pub fn new(
        backbone: ModelState,
        clients: Vec<ClientState>,
        network: NetworkProfile,
        params: TrainingParams,
        rng: SeededRng,
    ) -> Result<Self> {
        params.validate()?;
        for (i, c) in clients.iter().enumerate() {
            if c.id != i {
                return Err(Error::Config(format!("client at position {i} has id {}", c.id)));
            }
        }
        let test: Vec<Sample> = clients.iter().flat_map(|c| c.shard.test.iter().cloned()).collect();
        let evaluator = Evaluator::new(&backbone, test)?;
        Ok(Self {
            backbone,
            clients,
            network,
            params,
            evaluator,
            depth_history: DepthHistory::new(),
            round: 0,
            rng,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn query_watermark(&self, client_id: usize) -> Result<Watermark> {
        let c = self.clients.get(client_id).ok_or(Error::UnknownClient(client_id))?;
        self.depth_history.query_watermark(c.last_participation)
    }

    /// Select clients for every track, train them in parallel, and aggregate
    /// each track separately.
    pub fn run_round(&mut self, tracks: &[TrackAssignment<'_>]) -> Result<RoundReport> {
        let round = self.round;
        let total: usize = tracks.iter().map(|t| t.participants).sum();
        if tracks.iter().any(|t| t.participants == 0) {
            return Err(Error::Config("every track needs at least one participant".into()));
        }
        let mut selected = select_clients(self.clients.len(), total, &mut self.rng)?;
        self.rng.shuffle(&mut selected);
        let mut track_of = vec![None; self.clients.len()];
        let mut offset = 0;
        let mut groups = Vec::with_capacity(tracks.len());
        for (t, a) in tracks.iter().enumerate() {
            let mut g = selected[offset..offset + a.participants].to_vec();
            g.sort_unstable();
            for &c in &g {
                track_of[c] = Some(t);
            }
            groups.push(g);
            offset += a.participants;
        }

        let mut dispatched = 0;
        for a in tracks {
            dispatched = dispatched.max(self.payload_depth(a.payload)?);
        }
        let watermark = self.depth_history.record(round, dispatched)?;

        let backbone = &self.backbone;
        let params = &self.params;
        let updates: Vec<(usize, LocalUpdate)> = self
            .clients
            .par_iter_mut()
            .filter_map(|c| track_of[c.id].map(|t| (t, c)))
            .map(|(t, c)| {
                // The watermark only grows, so the max since any past round is
                // the current value. An empty cache still yields a cold miss.
                local_train(c, backbone, tracks[t].payload, params, Watermark::Depth(watermark), round)
                    .map(|u| (t, u))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut reports = Vec::with_capacity(tracks.len());
        for (t, a) in tracks.iter().enumerate() {
            let mine: Vec<&LocalUpdate> = updates.iter().filter(|(k, _)| *k == t).map(|(_, u)| u).collect();
            let bytes = payload_bytes_for(a.payload.len(), WIRE_SCALAR_BYTES);
            let mut costs = Vec::with_capacity(mine.len());
            let mut joules = 0.0;
            let mut cache = CacheStats::default();
            for u in &mine {
                let cost = ClientRoundCost::new(&self.network, u.stats.compute_s, bytes);
                joules += energy_joules(cost.compute_s, cost.transfer_s(), &self.clients[u.client_id].profile);
                cache.merge(&u.stats.cache);
                costs.push(cost);
            }
            let inputs: Vec<(usize, &AdapterPayload, usize)> =
                mine.iter().map(|u| (u.client_id, &u.payload, u.samples)).collect();
            let merged = fedavg(&inputs)?;
            reports.push(TrackRoundReport {
                participants: groups[t].clone(),
                payload_bytes: bytes,
                round_time_s: round_time(&costs),
                bytes: 2 * bytes * mine.len(),
                joules,
                samples: mine.iter().map(|u| u.samples).sum(),
                cache,
                payload: Some(merged),
            });
        }
        self.round += 1;
        Ok(RoundReport {
            round,
            watermark,
            tracks: reports,
        })
    }

    fn payload_depth(&self, payload: &AdapterPayload) -> Result<usize> {
        let d = self.backbone.spec().num_layers;
        Ok(match payload.kind {
            PayloadKind::Adapter { config, .. } => config.depth,
            PayloadKind::LayerFreeze { frozen } => d - frozen.min(d),
            PayloadKind::Full => d,
        })
    }

    /// Drop every client's cached activations (end of session).
    pub fn clear_caches(&mut self) {
        for c in &mut self.clients {
            c.cache.clear();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{insert_adapters, AdapterConfig, Stacking};
    use crate::model::{build_model, ModelSpec};

    fn payload(kind_depth: usize, values: Vec<f64>) -> AdapterPayload {
        AdapterPayload {
            kind: PayloadKind::Adapter {
                config: AdapterConfig::new(kind_depth, 8),
                stacking: Stacking::Vertical { step: 8 },
            },
            values,
        }
    }

    #[test]
    fn selection_basics() {
        let mut rng = SeededRng::new(1);
        let mut all = select_clients(6, 6, &mut rng).unwrap();
        all.sort_unstable();
        assert_eq!(all, (0..6).collect::<Vec<_>>());
        let a = select_clients(40, 15, &mut SeededRng::new(9)).unwrap();
        let b = select_clients(40, 15, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            select_clients(3, 4, &mut rng),
            Err(Error::Selection { requested: 4, population: 3 })
        ));
    }

    #[test]
    fn fedavg_weighted_mean() {
        let a = payload(1, vec![0.0]);
        let b = payload(1, vec![4.0]);
        let out = fedavg(&[(0, &a, 1), (1, &b, 3)]).unwrap();
        assert_eq!(out.values, vec![3.0]);
    }

    #[test]
    fn fedavg_rejects_mixed_configs() {
        let a = payload(1, vec![0.0]);
        let b = payload(2, vec![1.0]);
        assert!(matches!(fedavg(&[(0, &a, 1), (1, &b, 1)]), Err(Error::Aggregation(_))));
        assert!(fedavg(&[]).is_err());
        assert!(fedavg(&[(0, &a, 0)]).is_err());
    }

    fn tiny_client() -> (ModelState, ClientState, AdapterPayload) {
        let spec = ModelSpec {
            num_layers: 3,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            vocab: 10,
            seqlen: 4,
            num_labels: 2,
            ..ModelSpec::default()
        };
        let base = build_model(&spec, 3).unwrap();
        let m = insert_adapters(&base, AdapterConfig::new(1, 8), Stacking::Vertical { step: 8 }, &mut SeededRng::new(4))
            .unwrap();
        let train = (0..6)
            .map(|i| Sample {
                tokens: vec![0, 1 + i % 9, 2 + i % 7, 3],
                label: i % 2,
            })
            .collect();
        let shard = Shard {
            client_id: 0,
            train,
            test: vec![],
        };
        (base, ClientState::new(shard, DeviceProfile::tx2()), AdapterPayload::from_model(&m))
    }

    #[test]
    fn zero_learning_rate_is_a_null_update() {
        let (base, mut client, p) = tiny_client();
        let params = TrainingParams {
            learning_rate: 0.0,
            ..TrainingParams::default()
        };
        let u = local_train(&mut client, &base, &p, &params, Watermark::ColdStart, 0).unwrap();
        assert_eq!(u.payload, p);
        assert_eq!(u.samples, 6);
    }

    #[test]
    fn cache_does_not_change_training() {
        let (base, client, p) = tiny_client();
        let on = TrainingParams::default();
        let off = TrainingParams { cache: false, ..on };
        let mut a = client.clone();
        let mut b = client;
        for round in 0..3 {
            let w = if round == 0 { Watermark::ColdStart } else { Watermark::Depth(1) };
            let ua = local_train(&mut a, &base, &p, &on, w, round).unwrap();
            let ub = local_train(&mut b, &base, &p, &off, w, round).unwrap();
            assert_eq!(ua.payload, ub.payload);
            if round > 0 {
                assert_eq!(ua.stats.cache.hits, 2);
                assert!(ua.stats.compute_s < ub.stats.compute_s);
            }
        }
    }
}
