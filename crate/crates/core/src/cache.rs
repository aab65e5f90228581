//! Cross-round activation cache.
//!
//! A client stores, per local mini-batch, the output of the deepest layer
//! that no dispatched configuration has needed to train. The server keeps a
//! running watermark: the largest tuning depth dispatched to any track so
//! far. An entry stored under watermark `d_prev` sits at boundary
//! `D - d_prev` and stays valid while the watermark does not exceed
//! `d_prev`. Because the watermark only grows, a client's entries expire at
//! most once per watermark increase, so at most `D` times per session.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tensor::Tensor;

/// One cached boundary-layer output.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub batch_id: usize,
    /// Layer whose output is stored (`D - depth_at_store`).
    pub boundary: usize,
    /// Watermark when the entry was written.
    pub depth_at_store: usize,
    pub round_stored: usize,
    pub activations: Tensor,
}

/// Server-side record of the depth watermark after each round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthHistory {
    per_round: Vec<usize>,
}

/// Result of asking the server how deep tuning has gone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Watermark {
    /// The client has never participated; nothing it holds is usable.
    ColdStart,
    Depth(usize),
}

impl DepthHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append the deepest configuration dispatched in `round`. The stored
    /// value is the running maximum, so the history never decreases.
    pub fn record(&mut self, round: usize, dispatched_depth: usize) -> Result<usize> {
        if round != self.per_round.len() {
            return Err(Error::Protocol(format!(
                "depth history expects round {}, got {round}",
                self.per_round.len()
            )));
        }
        let w = self.current().map_or(dispatched_depth, |w| w.max(dispatched_depth));
        self.per_round.push(w);
        Ok(w)
    }

    pub fn current(&self) -> Option<usize> {
        self.per_round.last().copied()
    }

    pub fn rounds(&self) -> &[usize] {
        &self.per_round
    }

    /// `d' = max(d_since, ..., d_now)`, or the cold-start sentinel when the
    /// client has not participated.
    pub fn query_watermark(&self, since_round: Option<usize>) -> Result<Watermark> {
        let Some(since) = since_round else {
            return Ok(Watermark::ColdStart);
        };
        if since >= self.per_round.len() {
            return Err(Error::Protocol(format!(
                "round {since} is in the future (history has {} rounds)",
                self.per_round.len()
            )));
        }
        Ok(Watermark::Depth(
            self.per_round[since..].iter().copied().max().unwrap_or(0),
        ))
    }

    /// Number of times the watermark rose after its first value.
    pub fn increases(&self) -> usize {
        count_increases(&self.per_round)
    }
}

/// Number of strict increases along a depth sequence.
pub fn count_increases(depths: &[usize]) -> usize {
    depths.windows(2).filter(|w| w[1] > w[0]).count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheOutcome {
    Hit,
    ColdMiss,
    Expired,
    Corrupt,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: usize,
    pub cold_misses: usize,
    pub expired: usize,
    pub corrupt: usize,
}

impl CacheStats {
    pub fn record(&mut self, outcome: CacheOutcome) {
        match outcome {
            CacheOutcome::Hit => self.hits += 1,
            CacheOutcome::ColdMiss => self.cold_misses += 1,
            CacheOutcome::Expired => self.expired += 1,
            CacheOutcome::Corrupt => self.corrupt += 1,
        }
    }

    pub fn merge(&mut self, other: &CacheStats) {
        self.hits += other.hits;
        self.cold_misses += other.cold_misses;
        self.expired += other.expired;
        self.corrupt += other.corrupt;
    }

    pub fn misses(&self) -> usize {
        self.cold_misses + self.expired + self.corrupt
    }
}

/// What `fetch_or_recompute` hands back to the training loop.
#[derive(Debug)]
pub struct Fetched<'a> {
    pub boundary: usize,
    pub activations: &'a Tensor,
    pub outcome: CacheOutcome,
}

impl Fetched<'_> {
    pub fn recomputed(&self) -> bool {
        self.outcome != CacheOutcome::Hit
    }
}

/// One client's store of boundary activations, keyed by batch id.
#[derive(Debug, Clone, Default)]
pub struct ActivationCache {
    entries: BTreeMap<usize, CacheEntry>,
    stats: CacheStats,
}

impl ActivationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, batch_id: usize) -> Option<&CacheEntry> {
        self.entries.get(&batch_id)
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    /// Bytes held by stored activations at `scalar_bytes` per value.
    pub fn stored_bytes(&self, scalar_bytes: usize) -> usize {
        self.entries.values().map(|e| e.activations.len() * scalar_bytes).sum()
    }

    #[cfg(test)]
    pub(crate) fn corrupt(&mut self, batch_id: usize) {
        if let Some(e) = self.entries.get_mut(&batch_id) {
            e.activations = Tensor::zeros(vec![1, 1, 1]);
        }
    }

    /// Return boundary activations for `tokens`, reusing a stored entry when
    /// the watermark allows and recomputing the frozen bottom path otherwise.
    ///
    /// `watermark` is raised to the model's own tuning depth if lower, so the
    /// boundary always lies below every trainable layer.
    pub fn fetch_or_recompute(
        &mut self,
        model: &ModelState,
        batch_id: usize,
        tokens: &[Vec<usize>],
        watermark: Watermark,
        round: usize,
    ) -> Result<Fetched<'_>> {
        let num_layers = model.spec().num_layers;
        let own_depth = num_layers - model.max_boundary().min(num_layers);
        let outcome = match (watermark, self.entries.get(&batch_id)) {
            (Watermark::ColdStart, _) | (_, None) => CacheOutcome::ColdMiss,
            (Watermark::Depth(w), Some(e)) => {
                let expected = [tokens.len(), tokens.first().map_or(0, Vec::len), model.spec().hidden];
                if e.activations.shape() != expected || e.boundary + e.depth_at_store != num_layers {
                    CacheOutcome::Corrupt
                } else if w.max(own_depth) > e.depth_at_store {
                    CacheOutcome::Expired
                } else {
                    CacheOutcome::Hit
                }
            }
        };
        self.stats.record(outcome);
        if outcome != CacheOutcome::Hit {
            let depth = match watermark {
                Watermark::ColdStart => own_depth,
                Watermark::Depth(w) => w.max(own_depth),
            };
            let boundary = num_layers - depth;
            let activations = model.layer_output(tokens, boundary)?;
            self.entries.insert(
                batch_id,
                CacheEntry {
                    batch_id,
                    boundary,
                    depth_at_store: depth,
                    round_stored: round,
                    activations,
                },
            );
        }
        let e = &self.entries[&batch_id];
        Ok(Fetched {
            boundary: e.boundary,
            activations: &e.activations,
            outcome,
        })
    }
}

/// Bytes to cache one boundary layer for `num_samples` samples.
pub fn storage_bytes(seqlen: usize, hidden: usize, num_samples: usize, scalar_bytes: usize) -> usize {
    num_samples * seqlen * hidden * scalar_bytes
}

/// Storage the reference text quotes for 100 samples at seqlen 256, n 768.
/// The formula gives 75 MB at 4-byte and 150 MB at 8-byte scalars.
pub const QUOTED_STORAGE_100_SAMPLES_MB: f64 = 93.75;
