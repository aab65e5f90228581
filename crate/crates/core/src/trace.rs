//! Session trace: one JSON object per line.
//!
//! Every line carries an `"event"` tag. A trace starts with `header`, ends
//! with `summary`, and in between holds `dispatch`, `round`, `eval`, and
//! `decision` records in the order they happened. Clocks are emulated
//! seconds; bytes count both transfer directions.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::cache::count_increases;
use crate::error::{Error, Result};

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackKind {
    Current,
    Deeper,
    Wider,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackInfo {
    pub track: TrackKind,
    pub depth: usize,
    pub width: usize,
    pub trainable: usize,
    pub payload_bytes: usize,
    pub participants: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TraceEvent {
    Header {
        version: u32,
        mode: String,
        seed: u64,
        num_layers: usize,
        num_clients: usize,
        target_accuracy: Option<f64>,
    },
    Dispatch {
        iteration: usize,
        clock: f64,
        tracks: Vec<TrackInfo>,
        omitted: Vec<TrackKind>,
    },
    Round {
        round: usize,
        track: TrackKind,
        depth: usize,
        width: usize,
        /// Track clock after the round.
        clock: f64,
        round_time_s: f64,
        participants: Vec<usize>,
        payload_bytes: usize,
        bytes: usize,
        joules: f64,
        watermark: usize,
        cache_hits: usize,
        cache_cold_misses: usize,
        cache_expired: usize,
    },
    Eval {
        round: usize,
        track: TrackKind,
        clock: f64,
        accuracy: f64,
    },
    Decision {
        iteration: usize,
        clock: f64,
        winner: TrackKind,
        depth: usize,
        width: usize,
        accuracies: Vec<(TrackKind, f64)>,
    },
    Summary {
        converged: bool,
        time_to_target: Option<f64>,
        rounds: usize,
        final_clock: f64,
        best_accuracy: f64,
        total_bytes: usize,
        total_joules: f64,
        expirations: usize,
        configs_visited: Vec<(usize, usize)>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionTrace {
    pub events: Vec<TraceEvent>,
}

impl SessionTrace {
    pub fn push(&mut self, e: TraceEvent) {
        self.events.push(e);
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, e).map_err(|e| Error::Codec(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("writing to memory");
        out
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut events = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: TraceEvent = serde_json::from_str(&line).map_err(|e| Error::TraceParse {
                line: i + 1,
                reason: e.to_string(),
            })?;
            if let TraceEvent::Header { version, .. } = e {
                if version != TRACE_VERSION {
                    return Err(Error::TraceParse {
                        line: i + 1,
                        reason: format!("unsupported trace version {version}"),
                    });
                }
            }
            events.push(e);
        }
        if !matches!(events.first(), Some(TraceEvent::Header { .. })) {
            return Err(Error::TraceParse {
                line: 1,
                reason: "trace does not start with a header".into(),
            });
        }
        Ok(Self { events })
    }

    pub fn rounds(&self) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(|e| matches!(e, TraceEvent::Round { .. }))
    }

    pub fn evals(&self) -> impl Iterator<Item = (usize, TrackKind, f64, f64)> + '_ {
        self.events.iter().filter_map(|e| match *e {
            TraceEvent::Eval {
                round,
                track,
                clock,
                accuracy,
            } => Some((round, track, clock, accuracy)),
            _ => None,
        })
    }

    pub fn summary(&self) -> Option<&TraceEvent> {
        self.events.iter().rev().find(|e| matches!(e, TraceEvent::Summary { .. }))
    }

    pub fn num_layers(&self) -> usize {
        match self.events.first() {
            Some(TraceEvent::Header { num_layers, .. }) => *num_layers,
            _ => 0,
        }
    }

    /// Sum of round traffic.
    pub fn total_bytes(&self) -> usize {
        self.rounds()
            .map(|e| match e {
                TraceEvent::Round { bytes, .. } => *bytes,
                _ => 0,
            })
            .sum()
    }

    /// Traffic of rounds that finished by emulated time `t`.
    pub fn bytes_until(&self, t: f64) -> usize {
        self.rounds()
            .map(|e| match e {
                TraceEvent::Round { bytes, clock, .. } if *clock <= t => *bytes,
                _ => 0,
            })
            .sum()
    }

    pub fn total_joules(&self) -> f64 {
        self.rounds()
            .map(|e| match e {
                TraceEvent::Round { joules, .. } => *joules,
                _ => 0.0,
            })
            .sum()
    }

    /// Watermark after each global round.
    pub fn watermarks(&self) -> Vec<usize> {
        let mut out: Vec<(usize, usize)> = self
            .rounds()
            .filter_map(|e| match e {
                TraceEvent::Round { round, watermark, .. } => Some((*round, *watermark)),
                _ => None,
            })
            .collect();
        out.dedup_by_key(|r| r.0);
        out.into_iter().map(|r| r.1).collect()
    }

    /// Base configurations in the order they were adopted.
    pub fn base_configs(&self) -> Vec<(usize, usize)> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Dispatch { tracks, .. } => tracks
                    .iter()
                    .find(|t| t.track == TrackKind::Current)
                    .map(|t| (t.depth, t.width)),
                _ => None,
            })
            .collect()
    }

    /// Deepest configuration dispatched at each dispatch event.
    pub fn dispatched_depths(&self) -> Vec<usize> {
        self.events
            .iter()
            .filter_map(|e| match e {
                TraceEvent::Dispatch { tracks, .. } => tracks.iter().map(|t| t.depth).max(),
                _ => None,
            })
            .collect()
    }
}

/// Number of times cached activations went stale: one per rise of the
/// dispatched-depth watermark.
pub fn expirations_this_session(trace: &SessionTrace) -> usize {
    count_increases(&trace.watermarks())
}

/// Earliest emulated time at which any evaluation reached
/// `relative_target * reference_accuracy`.
pub fn time_to_accuracy(trace: &SessionTrace, relative_target: f64, reference_accuracy: f64) -> Option<f64> {
    let threshold = relative_target * reference_accuracy;
    trace
        .evals()
        .filter(|e| e.3 >= threshold)
        .map(|e| e.2)
        .min_by(f64::total_cmp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(round: usize, clock: f64, accuracy: f64) -> TraceEvent {
        TraceEvent::Eval {
            round,
            track: TrackKind::Current,
            clock,
            accuracy,
        }
    }

    fn sample() -> SessionTrace {
        let mut t = SessionTrace::default();
        t.push(TraceEvent::Header {
            version: TRACE_VERSION,
            mode: "fixed_adapter".into(),
            seed: 1,
            num_layers: 4,
            num_clients: 2,
            target_accuracy: None,
        });
        for (r, (c, a)) in [(1.0, 0.2), (2.0, 0.6), (3.0, 0.5), (4.0, 0.9)].into_iter().enumerate() {
            t.push(eval(r, c, a));
        }
        t
    }

    #[test]
    fn time_to_accuracy_thresholds() {
        let t = sample();
        assert_eq!(time_to_accuracy(&t, 0.0, 1.0), Some(1.0));
        assert_eq!(time_to_accuracy(&t, 0.5, 1.0), Some(2.0));
        assert_eq!(time_to_accuracy(&t, 0.9, 1.0), Some(4.0));
        assert_eq!(time_to_accuracy(&t, 0.95, 1.0), None);
        let ts: Vec<_> = [0.5, 0.6, 0.9].iter().map(|&r| time_to_accuracy(&t, r, 1.0).unwrap()).collect();
        assert!(ts.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn jsonl_roundtrip() {
        let t = sample();
        let bytes = t.to_jsonl();
        let back = SessionTrace::read_jsonl(&bytes[..]).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_jsonl(), bytes);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let mut bytes = sample().to_jsonl();
        bytes.extend_from_slice(b"{\"event\":\"eval\",\"round\":\"x\"}\n");
        match SessionTrace::read_jsonl(&bytes[..]) {
            Err(Error::TraceParse { line, .. }) => assert_eq!(line, 6),
            other => panic!("{other:?}"),
        }
        assert!(SessionTrace::read_jsonl(&b"{\"event\":\"eval\",\"round\":0,\"track\":\"current\",\"clock\":1.0,\"accuracy\":0.1}\n"[..]).is_err());
    }
}
