//! Progressive configuration search with sideline trials.
//!
//! Each iteration trains up to three global models side by side: the
//! current configuration, one a depth step deeper, and one a width step
//! wider. Every track keeps its own emulated clock. Once the trial interval
//! has elapsed the most accurate track wins, its weights seed the next
//! three tracks, and the loop repeats until a track reaches the target.

use serde::{Deserialize, Serialize};

use crate::adapter::{deepen, insert_adapters, trainable_param_count, widen, AdapterConfig, Stacking};
use crate::costmodel::{payload_bytes, EmulatedClock};
use crate::error::{Error, Result};
use crate::fed::{tuning_depth, Server, TrackAssignment};
use crate::model::{ModelState, TuningMode};
use crate::payload::AdapterPayload;
use crate::rng::SeededRng;
use crate::trace::{SessionTrace, TraceEvent, TrackInfo, TrackKind};

/// Which clock stands in for "now" when checking the trial interval.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionClock {
    /// The current-configuration track's clock.
    #[default]
    Current,
    /// The clock of whichever track is furthest ahead.
    Leading,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfiguratorParams {
    pub initial_depth: usize,
    pub initial_width: usize,
    pub depth_step: usize,
    pub width_step: usize,
    pub max_width: usize,
    /// Emulated seconds between decisions.
    pub trial_interval_s: f64,
    /// Factor applied to the interval after each decision (1 = fixed).
    pub interval_growth: f64,
    pub decision_clock: DecisionClock,
}

impl Default for ConfiguratorParams {
    fn default() -> Self {
        Self {
            initial_depth: 0,
            initial_width: 8,
            depth_step: 1,
            width_step: 8,
            max_width: 64,
            trial_interval_s: 30.0,
            interval_growth: 1.0,
            decision_clock: DecisionClock::Current,
        }
    }
}

impl ConfiguratorParams {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let field = |f: &str, reason: String| Error::ConfigField {
            field: format!("configurator.{f}"),
            reason,
        };
        if self.depth_step == 0 {
            return Err(field("depth_step", "must be at least 1".into()));
        }
        if self.width_step == 0 {
            return Err(field("width_step", "must be at least 1".into()));
        }
        if self.initial_width % self.width_step != 0 {
            return Err(field(
                "initial_width",
                format!("{} is not a multiple of width_step {}", self.initial_width, self.width_step),
            ));
        }
        if self.initial_width > self.max_width {
            return Err(field("max_width", format!("must be at least initial_width {}", self.initial_width)));
        }
        if self.initial_depth > num_layers {
            return Err(field(
                "initial_depth",
                format!("{} exceeds the model's {num_layers} layers", self.initial_depth),
            ));
        }
        if !(self.trial_interval_s > 0.0 && self.trial_interval_s.is_finite()) {
            return Err(field("trial_interval_s", "must be positive".into()));
        }
        if !(self.interval_growth >= 1.0 && self.interval_growth.is_finite()) {
            return Err(field("interval_growth", "must be at least 1".into()));
        }
        AdapterConfig::new(self.initial_depth, self.initial_width)
            .validate(num_layers, self.stacking())
            .map_err(|e| field("initial_width", e.to_string()))
    }

    pub fn stacking(&self) -> Stacking {
        Stacking::Vertical { step: self.width_step }
    }
}

/// One concurrently trained global model.
#[derive(Debug, Clone)]
pub struct TrialTrack {
    pub kind: TrackKind,
    pub model: ModelState,
    pub clock: EmulatedClock,
    /// `(clock, accuracy)` after each of this track's rounds.
    pub history: Vec<(f64, f64)>,
    pub rounds: usize,
}

impl TrialTrack {
    pub fn new(kind: TrackKind, model: ModelState, start: f64) -> Self {
        Self {
            kind,
            model,
            clock: EmulatedClock::at(start),
            history: Vec::new(),
            rounds: 0,
        }
    }

    pub fn config(&self) -> AdapterConfig {
        self.model.adapter_config()
    }

    pub fn latest_accuracy(&self) -> Option<f64> {
        self.history.last().map(|h| h.1)
    }

    /// `(depth, width)` as reported in traces; width is 0 outside adapter mode.
    pub fn shape(&self) -> (usize, usize) {
        match self.model.mode() {
            TuningMode::Adapter => (self.config().depth, self.config().width),
            _ => (tuning_depth(&self.model), 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfiguratorState {
    pub iteration: usize,
    pub base: AdapterConfig,
    /// Clock of the last decision (or session start).
    pub t_trial: f64,
    pub interval: f64,
    pub params: ConfiguratorParams,
    pub num_layers: usize,
}

impl ConfiguratorState {
    pub fn new(params: ConfiguratorParams, num_layers: usize) -> Result<Self> {
        params.validate(num_layers)?;
        Ok(Self {
            iteration: 0,
            base: AdapterConfig::new(params.initial_depth, params.initial_width),
            t_trial: 0.0,
            interval: params.trial_interval_s,
            params,
            num_layers,
        })
    }
}

/// Derive the trial tracks from the winner's model. Returns the tracks and
/// the kinds that could not be built at this configuration.
pub fn dispatch(
    state: &ConfiguratorState,
    winner: &ModelState,
    start: f64,
    rng: &mut SeededRng,
) -> Result<(Vec<TrialTrack>, Vec<TrackKind>)> {
    if winner.adapter_config() != state.base {
        return Err(Error::Decision(format!(
            "winner carries {:?} but the base configuration is {:?}",
            winner.adapter_config(),
            state.base
        )));
    }
    let p = &state.params;
    let mut tracks = vec![TrialTrack::new(TrackKind::Current, winner.clone(), start)];
    let mut omitted = Vec::new();
    if state.base.depth + p.depth_step <= state.num_layers {
        tracks.push(TrialTrack::new(TrackKind::Deeper, deepen(winner, p.depth_step, rng)?, start));
    } else {
        omitted.push(TrackKind::Deeper);
    }
    if state.base.depth > 0 && state.base.width + p.width_step <= p.max_width {
        tracks.push(TrialTrack::new(TrackKind::Wider, widen(winner, p.width_step, rng)?, start));
    } else {
        omitted.push(TrackKind::Wider);
    }
    Ok((tracks, omitted))
}

/// True once more than the trial interval has passed since the last decision.
pub fn should_decide(state: &ConfiguratorState, now: f64) -> bool {
    now - state.t_trial > state.interval
}

/// Index of the track with the highest latest accuracy; ties go to the
/// smaller depth, then the smaller width.
pub fn decide_winner(tracks: &[TrialTrack]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in tracks.iter().enumerate() {
        let acc = t.latest_accuracy().ok_or_else(|| {
            Error::Decision(format!("{:?} track has no evaluation yet", t.kind))
        })?;
        best = match best {
            None => Some((i, acc)),
            Some((j, b)) => {
                let (ci, cj) = (tracks[i].config(), tracks[j].config());
                let better = acc > b || (acc == b && (ci.depth, ci.width) < (cj.depth, cj.width));
                Some(if better { (i, acc) } else { (j, b) })
            }
        };
    }
    best.map(|b| b.0)
        .ok_or_else(|| Error::Decision("no tracks to choose from".into()))
}

/// When a session stops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Budget {
    /// Global rounds (one round may train several tracks).
    pub max_rounds: usize,
    /// Emulated seconds on the fastest track.
    pub max_clock_s: f64,
}

impl Default for Budget {
    fn default() -> Self {
        Self {
            max_rounds: 500,
            max_clock_s: f64::INFINITY,
        }
    }
}

/// Hooks for inspecting a session while it runs.
pub trait SessionObserver {
    fn on_dispatch(&mut self, _winner: &ModelState, _tracks: &[TrialTrack]) {}
    fn on_round(&mut self, _tracks: &[TrialTrack]) {}
}

pub struct NoObserver;

impl SessionObserver for NoObserver {}

/// How a session ended.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub converged: bool,
    pub time_to_target: Option<f64>,
    pub rounds: usize,
    pub final_clock: f64,
    pub best_accuracy: f64,
    pub configs_visited: Vec<(usize, usize)>,
    pub final_model: ModelState,
}

fn track_info(t: &TrialTrack, participants: usize) -> TrackInfo {
    let (depth, width) = t.shape();
    TrackInfo {
        track: t.kind,
        depth,
        width,
        trainable: trainable_param_count(&t.model),
        payload_bytes: payload_bytes(&t.model),
        participants,
    }
}

/// Run one global round over `active` tracks and record it.
fn train_round(
    server: &mut Server,
    tracks: &mut [TrialTrack],
    active: &[usize],
    participants: usize,
    trace: &mut SessionTrace,
) -> Result<()> {
    let payloads: Vec<AdapterPayload> = active.iter().map(|&i| AdapterPayload::from_model(&tracks[i].model)).collect();
    let assignments: Vec<TrackAssignment<'_>> = payloads
        .iter()
        .map(|payload| TrackAssignment { payload, participants })
        .collect();
    let report = server.run_round(&assignments)?;
    for (&i, r) in active.iter().zip(report.tracks) {
        let t = &mut tracks[i];
        let merged = r.payload.as_ref().expect("aggregated payload");
        t.model.load_trainable_values(&merged.values)?;
        t.clock.advance(r.round_time_s);
        t.rounds += 1;
        let acc = server.evaluator.accuracy(&t.model)?;
        t.history.push((t.clock.seconds(), acc));
        let (depth, width) = t.shape();
        trace.push(TraceEvent::Round {
            round: report.round,
            track: t.kind,
            depth,
            width,
            clock: t.clock.seconds(),
            round_time_s: r.round_time_s,
            participants: r.participants,
            payload_bytes: r.payload_bytes,
            bytes: r.bytes,
            joules: r.joules,
            watermark: report.watermark,
            cache_hits: r.cache.hits,
            cache_cold_misses: r.cache.cold_misses,
            cache_expired: r.cache.expired,
        });
        trace.push(TraceEvent::Eval {
            round: report.round,
            track: t.kind,
            clock: t.clock.seconds(),
            accuracy: acc,
        });
    }
    Ok(())
}

/// Shared stopping rule: once some evaluation has reached the target at
/// time `t*`, keep running only tracks whose clock is still below `t*`,
/// since only they could reach it earlier.
fn reached(tracks: &[TrialTrack], target: Option<f64>, best: &mut Option<f64>) {
    let Some(target) = target else { return };
    for t in tracks {
        if let Some(&(clock, acc)) = t.history.last() {
            if acc >= target && best.is_none_or(|b| clock < b) {
                *best = Some(clock);
            }
        }
    }
}

fn outcome(
    tracks: &[TrialTrack],
    best: Option<f64>,
    rounds: usize,
    configs: Vec<(usize, usize)>,
    best_accuracy: f64,
) -> SessionOutcome {
    let final_clock = tracks.iter().map(|t| t.clock.seconds()).fold(0.0, f64::max);
    let pick = tracks
        .iter()
        .max_by(|a, b| {
            let x = a.latest_accuracy().unwrap_or(f64::NEG_INFINITY);
            let y = b.latest_accuracy().unwrap_or(f64::NEG_INFINITY);
            x.total_cmp(&y)
        })
        .expect("at least one track");
    SessionOutcome {
        converged: best.is_some(),
        time_to_target: best,
        rounds,
        final_clock,
        best_accuracy,
        configs_visited: configs,
        final_model: pick.model.clone(),
    }
}

fn best_of(tracks: &[TrialTrack], acc: f64) -> f64 {
    tracks.iter().filter_map(TrialTrack::latest_accuracy).fold(acc, f64::max)
}

/// Progressive session: dispatch, train until the interval passes, decide,
/// repeat.
pub fn run_session(
    server: &mut Server,
    mut state: ConfiguratorState,
    target: Option<f64>,
    budget: Budget,
    participants_total: usize,
    rng: &mut SeededRng,
    trace: &mut SessionTrace,
    observer: &mut dyn SessionObserver,
) -> Result<SessionOutcome> {
    let start = insert_adapters(&server.backbone, state.base, state.params.stacking(), rng)?;
    let (mut tracks, omitted) = dispatch(&state, &start, 0.0, rng)?;
    let mut configs = vec![(state.base.depth, state.base.width)];
    let mut per_track = participants_total / tracks.len();
    trace.push(TraceEvent::Dispatch {
        iteration: 0,
        clock: 0.0,
        tracks: tracks.iter().map(|t| track_info(t, per_track)).collect(),
        omitted,
    });
    observer.on_dispatch(&start, &tracks);
    let mut best: Option<f64> = None;
    let mut best_acc = f64::NEG_INFINITY;
    loop {
        let limit = state.t_trial + state.interval;
        let active: Vec<usize> = (0..tracks.len())
            .filter(|&i| {
                let c = tracks[i].clock.seconds();
                c <= limit && best.is_none_or(|b| c < b)
            })
            .collect();
        if best.is_some() && active.is_empty() {
            break;
        }
        let now = match state.params.decision_clock {
            DecisionClock::Current => tracks[0].clock.seconds(),
            DecisionClock::Leading => tracks.iter().map(|t| t.clock.seconds()).fold(f64::NEG_INFINITY, f64::max),
        };
        if best.is_none() && (active.is_empty() || should_decide(&state, now)) {
            let w = decide_winner(&tracks)?;
            let clock = tracks.iter().map(|t| t.clock.seconds()).fold(0.0, f64::max);
            let winner = tracks[w].model.clone();
            trace.push(TraceEvent::Decision {
                iteration: state.iteration,
                clock,
                winner: tracks[w].kind,
                depth: winner.adapter_config().depth,
                width: winner.adapter_config().width,
                accuracies: tracks
                    .iter()
                    .map(|t| (t.kind, t.latest_accuracy().unwrap_or(0.0)))
                    .collect(),
            });
            state.iteration += 1;
            state.base = winner.adapter_config();
            state.t_trial = clock;
            state.interval *= state.params.interval_growth;
            if configs.last() != Some(&(state.base.depth, state.base.width)) {
                configs.push((state.base.depth, state.base.width));
            }
            let (next, omitted) = dispatch(&state, &winner, clock, rng)?;
            tracks = next;
            per_track = participants_total / tracks.len();
            trace.push(TraceEvent::Dispatch {
                iteration: state.iteration,
                clock,
                tracks: tracks.iter().map(|t| track_info(t, per_track)).collect(),
                omitted,
            });
            observer.on_dispatch(&winner, &tracks);
            continue;
        }
        let fastest = tracks.iter().map(|t| t.clock.seconds()).fold(f64::INFINITY, f64::min);
        if server.round() >= budget.max_rounds || fastest >= budget.max_clock_s {
            break;
        }
        train_round(server, &mut tracks, &active, per_track, trace)?;
        observer.on_round(&tracks);
        best_acc = best_of(&tracks, best_acc);
        reached(&tracks, target, &mut best);
    }
    Ok(outcome(&tracks, best, server.round(), configs, best_acc))
}

/// Single-track session for a fixed model layout (fixed adapters, full
/// fine-tuning, or layer freezing).
pub fn run_fixed(
    server: &mut Server,
    model: ModelState,
    target: Option<f64>,
    budget: Budget,
    participants: usize,
    trace: &mut SessionTrace,
    observer: &mut dyn SessionObserver,
) -> Result<SessionOutcome> {
    let mut tracks = vec![TrialTrack::new(TrackKind::Current, model, 0.0)];
    let shape = tracks[0].shape();
    trace.push(TraceEvent::Dispatch {
        iteration: 0,
        clock: 0.0,
        tracks: vec![track_info(&tracks[0], participants)],
        omitted: Vec::new(),
    });
    observer.on_dispatch(&tracks[0].model.clone(), &tracks);
    let mut best = None;
    let mut best_acc = f64::NEG_INFINITY;
    while best.is_none()
        && server.round() < budget.max_rounds
        && tracks[0].clock.seconds() < budget.max_clock_s
    {
        train_round(server, &mut tracks, &[0], participants, trace)?;
        observer.on_round(&tracks);
        best_acc = best_of(&tracks, best_acc);
        reached(&tracks, target, &mut best);
    }
    Ok(outcome(&tracks, best, server.round(), vec![shape], best_acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelSpec};

    fn state(base: AdapterConfig) -> (ConfiguratorState, ModelState) {
        let spec = ModelSpec {
            num_layers: 4,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            vocab: 10,
            seqlen: 4,
            num_labels: 2,
            ..ModelSpec::default()
        };
        let params = ConfiguratorParams::default();
        let mut s = ConfiguratorState::new(params, 4).unwrap();
        s.base = base;
        let m = insert_adapters(&build_model(&spec, 1).unwrap(), base, params.stacking(), &mut SeededRng::new(2))
            .unwrap();
        (s, m)
    }

    fn configs(tracks: &[TrialTrack]) -> Vec<(usize, usize)> {
        tracks.iter().map(|t| (t.config().depth, t.config().width)).collect()
    }

    #[test]
    fn startup_dispatch_omits_wider() {
        let (s, m) = state(AdapterConfig::new(0, 8));
        let (tracks, omitted) = dispatch(&s, &m, 0.0, &mut SeededRng::new(3)).unwrap();
        assert_eq!(configs(&tracks), vec![(0, 8), (1, 8)]);
        assert_eq!(omitted, vec![TrackKind::Wider]);
    }

    #[test]
    fn default_steps() {
        let (s, m) = state(AdapterConfig::new(2, 16));
        let (tracks, omitted) = dispatch(&s, &m, 0.0, &mut SeededRng::new(3)).unwrap();
        assert_eq!(configs(&tracks), vec![(2, 16), (3, 16), (2, 24)]);
        assert!(omitted.is_empty());
    }

    #[test]
    fn full_depth_omits_deeper() {
        let (s, m) = state(AdapterConfig::new(4, 64));
        let (tracks, omitted) = dispatch(&s, &m, 0.0, &mut SeededRng::new(3)).unwrap();
        assert_eq!(configs(&tracks), vec![(4, 64)]);
        assert_eq!(omitted, vec![TrackKind::Deeper, TrackKind::Wider]);
    }

    #[test]
    fn decision_interval() {
        let (s, _) = state(AdapterConfig::new(0, 8));
        assert!(!should_decide(&s, s.t_trial));
        assert!(!should_decide(&s, s.t_trial + s.interval));
        assert!(should_decide(&s, s.t_trial + s.interval + 1e-9));
    }

    fn with_accs(accs: &[f64], base: AdapterConfig) -> Vec<TrialTrack> {
        let (s, m) = state(base);
        let (mut tracks, _) = dispatch(&s, &m, 0.0, &mut SeededRng::new(3)).unwrap();
        for (t, &a) in tracks.iter_mut().zip(accs) {
            t.history.push((1.0, a));
        }
        tracks
    }

    #[test]
    fn winner_is_argmax_with_cheap_ties() {
        let base = AdapterConfig::new(2, 16);
        assert_eq!(decide_winner(&with_accs(&[0.70, 0.72, 0.69], base)).unwrap(), 1);
        assert_eq!(decide_winner(&with_accs(&[0.70, 0.60, 0.70], base)).unwrap(), 0);
        assert_eq!(decide_winner(&with_accs(&[0.60, 0.70, 0.70], base)).unwrap(), 2);
        let (s, m) = state(base);
        let (tracks, _) = dispatch(&s, &m, 0.0, &mut SeededRng::new(3)).unwrap();
        assert!(matches!(decide_winner(&tracks), Err(Error::Decision(_))));
    }
}
