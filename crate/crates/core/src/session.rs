//! Session configuration and the run / sweep / report entry points.
//!
//! Configs are TOML. Every field has a default, so an empty file describes
//! the bundled benchmark:
//!
//! ```toml
//! seed = 0
//! num_clients = 40
//! participants_per_group = 5
//! noniid_concentration = 10.0
//!
//! [mode]
//! kind = "autofed"            # or fixed_adapter / full_ft / layer_freeze
//! # depth = 4, width = 32     (fixed_adapter)
//! # frozen = 2                (layer_freeze)
//!
//! [model]                     # num_layers, hidden, heads, ffn_dim, vocab, seqlen, num_labels, activation
//! [task]                      # vocab, seqlen, num_labels, teacher_seed, samples_per_label, noise_rate, signal
//! [training]                  # batch_size = 4, learning_rate = 0.1, local_epochs = 1, cache = true
//! [configurator]              # initial_depth = 0, initial_width = 8, depth_step = 1, width_step = 8, ...
//! [budget]                    # max_rounds, max_clock_s
//! [network]                   # uplink_bytes_per_s = 1e6, downlink_bytes_per_s = 1e6
//! [devices]                   # assignment = ["tx2"], custom = [...]
//! [targets]                   # absolute, reference_accuracy, relative = [0.99, 0.95, 0.90]
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{insert_adapters, AdapterConfig};
use crate::configurator::{
    run_fixed, run_session, Budget, ConfiguratorParams, ConfiguratorState, NoObserver, SessionObserver,
    SessionOutcome,
};
use crate::costmodel::{DeviceProfile, NetworkProfile};
use crate::pretrain::{pretrain_backbone, PretrainParams};
use crate::data::{generate_task, partition_noniid, split_train_test, SyntheticTaskSpec, TRAIN_FRACTION};
use crate::error::{Error, Result};
use crate::fed::{ClientState, Server, TrainingParams};
use crate::model::{build_model, ModelSpec, ModelState, TuningMode};
use crate::rng::SeededRng;
use crate::trace::{expirations_this_session, time_to_accuracy, SessionTrace, TraceEvent, TRACE_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Mode {
    Autofed,
    FixedAdapter { depth: usize, width: usize },
    FullFt,
    LayerFreeze { frozen: usize },
}

impl Mode {
    pub fn label(&self) -> String {
        match self {
            Mode::Autofed => "autofed".into(),
            Mode::FixedAdapter { depth, width } => format!("fixed_adapter({depth},{width})"),
            Mode::FullFt => "full_ft".into(),
            Mode::LayerFreeze { frozen } => format!("layer_freeze({frozen})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceAssignment {
    /// Profile names assigned to clients round-robin by id.
    pub assignment: Vec<String>,
    /// Extra profiles, referable by name.
    pub custom: Vec<DeviceProfile>,
}

impl Default for DeviceAssignment {
    fn default() -> Self {
        Self {
            assignment: vec!["tx2".into()],
            custom: Vec::new(),
        }
    }
}

impl DeviceAssignment {
    fn resolve(&self) -> Result<Vec<DeviceProfile>> {
        let mut known: BTreeMap<String, DeviceProfile> = ["tx2", "nano", "rpi4b"]
            .iter()
            .map(|n| (n.to_string(), DeviceProfile::by_name(n).expect("bundled")))
            .collect();
        for p in &self.custom {
            p.validate().map_err(|reason| Error::ConfigField {
                field: "devices.custom".into(),
                reason,
            })?;
            known.insert(p.name.clone(), p.clone());
        }
        if self.assignment.is_empty() {
            return Err(Error::ConfigField {
                field: "devices.assignment".into(),
                reason: "names no profiles".into(),
            });
        }
        self.assignment
            .iter()
            .map(|n| {
                known.get(n).cloned().ok_or_else(|| Error::ConfigField {
                    field: "devices.assignment".into(),
                    reason: format!("profile `{n}` is not defined"),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Targets {
    /// Stop as soon as any track reaches this accuracy.
    pub absolute: Option<f64>,
    /// Accuracy the relative targets are fractions of.
    pub reference_accuracy: Option<f64>,
    pub relative: Vec<f64>,
}

impl Default for Targets {
    fn default() -> Self {
        Self {
            absolute: None,
            reference_accuracy: None,
            relative: vec![0.99, 0.95, 0.90],
        }
    }
}

impl Targets {
    /// The accuracy a session stops at: the absolute target if set, else the
    /// smallest relative target times the reference.
    pub fn stop_at(&self) -> Option<f64> {
        self.absolute.or_else(|| {
            let r = self.relative.iter().copied().fold(f64::INFINITY, f64::min);
            self.reference_accuracy.filter(|_| r.is_finite()).map(|a| a * r)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub seed: u64,
    pub mode: Mode,
    pub num_clients: usize,
    /// Clients per trial group; a round selects three groups' worth.
    pub participants_per_group: usize,
    pub noniid_concentration: f64,
    pub model: ModelSpec,
    pub task: SyntheticTaskSpec,
    pub training: TrainingParams,
    pub pretrain: PretrainParams,
    pub configurator: ConfiguratorParams,
    pub budget: Budget,
    pub network: NetworkProfile,
    pub devices: DeviceAssignment,
    pub targets: Targets,
}

impl Default for SessionConfig {
    fn default() -> Self {
        let model = ModelSpec::default();
        Self {
            seed: 0,
            mode: Mode::Autofed,
            num_clients: 40,
            participants_per_group: 5,
            noniid_concentration: 10.0,
            task: SyntheticTaskSpec {
                vocab: model.vocab,
                seqlen: model.seqlen,
                num_labels: model.num_labels,
                ..SyntheticTaskSpec::default()
            },
            model,
            training: TrainingParams::default(),
            pretrain: PretrainParams::default(),
            configurator: ConfiguratorParams::default(),
            budget: Budget::default(),
            network: NetworkProfile::default(),
            devices: DeviceAssignment::default(),
            targets: Targets::default(),
        }
    }
}

fn field(f: &str, reason: impl Into<String>) -> Error {
    Error::ConfigField {
        field: f.into(),
        reason: reason.into(),
    }
}

/// Dotted key path of the TOML line holding byte `offset`, e.g.
/// `training.learning_rate`. Falls back to the enclosing table.
fn key_at(text: &str, offset: usize) -> String {
    let offset = offset.min(text.len());
    let mut table = String::new();
    let mut key = String::new();
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix('[').and_then(|t| t.strip_suffix(']')) {
            table = name.trim_matches(['[', ']']).trim().to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        pos += line.len();
        if pos > offset {
            break;
        }
    }
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}

impl SessionConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigField {
            field: e.span().map(|s| key_at(text, s.start)).unwrap_or_default(),
            reason: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| field("model", e.to_string()))?;
        self.task.validate().map_err(|e| field("task", e.to_string()))?;
        if self.task.vocab != self.model.vocab {
            return Err(field("task.vocab", format!("must equal model.vocab {}", self.model.vocab)));
        }
        if self.task.seqlen != self.model.seqlen {
            return Err(field("task.seqlen", format!("must equal model.seqlen {}", self.model.seqlen)));
        }
        if self.task.num_labels != self.model.num_labels {
            return Err(field(
                "task.num_labels",
                format!("must equal model.num_labels {}", self.model.num_labels),
            ));
        }
        self.training.validate()?;
        self.pretrain.validate().map_err(|r| field("pretrain", r))?;
        self.configurator.validate(self.model.num_layers)?;
        if self.participants_per_group == 0 {
            return Err(field("participants_per_group", "must be at least 1"));
        }
        if self.num_clients < 3 * self.participants_per_group {
            return Err(field(
                "num_clients",
                format!(
                    "{} clients cannot supply {} participants per round",
                    self.num_clients,
                    3 * self.participants_per_group
                ),
            ));
        }
        if !(self.noniid_concentration > 0.0) {
            return Err(field("noniid_concentration", "must be positive"));
        }
        if !(self.network.uplink_bytes_per_s > 0.0 && self.network.downlink_bytes_per_s > 0.0) {
            return Err(field("network", "bandwidths must be positive"));
        }
        match self.mode {
            Mode::FixedAdapter { depth, width } => AdapterConfig::new(depth, width)
                .validate(self.model.num_layers, self.configurator.stacking())
                .map_err(|e| field("mode", e.to_string()))?,
            Mode::LayerFreeze { frozen } if frozen > self.model.num_layers => {
                return Err(field("mode.frozen", format!("exceeds {} layers", self.model.num_layers)))
            }
            _ => {}
        }
        if self.budget.max_rounds == 0 {
            return Err(field("budget.max_rounds", "must be at least 1"));
        }
        if !(self.budget.max_clock_s > 0.0) {
            return Err(field("budget.max_clock_s", "must be positive"));
        }
        if let Some(r) = self.targets.reference_accuracy {
            if !(r > 0.0 && r <= 1.0) {
                return Err(field("targets.reference_accuracy", "must lie in (0, 1]"));
            }
        }
        if self.targets.relative.iter().any(|r| !(*r >= 0.0 && *r <= 1.0)) {
            return Err(field("targets.relative", "entries must lie in [0, 1]"));
        }
        self.devices.resolve()?;
        Ok(())
    }

    /// Participants per round across all tracks.
    pub fn participants_per_round(&self) -> usize {
        3 * self.participants_per_group
    }
}

/// Build the server: data, partition, splits, devices, frozen backbone.
pub fn build_server(cfg: &SessionConfig) -> Result<Server> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let mut data_rng = root.fork("data");
    let task = SyntheticTaskSpec {
        teacher_seed: cfg.task.teacher_seed ^ cfg.seed,
        ..cfg.task.clone()
    };
    let dataset = generate_task(&task, &mut data_rng)?;
    let parts = partition_noniid(&dataset, cfg.num_clients, cfg.noniid_concentration, &mut root.fork("partition"))?;
    let profiles = cfg.devices.resolve()?;
    let mut split_rng = root.fork("split");
    let clients = parts
        .iter()
        .enumerate()
        .map(|(id, samples)| {
            let shard = split_train_test(id, samples, TRAIN_FRACTION, &mut split_rng)?;
            Ok(ClientState::new(shard, profiles[id % profiles.len()].clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut backbone = build_model(&cfg.model, root.fork("model").next_u64())?;
    pretrain_backbone(&mut backbone, &cfg.pretrain, &mut root.fork("pretrain"))?;
    Server::new(backbone, clients, cfg.network, cfg.training, root.fork("server"))
}

/// Everything a finished session produced.
#[derive(Debug, Clone)]
pub struct SessionResult {
    pub trace: SessionTrace,
    pub outcome: SessionOutcome,
}

impl SessionResult {
    pub fn converged(&self) -> bool {
        self.outcome.converged
    }
}

pub fn run(cfg: &SessionConfig) -> Result<SessionResult> {
    run_observed(cfg, &mut NoObserver)
}

pub fn run_observed(cfg: &SessionConfig, observer: &mut dyn SessionObserver) -> Result<SessionResult> {
    let mut server = build_server(cfg)?;
    let target = cfg.targets.stop_at();
    let mut trace = SessionTrace::default();
    trace.push(TraceEvent::Header {
        version: TRACE_VERSION,
        mode: cfg.mode.label(),
        seed: cfg.seed,
        num_layers: cfg.model.num_layers,
        num_clients: cfg.num_clients,
        target_accuracy: target,
    });
    let mut rng = SeededRng::new(cfg.seed).fork("adapters");
    let per_round = cfg.participants_per_round();
    let outcome = match cfg.mode {
        Mode::Autofed => {
            let state = ConfiguratorState::new(cfg.configurator, cfg.model.num_layers)?;
            run_session(&mut server, state, target, cfg.budget, per_round, &mut rng, &mut trace, observer)?
        }
        Mode::FixedAdapter { depth, width } => {
            let m = insert_adapters(
                &server.backbone,
                AdapterConfig::new(depth, width),
                cfg.configurator.stacking(),
                &mut rng,
            )?;
            run_fixed(&mut server, m, target, cfg.budget, per_round, &mut trace, observer)?
        }
        Mode::FullFt => {
            let m = with_mode(&server.backbone, TuningMode::Full)?;
            run_fixed(&mut server, m, target, cfg.budget, per_round, &mut trace, observer)?
        }
        Mode::LayerFreeze { frozen } => {
            let m = with_mode(&server.backbone, TuningMode::LayerFreeze { frozen })?;
            run_fixed(&mut server, m, target, cfg.budget, per_round, &mut trace, observer)?
        }
    };
    server.clear_caches();
    trace.push(TraceEvent::Summary {
        converged: outcome.converged,
        time_to_target: outcome.time_to_target,
        rounds: outcome.rounds,
        final_clock: outcome.final_clock,
        best_accuracy: outcome.best_accuracy,
        total_bytes: trace.total_bytes(),
        total_joules: trace.total_joules(),
        expirations: expirations_this_session(&trace),
        configs_visited: outcome.configs_visited.clone(),
    });
    Ok(SessionResult { trace, outcome })
}

fn with_mode(backbone: &ModelState, mode: TuningMode) -> Result<ModelState> {
    let mut m = backbone.clone();
    m.set_tuning_mode(mode)?;
    Ok(m)
}

/// Mean of the last `window` evaluations: the converged accuracy of a session.
pub fn converged_accuracy(trace: &SessionTrace, window: usize) -> Option<f64> {
    let accs: Vec<f64> = trace.evals().map(|e| e.3).collect();
    if accs.is_empty() || window == 0 {
        return None;
    }
    let tail = &accs[accs.len().saturating_sub(window)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// Evaluations averaged for the converged accuracy of a reference run.
pub const REFERENCE_WINDOW: usize = 5;

/// Converged accuracy of full fine-tuning for `cfg`'s seed, run to `cfg`'s
/// round budget with no stopping target.
pub fn reference_accuracy(cfg: &SessionConfig) -> Result<f64> {
    let ref_cfg = SessionConfig {
        mode: Mode::FullFt,
        targets: Targets {
            absolute: None,
            reference_accuracy: None,
            relative: cfg.targets.relative.clone(),
        },
        ..cfg.clone()
    };
    let r = run(&ref_cfg)?;
    converged_accuracy(&r.trace, REFERENCE_WINDOW)
        .ok_or_else(|| Error::Evaluation("reference run produced no evaluations".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub depth: usize,
    pub width: usize,
    pub converged: bool,
    pub time_to_target: Option<f64>,
    pub rounds: usize,
    pub total_bytes: usize,
    pub best_accuracy: f64,
}

/// Run a fixed-adapter session per grid point, all on `cfg`'s seed.
pub fn sweep(cfg: &SessionConfig, grid: &[AdapterConfig]) -> Result<Vec<SweepRow>> {
    use rayon::prelude::*;
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    grid.par_iter()
        .map(|c| {
            let point = SessionConfig {
                mode: Mode::FixedAdapter {
                    depth: c.depth,
                    width: c.width,
                },
                ..cfg.clone()
            };
            let r = run(&point)?;
            Ok(SweepRow {
                depth: c.depth,
                width: c.width,
                converged: r.outcome.converged,
                time_to_target: r.outcome.time_to_target,
                rounds: r.outcome.rounds,
                total_bytes: r.trace.total_bytes(),
                best_accuracy: r.outcome.best_accuracy,
            })
        })
        .collect()
}

/// Every `(depth, width)` with widths stepping from `step` to `max_width`.
pub fn full_grid(num_layers: usize, step: usize, max_width: usize) -> Vec<AdapterConfig> {
    (0..=num_layers)
        .flat_map(|d| {
            let widths: Vec<usize> = if d == 0 { vec![step] } else { (step..=max_width).step_by(step).collect() };
            widths.into_iter().map(move |w| AdapterConfig::new(d, w))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub mode: String,
    pub seed: u64,
    pub rounds: usize,
    pub converged: bool,
    pub time_to_target: Option<f64>,
    pub total_bytes: usize,
    pub total_joules: f64,
    pub expirations: usize,
    pub configs_visited: Vec<(usize, usize)>,
    /// Time to each relative target, when the trace's reference is known.
    pub time_to_relative: Vec<(f64, Option<f64>)>,
    /// Bytes sent and received per client id.
    pub client_bytes: BTreeMap<usize, usize>,
}

/// Summarize one trace from its events alone.
pub fn report(trace: &SessionTrace, reference: Option<f64>, relative: &[f64]) -> Result<SessionReport> {
    let Some(TraceEvent::Header { mode, seed, .. }) = trace.events.first() else {
        return Err(Error::TraceParse {
            line: 1,
            reason: "missing header".into(),
        });
    };
    let mut client_bytes = BTreeMap::new();
    let mut rounds = 0;
    for e in trace.rounds() {
        if let TraceEvent::Round {
            round,
            participants,
            payload_bytes,
            ..
        } = e
        {
            rounds = rounds.max(round + 1);
            for &c in participants {
                *client_bytes.entry(c).or_insert(0) += 2 * payload_bytes;
            }
        }
    }
    let (converged, time_to_target, configs_visited) = match trace.summary() {
        Some(TraceEvent::Summary {
            converged,
            time_to_target,
            configs_visited,
            ..
        }) => (*converged, *time_to_target, configs_visited.clone()),
        _ => (false, None, trace.base_configs()),
    };
    Ok(SessionReport {
        mode: mode.clone(),
        seed: *seed,
        rounds,
        converged,
        time_to_target,
        total_bytes: trace.total_bytes(),
        total_joules: trace.total_joules(),
        expirations: expirations_this_session(trace),
        configs_visited,
        time_to_relative: relative
            .iter()
            .map(|&r| (r, reference.and_then(|a| time_to_accuracy(trace, r, a))))
            .collect(),
        client_bytes,
    })
}
