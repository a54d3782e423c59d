//! One production run, tick by tick: replayed from recorded data or driven by
//! a synthetic plant, scored against a shared model.
//!
//! Operator actions are queued and take effect at the next tick boundary. In
//! synthetic mode an applied value becomes that tick's new settings and acts
//! on the dynamics after the setting's lag. In replay mode it becomes a
//! what-if overlay; recorded snapshots are never altered.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::sync::Arc;

use machstate_core::analytics::DEFAULT_DECISION_THRESHOLD;
use machstate_core::ingest::{
    aggregate_label, align_snapshots, derive_new_settings_single_run, parse_observations, AlignConfig,
};
use machstate_core::model::{MachineSnapshot, Values};
use machstate_core::{Prediction, ProcessSnapshot, QualityModel, Recommendation, Timestamp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::{Plant, PlantError, PlantSpec};

pub const DEFAULT_START: &str = "2024-01-01T00:00:00Z";
pub const DEFAULT_SETTLE_TICKS: usize = 100;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("session closed")]
    Closed,
    #[error("unknown setting: {0}")]
    UnknownSetting(String),
    #[error("bundle/parameter mismatch: {0}")]
    Mismatch(String),
    #[error("no tick yet")]
    NoTick,
    #[error("invalid session config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] machstate_core::Error),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type SessionResult<T> = std::result::Result<T, SessionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum SessionMode {
    Replay,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum ReplaySource {
    /// Observations CSV in ingest format, aligned on the bundle grid and
    /// treated as one run. `start`/`end` clip it (inclusive).
    #[serde(rename_all = "camelCase")]
    File {
        observations: PathBuf,
        #[serde(default)]
        start: Option<Timestamp>,
        #[serde(default)]
        end: Option<Timestamp>,
    },
    Inline { snapshots: Vec<MachineSnapshot> },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunMeta {
    #[serde(default)]
    pub batch_id: Option<String>,
    #[serde(default)]
    pub material_type: Option<String>,
}

fn one() -> f64 {
    1.0
}

fn default_threshold() -> f64 {
    DEFAULT_DECISION_THRESHOLD
}

fn default_settle() -> usize {
    DEFAULT_SETTLE_TICKS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SessionConfig {
    pub mode: SessionMode,
    /// Informational when the server already holds a model.
    #[serde(default)]
    pub bundle_path: Option<PathBuf>,
    /// Simulated time between ticks; defaults to the bundle grid.
    #[serde(default)]
    pub tick_interval_ms: Option<u64>,
    /// Replay pacing: wall time per tick is `tickIntervalMs / speedFactor`.
    #[serde(default = "one")]
    pub speed_factor: f64,
    #[serde(default)]
    pub plant_spec: Option<PlantSpec>,
    #[serde(default)]
    pub replay: Option<ReplaySource>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub run_meta: RunMeta,
    #[serde(default)]
    pub recommend_each_tick: bool,
    #[serde(default = "default_threshold")]
    pub decision_threshold: f64,
    #[serde(default)]
    pub max_ticks: Option<u64>,
    /// Time of tick 0 in synthetic mode.
    #[serde(default)]
    pub start: Option<Timestamp>,
    /// Noise-free ticks at the initial settings before tick 0.
    #[serde(default = "default_settle")]
    pub settle_ticks: usize,
}

impl SessionConfig {
    pub fn synthetic(plant: PlantSpec, seed: u64) -> Self {
        SessionConfig {
            plant_spec: Some(plant),
            seed,
            ..Self::base(SessionMode::Synthetic)
        }
    }

    pub fn replay(source: ReplaySource) -> Self {
        SessionConfig {
            replay: Some(source),
            ..Self::base(SessionMode::Replay)
        }
    }

    fn base(mode: SessionMode) -> Self {
        SessionConfig {
            mode,
            bundle_path: None,
            tick_interval_ms: None,
            speed_factor: 1.0,
            plant_spec: None,
            replay: None,
            seed: 0,
            run_meta: RunMeta::default(),
            recommend_each_tick: false,
            decision_threshold: DEFAULT_DECISION_THRESHOLD,
            max_ticks: None,
            start: None,
            settle_ticks: DEFAULT_SETTLE_TICKS,
        }
    }

    pub fn validate(&self) -> SessionResult<()> {
        let bad = |m: &str| Err(SessionError::Config(m.into()));
        if self.tick_interval_ms == Some(0) {
            return bad("tickIntervalMs must be > 0");
        }
        if !(self.speed_factor > 0.0 && self.speed_factor.is_finite()) {
            return bad("speedFactor must be > 0");
        }
        if !self.decision_threshold.is_finite() {
            return bad("decisionThreshold must be finite");
        }
        match (self.mode, &self.replay, &self.plant_spec) {
            (SessionMode::Replay, Some(_), None) | (SessionMode::Synthetic, None, Some(_)) => Ok(()),
            _ => bad("exactly one of replay (replay mode) or plantSpec (synthetic mode) must be present"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WhatIf {
    pub settings: Values,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TickEvent {
    pub seq: u64,
    pub t: Timestamp,
    pub snapshot: ProcessSnapshot,
    pub prediction: Prediction,
    pub recommendation: Option<Recommendation>,
    pub recommendation_error: Option<String>,
    /// Applied settings whose effect has not reached the sensors yet.
    pub pending_settings: Values,
    /// Replay mode only, once the operator has applied settings.
    pub whatif: Option<WhatIf>,
    pub running_label: Option<String>,
    /// Synthetic ground truth: the plant's (hidden) quality sensor.
    pub plant_quality: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ApplyAck {
    pub accepted: Values,
    /// First tick carrying the values.
    pub effective_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QualityAck {
    pub sample_count: usize,
    pub running_label: Option<String>,
}

/// One line of a session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "camelCase")]
pub enum LogEntry {
    #[serde(rename_all = "camelCase")]
    Start {
        session_id: String,
        config: Box<SessionConfig>,
        bundle_fingerprint: String,
    },
    /// Actions are stamped with the tick they take effect on.
    #[serde(rename_all = "camelCase")]
    Action { seq: u64, t: Timestamp, settings: Values },
    #[serde(rename_all = "camelCase")]
    Quality { t: Timestamp, measurement: f64, running_label: Option<String> },
    Tick(Box<TickEvent>),
    #[serde(rename_all = "camelCase")]
    Close { ticks: u64, final_label: Option<String> },
}

enum Sink {
    Memory(Vec<LogEntry>),
    Writer(Box<dyn Write + Send>),
}

impl Sink {
    fn push(&mut self, e: LogEntry) -> SessionResult<()> {
        match self {
            Sink::Memory(v) => v.push(e),
            Sink::Writer(w) => {
                serde_json::to_writer(&mut *w, &e)?;
                w.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

enum Engine {
    Synthetic {
        plant: Box<Plant>,
        /// Settings in effect at the next tick, `h(k)`.
        settings: Vec<f64>,
        /// Tick at which each setting was last applied by the operator.
        applied_at: Vec<Option<u64>>,
    },
    Replay {
        snapshots: Vec<MachineSnapshot>,
        overlay: Values,
    },
}

pub struct Session {
    id: String,
    config: SessionConfig,
    model: Arc<QualityModel>,
    engine: Engine,
    queued: Values,
    next_seq: u64,
    start: Timestamp,
    interval_ms: i64,
    latest: Option<TickEvent>,
    quality: Vec<(Timestamp, f64)>,
    running_label: Option<String>,
    sink: Sink,
    closed: bool,
}

fn id_set<'a>(ids: impl IntoIterator<Item = &'a String>) -> Vec<&'a str> {
    let mut v: Vec<&str> = ids.into_iter().map(String::as_str).collect();
    v.sort_unstable();
    v
}

fn mismatch(what: &str, got: Vec<&str>, want: Vec<&str>) -> SessionError {
    SessionError::Mismatch(format!("{what} {got:?}, bundle has {want:?}"))
}

impl Session {
    /// Session whose log is kept in memory; see [`Session::take_log`].
    pub fn new(id: impl Into<String>, config: SessionConfig, model: Arc<QualityModel>) -> SessionResult<Self> {
        Self::build(id.into(), config, model, Sink::Memory(Vec::new()))
    }

    /// Session whose log streams to `out` as JSON lines.
    pub fn with_writer(
        id: impl Into<String>,
        config: SessionConfig,
        model: Arc<QualityModel>,
        out: Box<dyn Write + Send>,
    ) -> SessionResult<Self> {
        Self::build(id.into(), config, model, Sink::Writer(out))
    }

    fn build(id: String, config: SessionConfig, model: Arc<QualityModel>, sink: Sink) -> SessionResult<Self> {
        config.validate()?;
        let bundle = model.bundle();
        let sensor_ids = bundle.manifest.sensor_ids();
        let setting_ids = bundle.manifest.setting_ids();
        let interval_ms = match config.tick_interval_ms {
            Some(ms) => ms as i64,
            None => (bundle.grid_seconds * 1000.0).round() as i64,
        };
        if interval_ms <= 0 {
            return Err(SessionError::Config("tick interval below 1 ms".into()));
        }
        let (engine, start) = match (&config.plant_spec, &config.replay) {
            (Some(spec), _) => {
                let visible = spec.visible_sensor_ids();
                if id_set(&visible) != id_set(&sensor_ids) {
                    return Err(mismatch("plant sensors", id_set(&visible), id_set(&sensor_ids)));
                }
                if id_set(&spec.setting_ids) != id_set(&setting_ids) {
                    return Err(mismatch("plant settings", id_set(&spec.setting_ids), id_set(&setting_ids)));
                }
                let mut plant = Plant::new(spec.clone(), config.seed)?;
                plant.settle(&spec.initial_settings, config.settle_ticks);
                let start = match config.start {
                    Some(t) => t,
                    None => Timestamp::parse_rfc3339(DEFAULT_START)?,
                };
                let engine = Engine::Synthetic {
                    plant: Box::new(plant),
                    settings: spec.initial_settings.clone(),
                    applied_at: vec![None; spec.setting_ids.len()],
                };
                (engine, start)
            }
            (None, Some(source)) => {
                let snapshots = load_replay(source, &model)?;
                for s in &snapshots {
                    for (what, got, want) in [
                        ("snapshot sensors", &s.sensors, &sensor_ids),
                        ("snapshot settings", &s.settings, &setting_ids),
                        ("snapshot new settings", &s.new_settings, &setting_ids),
                    ] {
                        if id_set(got.keys()) != id_set(want) {
                            return Err(mismatch(what, id_set(got.keys()), id_set(want)));
                        }
                    }
                }
                let start = snapshots.first().map_or(Timestamp(0), |s| s.t);
                (
                    Engine::Replay {
                        snapshots,
                        overlay: Values::new(),
                    },
                    start,
                )
            }
            (None, None) => unreachable!("validated"),
        };
        let mut session = Session {
            id,
            model,
            engine,
            queued: Values::new(),
            next_seq: 0,
            start,
            interval_ms,
            latest: None,
            quality: Vec::new(),
            running_label: None,
            sink,
            closed: false,
            config,
        };
        let entry = LogEntry::Start {
            session_id: session.id.clone(),
            config: Box::new(session.config.clone()),
            bundle_fingerprint: session.model.bundle().dataset_fingerprint.clone(),
        };
        session.sink.push(entry)?;
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn model(&self) -> &Arc<QualityModel> {
        &self.model
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn latest(&self) -> Option<&TickEvent> {
        self.latest.as_ref()
    }

    pub fn ticks(&self) -> u64 {
        self.next_seq
    }

    pub fn running_label(&self) -> Option<&str> {
        self.running_label.as_deref()
    }

    /// Wall time between ticks when paced.
    pub fn wall_interval(&self) -> std::time::Duration {
        let ms = self.interval_ms as f64;
        let secs = match self.config.mode {
            SessionMode::Replay => ms / self.config.speed_factor / 1000.0,
            SessionMode::Synthetic => ms / 1000.0,
        };
        std::time::Duration::from_secs_f64(secs)
    }

    /// Replay snapshots left, if this is a replay.
    pub fn remaining(&self) -> Option<usize> {
        match &self.engine {
            Engine::Replay { snapshots, .. } => Some(snapshots.len().saturating_sub(self.next_seq as usize)),
            Engine::Synthetic { .. } => None,
        }
    }

    fn tick_time(&self, seq: u64) -> Timestamp {
        self.start.plus_millis(seq as i64 * self.interval_ms)
    }

    /// Produces the next tick. Returns `None` once the session has ended: a
    /// replay that ran out of snapshots or `maxTicks` reached, both of which
    /// close the session.
    pub fn tick(&mut self) -> SessionResult<Option<TickEvent>> {
        if self.closed {
            return Err(SessionError::Closed);
        }
        let exhausted = self.config.max_ticks.is_some_and(|m| self.next_seq >= m)
            || self.remaining() == Some(0);
        if exhausted {
            self.close()?;
            return Ok(None);
        }
        let seq = self.next_seq;
        let threshold = self.config.decision_threshold;
        let queued = std::mem::take(&mut self.queued);
        let model = Arc::clone(&self.model);
        let (t, snapshot, pending, whatif, plant_quality) = match &mut self.engine {
            Engine::Synthetic {
                plant,
                settings,
                applied_at,
            } => {
                let spec = plant.spec();
                let mut new_settings = settings.clone();
                for (id, v) in &queued {
                    let j = spec.setting_index(id).expect("checked on apply");
                    new_settings[j] = *v;
                    applied_at[j] = Some(seq);
                }
                let named = |vals: &[f64]| -> Values {
                    spec.setting_ids.iter().cloned().zip(vals.iter().copied()).collect()
                };
                let pending: Values = spec
                    .setting_ids
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| applied_at[*j].is_some_and(|a| seq <= a + spec.lag_ticks[*j] as u64))
                    .map(|(j, id)| (id.clone(), new_settings[j]))
                    .collect();
                let snapshot = ProcessSnapshot {
                    status: machstate_core::MachineStatus {
                        sensors: plant.visible_sensors(),
                        settings: named(settings),
                    },
                    new_settings: named(&new_settings),
                };
                let quality = plant.quality();
                plant.step(&new_settings);
                *settings = new_settings;
                let t = self.start.plus_millis(seq as i64 * self.interval_ms);
                (t, snapshot, pending, None, Some(quality))
            }
            Engine::Replay { snapshots, overlay } => {
                overlay.extend(queued);
                let rec = &snapshots[seq as usize];
                let snapshot = rec.process();
                let whatif = if overlay.is_empty() {
                    None
                } else {
                    let mut candidate = rec.new_settings.clone();
                    candidate.extend(overlay.iter().map(|(k, v)| (k.clone(), *v)));
                    let prediction = model.whatif(&snapshot.status, &candidate, threshold)?;
                    Some(WhatIf {
                        settings: candidate,
                        prediction,
                    })
                };
                (rec.t, snapshot, Values::new(), whatif, None)
            }
        };
        let prediction = model.predict(&snapshot, threshold)?;
        let (recommendation, recommendation_error) = if self.config.recommend_each_tick {
            match model.recommend(&snapshot.status) {
                Ok(r) => (Some(r), None),
                Err(e) => (None, Some(e.to_string())),
            }
        } else {
            (None, None)
        };
        let event = TickEvent {
            seq,
            t,
            snapshot,
            prediction,
            recommendation,
            recommendation_error,
            pending_settings: pending,
            whatif,
            running_label: self.running_label.clone(),
            plant_quality,
        };
        self.next_seq += 1;
        self.sink.push(LogEntry::Tick(Box::new(event.clone())))?;
        self.latest = Some(event.clone());
        Ok(Some(event))
    }

    /// Queues settings for the next tick boundary.
    pub fn apply_settings(&mut self, values: &Values) -> SessionResult<ApplyAck> {
        if self.closed {
            return Err(SessionError::Closed);
        }
        let manifest = &self.model.bundle().manifest;
        for (id, v) in values {
            if manifest.kind_of(id) != Some(machstate_core::model::ParamKind::Setting) {
                return Err(SessionError::UnknownSetting(id.clone()));
            }
            if !v.is_finite() {
                return Err(machstate_core::Error::NonFinite(id.clone()).into());
            }
        }
        self.queued.extend(values.iter().map(|(k, v)| (k.clone(), *v)));
        let seq = self.next_seq;
        self.sink.push(LogEntry::Action {
            seq,
            t: self.tick_time(seq),
            settings: values.clone(),
        })?;
        Ok(ApplyAck {
            accepted: values.clone(),
            effective_seq: seq,
        })
    }

    /// Appends an offline quality measurement, stamped with the latest tick
    /// time, and recomputes the running label.
    pub fn record_quality(&mut self, measurement: f64) -> SessionResult<QualityAck> {
        if self.closed {
            return Err(SessionError::Closed);
        }
        if !measurement.is_finite() {
            return Err(machstate_core::Error::NonFinite("quality measurement".into()).into());
        }
        let t = self.latest.as_ref().map_or(self.start, |e| e.t);
        self.quality.push((t, measurement));
        self.running_label = aggregate_label(&self.quality, &self.model.bundle().quality_config);
        self.sink.push(LogEntry::Quality {
            t,
            measurement,
            running_label: self.running_label.clone(),
        })?;
        Ok(QualityAck {
            sample_count: self.quality.len(),
            running_label: self.running_label.clone(),
        })
    }

    /// Recommendation for the latest tick's machine status.
    pub fn recommendation(&self) -> SessionResult<Recommendation> {
        let latest = self.latest.as_ref().ok_or(SessionError::NoTick)?;
        Ok(self.model.recommend(&latest.snapshot.status)?)
    }

    /// What-if for the latest tick's machine status; does not touch the session.
    pub fn whatif(&self, candidate: &Values) -> SessionResult<Prediction> {
        let latest = self.latest.as_ref().ok_or(SessionError::NoTick)?;
        Ok(self
            .model
            .whatif(&latest.snapshot.status, candidate, self.config.decision_threshold)?)
    }

    /// Ends the session and writes the closing log line. Idempotent.
    pub fn close(&mut self) -> SessionResult<Option<String>> {
        if !self.closed {
            self.closed = true;
            self.sink.push(LogEntry::Close {
                ticks: self.next_seq,
                final_label: self.running_label.clone(),
            })?;
            if let Sink::Writer(w) = &mut self.sink {
                w.flush()?;
            }
        }
        Ok(self.running_label.clone())
    }

    /// The in-memory log. Empty for sessions built with a writer.
    pub fn take_log(&mut self) -> Vec<LogEntry> {
        match &mut self.sink {
            Sink::Memory(v) => std::mem::take(v),
            Sink::Writer(_) => Vec::new(),
        }
    }
}

fn load_replay(source: &ReplaySource, model: &QualityModel) -> SessionResult<Vec<MachineSnapshot>> {
    match source {
        ReplaySource::Inline { snapshots } => Ok(snapshots.clone()),
        ReplaySource::File { observations, start, end } => {
            let bundle = model.bundle();
            let file = std::fs::File::open(observations)?;
            let (sensors, settings) = parse_observations(file, &bundle.manifest).map_err(|e| match e {
                machstate_core::Error::UnknownParameter(p) => {
                    SessionError::Mismatch(format!("column {p} not in bundle manifest"))
                }
                e => e.into(),
            })?;
            let (mut snaps, _) = align_snapshots(&sensors, &settings, AlignConfig::from_seconds(bundle.grid_seconds)?)?;
            derive_new_settings_single_run(&mut snaps);
            snaps.retain(|s| start.is_none_or(|a| s.t >= a) && end.is_none_or(|b| s.t <= b));
            Ok(snaps)
        }
    }
}

/// A scripted operator action for headless runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "camelCase")]
pub enum ScriptAction {
    /// Apply the given settings before tick `at`.
    Apply { at: u64, settings: Values },
    /// Follow the current recommendation before tick `at`; see [`steer_settings`].
    ApplyRecommendation { at: u64 },
    /// Record a quality measurement after tick `at`.
    Quality { at: u64, measurement: f64 },
}

impl ScriptAction {
    fn at(&self) -> u64 {
        match self {
            ScriptAction::Apply { at, .. } | ScriptAction::ApplyRecommendation { at } | ScriptAction::Quality { at, .. } => *at,
        }
    }
}

/// Settings to apply to follow a recommendation from `current`: a setting
/// already inside its recommended interval is left alone, any other moves to
/// the recommended point.
pub fn steer_settings(rec: &Recommendation, current: &Values) -> Values {
    rec.settings_intervals
        .iter()
        .filter(|(id, iv)| !current.get(*id).is_some_and(|v| iv.contains_unchecked(*v)))
        .map(|(id, _)| (id.clone(), rec.point_settings[id]))
        .collect()
}

/// Runs a session unpaced for `ticks` ticks (or until it ends on its own)
/// with a script of operator actions, then closes it.
pub fn run_headless(session: &mut Session, ticks: u64, script: &[ScriptAction]) -> SessionResult<Vec<TickEvent>> {
    let mut by_tick: BTreeMap<u64, Vec<&ScriptAction>> = BTreeMap::new();
    for a in script {
        by_tick.entry(a.at()).or_default().push(a);
    }
    let mut events = Vec::new();
    for k in 0..ticks {
        for a in by_tick.get(&k).into_iter().flatten() {
            match a {
                ScriptAction::Apply { settings, .. } => {
                    session.apply_settings(settings)?;
                }
                ScriptAction::ApplyRecommendation { .. } => {
                    let Some(latest) = session.latest() else { continue };
                    let current = latest.snapshot.new_settings.clone();
                    if let Ok(r) = session.recommendation() {
                        let changes = steer_settings(&r, &current);
                        if !changes.is_empty() {
                            session.apply_settings(&changes)?;
                        }
                    }
                }
                ScriptAction::Quality { .. } => {}
            }
        }
        let Some(ev) = session.tick()? else { break };
        events.push(ev);
        for a in by_tick.get(&k).into_iter().flatten() {
            if let ScriptAction::Quality { measurement, .. } = a {
                session.record_quality(*measurement)?;
            }
        }
    }
    session.close()?;
    Ok(events)
}

pub fn write_log(entries: &[LogEntry], mut out: impl Write) -> SessionResult<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_log(input: impl BufRead) -> SessionResult<Vec<LogEntry>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct VerifyReport {
    pub ticks: usize,
    pub mismatches: Vec<String>,
}

/// Recomputes every prediction, what-if and per-tick recommendation in a log
/// from its recorded snapshots and compares them field by field.
pub fn verify_log(entries: &[LogEntry], model: &QualityModel) -> SessionResult<VerifyReport> {
    let Some(LogEntry::Start { config, .. }) = entries.first() else {
        return Err(SessionError::Config("log does not begin with a start entry".into()));
    };
    let threshold = config.decision_threshold;
    let mut report = VerifyReport::default();
    for e in entries {
        let LogEntry::Tick(ev) = e else { continue };
        report.ticks += 1;
        let p = model.predict(&ev.snapshot, threshold)?;
        if p != ev.prediction {
            report.mismatches.push(format!("tick {}: prediction", ev.seq));
        }
        if let Some(w) = &ev.whatif {
            if model.whatif(&ev.snapshot.status, &w.settings, threshold)? != w.prediction {
                report.mismatches.push(format!("tick {}: what-if", ev.seq));
            }
        }
        if let Some(r) = &ev.recommendation {
            if &model.recommend(&ev.snapshot.status)? != r {
                report.mismatches.push(format!("tick {}: recommendation", ev.seq));
            }
        }
    }
    Ok(report)
}
