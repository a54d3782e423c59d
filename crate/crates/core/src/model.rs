//! Domain types shared by every stage of the engine: parameters, snapshots,
//! production runs, quality configuration, interval states and the trained
//! model bundle.
//!
//! Every map is a `BTreeMap` so that serialization order is fixed, and the
//! bundle serializes to byte-identical JSON for identical content.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tree::DecisionTree;

/// Current on-disk bundle format.
pub const FORMAT_VERSION: u32 = 1;

/// Values keyed by parameter id.
pub type Values = BTreeMap<String, f64>;

/// UTC instant with millisecond resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    pub fn from_millis(ms: i64) -> Self {
        Timestamp(ms)
    }

    pub fn millis(self) -> i64 {
        self.0
    }

    pub fn parse_rfc3339(s: &str) -> Result<Self> {
        DateTime::parse_from_rfc3339(s.trim())
            .map(|dt| Timestamp(dt.with_timezone(&Utc).timestamp_millis()))
            .map_err(|_| Error::InvalidTimestamp(s.to_string()))
    }

    pub fn to_rfc3339(self) -> String {
        match Utc.timestamp_millis_opt(self.0).single() {
            Some(dt) => dt.to_rfc3339_opts(SecondsFormat::Millis, true),
            None => self.0.to_string(),
        }
    }

    pub fn plus_millis(self, ms: i64) -> Self {
        Timestamp(self.0 + ms)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_rfc3339())
    }
}

/// Closed time window `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start: Timestamp,
    pub end: Timestamp,
}

impl TimeWindow {
    pub fn new(start: Timestamp, end: Timestamp) -> Self {
        TimeWindow { start, end }
    }

    pub fn contains(&self, t: Timestamp) -> bool {
        t >= self.start && t <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum ParamKind {
    Sensor,
    Setting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ParameterDef {
    pub id: String,
    #[serde(default)]
    pub name: String,
    pub kind: ParamKind,
    #[serde(default)]
    pub units: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observed_max: Option<f64>,
}

impl ParameterDef {
    pub fn new(id: impl Into<String>, kind: ParamKind) -> Self {
        let id = id.into();
        ParameterDef {
            name: id.clone(),
            id,
            kind,
            units: String::new(),
            observed_min: None,
            observed_max: None,
        }
    }

    pub fn sensor(id: impl Into<String>) -> Self {
        Self::new(id, ParamKind::Sensor)
    }

    pub fn setting(id: impl Into<String>) -> Self {
        Self::new(id, ParamKind::Setting)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_units(mut self, units: impl Into<String>) -> Self {
        self.units = units.into();
        self
    }

    /// Widens the observed range to include `v`.
    pub fn observe(&mut self, v: f64) {
        self.observed_min = Some(self.observed_min.map_or(v, |m| m.min(v)));
        self.observed_max = Some(self.observed_max.map_or(v, |m| m.max(v)));
    }
}

/// Ordered list of parameter definitions with unique ids.
///
/// Manifest order is significant: it is the tie-breaking order for tree
/// splits and the column order for every tabular export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ParameterDef>", into = "Vec<ParameterDef>")]
pub struct Manifest {
    params: Vec<ParameterDef>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Manifest {
    pub fn new(params: Vec<ParameterDef>) -> Result<Self> {
        let mut index = HashMap::with_capacity(params.len());
        for (i, p) in params.iter().enumerate() {
            if p.id.is_empty() {
                return Err(Error::Config("parameter with empty id".into()));
            }
            if index.insert(p.id.clone(), i).is_some() {
                return Err(Error::DuplicateParameter(p.id.clone()));
            }
        }
        Ok(Manifest { params, index })
    }

    pub fn params(&self) -> &[ParameterDef] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut ParameterDef> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ParameterDef> {
        self.index.get(id).map(|&i| &self.params[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn kind_of(&self, id: &str) -> Option<ParamKind> {
        self.get(id).map(|p| p.kind)
    }

    pub fn ids_of(&self, kind: ParamKind) -> Vec<String> {
        self.params
            .iter()
            .filter(|p| p.kind == kind)
            .map(|p| p.id.clone())
            .collect()
    }

    pub fn sensor_ids(&self) -> Vec<String> {
        self.ids_of(ParamKind::Sensor)
    }

    pub fn setting_ids(&self) -> Vec<String> {
        self.ids_of(ParamKind::Setting)
    }

    /// Parameters spanned by a state space, in manifest order. The status
    /// space covers sensors and applied settings; the new-settings space
    /// covers settings only.
    pub fn space_params(&self, space: StateSpace) -> Vec<&ParameterDef> {
        self.params
            .iter()
            .filter(|p| match space {
                StateSpace::Status => true,
                StateSpace::NewSettings => p.kind == ParamKind::Setting,
            })
            .collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl TryFrom<Vec<ParameterDef>> for Manifest {
    type Error = Error;

    fn try_from(params: Vec<ParameterDef>) -> Result<Self> {
        Manifest::new(params)
    }
}

impl From<Manifest> for Vec<ParameterDef> {
    fn from(m: Manifest) -> Self {
        m.params
    }
}

/// Half-open interval `(low, high]`. Infinite bounds mean "unconstrained"
/// and serialize as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntervalRepr", into = "IntervalRepr")]
pub struct Interval {
    low: f64,
    high: f64,
}

#[derive(Serialize, Deserialize)]
struct IntervalRepr {
    low: Option<f64>,
    high: Option<f64>,
}

impl TryFrom<IntervalRepr> for Interval {
    type Error = Error;

    fn try_from(r: IntervalRepr) -> Result<Self> {
        Interval::new(
            r.low.unwrap_or(f64::NEG_INFINITY),
            r.high.unwrap_or(f64::INFINITY),
        )
    }
}

impl From<Interval> for IntervalRepr {
    fn from(iv: Interval) -> Self {
        IntervalRepr {
            low: iv.low.is_finite().then_some(iv.low),
            high: iv.high.is_finite().then_some(iv.high),
        }
    }
}

impl Interval {
    pub const UNBOUNDED: Interval = Interval {
        low: f64::NEG_INFINITY,
        high: f64::INFINITY,
    };

    pub fn new(low: f64, high: f64) -> Result<Self> {
        if low.is_nan() || high.is_nan() || low >= high || low == f64::INFINITY {
            return Err(Error::EmptyInterval { low, high });
        }
        Ok(Interval { low, high })
    }

    pub fn above(low: f64) -> Result<Self> {
        Self::new(low, f64::INFINITY)
    }

    pub fn at_most(high: f64) -> Result<Self> {
        Self::new(f64::NEG_INFINITY, high)
    }

    pub fn low(&self) -> f64 {
        self.low
    }

    pub fn high(&self) -> f64 {
        self.high
    }

    pub fn is_unbounded(&self) -> bool {
        !self.low.is_finite() && !self.high.is_finite()
    }

    /// `v > low && v <= high`. Non-finite observations are rejected.
    pub fn contains(&self, v: f64) -> Result<bool> {
        if !v.is_finite() {
            return Err(Error::NonFinite(v.to_string()));
        }
        Ok(v > self.low && v <= self.high)
    }

    /// Membership without the finiteness check, for hot paths whose inputs
    /// were validated upstream.
    #[inline]
    pub fn contains_unchecked(&self, v: f64) -> bool {
        v > self.low && v <= self.high
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.low.max(other.low) < self.high.min(other.high)
    }

    /// A representative point inside the interval. Infinite bounds are
    /// clamped to the observed range before taking the midpoint.
    pub fn representative(&self, observed_min: Option<f64>, observed_max: Option<f64>) -> f64 {
        let lo = if self.low.is_finite() {
            self.low
        } else {
            observed_min.unwrap_or(self.high)
        };
        let hi = if self.high.is_finite() {
            self.high
        } else {
            observed_max.unwrap_or(self.low)
        };
        let mid = match (lo.is_finite(), hi.is_finite()) {
            (true, true) => lo + (hi - lo) / 2.0,
            (true, false) => lo,
            (false, true) => hi,
            (false, false) => 0.0,
        };
        if self.contains_unchecked(mid) {
            mid
        } else if self.high.is_finite() {
            self.high
        } else {
            self.low + self.low.abs().max(1.0)
        }
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lo = if self.low.is_finite() {
            self.low.to_string()
        } else {
            "-inf".into()
        };
        let hi = if self.high.is_finite() {
            self.high.to_string()
        } else {
            "+inf".into()
        };
        write!(f, "({lo}, {hi}]")
    }
}

/// Read access to parameter values by id.
pub trait ParamLookup {
    fn value(&self, id: &str) -> Option<f64>;
}

impl ParamLookup for BTreeMap<String, f64> {
    fn value(&self, id: &str) -> Option<f64> {
        self.get(id).copied()
    }
}

impl ParamLookup for HashMap<String, f64> {
    fn value(&self, id: &str) -> Option<f64> {
        self.get(id).copied()
    }
}

impl<T: ParamLookup + ?Sized> ParamLookup for &T {
    fn value(&self, id: &str) -> Option<f64> {
        (**self).value(id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum StateSpace {
    Status,
    NewSettings,
}

impl StateSpace {
    pub fn tag(self) -> &'static str {
        match self {
            StateSpace::Status => "status",
            StateSpace::NewSettings => "settings",
        }
    }
}

/// Machine status `m(t)`: sensor readings plus the settings in effect.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MachineStatus {
    pub sensors: Values,
    pub settings: Values,
}

impl ParamLookup for MachineStatus {
    fn value(&self, id: &str) -> Option<f64> {
        self.sensors
            .get(id)
            .or_else(|| self.settings.get(id))
            .copied()
    }
}

/// Process snapshot `a(t)`: a machine status and the settings chosen next.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProcessSnapshot {
    pub status: MachineStatus,
    pub new_settings: Values,
}

impl ProcessSnapshot {
    pub fn view(&self, space: StateSpace) -> SpaceView<'_> {
        match space {
            StateSpace::Status => SpaceView::Status(&self.status),
            StateSpace::NewSettings => SpaceView::Values(&self.new_settings),
        }
    }
}

/// The part of a snapshot that one state space matches against.
#[derive(Debug, Clone, Copy)]
pub enum SpaceView<'a> {
    Status(&'a MachineStatus),
    Values(&'a Values),
}

impl ParamLookup for SpaceView<'_> {
    fn value(&self, id: &str) -> Option<f64> {
        match self {
            SpaceView::Status(s) => s.value(id),
            SpaceView::Values(v) => v.value(id),
        }
    }
}

/// Everything known about the machine at one aligned instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MachineSnapshot {
    pub t: Timestamp,
    pub sensors: Values,
    pub settings: Values,
    pub new_settings: Values,
}

impl MachineSnapshot {
    pub fn status(&self) -> MachineStatus {
        MachineStatus {
            sensors: self.sensors.clone(),
            settings: self.settings.clone(),
        }
    }

    pub fn process(&self) -> ProcessSnapshot {
        ProcessSnapshot {
            status: self.status(),
            new_settings: self.new_settings.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProductionRun {
    pub batch_id: String,
    pub start: Timestamp,
    pub end: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub material_type: Option<String>,
}

impl ProductionRun {
    pub fn contains(&self, t: Timestamp) -> bool {
        t >= self.start && t <= self.end
    }

    pub fn material(&self) -> &str {
        self.material_type.as_deref().unwrap_or("unspecified")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Aggregation {
    Mean,
    LastSample,
    MajorityInBand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QualityBand {
    pub label: String,
    pub interval: Interval,
}

/// Quality labels and how raw measurements map onto them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QualityConfig {
    pub labels: Vec<String>,
    pub target_label: String,
    pub bands: Vec<QualityBand>,
    pub aggregation: Aggregation,
    #[serde(default = "default_in_band_threshold")]
    pub in_band_threshold: f64,
}

fn default_in_band_threshold() -> f64 {
    0.5
}

impl QualityConfig {
    /// Three-band configuration `low | target | high` around a target band.
    pub fn three_band(target_low: f64, target_high: f64, aggregation: Aggregation) -> Result<Self> {
        let cfg = QualityConfig {
            labels: vec!["low".into(), "target".into(), "high".into()],
            target_label: "target".into(),
            bands: vec![
                QualityBand {
                    label: "low".into(),
                    interval: Interval::at_most(target_low)?,
                },
                QualityBand {
                    label: "target".into(),
                    interval: Interval::new(target_low, target_high)?,
                },
                QualityBand {
                    label: "high".into(),
                    interval: Interval::above(target_high)?,
                },
            ],
            aggregation,
            in_band_threshold: 0.5,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.violations();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let labels: BTreeSet<&str> = self.labels.iter().map(String::as_str).collect();
        if labels.len() != self.labels.len() {
            out.push("duplicate quality label".to_string());
        }
        if !labels.contains(self.target_label.as_str()) {
            out.push(format!("target label not in labels: {}", self.target_label));
        }
        for b in &self.bands {
            if !labels.contains(b.label.as_str()) {
                out.push(format!("band label not in labels: {}", b.label));
            }
        }
        let mut sorted: Vec<&QualityBand> = self.bands.iter().collect();
        sorted.sort_by(|a, b| a.interval.low().total_cmp(&b.interval.low()));
        for pair in sorted.windows(2) {
            let (a, b) = (&pair[0].interval, &pair[1].interval);
            if a.overlaps(b) {
                out.push(format!("overlapping quality bands: {} and {}", pair[0].label, pair[1].label));
            } else if a.high() != b.low() {
                out.push(format!("gap between quality bands: {} and {}", pair[0].label, pair[1].label));
            }
        }
        if !(0.0..=1.0).contains(&self.in_band_threshold) {
            out.push(format!("inBandThreshold out of range: {}", self.in_band_threshold));
        }
        out
    }

    /// Label of the band containing `measurement`, if any.
    pub fn band_of(&self, measurement: f64) -> Option<&str> {
        self.bands
            .iter()
            .find(|b| b.interval.contains_unchecked(measurement))
            .map(|b| b.label.as_str())
    }

    pub fn band(&self, label: &str) -> Option<&Interval> {
        self.bands.iter().find(|b| b.label == label).map(|b| &b.interval)
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// A hyperrectangle over one state space with its popularity and goodness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct State {
    pub id: String,
    pub space: StateSpace,
    pub intervals: BTreeMap<String, Interval>,
    pub popularity: u64,
    pub goodness: f64,
}

impl State {
    /// True iff every interval contains the observed value. Unconstrained
    /// parameters may be absent from `obs`; finitely bounded ones may not.
    pub fn matches(&self, obs: &impl ParamLookup) -> Result<bool> {
        for (id, iv) in self.bounded_params() {
            let v = obs
                .value(id)
                .ok_or_else(|| Error::MissingParameter(id.clone()))?;
            if !v.is_finite() {
                return Err(Error::NonFinite(id.clone()));
            }
            if !iv.contains_unchecked(v) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Parameters with at least one finite bound.
    pub fn bounded_params(&self) -> impl Iterator<Item = (&String, &Interval)> {
        self.intervals.iter().filter(|(_, iv)| !iv.is_unbounded())
    }
}

/// A pairing of a status state and a new-settings state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CompositeState {
    pub id: String,
    pub status_state_id: String,
    pub settings_state_id: String,
    pub popularity: u64,
    /// Undefined (`None`) when the composite has no support.
    pub goodness: Option<f64>,
    pub unmatchable: bool,
}

impl CompositeState {
    pub fn compose_id(status_id: &str, settings_id: &str) -> String {
        format!("{status_id}+{settings_id}")
    }

    pub fn is_supported(&self) -> bool {
        self.popularity > 0 && !self.unmatchable
    }
}

/// The trained artifact consumed by prediction, recommendation and the
/// live service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelBundle {
    pub format_version: u32,
    pub manifest: Manifest,
    pub quality_config: QualityConfig,
    pub training_window: TimeWindow,
    pub min_leaf_size: usize,
    pub grid_seconds: f64,
    pub training_sample_count: usize,
    pub status_tree: DecisionTree,
    pub settings_tree: DecisionTree,
    pub status_states: Vec<State>,
    pub settings_states: Vec<State>,
    pub composites: Vec<CompositeState>,
    pub dataset_fingerprint: String,
}

impl ModelBundle {
    /// Canonical JSON: fixed field order, sorted maps, shortest round-trip
    /// float formatting, trailing newline.
    pub fn to_canonical_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: serde_json::Value = serde_json::from_str(text)?;
        let version = probe
            .get("formatVersion")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::InvalidBundle("missing formatVersion".into()))?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(Error::FormatVersion(version as u32));
        }
        Ok(serde_json::from_value(probe)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_canonical_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn status_state(&self, id: &str) -> Option<&State> {
        self.status_states.iter().find(|s| s.id == id)
    }

    pub fn settings_state(&self, id: &str) -> Option<&State> {
        self.settings_states.iter().find(|s| s.id == id)
    }

    pub fn supported_composite_count(&self) -> usize {
        self.composites.iter().filter(|c| c.is_supported()).count()
    }

    /// Every invariant violation in the bundle, each naming the offending
    /// entity. Empty iff the bundle is well formed.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.format_version != FORMAT_VERSION {
            out.push(format!("unsupported formatVersion: {}", self.format_version));
        }
        if self.min_leaf_size == 0 {
            out.push("minLeafSize must be positive".to_string());
        }
        if self.training_window.start > self.training_window.end {
            out.push("training window start after end".to_string());
        }
        out.extend(self.quality_config.violations());

        let mut ids = BTreeSet::new();
        for (states, space) in [
            (&self.status_states, StateSpace::Status),
            (&self.settings_states, StateSpace::NewSettings),
        ] {
            for s in states {
                if !ids.insert(s.id.as_str()) {
                    out.push(format!("duplicate state id: {}", s.id));
                }
                out.extend(state_violations(s, space, &self.manifest));
            }
        }

        let mut composite_ids = BTreeSet::new();
        for c in &self.composites {
            if !composite_ids.insert(c.id.as_str()) {
                out.push(format!("duplicate composite id: {}", c.id));
            }
            match self.status_state(&c.status_state_id) {
                None => out.push(format!("dangling state ref: {} -> {}", c.id, c.status_state_id)),
                Some(s) if s.space != StateSpace::Status => {
                    out.push(format!("composite {} status ref is not a status state", c.id))
                }
                _ => {}
            }
            match self.settings_state(&c.settings_state_id) {
                None => out.push(format!("dangling state ref: {} -> {}", c.id, c.settings_state_id)),
                Some(s) if s.space != StateSpace::NewSettings => {
                    out.push(format!("composite {} settings ref is not a settings state", c.id))
                }
                _ => {}
            }
            match c.goodness {
                Some(g) if !(0.0..=1.0).contains(&g) => {
                    out.push(format!("goodness out of range: {} = {g}", c.id))
                }
                Some(_) if c.popularity == 0 => {
                    out.push(format!("goodness defined without support: {}", c.id))
                }
                None if c.popularity > 0 => out.push(format!("goodness missing: {}", c.id)),
                _ => {}
            }
            if c.unmatchable != (c.popularity == 0) {
                out.push(format!("unmatchable flag inconsistent with popularity: {}", c.id));
            }
        }
        out
    }
}

fn state_violations(s: &State, space: StateSpace, manifest: &Manifest) -> Vec<String> {
    let mut out = Vec::new();
    if s.space != space {
        out.push(format!("state in wrong space: {}", s.id));
    }
    if !(0.0..=1.0).contains(&s.goodness) {
        out.push(format!("goodness out of range: {} = {}", s.id, s.goodness));
    }
    if s.popularity == 0 {
        out.push(format!("state without support: {}", s.id));
    }
    for (pid, iv) in &s.intervals {
        match manifest.get(pid) {
            None => out.push(format!("state {} references unknown parameter {pid}", s.id)),
            Some(p) if space == StateSpace::NewSettings && p.kind != ParamKind::Setting => {
                out.push(format!("settings state {} constrains sensor {pid}", s.id))
            }
            _ => {}
        }
        if iv.low().partial_cmp(&iv.high()) != Some(std::cmp::Ordering::Less) {
            out.push(format!("empty interval in state {}: {pid}", s.id));
        }
    }
    out
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(chunks: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for c in chunks {
        h.update((c.len() as u64).to_le_bytes());
        h.update(c);
    }
    hex::encode(h.finalize())
}
