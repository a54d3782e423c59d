//! Composite sensor-setting states, real-time quality prediction and
//! settings recommendation.
//!
//! Prediction matches a full process snapshot `(m(t), h^b(t))` against the
//! supported composites and reports the goodness of the most popular match.
//! Recommendation matches the machine status only, so every settings state
//! seen together with that status is a candidate action, and returns the
//! settings state of the composite with the highest goodness.
//!
//! Composites with zero support have undefined goodness; they stay in the
//! bundle flagged unmatchable and are ignored by both algorithms.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TrainingSet;
use crate::model::{
    CompositeState, Interval, MachineStatus, ModelBundle, ProcessSnapshot, State, StateSpace,
    Timestamp, Values,
};

/// Default likelihood threshold for a `target` verdict.
pub const DEFAULT_DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Verdict {
    Target,
    OffTarget,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Prediction {
    /// Goodness of the chosen composite; absent when nothing matched.
    pub likelihood: Option<f64>,
    pub composite_id: Option<String>,
    pub popularity: Option<u64>,
    pub matched_count: usize,
    pub verdict: Verdict,
}

impl Prediction {
    pub fn unknown() -> Self {
        Prediction {
            likelihood: None,
            composite_id: None,
            popularity: None,
            matched_count: 0,
            verdict: Verdict::Unknown,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Recommendation {
    pub composite_id: String,
    pub settings_state_id: String,
    pub settings_intervals: BTreeMap<String, Interval>,
    pub point_settings: Values,
    pub expected_goodness: f64,
    pub support: u64,
}

/// Scores every `(u, w)` pair of status and settings states against the
/// training set. Pairs are ordered status-major, in state order.
pub fn build_composites(status: &[State], settings: &[State], training_set: &TrainingSet) -> Result<Vec<CompositeState>> {
    let target = &training_set.quality_config.target_label;
    let mut counts = vec![(0u64, 0u64); status.len() * settings.len()];
    for sample in &training_set.samples {
        let u_view = sample.snapshot.view(StateSpace::Status);
        let w_view = sample.snapshot.view(StateSpace::NewSettings);
        let mut us = Vec::new();
        for (i, u) in status.iter().enumerate() {
            if u.matches(&u_view)? {
                us.push(i);
            }
        }
        if us.is_empty() {
            continue;
        }
        let mut ws = Vec::new();
        for (j, w) in settings.iter().enumerate() {
            if w.matches(&w_view)? {
                ws.push(j);
            }
        }
        let hit = sample.label == *target;
        for &i in &us {
            for &j in &ws {
                let c = &mut counts[i * settings.len() + j];
                c.0 += 1;
                c.1 += u64::from(hit);
            }
        }
    }
    let mut out = Vec::with_capacity(counts.len());
    for (i, u) in status.iter().enumerate() {
        for (j, w) in settings.iter().enumerate() {
            let (pop, good) = counts[i * settings.len() + j];
            out.push(CompositeState {
                id: CompositeState::compose_id(&u.id, &w.id),
                status_state_id: u.id.clone(),
                settings_state_id: w.id.clone(),
                popularity: pop,
                goodness: (pop > 0).then(|| good as f64 / pop as f64),
                unmatchable: pop == 0,
            });
        }
    }
    Ok(out)
}

/// Prediction order: higher popularity, then higher goodness, then smaller id.
pub fn prediction_order(a: &CompositeState, b: &CompositeState) -> Ordering {
    b.popularity
        .cmp(&a.popularity)
        .then_with(|| goodness_of(b).total_cmp(&goodness_of(a)))
        .then_with(|| a.id.cmp(&b.id))
}

/// Recommendation order: higher goodness, then higher popularity, then smaller id.
pub fn recommendation_order(a: &CompositeState, b: &CompositeState) -> Ordering {
    goodness_of(b)
        .total_cmp(&goodness_of(a))
        .then_with(|| b.popularity.cmp(&a.popularity))
        .then_with(|| a.id.cmp(&b.id))
}

fn goodness_of(c: &CompositeState) -> f64 {
    c.goodness.unwrap_or(f64::NEG_INFINITY)
}

/// A state compiled to dense parameter slots for matching.
#[derive(Debug, Clone)]
struct CompiledState {
    bounds: Vec<(usize, Interval)>,
}

impl CompiledState {
    #[inline]
    fn matches(&self, dense: &[f64]) -> bool {
        self.bounds
            .iter()
            .all(|(slot, iv)| iv.contains_unchecked(dense[*slot]))
    }
}

/// A bundle prepared for real-time scoring.
///
/// States are compiled to dense slot vectors and composites are indexed by
/// status state, so scoring a tick costs one pass over the states plus one
/// pass over the composites of the matched status states.
/// Manifest slots that must be present, with their parameter ids.
type Required = Vec<(usize, String)>;

#[derive(Debug, Clone)]
pub struct QualityModel {
    bundle: ModelBundle,
    slots: HashMap<String, usize>,
    status: Vec<CompiledState>,
    settings: Vec<CompiledState>,
    /// Per status state: indices of supported composites and their settings state.
    by_status: Vec<Vec<(usize, usize)>>,
    status_required: Required,
    settings_required: Required,
}

impl QualityModel {
    pub fn new(bundle: ModelBundle) -> Result<Self> {
        let slots: HashMap<String, usize> = bundle
            .manifest
            .params()
            .iter()
            .enumerate()
            .map(|(i, p)| (p.id.clone(), i))
            .collect();
        let compile = |states: &[State]| -> Result<(Vec<CompiledState>, Required)> {
            let mut required = BTreeMap::new();
            let compiled = states
                .iter()
                .map(|s| {
                    let bounds = s
                        .bounded_params()
                        .map(|(id, iv)| {
                            let slot = *slots
                                .get(id)
                                .ok_or_else(|| Error::UnknownParameter(id.clone()))?;
                            required.insert(slot, id.clone());
                            Ok((slot, *iv))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(CompiledState { bounds })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((compiled, required.into_iter().collect()))
        };
        let (status, status_required) = compile(&bundle.status_states)?;
        let (settings, settings_required) = compile(&bundle.settings_states)?;

        let status_idx: HashMap<&str, usize> = bundle
            .status_states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let settings_idx: HashMap<&str, usize> = bundle
            .settings_states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.id.as_str(), i))
            .collect();
        let mut by_status = vec![Vec::new(); status.len()];
        for (ci, c) in bundle.composites.iter().enumerate() {
            let u = *status_idx.get(c.status_state_id.as_str()).ok_or_else(|| {
                Error::InvalidBundle(format!("dangling state ref: {}", c.status_state_id))
            })?;
            let w = *settings_idx.get(c.settings_state_id.as_str()).ok_or_else(|| {
                Error::InvalidBundle(format!("dangling state ref: {}", c.settings_state_id))
            })?;
            if c.is_supported() {
                by_status[u].push((ci, w));
            }
        }
        Ok(QualityModel {
            bundle,
            slots,
            status,
            settings,
            by_status,
            status_required,
            settings_required,
        })
    }

    pub fn bundle(&self) -> &ModelBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> ModelBundle {
        self.bundle
    }

    fn fill(&self, dense: &mut [f64], id: &str, v: f64) -> Result<()> {
        if let Some(&slot) = self.slots.get(id) {
            if !v.is_finite() {
                return Err(Error::NonFinite(id.to_string()));
            }
            dense[slot] = v;
        }
        Ok(())
    }

    fn dense_status(&self, status: &MachineStatus) -> Result<Vec<f64>> {
        let mut dense = vec![f64::NAN; self.slots.len()];
        for (id, v) in status.sensors.iter().chain(&status.settings) {
            self.fill(&mut dense, id, *v)?;
        }
        check_required(&dense, &self.status_required)?;
        Ok(dense)
    }

    fn dense_settings(&self, values: &Values) -> Result<Vec<f64>> {
        let mut dense = vec![f64::NAN; self.slots.len()];
        for (id, v) in values {
            self.fill(&mut dense, id, *v)?;
        }
        check_required(&dense, &self.settings_required)?;
        Ok(dense)
    }

    fn matched_status(&self, status: &MachineStatus) -> Result<Vec<usize>> {
        let dense = self.dense_status(status)?;
        Ok(self
            .status
            .iter()
            .enumerate()
            .filter(|(_, s)| s.matches(&dense))
            .map(|(i, _)| i)
            .collect())
    }

    /// Quality likelihood for a process snapshot.
    pub fn predict(&self, snapshot: &ProcessSnapshot, decision_threshold: f64) -> Result<Prediction> {
        let matched_u = self.matched_status(&snapshot.status)?;
        let dense_w = self.dense_settings(&snapshot.new_settings)?;
        let mut w_match: Vec<Option<bool>> = vec![None; self.settings.len()];
        let composites = &self.bundle.composites;
        let mut best: Option<&CompositeState> = None;
        let mut matched = 0;
        for &u in &matched_u {
            for &(ci, w) in &self.by_status[u] {
                let hit = *w_match[w].get_or_insert_with(|| self.settings[w].matches(&dense_w));
                if !hit {
                    continue;
                }
                matched += 1;
                let c = &composites[ci];
                if best.is_none_or(|b| prediction_order(c, b) == Ordering::Less) {
                    best = Some(c);
                }
            }
        }
        Ok(match best {
            None => Prediction::unknown(),
            Some(c) => {
                let likelihood = c.goodness.unwrap_or(0.0);
                Prediction {
                    likelihood: Some(likelihood),
                    composite_id: Some(c.id.clone()),
                    popularity: Some(c.popularity),
                    matched_count: matched,
                    verdict: if likelihood >= decision_threshold {
                        Verdict::Target
                    } else {
                        Verdict::OffTarget
                    },
                }
            }
        })
    }

    /// Settings most likely to reach target quality from this status.
    pub fn recommend(&self, status: &MachineStatus) -> Result<Recommendation> {
        let matched_u = self.matched_status(status)?;
        let composites = &self.bundle.composites;
        let best = matched_u
            .iter()
            .flat_map(|&u| self.by_status[u].iter())
            .map(|&(ci, w)| (&composites[ci], w))
            .min_by(|a, b| recommendation_order(a.0, b.0))
            .ok_or(Error::NoMatchingStatus)?;
        let (c, w) = best;
        let w_state = &self.bundle.settings_states[w];
        let manifest = &self.bundle.manifest;
        let point_settings = w_state
            .intervals
            .iter()
            .map(|(id, iv)| {
                let (lo, hi) = manifest
                    .get(id)
                    .map_or((None, None), |p| (p.observed_min, p.observed_max));
                (id.clone(), iv.representative(lo, hi))
            })
            .collect();
        Ok(Recommendation {
            composite_id: c.id.clone(),
            settings_state_id: w_state.id.clone(),
            settings_intervals: w_state.intervals.clone(),
            point_settings,
            expected_goodness: c.goodness.unwrap_or(0.0),
            support: c.popularity,
        })
    }

    /// Prediction for a hypothetical choice of new settings.
    pub fn whatif(&self, status: &MachineStatus, candidate: &Values, decision_threshold: f64) -> Result<Prediction> {
        let snapshot = ProcessSnapshot {
            status: status.clone(),
            new_settings: candidate.clone(),
        };
        self.predict(&snapshot, decision_threshold)
    }
}

/// Unfilled slots hold NaN; inputs are checked finite when filled.
fn check_required(dense: &[f64], required: &[(usize, String)]) -> Result<()> {
    match required.iter().find(|(slot, _)| dense[*slot].is_nan()) {
        Some((_, id)) => Err(Error::MissingParameter(id.clone())),
        None => Ok(()),
    }
}

/// Batch output: `t,likelihood,verdict,composite_id`.
pub fn write_predictions_csv(rows: &[(Timestamp, Prediction)], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "likelihood", "verdict", "composite_id"])?;
    for (t, p) in rows {
        let verdict = match p.verdict {
            Verdict::Target => "target",
            Verdict::OffTarget => "offTarget",
            Verdict::Unknown => "unknown",
        };
        w.write_record([
            t.to_rfc3339(),
            p.likelihood.map(|l| l.to_string()).unwrap_or_default(),
            verdict.to_string(),
            p.composite_id.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Batch output: `t,composite_id,expected_goodness,support` followed by
/// `<setting>_low,<setting>_high,<setting>_point` per setting. Rows whose
/// status matched no learned regime carry only the timestamp and an
/// `error` marker in the composite column.
pub fn write_recommendations_csv(
    rows: &[(Timestamp, Result<Recommendation>)],
    setting_ids: &[String],
    out: impl Write,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![
        "t".to_string(),
        "composite_id".into(),
        "expected_goodness".into(),
        "support".into(),
    ];
    for id in setting_ids {
        header.push(format!("{id}_low"));
        header.push(format!("{id}_high"));
        header.push(format!("{id}_point"));
    }
    w.write_record(&header)?;
    let bound = |v: f64| if v.is_finite() { v.to_string() } else { String::new() };
    for (t, rec) in rows {
        let mut row = vec![t.to_rfc3339()];
        match rec {
            Ok(r) => {
                row.push(r.composite_id.clone());
                row.push(r.expected_goodness.to_string());
                row.push(r.support.to_string());
                for id in setting_ids {
                    let iv = r.settings_intervals.get(id).copied().unwrap_or(Interval::UNBOUNDED);
                    row.push(bound(iv.low()));
                    row.push(bound(iv.high()));
                    row.push(r.point_settings.get(id).map(|v| v.to_string()).unwrap_or_default());
                }
            }
            Err(e) => {
                row.push(format!("error: {e}"));
                row.resize(header.len(), String::new());
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
