//! Dataset builders and brute-force reference implementations shared by the
//! integration tests. The reference scorers and matchers here deliberately
//! avoid the library's matching code: they compare raw interval bounds.

#![allow(dead_code)]

use std::collections::BTreeMap;

use machstate_core::ingest::{TrainingSample, TrainingSet};
use machstate_core::model::{
    Aggregation, CompositeState, Interval, MachineStatus, Manifest, ModelBundle, ParameterDef,
    ProcessSnapshot, ProductionRun, QualityConfig, State, StateSpace, TimeWindow, Timestamp,
    FORMAT_VERSION,
};
use machstate_core::tree::{DecisionTree, Node};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn manifest(n_sensors: usize, n_settings: usize) -> Manifest {
    let mut params: Vec<ParameterDef> = (1..=n_sensors)
        .map(|i| ParameterDef::sensor(format!("s{i}")))
        .collect();
    params.extend((1..=n_settings).map(|i| ParameterDef::setting(format!("h{i}"))));
    Manifest::new(params).unwrap()
}

/// Labels `L0..L{n-1}` with `L0` as target and no measurement bands.
pub fn label_config(n_labels: usize) -> QualityConfig {
    let labels: Vec<String> = (0..n_labels).map(|i| format!("L{i}")).collect();
    QualityConfig {
        target_label: labels[0].clone(),
        bands: Vec::new(),
        labels,
        aggregation: Aggregation::Mean,
        in_band_threshold: 0.5,
    }
}

pub struct Row {
    pub sensors: Vec<f64>,
    pub settings: Vec<f64>,
    pub new_settings: Vec<f64>,
    pub label: usize,
    pub run: usize,
}

pub fn snapshot(m: &Manifest, sensors: &[f64], settings: &[f64], new_settings: &[f64]) -> ProcessSnapshot {
    let s_ids = m.sensor_ids();
    let h_ids = m.setting_ids();
    ProcessSnapshot {
        status: MachineStatus {
            sensors: s_ids.iter().cloned().zip(sensors.iter().copied()).collect(),
            settings: h_ids.iter().cloned().zip(settings.iter().copied()).collect(),
        },
        new_settings: h_ids.iter().cloned().zip(new_settings.iter().copied()).collect(),
    }
}

/// Builds a training set; every row belongs to run `r{run}` whose label is
/// the label of its first row.
pub fn training_set(m: &Manifest, qc: &QualityConfig, rows: &[Row]) -> TrainingSet {
    let mut per_run_label = BTreeMap::new();
    let mut run_bounds: BTreeMap<usize, (i64, i64)> = BTreeMap::new();
    let mut samples = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let t = i as i64 * 10_000;
        let batch = format!("r{:05}", r.run);
        let label = per_run_label
            .entry(batch.clone())
            .or_insert_with(|| qc.labels[r.label].clone())
            .clone();
        let b = run_bounds.entry(r.run).or_insert((t, t));
        b.1 = t;
        samples.push(TrainingSample {
            t: Timestamp(t),
            snapshot: snapshot(m, &r.sensors, &r.settings, &r.new_settings),
            run_batch_id: batch,
            label,
        });
    }
    let mut runs: Vec<ProductionRun> = run_bounds
        .iter()
        .map(|(run, (s, e))| ProductionRun {
            batch_id: format!("r{run:05}"),
            start: Timestamp(*s),
            end: Timestamp(*e + 1),
            material_type: None,
        })
        .collect();
    runs.sort_by_key(|r| r.start);
    let end = samples.last().map_or(0, |s| s.t.millis());
    TrainingSet {
        samples,
        manifest: m.clone(),
        quality_config: qc.clone(),
        window: TimeWindow::new(Timestamp(0), Timestamp(end)),
        per_run_label,
        runs,
    }
}

/// Values on a coarse grid so duplicates and threshold ties are common.
fn grid_value(rng: &mut impl Rng) -> f64 {
    f64::from(rng.random_range(0..12)) * 0.5 - 1.0
}

/// Random set with at most 5 parameters in total, one row per run. Labels
/// depend on the first sensor and first setting plus label noise.
pub fn random_training_set(rng: &mut impl Rng, max_samples: usize) -> TrainingSet {
    let n_sensors = rng.random_range(1..=3);
    let n_settings = rng.random_range(1..=(5 - n_sensors).min(2));
    let n_labels = rng.random_range(2..=3);
    let n = rng.random_range(1..=max_samples);
    let m = manifest(n_sensors, n_settings);
    let qc = label_config(n_labels);
    let rows: Vec<Row> = (0..n)
        .map(|i| {
            let sensors: Vec<f64> = (0..n_sensors).map(|_| grid_value(rng)).collect();
            let settings: Vec<f64> = (0..n_settings).map(|_| grid_value(rng)).collect();
            let new_settings: Vec<f64> = settings
                .iter()
                .map(|&h| if rng.random_bool(0.7) { h } else { grid_value(rng) })
                .collect();
            let signal = usize::from(sensors[0] > 1.5) + usize::from(new_settings[0] <= 2.0);
            let label = if rng.random_bool(0.2) {
                rng.random_range(0..n_labels)
            } else {
                signal % n_labels
            };
            Row {
                sensors,
                settings,
                new_settings,
                label,
                run: i,
            }
        })
        .collect();
    training_set(&m, &qc, &rows)
}

pub fn oracle_contains(iv: &Interval, v: f64) -> bool {
    v > iv.low() && v <= iv.high()
}

fn lookup(snapshot: &ProcessSnapshot, space: StateSpace, id: &str) -> f64 {
    let v = match space {
        StateSpace::Status => snapshot
            .status
            .sensors
            .get(id)
            .or_else(|| snapshot.status.settings.get(id)),
        StateSpace::NewSettings => snapshot.new_settings.get(id),
    };
    *v.unwrap_or_else(|| panic!("snapshot lacks {id}"))
}

pub fn oracle_matches(state: &State, snapshot: &ProcessSnapshot) -> bool {
    state
        .intervals
        .iter()
        .all(|(id, iv)| iv.is_unbounded() || oracle_contains(iv, lookup(snapshot, state.space, id)))
}

/// `(popularity, target hits)` for each state by exhaustive scan.
pub fn oracle_state_counts(states: &[State], set: &TrainingSet) -> Vec<(u64, u64)> {
    let target = &set.quality_config.target_label;
    states
        .iter()
        .map(|st| {
            let mut pop = 0;
            let mut hits = 0;
            for s in &set.samples {
                if oracle_matches(st, &s.snapshot) {
                    pop += 1;
                    if &s.label == target {
                        hits += 1;
                    }
                }
            }
            (pop, hits)
        })
        .collect()
}

/// `(popularity, target hits)` for each `(u, w)` pair by exhaustive scan,
/// status-major in bundle state order. Every sample is checked against
/// every state of both spaces.
pub fn oracle_composite_counts(bundle: &ModelBundle, set: &TrainingSet) -> Vec<(String, u64, u64)> {
    let target = &set.quality_config.target_label;
    let n_w = bundle.settings_states.len();
    let mut counts = vec![(0u64, 0u64); bundle.status_states.len() * n_w];
    for s in &set.samples {
        let ws: Vec<usize> = (0..n_w)
            .filter(|&j| oracle_matches(&bundle.settings_states[j], &s.snapshot))
            .collect();
        for (i, u) in bundle.status_states.iter().enumerate() {
            if !oracle_matches(u, &s.snapshot) {
                continue;
            }
            for &j in &ws {
                let c = &mut counts[i * n_w + j];
                c.0 += 1;
                c.1 += u64::from(&s.label == target);
            }
        }
    }
    let mut out = Vec::new();
    for (i, u) in bundle.status_states.iter().enumerate() {
        for (j, w) in bundle.settings_states.iter().enumerate() {
            let (pop, hits) = counts[i * n_w + j];
            out.push((format!("{}+{}", u.id, w.id), pop, hits));
        }
    }
    out
}

fn find<'a>(states: &'a [State], id: &str) -> &'a State {
    states.iter().find(|s| s.id == id).expect("state exists")
}

/// True when `a` should be preferred over `b` for prediction.
fn better_for_prediction(a: &CompositeState, b: &CompositeState) -> bool {
    let (ga, gb) = (a.goodness.unwrap(), b.goodness.unwrap());
    if a.popularity != b.popularity {
        return a.popularity > b.popularity;
    }
    if ga != gb {
        return ga > gb;
    }
    a.id < b.id
}

fn better_for_recommendation(a: &CompositeState, b: &CompositeState) -> bool {
    let (ga, gb) = (a.goodness.unwrap(), b.goodness.unwrap());
    if ga != gb {
        return ga > gb;
    }
    if a.popularity != b.popularity {
        return a.popularity > b.popularity;
    }
    a.id < b.id
}

/// Linear scan over every composite for the prediction choice.
pub fn oracle_predict(bundle: &ModelBundle, snapshot: &ProcessSnapshot) -> Option<String> {
    let mut best: Option<&CompositeState> = None;
    for c in &bundle.composites {
        if c.popularity == 0 {
            continue;
        }
        let u = find(&bundle.status_states, &c.status_state_id);
        let w = find(&bundle.settings_states, &c.settings_state_id);
        let better = best.is_none_or(|b| better_for_prediction(c, b));
        if oracle_matches(u, snapshot) && oracle_matches(w, snapshot) && better {
            best = Some(c);
        }
    }
    best.map(|c| c.id.clone())
}

/// Linear scan over every composite for the recommendation choice.
pub fn oracle_recommend(bundle: &ModelBundle, snapshot: &ProcessSnapshot) -> Option<String> {
    let mut best: Option<&CompositeState> = None;
    for c in &bundle.composites {
        if c.popularity == 0 {
            continue;
        }
        let u = find(&bundle.status_states, &c.status_state_id);
        if oracle_matches(u, snapshot) && best.is_none_or(|b| better_for_recommendation(c, b)) {
            best = Some(c);
        }
    }
    best.map(|c| c.id.clone())
}

fn placeholder_tree(space: StateSpace, qc: &QualityConfig) -> DecisionTree {
    DecisionTree {
        space,
        min_leaf_size: 1,
        training_sample_count: 0,
        labels: qc.labels.clone(),
        parameters: Vec::new(),
        nodes: vec![Node::Leaf {
            label_counts: BTreeMap::new(),
            predicted_label: qc.labels[0].clone(),
        }],
    }
}

pub fn state(id: &str, space: StateSpace, bounds: &[(&str, f64, f64)]) -> State {
    State {
        id: id.to_string(),
        space,
        intervals: bounds
            .iter()
            .map(|&(p, lo, hi)| (p.to_string(), Interval::new(lo, hi).unwrap()))
            .collect(),
        popularity: 1,
        goodness: 0.0,
    }
}

pub fn composite(u: &State, w: &State, popularity: u64, hits: u64) -> CompositeState {
    CompositeState {
        id: CompositeState::compose_id(&u.id, &w.id),
        status_state_id: u.id.clone(),
        settings_state_id: w.id.clone(),
        popularity,
        goodness: (popularity > 0).then(|| hits as f64 / popularity as f64),
        unmatchable: popularity == 0,
    }
}

/// A bundle assembled directly from states and composites, bypassing
/// training. States may overlap.
pub fn hand_bundle(
    m: &Manifest,
    status_states: Vec<State>,
    settings_states: Vec<State>,
    composites: Vec<CompositeState>,
) -> ModelBundle {
    let qc = label_config(2);
    ModelBundle {
        format_version: FORMAT_VERSION,
        manifest: m.clone(),
        status_tree: placeholder_tree(StateSpace::Status, &qc),
        settings_tree: placeholder_tree(StateSpace::NewSettings, &qc),
        quality_config: qc,
        training_window: TimeWindow::new(Timestamp(0), Timestamp(0)),
        min_leaf_size: 1,
        grid_seconds: 10.0,
        training_sample_count: composites.iter().map(|c| c.popularity as usize).sum(),
        status_states,
        settings_states,
        composites,
        dataset_fingerprint: String::new(),
    }
}

/// Random overlapping hand-made bundle with scores drawn from tiny sets so
/// popularity and goodness ties are frequent.
pub fn random_overlapping_bundle(rng: &mut impl Rng) -> ModelBundle {
    let m = manifest(2, 1);
    let iv = |rng: &mut dyn rand::RngCore| {
        let lo = f64::from(rng.random_range(0..6));
        let hi = lo + f64::from(rng.random_range(1..5));
        (lo, hi)
    };
    let n_u = rng.random_range(1..6);
    let n_w = rng.random_range(1..5);
    let us: Vec<_> = (0..n_u)
        .map(|k| {
            let (a, b) = iv(rng);
            let (c, d) = iv(rng);
            state(&format!("status-{k}"), StateSpace::Status, &[("s1", a, b), ("h1", c, d)])
        })
        .collect();
    let ws: Vec<_> = (0..n_w)
        .map(|k| {
            let (a, b) = iv(rng);
            state(&format!("settings-{k}"), StateSpace::NewSettings, &[("h1", a, b)])
        })
        .collect();
    let mut composites = Vec::new();
    for u in &us {
        for w in &ws {
            let pop = [0u64, 2, 4, 4][rng.random_range(0..4)];
            let hits = pop / [1, 2, 4][rng.random_range(0..3)];
            composites.push(composite(u, w, pop, hits));
        }
    }
    composites.shuffle(rng);
    hand_bundle(&m, us, ws, composites)
}

pub fn random_snapshot(rng: &mut impl Rng) -> ProcessSnapshot {
    let m = manifest(2, 1);
    let v = |rng: &mut dyn rand::RngCore| f64::from(rng.random_range(0..20)) * 0.5;
    snapshot(&m, &[v(rng), v(rng)], &[v(rng)], &[v(rng)])
}
