//! Held-out evaluation: per-snapshot prediction accuracy, per-run correct
//! prediction frequency, CCDF curves and the minimum-leaf-size sweep.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::{QualityModel, Verdict};
use crate::error::{Error, Result};
use crate::ingest::TrainingSet;
use crate::model::{ProcessSnapshot, ProductionRun};
use crate::pipeline::{train_bundle, TrainOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunEvaluation {
    pub batch_id: String,
    pub actual_label: String,
    pub snapshot_count: usize,
    pub correct_count: usize,
    pub unknown_count: usize,
    /// `correct / (snapshots - unknown)`; absent when every snapshot was unknown.
    pub correct_prediction_frequency: Option<f64>,
}

impl RunEvaluation {
    pub fn evaluated_count(&self) -> usize {
        self.snapshot_count - self.unknown_count
    }

    pub fn is_defined(&self) -> bool {
        self.correct_prediction_frequency.is_some()
    }
}

/// Scores every snapshot of one run. A prediction is correct when a
/// `target` verdict coincides with the run actually reaching target quality.
pub fn evaluate_run<'a>(
    model: &QualityModel,
    batch_id: &str,
    snapshots: impl IntoIterator<Item = &'a ProcessSnapshot>,
    actual_label: &str,
    decision_threshold: f64,
) -> Result<RunEvaluation> {
    let actual_target = actual_label == model.bundle().quality_config.target_label;
    let (mut n, mut correct, mut unknown) = (0, 0, 0);
    for snap in snapshots {
        n += 1;
        match model.predict(snap, decision_threshold)?.verdict {
            Verdict::Unknown => unknown += 1,
            v => correct += usize::from((v == Verdict::Target) == actual_target),
        }
    }
    Ok(run_evaluation(batch_id, actual_label, n, correct, unknown))
}

fn run_evaluation(batch_id: &str, actual_label: &str, n: usize, correct: usize, unknown: usize) -> RunEvaluation {
    let evaluated = n - unknown;
    RunEvaluation {
        batch_id: batch_id.to_string(),
        actual_label: actual_label.to_string(),
        snapshot_count: n,
        correct_count: correct,
        unknown_count: unknown,
        correct_prediction_frequency: (evaluated > 0).then(|| correct as f64 / evaluated as f64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CcdfPoint {
    pub x: f64,
    pub fraction: f64,
}

/// Fraction of runs whose correct prediction frequency is strictly greater
/// than each `x` in `0, step, 2*step, ..., 1`. Runs with an undefined
/// frequency are left out.
pub fn frequency_ccdf(evals: &[RunEvaluation], grid_step: f64) -> Result<Vec<CcdfPoint>> {
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::Config(format!("ccdf grid step must be in (0, 1]: {grid_step}")));
    }
    let freqs: Vec<f64> = evals
        .iter()
        .filter_map(|e| e.correct_prediction_frequency)
        .collect();
    if freqs.is_empty() {
        return Err(Error::NoEvaluableRuns);
    }
    let steps = (1.0 / grid_step).round() as usize;
    Ok((0..=steps)
        .map(|k| {
            let x = if k == steps { 1.0 } else { k as f64 * grid_step };
            let above = freqs.iter().filter(|&&f| f > x).count();
            CcdfPoint {
                x,
                fraction: above as f64 / freqs.len() as f64,
            }
        })
        .collect())
}

/// Accuracy pooled over all evaluated snapshots.
pub fn pooled_accuracy(evals: &[RunEvaluation]) -> Option<f64> {
    let evaluated: usize = evals.iter().map(RunEvaluation::evaluated_count).sum();
    let correct: usize = evals.iter().map(|e| e.correct_count).sum();
    (evaluated > 0).then(|| correct as f64 / evaluated as f64)
}

/// Per-run frequencies averaged with weights equal to evaluated snapshot counts.
pub fn weighted_run_accuracy(evals: &[RunEvaluation]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0usize;
    for e in evals {
        if let Some(f) = e.correct_prediction_frequency {
            num += f * e.evaluated_count() as f64;
            den += e.evaluated_count();
        }
    }
    (den > 0).then(|| num / den as f64)
}

/// Unweighted mean of defined per-run frequencies.
pub fn mean_run_frequency(evals: &[RunEvaluation]) -> Option<f64> {
    let freqs: Vec<f64> = evals
        .iter()
        .filter_map(|e| e.correct_prediction_frequency)
        .collect();
    (!freqs.is_empty()).then(|| freqs.iter().sum::<f64>() / freqs.len() as f64)
}

/// Evaluates a trained model on every run of a labelled set.
pub fn evaluate_set(model: &QualityModel, set: &TrainingSet, decision_threshold: f64) -> Result<Vec<RunEvaluation>> {
    let mut by_run: BTreeMap<&str, Vec<&ProcessSnapshot>> = BTreeMap::new();
    for s in &set.samples {
        by_run.entry(&s.run_batch_id).or_default().push(&s.snapshot);
    }
    set.runs
        .iter()
        .filter_map(|r| by_run.get(r.batch_id.as_str()).map(|snaps| (r, snaps)))
        .map(|(r, snaps)| {
            evaluate_run(
                model,
                &r.batch_id,
                snaps.iter().copied(),
                &set.per_run_label[&r.batch_id],
                decision_threshold,
            )
        })
        .collect()
}

/// How whole runs are assigned to training or test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", tag = "kind")]
pub enum RunSplit {
    /// Earliest runs train, later runs test.
    #[serde(rename_all = "camelCase")]
    Temporal { train_fraction: f64 },
    /// Seeded shuffle of runs, then the same cut.
    #[serde(rename_all = "camelCase")]
    Random { train_fraction: f64, seed: u64 },
}

impl Default for RunSplit {
    fn default() -> Self {
        RunSplit::Temporal { train_fraction: 0.75 }
    }
}

impl RunSplit {
    fn fraction(&self) -> f64 {
        match *self {
            RunSplit::Temporal { train_fraction } | RunSplit::Random { train_fraction, .. } => train_fraction,
        }
    }

    /// Splits runs (already in start order) into train and test batch ids.
    pub fn apply(&self, runs: &[&ProductionRun]) -> Result<(Vec<String>, Vec<String>)> {
        let f = self.fraction();
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("train fraction must be in (0, 1): {f}")));
        }
        let mut ids: Vec<String> = runs.iter().map(|r| r.batch_id.clone()).collect();
        if let RunSplit::Random { seed, .. } = *self {
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        let n_train = ((ids.len() as f64) * f).round() as usize;
        let test = ids.split_off(n_train.min(ids.len()));
        Ok((ids, test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepConfig {
    pub leaf_sizes: Vec<usize>,
    /// Restrict to these material types; all types present when absent.
    pub material_types: Option<Vec<String>>,
    /// Train one bundle per material type; when off, all runs form one group.
    pub stratify: bool,
    pub split: RunSplit,
    pub decision_threshold: f64,
    pub ccdf_step: f64,
    pub grid_seconds: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            leaf_sizes: vec![10, 30, 50, 70, 90],
            material_types: None,
            stratify: true,
            split: RunSplit::default(),
            decision_threshold: crate::analytics::DEFAULT_DECISION_THRESHOLD,
            ccdf_step: 0.05,
            grid_seconds: crate::ingest::DEFAULT_GRID_SECONDS,
        }
    }
}

/// Group name used when the sweep is not stratified by material.
pub const ALL_MATERIALS: &str = "all";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepCell {
    pub material_type: String,
    pub min_leaf_size: usize,
    /// Pooled over evaluated test snapshots; the headline figure.
    pub accuracy: Option<f64>,
    pub mean_run_frequency: Option<f64>,
    pub evaluated_snapshots: usize,
    pub correct_snapshots: usize,
    pub unknown_snapshots: usize,
    pub status_state_count: usize,
    pub settings_state_count: usize,
    pub composite_count: usize,
    pub supported_composite_count: usize,
    pub run_evaluations: Vec<RunEvaluation>,
    pub ccdf: Vec<CcdfPoint>,
}

impl SweepCell {
    pub fn state_count(&self) -> usize {
        self.status_state_count + self.settings_state_count
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MaterialSplit {
    pub material_type: String,
    pub train_runs: Vec<String>,
    pub test_runs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SweepReport {
    pub dataset_fingerprint: String,
    pub config: SweepConfig,
    pub splits: Vec<MaterialSplit>,
    /// Ordered by material type, then leaf size.
    pub cells: Vec<SweepCell>,
}

/// Trains and evaluates one bundle per (material type, leaf size).
pub fn sweep_min_leaf_size(dataset: &TrainingSet, cfg: &SweepConfig, dataset_fingerprint: &str) -> Result<SweepReport> {
    if cfg.leaf_sizes.is_empty() {
        return Err(Error::Config("no leaf sizes to sweep".into()));
    }
    let mut groups: BTreeMap<String, Vec<&ProductionRun>> = BTreeMap::new();
    for r in &dataset.runs {
        let key = if cfg.stratify { r.material() } else { ALL_MATERIALS };
        groups.entry(key.to_string()).or_default().push(r);
    }
    if let Some(wanted) = &cfg.material_types {
        groups.retain(|k, _| wanted.contains(k));
        for w in wanted {
            if !groups.contains_key(w) {
                return Err(Error::NoTestRuns(w.clone()));
            }
        }
    }

    let mut splits = Vec::new();
    for (material, runs) in &groups {
        let (train, test) = cfg.split.apply(runs)?;
        if test.is_empty() {
            return Err(Error::NoTestRuns(material.clone()));
        }
        if train.is_empty() {
            return Err(Error::NoTrainingRuns(material.clone()));
        }
        let train_set: BTreeSet<&String> = train.iter().collect();
        if test.iter().any(|b| train_set.contains(b)) {
            return Err(Error::Config(format!("train/test overlap in {material}")));
        }
        splits.push(MaterialSplit {
            material_type: material.clone(),
            train_runs: train,
            test_runs: test,
        });
    }

    let jobs: Vec<(&MaterialSplit, usize)> = splits
        .iter()
        .flat_map(|s| cfg.leaf_sizes.iter().map(move |&l| (s, l)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(split, leaf)| sweep_cell(dataset, split, leaf, cfg, dataset_fingerprint))
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        dataset_fingerprint: dataset_fingerprint.to_string(),
        config: cfg.clone(),
        splits,
        cells,
    })
}

fn sweep_cell(
    dataset: &TrainingSet,
    split: &MaterialSplit,
    min_leaf_size: usize,
    cfg: &SweepConfig,
    fingerprint: &str,
) -> Result<SweepCell> {
    let train = dataset.restrict_to_runs(&split.train_runs.iter().cloned().collect());
    let test = dataset.restrict_to_runs(&split.test_runs.iter().cloned().collect());
    if test.is_empty() {
        return Err(Error::NoTestRuns(split.material_type.clone()));
    }
    if train.is_empty() {
        return Err(Error::NoTrainingRuns(split.material_type.clone()));
    }
    if train
        .samples
        .iter()
        .any(|s| test.per_run_label.contains_key(&s.run_batch_id))
    {
        return Err(Error::Config("test run leaked into training".into()));
    }
    let bundle = train_bundle(
        &train,
        &TrainOptions {
            min_leaf_size,
            grid_seconds: cfg.grid_seconds,
        },
        fingerprint,
    )?;
    let model = QualityModel::new(bundle)?;
    let evals = evaluate_set(&model, &test, cfg.decision_threshold)?;
    let ccdf = frequency_ccdf(&evals, cfg.ccdf_step).unwrap_or_default();
    let b = model.bundle();
    Ok(SweepCell {
        material_type: split.material_type.clone(),
        min_leaf_size,
        accuracy: pooled_accuracy(&evals),
        mean_run_frequency: mean_run_frequency(&evals),
        evaluated_snapshots: evals.iter().map(RunEvaluation::evaluated_count).sum(),
        correct_snapshots: evals.iter().map(|e| e.correct_count).sum(),
        unknown_snapshots: evals.iter().map(|e| e.unknown_count).sum(),
        status_state_count: b.status_states.len(),
        settings_state_count: b.settings_states.len(),
        composite_count: b.composites.len(),
        supported_composite_count: b.supported_composite_count(),
        run_evaluations: evals,
        ccdf,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `fig5_accuracy.csv`: one row per sweep cell.
pub fn accuracy_csv(report: &SweepReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "material_type",
        "min_leaf_size",
        "accuracy",
        "mean_run_frequency",
        "evaluated_snapshots",
        "unknown_snapshots",
        "status_states",
        "settings_states",
        "supported_composites",
    ])?;
    for c in &report.cells {
        w.write_record([
            c.material_type.clone(),
            c.min_leaf_size.to_string(),
            opt(c.accuracy),
            opt(c.mean_run_frequency),
            c.evaluated_snapshots.to_string(),
            c.unknown_snapshots.to_string(),
            c.status_state_count.to_string(),
            c.settings_state_count.to_string(),
            c.supported_composite_count.to_string(),
        ])?;
    }
    into_string(w)
}

/// `ccdf_<type>.csv`: column `x` plus one `leaf_<n>` column per leaf size.
pub fn ccdf_csv(report: &SweepReport, material_type: &str) -> Result<String> {
    let cells: Vec<&SweepCell> = report
        .cells
        .iter()
        .filter(|c| c.material_type == material_type)
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["x".to_string()];
    header.extend(cells.iter().map(|c| format!("leaf_{}", c.min_leaf_size)));
    w.write_record(&header)?;
    let rows = cells.iter().map(|c| c.ccdf.len()).max().unwrap_or(0);
    for i in 0..rows {
        let x = cells.iter().find_map(|c| c.ccdf.get(i)).map(|p| p.x);
        let mut row = vec![opt(x)];
        row.extend(cells.iter().map(|c| opt(c.ccdf.get(i).map(|p| p.fraction))));
        w.write_record(&row)?;
    }
    into_string(w)
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// File-system friendly form of a material type name.
pub fn file_stem(material_type: &str) -> String {
    material_type
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// Writes `sweep_report.json`, `fig5_accuracy.csv` and one `ccdf_<type>.csv`
/// per material type into `dir`.
pub fn write_report(report: &SweepReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(report)?;
    json.push('\n');
    std::fs::write(dir.join("sweep_report.json"), json)?;
    std::fs::write(dir.join("fig5_accuracy.csv"), accuracy_csv(report)?)?;
    for s in &report.splits {
        let name = format!("ccdf_{}.csv", file_stem(&s.material_type));
        std::fs::write(dir.join(name), ccdf_csv(report, &s.material_type)?)?;
    }
    Ok(())
}

/// Accuracy by material type (rows) and leaf size (columns).
pub fn ascii_table(report: &SweepReport) -> String {
    let leaves = &report.config.leaf_sizes;
    let width = report
        .splits
        .iter()
        .map(|s| s.material_type.len())
        .max()
        .unwrap_or(0)
        .max("material".len());
    let mut out = String::new();
    let _ = write!(out, "{:<width$}", "material");
    for l in leaves {
        let _ = write!(out, " | {:>8}", format!("leaf {l}"));
    }
    out.push('\n');
    out.push_str(&"-".repeat(width + leaves.len() * 11));
    out.push('\n');
    for s in &report.splits {
        let _ = write!(out, "{:<width$}", s.material_type);
        for l in leaves {
            let cell = report
                .cells
                .iter()
                .find(|c| c.material_type == s.material_type && c.min_leaf_size == *l);
            let text = match cell.and_then(|c| c.accuracy) {
                Some(a) => format!("{a:.4}"),
                None => "n/a".to_string(),
            };
            let _ = write!(out, " | {text:>8}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(freq: Option<(usize, usize)>) -> RunEvaluation {
        match freq {
            Some((c, n)) => run_evaluation("b", "target", n, c, 0),
            None => run_evaluation("b", "target", 3, 0, 3),
        }
    }

    #[test]
    fn frequency_is_ratio() {
        let e = run_evaluation("b1", "target", 10, 7, 0);
        assert_eq!(e.correct_prediction_frequency, Some(0.7));
    }

    #[test]
    fn unknown_excluded_from_denominator() {
        let e = run_evaluation("b1", "target", 10, 6, 2);
        assert_eq!(e.correct_prediction_frequency, Some(0.75));
        let all_unknown = ev(None);
        assert!(!all_unknown.is_defined());
    }

    #[test]
    fn ccdf_hand_counts() {
        let evals = vec![ev(Some((3, 5))), ev(Some((4, 5)))];
        let c = frequency_ccdf(&evals, 0.1).unwrap();
        assert_eq!(c.len(), 11);
        let at = |x: f64| c.iter().find(|p| (p.x - x).abs() < 1e-9).unwrap().fraction;
        assert_eq!(at(0.5), 1.0);
        assert_eq!(at(0.7), 0.5);
        assert_eq!(c.last().unwrap().x, 1.0);
        assert_eq!(c.last().unwrap().fraction, 0.0);
        assert_eq!(c[0].fraction, 1.0);
    }

    #[test]
    fn ccdf_needs_defined_runs() {
        assert!(matches!(frequency_ccdf(&[ev(None)], 0.1), Err(Error::NoEvaluableRuns)));
        assert!(matches!(frequency_ccdf(&[], 0.1), Err(Error::NoEvaluableRuns)));
    }

    #[test]
    fn single_run_accuracy_equals_frequency() {
        let evals = vec![run_evaluation("b", "target", 8, 5, 0)];
        assert_eq!(pooled_accuracy(&evals), evals[0].correct_prediction_frequency);
    }

    #[test]
    fn pooled_and_weighted_agree() {
        let evals = vec![
            run_evaluation("a", "t", 10, 7, 0),
            run_evaluation("b", "t", 13, 2, 4),
            run_evaluation("c", "t", 3, 0, 3),
        ];
        let p = pooled_accuracy(&evals).unwrap();
        let w = weighted_run_accuracy(&evals).unwrap();
        assert_eq!(p, 9.0 / 19.0);
        assert!((p - w).abs() < 1e-12);
    }

    #[test]
    fn temporal_and_random_split() {
        let runs: Vec<ProductionRun> = (0..8)
            .map(|i| ProductionRun {
                batch_id: format!("r{i}"),
                start: crate::model::Timestamp(i * 100),
                end: crate::model::Timestamp(i * 100 + 50),
                material_type: None,
            })
            .collect();
        let refs: Vec<&ProductionRun> = runs.iter().collect();
        let (tr, te) = RunSplit::Temporal { train_fraction: 0.75 }.apply(&refs).unwrap();
        assert_eq!(tr, ["r0", "r1", "r2", "r3", "r4", "r5"]);
        assert_eq!(te, ["r6", "r7"]);
        let split = RunSplit::Random { train_fraction: 0.5, seed: 3 };
        let (a, b) = split.apply(&refs).unwrap();
        assert_eq!((a.len(), b.len()), (4, 4));
        assert_eq!(split.apply(&refs).unwrap(), (a, b));
    }

    #[test]
    fn file_stems() {
        assert_eq!(file_stem("Yeast type 1"), "Yeast_type_1");
    }
}
