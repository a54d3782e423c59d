//! Training: training set -> two trees -> scored states -> composites -> bundle.

use serde::{Deserialize, Serialize};

use crate::analytics::build_composites;
use crate::error::{Error, Result};
use crate::ingest::{load_dataset, prepare, DatasetPaths, IngestOptions, IngestReport, TrainingSet};
use crate::model::{ModelBundle, StateSpace, FORMAT_VERSION};
use crate::states::states_from_tree;
use crate::tree::fit_tree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainOptions {
    pub min_leaf_size: usize,
    pub grid_seconds: f64,
}

/// Fits both trees, derives and scores states and composites, and
/// assembles a validated bundle.
pub fn train_bundle(training_set: &TrainingSet, opts: &TrainOptions, dataset_fingerprint: &str) -> Result<ModelBundle> {
    if opts.min_leaf_size == 0 {
        return Err(Error::Config("minLeafSize must be at least 1".into()));
    }
    let (status_tree, settings_tree) = rayon::join(
        || fit_tree(training_set, StateSpace::Status, opts.min_leaf_size),
        || fit_tree(training_set, StateSpace::NewSettings, opts.min_leaf_size),
    );
    let (status_tree, settings_tree) = (status_tree?, settings_tree?);
    let status = states_from_tree(&status_tree, training_set)?;
    let settings = states_from_tree(&settings_tree, training_set)?;
    let composites = build_composites(&status.states, &settings.states, training_set)?;
    let bundle = ModelBundle {
        format_version: FORMAT_VERSION,
        manifest: training_set.manifest.clone(),
        quality_config: training_set.quality_config.clone(),
        training_window: training_set.window,
        min_leaf_size: opts.min_leaf_size,
        grid_seconds: opts.grid_seconds,
        training_sample_count: training_set.len(),
        status_tree,
        settings_tree,
        status_states: status.states,
        settings_states: settings.states,
        composites,
        dataset_fingerprint: dataset_fingerprint.to_string(),
    };
    let violations = bundle.validate();
    if !violations.is_empty() {
        return Err(Error::InvalidBundle(violations.join("; ")));
    }
    Ok(bundle)
}

/// Loads files, prepares the training set and trains a bundle.
pub fn train_from_files(
    paths: &DatasetPaths,
    quality_config: &crate::model::QualityConfig,
    ingest: &IngestOptions,
    min_leaf_size: usize,
) -> Result<(ModelBundle, IngestReport)> {
    let raw = load_dataset(paths)?;
    let prepared = prepare(&raw, quality_config, ingest)?;
    let bundle = train_bundle(
        &prepared.training_set,
        &TrainOptions {
            min_leaf_size,
            grid_seconds: ingest.grid_seconds,
        },
        &raw.fingerprint,
    )?;
    Ok((bundle, prepared.report))
}
