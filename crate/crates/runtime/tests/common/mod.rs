#![allow(dead_code)]

use std::sync::Arc;

use machstate_core::ingest::{parse_dataset, prepare, IngestOptions, PreparedData};
use machstate_core::model::Interval;
use machstate_core::pipeline::{train_bundle, TrainOptions};
use machstate_core::{ModelBundle, QualityModel};
use machstate_runtime::datagen::{generate, regime_dataset_spec, DatasetSpec, GeneratedDataset, GridSampler};
use machstate_runtime::plant::PlantSpec;

pub struct Trained {
    pub dataset: GeneratedDataset,
    pub prepared: PreparedData,
    pub bundle: ModelBundle,
    pub model: Arc<QualityModel>,
}

pub fn prepare_generated(ds: &GeneratedDataset) -> PreparedData {
    let manifest = serde_json::to_vec(&ds.manifest).unwrap();
    let raw = parse_dataset(
        &manifest[..],
        ds.observations_csv.as_bytes(),
        ds.runs_csv().as_bytes(),
        ds.quality_csv().as_bytes(),
    )
    .unwrap();
    prepare(&raw, &ds.quality_config, &IngestOptions::default()).unwrap()
}

pub fn train_spec(spec: &DatasetSpec, seed: u64, min_leaf_size: usize) -> Trained {
    let dataset = generate(spec, seed).unwrap();
    let prepared = prepare_generated(&dataset);
    let opts = TrainOptions {
        min_leaf_size,
        grid_seconds: spec.grid_seconds,
    };
    let bundle = train_bundle(&prepared.training_set, &opts, "test").unwrap();
    let model = Arc::new(QualityModel::new(bundle.clone()).unwrap());
    Trained {
        dataset,
        prepared,
        bundle,
        model,
    }
}

/// The regime dataset cut down to `runs` runs.
pub fn small_regime(runs: usize, seed: u64) -> Trained {
    let spec = DatasetSpec {
        runs,
        ..regime_dataset_spec()
    };
    train_spec(&spec, seed, 10)
}

/// One sensor that copies one setting after `lag` ticks, no noise.
pub fn echo_plant(lag: u32) -> PlantSpec {
    PlantSpec {
        sensor_ids: vec!["s1".into()],
        setting_ids: vec!["h1".into()],
        decay: vec![0.0],
        response: vec![vec![1.0]],
        offsets: vec![0.0],
        noise_sigma: vec![0.0],
        lag_ticks: vec![lag],
        gates: Vec::new(),
        quality_sensor_id: "s1".into(),
        quality_band: Interval::new(4.0, 6.0).unwrap(),
        hidden_sensor_ids: Vec::new(),
        initial_sensors: vec![1.0],
        initial_settings: vec![1.0],
    }
}

/// Echo plant with settings 0..10; target when the setting is in (4, 6].
pub fn echo_trained(lag: u32) -> Trained {
    let spec = DatasetSpec {
        plant: echo_plant(lag),
        runs: 30,
        ticks_per_run: 20,
        gap_ticks: 2,
        samplers: vec![GridSampler {
            low: 0.5,
            step: 1.0,
            count: 10,
        }],
        materials: regime_dataset_spec().materials[..1].to_vec(),
        change_probability: 0.0,
        names: Default::default(),
        units: Default::default(),
        ..regime_dataset_spec()
    };
    train_spec(&spec, 1, 1)
}
