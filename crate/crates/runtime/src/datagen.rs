//! Synthetic production history from a [`PlantSpec`]: the four ingest files
//! plus a matching quality configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use machstate_core::ingest::QualitySample;
use machstate_core::model::{
    Aggregation, Interval, Manifest, ParameterDef, ProductionRun, QualityConfig, Timestamp, Values,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::plant::{Gate, Plant, PlantSpec};

/// Values `low + k * step` for `k` in `0..count`, drawn uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GridSampler {
    pub low: f64,
    pub step: f64,
    pub count: u32,
}

impl GridSampler {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        self.low + self.step * f64::from(rng.random_range(0..self.count))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MaterialSpec {
    pub name: String,
    /// Added to the plant offsets for runs of this material.
    #[serde(default)]
    pub offset_shift: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DatasetSpec {
    pub plant: PlantSpec,
    pub runs: usize,
    pub ticks_per_run: usize,
    /// Silent ticks between runs.
    pub gap_ticks: usize,
    pub grid_seconds: f64,
    pub start: Timestamp,
    /// One sampler per plant setting, in order.
    pub samplers: Vec<GridSampler>,
    pub materials: Vec<MaterialSpec>,
    /// Quality samples per run, spread over its second half.
    pub quality_samples_per_run: usize,
    pub quality_noise_sigma: f64,
    /// Settings rows are written on change and at least this often.
    pub setting_heartbeat_ticks: usize,
    /// Chance that a run opens on different settings and switches early on.
    pub change_probability: f64,
    /// Noise-free ticks run before each run so it starts near steady state.
    pub settle_ticks: usize,
    pub aggregation: Aggregation,
    #[serde(default)]
    pub names: BTreeMap<String, String>,
    #[serde(default)]
    pub units: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct GeneratedDataset {
    pub manifest: Manifest,
    pub observations_csv: String,
    pub runs: Vec<ProductionRun>,
    pub quality: Vec<QualitySample>,
    pub quality_config: QualityConfig,
    /// Settings held for the bulk of each run.
    pub run_settings: BTreeMap<String, Values>,
}

impl DatasetSpec {
    pub fn manifest(&self) -> Manifest {
        let p = &self.plant;
        let named = |mut d: ParameterDef| {
            if let Some(n) = self.names.get(&d.id) {
                d = d.with_name(n.clone());
            }
            if let Some(u) = self.units.get(&d.id) {
                d = d.with_units(u.clone());
            }
            d
        };
        let mut params: Vec<ParameterDef> = p
            .visible_sensor_ids()
            .into_iter()
            .map(|id| named(ParameterDef::sensor(id)))
            .collect();
        params.extend(p.setting_ids.iter().map(|id| named(ParameterDef::setting(id.clone()))));
        Manifest::new(params).expect("plant ids are unique")
    }

    pub fn quality_config(&self) -> QualityConfig {
        let band = self.plant.quality_band;
        QualityConfig::three_band(band.low(), band.high(), self.aggregation).expect("finite band")
    }
}

fn grid_time(start: Timestamp, grid_ms: i64, tick: usize) -> Timestamp {
    start.plus_millis(grid_ms * tick as i64)
}

/// Generates every run in sequence from one master seed.
pub fn generate(spec: &DatasetSpec, seed: u64) -> Result<GeneratedDataset, crate::plant::PlantError> {
    spec.plant.validate()?;
    if spec.samplers.len() != spec.plant.setting_ids.len() || spec.materials.is_empty() {
        return Err(crate::plant::PlantError::Invalid(
            "need one sampler per setting and at least one material".into(),
        ));
    }
    let manifest = spec.manifest();
    let visible: Vec<usize> = spec
        .plant
        .visible_sensor_ids()
        .iter()
        .map(|id| spec.plant.sensor_index(id).expect("visible sensor"))
        .collect();
    let grid_ms = (spec.grid_seconds * 1000.0).round() as i64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let quality_noise = Normal::new(0.0, spec.quality_noise_sigma).expect("sigma is finite");
    let heartbeat = spec.setting_heartbeat_ticks.max(1);

    let mut csv = String::from("timestamp");
    for id in manifest.params().iter().map(|p| &p.id) {
        csv.push(',');
        csv.push_str(id);
    }
    csv.push('\n');

    let mut runs = Vec::with_capacity(spec.runs);
    let mut quality = Vec::new();
    let mut run_settings = BTreeMap::new();
    let mut tick = 0usize;
    for r in 0..spec.runs {
        let material = &spec.materials[r % spec.materials.len()];
        let batch_id = format!("B{:04}", r + 1);
        let mut plant_spec = spec.plant.clone();
        for (id, shift) in &material.offset_shift {
            if let Some(i) = plant_spec.sensor_index(id) {
                plant_spec.offsets[i] += shift;
            }
        }
        let final_settings: Vec<f64> = spec.samplers.iter().map(|s| s.sample(&mut rng)).collect();
        let (opening, switch_at) = if rng.random_bool(spec.change_probability) {
            let opening: Vec<f64> = spec.samplers.iter().map(|s| s.sample(&mut rng)).collect();
            let latest = (spec.ticks_per_run / 10).max(2);
            (opening, rng.random_range(1..latest))
        } else {
            (final_settings.clone(), 0)
        };
        let applied = |k: usize| if k < switch_at { &opening } else { &final_settings };
        let mut plant = Plant::new(plant_spec, rng.next_u64())?;
        plant.settle(&opening, spec.settle_ticks);

        let first_q = spec.ticks_per_run / 2;
        let q_every = ((spec.ticks_per_run - first_q) / spec.quality_samples_per_run.max(1)).max(1);
        let start = grid_time(spec.start, grid_ms, tick);
        for k in 0..spec.ticks_per_run {
            let t = grid_time(spec.start, grid_ms, tick + k);
            let h = applied(k);
            let _ = write!(csv, "{}", t.to_rfc3339());
            for &i in &visible {
                let _ = write!(csv, ",{}", plant.sensors()[i]);
            }
            let write_settings = k == 0 || k % heartbeat == 0 || applied(k - 1) != h;
            for v in h {
                if write_settings {
                    let _ = write!(csv, ",{v}");
                } else {
                    csv.push(',');
                }
            }
            csv.push('\n');
            if k >= first_q && (k - first_q).is_multiple_of(q_every) && quality.len() < (r + 1) * spec.quality_samples_per_run {
                quality.push(QualitySample {
                    batch_id: batch_id.clone(),
                    t,
                    measurement: plant.quality() + quality_noise.sample(&mut rng),
                });
            }
            plant.step(applied(k + 1));
        }
        let end = grid_time(spec.start, grid_ms, tick + spec.ticks_per_run - 1);
        runs.push(ProductionRun {
            batch_id: batch_id.clone(),
            start,
            end,
            material_type: Some(material.name.clone()),
        });
        run_settings.insert(
            batch_id,
            spec.plant
                .setting_ids
                .iter()
                .cloned()
                .zip(final_settings.iter().copied())
                .collect(),
        );
        tick += spec.ticks_per_run + spec.gap_ticks;
    }
    Ok(GeneratedDataset {
        manifest,
        observations_csv: csv,
        runs,
        quality,
        quality_config: spec.quality_config(),
        run_settings,
    })
}

impl GeneratedDataset {
    pub fn runs_csv(&self) -> String {
        let mut out = String::from("batch_id,start,end,material_type\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.batch_id,
                r.start.to_rfc3339(),
                r.end.to_rfc3339(),
                r.material_type.as_deref().unwrap_or("")
            );
        }
        out
    }

    pub fn quality_csv(&self) -> String {
        let mut out = String::from("batch_id,timestamp,measurement\n");
        for q in &self.quality {
            let _ = writeln!(out, "{},{},{}", q.batch_id, q.t.to_rfc3339(), q.measurement);
        }
        out
    }

    /// Writes `manifest.json`, `observations.csv`, `runs.csv`, `quality.csv`
    /// and `quality_config.json` into `dir`.
    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), pretty_json(&self.manifest))?;
        std::fs::write(dir.join("observations.csv"), &self.observations_csv)?;
        std::fs::write(dir.join("runs.csv"), self.runs_csv())?;
        std::fs::write(dir.join("quality.csv"), self.quality_csv())?;
        std::fs::write(dir.join("quality_config.json"), pretty_json(&self.quality_config))?;
        Ok(())
    }
}

/// Pretty JSON with a trailing newline.
pub fn pretty_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn sensor_row(n_settings: usize, gains: &[(usize, f64)]) -> Vec<f64> {
    let mut row = vec![0.0; n_settings];
    for &(j, g) in gains {
        row[j] = g;
    }
    row
}

/// Plant where target quality holds exactly when `h1` is in `(100, 110]`
/// and `s1 <= 50`.
///
/// - `s1` follows `h2` one-for-one at steady state.
/// - `s2` follows `h1` at half gain; `s3` is unrelated noise.
/// - The hidden quality sensor settles at `0.3 * h1 + 35`, so the band
///   `(65, 68]` is `h1` in `(100, 110]`, minus 20 while `s1 > 50`.
/// - `h3` has no effect.
pub fn regime_plant() -> PlantSpec {
    let settings = ["h1", "h2", "h3"];
    PlantSpec {
        sensor_ids: ["s1", "s2", "s3", "quality"].map(String::from).to_vec(),
        setting_ids: settings.map(String::from).to_vec(),
        decay: vec![0.5, 0.8, 0.9, 0.5],
        response: vec![
            sensor_row(3, &[(1, 0.5)]),
            sensor_row(3, &[(0, 0.1)]),
            sensor_row(3, &[]),
            sensor_row(3, &[(0, 0.15)]),
        ],
        offsets: vec![0.0, 0.0, 2.0, 17.5],
        noise_sigma: vec![0.1, 0.2, 0.5, 0.02],
        lag_ticks: vec![1, 0, 0],
        gates: vec![Gate {
            sensor: "s1".into(),
            above: 50.0,
            target: "quality".into(),
            shift: -10.0,
        }],
        quality_sensor_id: "quality".into(),
        quality_band: Interval::new(65.0, 68.0).expect("valid band"),
        hidden_sensor_ids: vec!["quality".into()],
        initial_sensors: vec![45.0, 52.5, 20.0, 66.5],
        initial_settings: vec![105.0, 45.0, 3.0],
    }
}

pub const MATERIALS: [&str; 3] = ["Yeast type 1", "Yeast type 2", "Yeast type 3"];

fn materials(shifts: &[&[(&str, f64)]]) -> Vec<MaterialSpec> {
    MATERIALS
        .iter()
        .zip(shifts)
        .map(|(name, s)| MaterialSpec {
            name: name.to_string(),
            offset_shift: s.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        })
        .collect()
}

/// 200 runs of the regime plant on a 10 s grid. Setting grids avoid the
/// regime boundaries by a quarter step.
pub fn regime_dataset_spec() -> DatasetSpec {
    DatasetSpec {
        plant: regime_plant(),
        runs: 200,
        ticks_per_run: 100,
        gap_ticks: 10,
        grid_seconds: 10.0,
        start: Timestamp::parse_rfc3339("2024-01-01T00:00:00Z").expect("valid"),
        samplers: vec![
            GridSampler { low: 90.25, step: 0.5, count: 60 },
            GridSampler { low: 40.5, step: 1.0, count: 20 },
            GridSampler { low: 1.0, step: 1.0, count: 5 },
        ],
        materials: materials(&[&[], &[], &[]]),
        quality_samples_per_run: 8,
        quality_noise_sigma: 0.05,
        setting_heartbeat_ticks: 3,
        change_probability: 0.1,
        settle_ticks: 100,
        aggregation: Aggregation::Mean,
        names: BTreeMap::new(),
        units: BTreeMap::new(),
    }
}

const SENSOR_NAMES: [&str; 23] = [
    "Temperature 1",
    "Temperature 2",
    "Temperature 3",
    "Temperature 4",
    "Temperature 5",
    "Temperature 6",
    "Pressure 2",
    "Pressure 3",
    "Pressure 4",
    "Density",
    "Flow 1",
    "Flow 2",
    "Flow 3",
    "Level 1",
    "Level 2",
    "Vacuum 1",
    "Vacuum 2",
    "Steam flow",
    "Condensate flow",
    "Feed solids",
    "Motor current 1",
    "Motor current 2",
    "Conductivity",
];

const SETTING_NAMES: [&str; 7] = [
    "Pressure 1",
    "Production solids",
    "Feed rate",
    "Steam setpoint",
    "Vacuum setpoint",
    "Pump speed 1",
    "Pump speed 2",
];

/// Reference-scale plant: 23 reported sensors and 7 settings, plus a hidden
/// product-solids sensor. Sensor `i` tracks setting `i mod 7`. Quality rises
/// with `Pressure 1` and `Production solids`, and drops while `Temperature 1`
/// runs hot.
pub fn reference_plant() -> PlantSpec {
    let n_set = SETTING_NAMES.len();
    let mut sensor_ids: Vec<String> = (1..=SENSOR_NAMES.len()).map(|i| format!("s{i:02}")).collect();
    sensor_ids.push("solids".into());
    let mut decay = Vec::new();
    let mut response = Vec::new();
    let mut offsets = Vec::new();
    let mut noise = Vec::new();
    let mut initial = Vec::new();
    for i in 0..SENSOR_NAMES.len() {
        let a = 0.5 + 0.04 * (i % 10) as f64;
        let gain = 0.5 + 0.1 * (i % 4) as f64;
        decay.push(a);
        response.push(sensor_row(n_set, &[(i % n_set, (1.0 - a) * gain)]));
        offsets.push((1.0 - a) * (i as f64));
        noise.push(0.2);
        initial.push(50.0);
    }
    decay.push(0.5);
    response.push(sensor_row(n_set, &[(0, 0.5 * 0.3), (1, 0.5 * 0.2)]));
    offsets.push(0.5 * 26.0);
    noise.push(0.05);
    initial.push(66.0);
    PlantSpec {
        sensor_ids,
        setting_ids: (1..=n_set).map(|j| format!("h{j}")).collect(),
        decay,
        response,
        offsets,
        noise_sigma: noise,
        lag_ticks: vec![1, 1, 0, 2, 0, 0, 1],
        gates: vec![Gate {
            sensor: "s01".into(),
            above: 70.0,
            target: "solids".into(),
            shift: -5.0,
        }],
        quality_sensor_id: "solids".into(),
        quality_band: Interval::new(65.0, 68.0).expect("valid band"),
        hidden_sensor_ids: vec!["solids".into()],
        initial_sensors: initial,
        initial_settings: vec![105.0, 42.0, 50.0, 50.0, 50.0, 50.0, 50.0],
    }
}

/// History for the reference plant: three yeast types with shifted offsets.
pub fn reference_dataset_spec() -> DatasetSpec {
    let plant = reference_plant();
    let mut names = BTreeMap::new();
    for (id, name) in plant.sensor_ids.iter().zip(SENSOR_NAMES) {
        names.insert(id.clone(), name.to_string());
    }
    for (id, name) in plant.setting_ids.iter().zip(SETTING_NAMES) {
        names.insert(id.clone(), name.to_string());
    }
    let mut samplers = vec![
        GridSampler { low: 95.25, step: 0.5, count: 40 },
        GridSampler { low: 38.1, step: 0.2, count: 40 },
    ];
    samplers.extend((2..SETTING_NAMES.len()).map(|_| GridSampler { low: 40.0, step: 1.0, count: 20 }));
    DatasetSpec {
        plant,
        runs: 90,
        ticks_per_run: 120,
        gap_ticks: 12,
        grid_seconds: 10.0,
        start: Timestamp::parse_rfc3339("2024-01-01T00:00:00Z").expect("valid"),
        samplers,
        materials: materials(&[&[], &[("solids", 0.3), ("s10", 0.5)], &[("solids", -0.3), ("s02", 1.0)]]),
        quality_samples_per_run: 6,
        quality_noise_sigma: 0.1,
        setting_heartbeat_ticks: 4,
        change_probability: 0.3,
        settle_ticks: 100,
        aggregation: Aggregation::Mean,
        names,
        units: BTreeMap::new(),
    }
}
