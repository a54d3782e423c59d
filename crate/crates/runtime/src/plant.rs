//! Synthetic linear-with-lag plant.
//!
//! `s(t+1) = A s(t) + B h_eff(t) + c + g(s(t)) + e`, where `A` is diagonal,
//! `h_eff` delays each new setting by its lag, `g` adds a fixed offset shift
//! to a sensor while a gating sensor sits above a limit, and `e` is Gaussian
//! noise from a seeded generator.

use std::collections::VecDeque;

use machstate_core::model::{Interval, Values};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PlantError {
    #[error("invalid plant spec: {0}")]
    Invalid(String),
    #[error("unknown setting: {0}")]
    UnknownSetting(String),
}

/// While `sensor > above`, `target` receives `shift` on top of its offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Gate {
    pub sensor: String,
    pub above: f64,
    pub target: String,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PlantSpec {
    pub sensor_ids: Vec<String>,
    pub setting_ids: Vec<String>,
    /// Diagonal of `A`, each in `[0, 1)`.
    pub decay: Vec<f64>,
    /// `B[sensor][setting]`.
    pub response: Vec<Vec<f64>>,
    pub offsets: Vec<f64>,
    pub noise_sigma: Vec<f64>,
    pub lag_ticks: Vec<u32>,
    #[serde(default)]
    pub gates: Vec<Gate>,
    /// Sensor whose run-average value is banded into quality labels.
    pub quality_sensor_id: String,
    pub quality_band: Interval,
    /// Sensors simulated but not reported as observations.
    #[serde(default)]
    pub hidden_sensor_ids: Vec<String>,
    pub initial_sensors: Vec<f64>,
    pub initial_settings: Vec<f64>,
}

impl PlantSpec {
    pub fn validate(&self) -> Result<(), PlantError> {
        let bad = |m: String| Err(PlantError::Invalid(m));
        let (ns, nh) = (self.sensor_ids.len(), self.setting_ids.len());
        let per_sensor = [
            ("decay", self.decay.len()),
            ("offsets", self.offsets.len()),
            ("noiseSigma", self.noise_sigma.len()),
            ("initialSensors", self.initial_sensors.len()),
            ("response rows", self.response.len()),
        ];
        for (name, len) in per_sensor {
            if len != ns {
                return bad(format!("{name} has {len} entries for {ns} sensors"));
            }
        }
        if self.lag_ticks.len() != nh || self.initial_settings.len() != nh {
            return bad(format!("lagTicks/initialSettings must have {nh} entries"));
        }
        if self.response.iter().any(|row| row.len() != nh) {
            return bad(format!("every response row needs {nh} gains"));
        }
        let mut ids: Vec<&String> = self.sensor_ids.iter().chain(&self.setting_ids).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate parameter id".into());
        }
        if let Some(a) = self.decay.iter().find(|a| !(0.0..1.0).contains(*a)) {
            return bad(format!("decay {a} outside [0, 1)"));
        }
        if self.noise_sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return bad("noise sigma must be finite and non-negative".into());
        }
        let all_finite = self
            .offsets
            .iter()
            .chain(self.response.iter().flatten())
            .chain(&self.initial_sensors)
            .chain(&self.initial_settings)
            .all(|v| v.is_finite());
        if !all_finite {
            return bad("non-finite coefficient".into());
        }
        let sensor = |id: &str| self.sensor_ids.iter().any(|s| s == id);
        if !sensor(&self.quality_sensor_id) {
            return bad(format!("quality sensor {} is not a sensor", self.quality_sensor_id));
        }
        for g in &self.gates {
            if !sensor(&g.sensor) || !sensor(&g.target) {
                return bad(format!("gate refers to unknown sensor: {} -> {}", g.sensor, g.target));
            }
        }
        for h in &self.hidden_sensor_ids {
            if !sensor(h) {
                return bad(format!("hidden sensor {h} is not a sensor"));
            }
        }
        Ok(())
    }

    pub fn sensor_index(&self, id: &str) -> Option<usize> {
        self.sensor_ids.iter().position(|s| s == id)
    }

    pub fn setting_index(&self, id: &str) -> Option<usize> {
        self.setting_ids.iter().position(|s| s == id)
    }

    /// Sensors reported as observations, in spec order.
    pub fn visible_sensor_ids(&self) -> Vec<String> {
        self.sensor_ids
            .iter()
            .filter(|s| !self.hidden_sensor_ids.contains(s))
            .cloned()
            .collect()
    }

    pub fn max_lag(&self) -> usize {
        self.lag_ticks.iter().copied().max().unwrap_or(0) as usize
    }
}

/// One plant transition. `effective` are the lagged settings acting on this step.
pub fn synth_step(spec: &PlantSpec, sensors: &[f64], effective: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut shift = vec![0.0; sensors.len()];
    for g in &spec.gates {
        let (Some(src), Some(dst)) = (spec.sensor_index(&g.sensor), spec.sensor_index(&g.target)) else {
            continue;
        };
        if sensors[src] > g.above {
            shift[dst] += g.shift;
        }
    }
    (0..sensors.len())
        .map(|i| {
            let drive: f64 = spec.response[i]
                .iter()
                .zip(effective)
                .map(|(b, h)| b * h)
                .sum();
            let z: f64 = StandardNormal.sample(rng);
            spec.decay[i] * sensors[i] + drive + spec.offsets[i] + shift[i] + spec.noise_sigma[i] * z
        })
        .collect()
}

/// A running plant: current sensors, history of new settings for lags, and
/// the noise generator.
#[derive(Debug, Clone)]
pub struct Plant {
    spec: PlantSpec,
    sensors: Vec<f64>,
    /// New settings, most recent first; long enough for the largest lag.
    history: VecDeque<Vec<f64>>,
    rng: ChaCha8Rng,
}

impl Plant {
    pub fn new(spec: PlantSpec, seed: u64) -> Result<Self, PlantError> {
        spec.validate()?;
        let history = std::iter::repeat_n(spec.initial_settings.clone(), spec.max_lag() + 1).collect();
        Ok(Plant {
            sensors: spec.initial_sensors.clone(),
            history,
            rng: ChaCha8Rng::seed_from_u64(seed),
            spec,
        })
    }

    pub fn spec(&self) -> &PlantSpec {
        &self.spec
    }

    pub fn sensors(&self) -> &[f64] {
        &self.sensors
    }

    pub fn sensor(&self, id: &str) -> Option<f64> {
        self.spec.sensor_index(id).map(|i| self.sensors[i])
    }

    pub fn quality(&self) -> f64 {
        self.sensor(&self.spec.quality_sensor_id).expect("validated")
    }

    /// Reported sensor values keyed by id.
    pub fn visible_sensors(&self) -> Values {
        self.spec
            .sensor_ids
            .iter()
            .zip(&self.sensors)
            .filter(|(id, _)| !self.spec.hidden_sensor_ids.contains(id))
            .map(|(id, v)| (id.clone(), *v))
            .collect()
    }

    /// Settings acting on the next transition: setting `j` uses the value
    /// chosen `lag_j` ticks ago.
    pub fn effective_settings(&self) -> Vec<f64> {
        self.spec
            .lag_ticks
            .iter()
            .enumerate()
            .map(|(j, &lag)| self.history[lag as usize][j])
            .collect()
    }

    /// Records this tick's new settings and advances the sensors one tick.
    pub fn step(&mut self, new_settings: &[f64]) {
        self.history.pop_back();
        self.history.push_front(new_settings.to_vec());
        let eff = self.effective_settings();
        self.sensors = synth_step(&self.spec, &self.sensors, &eff, &mut self.rng);
    }

    /// Holds `settings` without noise for `ticks` transitions so the sensors
    /// approach their steady state. The noise generator is not advanced.
    pub fn settle(&mut self, settings: &[f64], ticks: usize) {
        let quiet = PlantSpec {
            noise_sigma: vec![0.0; self.spec.noise_sigma.len()],
            ..self.spec.clone()
        };
        let mut scratch = ChaCha8Rng::seed_from_u64(0);
        for h in self.history.iter_mut() {
            h.copy_from_slice(settings);
        }
        for _ in 0..ticks {
            self.sensors = synth_step(&quiet, &self.sensors, settings, &mut scratch);
        }
    }

    /// Named settings to a dense vector, filling gaps from `base`.
    pub fn dense_settings(&self, values: &Values, base: &[f64]) -> Result<Vec<f64>, PlantError> {
        let mut out = base.to_vec();
        for (id, v) in values {
            let j = self
                .spec
                .setting_index(id)
                .ok_or_else(|| PlantError::UnknownSetting(id.clone()))?;
            out[j] = *v;
        }
        Ok(out)
    }
}
