//! Command-line entry points.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use machstate_core::analytics::{write_predictions_csv, write_recommendations_csv, DEFAULT_DECISION_THRESHOLD};
use machstate_core::evaluation::{ascii_table, sweep_min_leaf_size, write_report, RunSplit, SweepConfig};
use machstate_core::ingest::{
    align_snapshots, derive_new_settings_single_run, load_dataset, parse_observations, prepare, AlignConfig,
    DatasetPaths, IngestOptions, DEFAULT_GRID_SECONDS, DEFAULT_STALENESS_STEPS,
};
use machstate_core::pipeline::{train_bundle, TrainOptions};
use machstate_core::states::export_states_csv;
use machstate_core::{MachineSnapshot, ModelBundle, QualityConfig, QualityModel, StateSpace};

use crate::datagen::{generate, pretty_json, reference_dataset_spec, regime_dataset_spec, DatasetSpec};
use crate::plant::PlantSpec;
use crate::server::{serve, AppState};
use crate::session::{read_log, run_headless, verify_log, ScriptAction, Session, SessionConfig};

pub type CliResult<T = ()> = std::result::Result<T, Box<dyn std::error::Error + Send + Sync>>;

/// Leaf size used by `train` when none is given.
pub const DEFAULT_MIN_LEAF_SIZE: usize = 30;

#[derive(Debug, Parser)]
#[command(name = "machstate", version, about = "Machine-state quality models: train, evaluate, serve")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Observations CSV.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub quality: PathBuf,
    /// Defaults to quality_config.json next to the manifest.
    #[arg(long)]
    pub quality_config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_GRID_SECONDS)]
    pub grid_seconds: f64,
    #[arg(long, default_value_t = DEFAULT_STALENESS_STEPS)]
    pub staleness_steps: u32,
}

impl DataArgs {
    fn paths(&self) -> DatasetPaths {
        DatasetPaths {
            manifest: self.manifest.clone(),
            observations: self.data.clone(),
            runs: self.runs.clone(),
            quality: self.quality.clone(),
        }
    }

    fn quality_config(&self) -> CliResult<QualityConfig> {
        let path = match &self.quality_config {
            Some(p) => p.clone(),
            None => self
                .manifest
                .parent()
                .unwrap_or(Path::new("."))
                .join("quality_config.json"),
        };
        let qc: QualityConfig = serde_json::from_reader(BufReader::new(
            File::open(&path).map_err(|e| format!("{}: {e}", path.display()))?,
        ))?;
        qc.validate()?;
        Ok(qc)
    }

    fn ingest_options(&self) -> IngestOptions {
        IngestOptions {
            grid_seconds: self.grid_seconds,
            staleness_steps: self.staleness_steps,
            window: None,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    /// Three sensors, three settings; target iff h1 in (100, 110] and s1 <= 50.
    Regime,
    /// 23 sensors and 7 settings.
    Reference,
}

impl Preset {
    fn dataset(self) -> DatasetSpec {
        match self {
            Preset::Regime => regime_dataset_spec(),
            Preset::Reference => reference_dataset_spec(),
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SpaceArg {
    Status,
    Settings,
}

impl From<SpaceArg> for StateSpace {
    fn from(s: SpaceArg) -> Self {
        match s {
            SpaceArg::Status => StateSpace::Status,
            SpaceArg::Settings => StateSpace::NewSettings,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Temporal,
    Random,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset (manifest, observations, runs, quality, quality config).
    Generate {
        #[arg(long, value_enum, default_value = "regime")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the preset's run count.
        #[arg(long = "run-count")]
        run_count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ingest, fit both trees, score states and composites, write a bundle.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = DEFAULT_MIN_LEAF_SIZE)]
        min_leaf_size: usize,
        /// Output bundle path.
        #[arg(long)]
        bundle: PathBuf,
        /// Also write the ingest report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Sweep minimum leaf sizes on a train/test split of runs.
    Evaluate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [10usize, 30, 50, 70, 90])]
        min_leaf_size: Vec<usize>,
        #[arg(long, default_value_t = DEFAULT_DECISION_THRESHOLD)]
        threshold: f64,
        #[arg(long, value_enum, default_value = "temporal")]
        split: SplitArg,
        #[arg(long, default_value_t = 0.75)]
        train_fraction: f64,
        /// Seed for the random split.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pool all material types into one group.
        #[arg(long)]
        no_stratify: bool,
        #[arg(long, default_value_t = 0.05)]
        ccdf_step: f64,
        /// Directory for sweep_report.json and the figure CSVs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the states of one space as a table of ranges.
    ExportStates {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum, default_value = "status")]
        space: SpaceArg,
        /// Defaults to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict quality for every aligned snapshot of an observations CSV.
    Predict {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_DECISION_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recommend settings for every aligned snapshot of an observations CSV.
    Recommend {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Static console assets.
        #[arg(long)]
        static_dir: Option<PathBuf>,
        /// Where session logs are written.
        #[arg(long, default_value = "sessions")]
        log_dir: PathBuf,
    },
    /// Run a synthetic session without pacing and write its log.
    Simulate {
        #[arg(long)]
        bundle: PathBuf,
        /// Plant spec JSON; defaults to the preset's plant.
        #[arg(long)]
        plant: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "regime")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        ticks: u64,
        /// JSON array of scripted actions.
        #[arg(long)]
        script: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_DECISION_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        recommend_each_tick: bool,
        /// Session log (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute every prediction in a session log and report mismatches.
    VerifyLog {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        log: PathBuf,
    },
    /// Print a bundle's tree.
    DumpTree {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum, default_value = "status")]
        space: SpaceArg,
    },
}

fn output(path: &Option<PathBuf>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn load_model(path: &Path) -> CliResult<QualityModel> {
    let bundle = ModelBundle::load(path)?;
    let violations = bundle.validate();
    if !violations.is_empty() {
        return Err(format!("invalid bundle: {}", violations.join("; ")).into());
    }
    Ok(QualityModel::new(bundle)?)
}

/// Aligns an observations CSV on the bundle grid as a single run.
pub fn batch_snapshots(bundle: &ModelBundle, data: &Path) -> CliResult<Vec<MachineSnapshot>> {
    let (sensors, settings) = parse_observations(BufReader::new(File::open(data)?), &bundle.manifest)?;
    let (mut snaps, _) = align_snapshots(&sensors, &settings, AlignConfig::from_seconds(bundle.grid_seconds)?)?;
    derive_new_settings_single_run(&mut snaps);
    Ok(snaps)
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::Generate {
            preset,
            seed,
            run_count,
            out,
        } => {
            let mut spec = preset.dataset();
            if let Some(n) = run_count {
                spec.runs = n;
            }
            let ds = generate(&spec, seed)?;
            ds.write(&out)?;
            std::fs::write(out.join("plant.json"), pretty_json(&spec.plant))?;
            eprintln!("wrote {} runs to {}", ds.runs.len(), out.display());
        }
        Command::Train {
            data,
            min_leaf_size,
            bundle,
            report,
        } => {
            let qc = data.quality_config()?;
            let raw = load_dataset(&data.paths())?;
            let prepared = prepare(&raw, &qc, &data.ingest_options())?;
            let opts = TrainOptions {
                min_leaf_size,
                grid_seconds: data.grid_seconds,
            };
            let b = train_bundle(&prepared.training_set, &opts, &raw.fingerprint)?;
            b.save(&bundle)?;
            if let Some(r) = report {
                std::fs::write(r, pretty_json(&prepared.report))?;
            }
            for w in &prepared.report.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!(
                "trained on {} samples: {} status states, {} settings states, {} supported composites -> {}",
                b.training_sample_count,
                b.status_states.len(),
                b.settings_states.len(),
                b.supported_composite_count(),
                bundle.display()
            );
        }
        Command::Evaluate {
            data,
            min_leaf_size,
            threshold,
            split,
            train_fraction,
            seed,
            no_stratify,
            ccdf_step,
            out,
        } => {
            let qc = data.quality_config()?;
            let raw = load_dataset(&data.paths())?;
            let prepared = prepare(&raw, &qc, &data.ingest_options())?;
            let cfg = SweepConfig {
                leaf_sizes: min_leaf_size,
                material_types: None,
                stratify: !no_stratify,
                split: match split {
                    SplitArg::Temporal => RunSplit::Temporal { train_fraction },
                    SplitArg::Random => RunSplit::Random { train_fraction, seed },
                },
                decision_threshold: threshold,
                ccdf_step,
                grid_seconds: data.grid_seconds,
            };
            let report = sweep_min_leaf_size(&prepared.training_set, &cfg, &raw.fingerprint)?;
            write_report(&report, &out)?;
            print!("{}", ascii_table(&report));
        }
        Command::ExportStates { bundle, space, out } => {
            let b = ModelBundle::load(&bundle)?;
            let states = match StateSpace::from(space) {
                StateSpace::Status => &b.status_states,
                StateSpace::NewSettings => &b.settings_states,
            };
            export_states_csv(states, &b.manifest, output(&out)?)?;
        }
        Command::Predict {
            bundle,
            data,
            threshold,
            out,
        } => {
            let model = load_model(&bundle)?;
            let snaps = batch_snapshots(model.bundle(), &data)?;
            let rows = snaps
                .iter()
                .map(|s| Ok((s.t, model.predict(&s.process(), threshold)?)))
                .collect::<machstate_core::Result<Vec<_>>>()?;
            write_predictions_csv(&rows, output(&out)?)?;
        }
        Command::Recommend { bundle, data, out } => {
            let model = load_model(&bundle)?;
            let snaps = batch_snapshots(model.bundle(), &data)?;
            let rows: Vec<_> = snaps.iter().map(|s| (s.t, model.recommend(&s.status()))).collect();
            let ids = model.bundle().manifest.setting_ids();
            write_recommendations_csv(&rows, &ids, output(&out)?)?;
        }
        Command::Serve {
            bundle,
            port,
            static_dir,
            log_dir,
        } => {
            let model = Arc::new(load_model(&bundle)?);
            let state = Arc::new(AppState::new(model).with_log_dir(log_dir));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(state, port, static_dir))?;
        }
        Command::Simulate {
            bundle,
            plant,
            preset,
            seed,
            ticks,
            script,
            threshold,
            recommend_each_tick,
            out,
        } => {
            let model = Arc::new(load_model(&bundle)?);
            let spec: PlantSpec = match plant {
                Some(p) => serde_json::from_reader(BufReader::new(File::open(p)?))?,
                None => preset.dataset().plant,
            };
            let script: Vec<ScriptAction> = match script {
                Some(p) => serde_json::from_reader(BufReader::new(File::open(p)?))?,
                None => Vec::new(),
            };
            let config = SessionConfig {
                bundle_path: Some(bundle),
                recommend_each_tick,
                decision_threshold: threshold,
                ..SessionConfig::synthetic(spec, seed)
            };
            let file = BufWriter::new(File::create(&out)?);
            let mut session = Session::with_writer("simulate", config, model, Box::new(file))?;
            let events = run_headless(&mut session, ticks, &script)?;
            eprintln!("{} ticks -> {}", events.len(), out.display());
        }
        Command::VerifyLog { bundle, log } => {
            let model = load_model(&bundle)?;
            let entries = read_log(BufReader::new(File::open(log)?))?;
            let report = verify_log(&entries, &model)?;
            println!("{}", pretty_json(&report));
            if !report.mismatches.is_empty() {
                return Err(format!("{} mismatched ticks", report.mismatches.len()).into());
            }
        }
        Command::DumpTree { bundle, space } => {
            let b = ModelBundle::load(&bundle)?;
            let tree = match StateSpace::from(space) {
                StateSpace::Status => &b.status_tree,
                StateSpace::NewSettings => &b.settings_tree,
            };
            print!("{}", tree.dump());
        }
    }
    Ok(())
}
