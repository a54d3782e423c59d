//! Machine-state learning and quality analytics for production telemetry.
//!
//! Historical snapshots are labelled by their run's quality outcome, a
//! decision tree is fitted per parameter space, each leaf becomes a
//! hyperrectangle state scored by popularity and goodness, and pairs of
//! status and settings states (composites) drive real-time quality
//! prediction and settings recommendation.

pub mod analytics;
pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod states;
pub mod tree;

pub use analytics::{Prediction, QualityModel, Recommendation, Verdict};
pub use error::{Error, Result};
pub use model::{
    CompositeState, Interval, MachineSnapshot, MachineStatus, Manifest, ModelBundle, ParameterDef,
    ProcessSnapshot, ProductionRun, QualityConfig, State, StateSpace, Timestamp,
};
