//! Gait velocity estimation from in-home room transition times.
//!
//! The pipeline turns raw motion-sensor firings into room-to-room transition
//! times, summarizes them into per-day or per-window distributional features,
//! and regresses gait velocity on one feature at a time with a linear
//! ε-insensitive support vector regression. Ground truth comes from a ceiling
//! sensor line (daily means after mixture-based outlier removal) or from
//! clinic timed walks. A deterministic household simulator produces labeled
//! data for all of it.
//!
//! Module map:
//!
//! - [`ingest`]: event and exclusion CSV parsing, day partitioning
//! - [`transitions`]: transition extraction, dwell censoring, rare-pair filter
//! - [`groundtruth`]: sensor-line velocity, two-cluster split, daily means, Q-Q
//! - [`features`]: percentiles and the six transition-time summaries, scaling
//! - [`svr`]: ε-insensitive loss, SMO dual solver, prediction, C grid search
//! - [`evaluation`]: k-fold CV, best-pair tables, population aggregation
//! - [`simulator`]: labeled synthetic households
//! - [`pipeline`]: file-level stages shared by the CLI and the test suites

pub mod evaluation;
pub mod features;
pub mod groundtruth;
pub mod ingest;
pub mod pipeline;
pub mod simulator;
pub mod stats;
pub mod svr;
pub mod transitions;

pub use evaluation::{EvalCell, PopulationReport};
pub use features::{FeatureKind, FeatureSample, Scaler, Scope};
pub use groundtruth::{ClusterSplit, DailyVelocity, LineWalk, VelocityEstimate};
pub use ingest::{DayStream, ExclusionCalendar, SensorEvent, SensorKind};
pub use simulator::{HouseholdConfig, SimOutput, SimTruth};
pub use svr::{SvrModel, SvrParams, TrainingSet};
pub use transitions::{RoomPair, RoomPairCensus, TransitionRecord};
