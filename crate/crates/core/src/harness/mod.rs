//! Oracles, statistical suites, synthetic data and experiment drivers.

pub mod data;
pub mod experiments;
pub mod oracle;
pub mod report;
pub mod sites;
pub mod stats;
pub mod suites;

pub use data::{make_synthetic_dataset, Dataset, DatasetKind};
pub use experiments::{run_training_experiment, run_variance_study, ExperimentConfig};
pub use oracle::{pinv_project, PinvOracle, QuadraticOracle};
pub use report::{Check, Report};
pub use stats::EstimatorStats;
pub use suites::{run_equivalence_test, run_unbiasedness_test};
