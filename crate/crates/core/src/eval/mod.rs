//! Metrics and the three scripted experiments: single-machine monitoring,
//! cross-machine transfer and the learned-versus-handcrafted feature
//! comparison.

pub mod metrics;
pub mod settings;

pub use metrics::{
    compute_metrics, confusion, f1_score, mean_std, metrics_from_counts, ranking_auc, Averaging, ClassMetrics,
    ConfusionCounts, MetricsReport,
};
pub use settings::{
    comparison_csv, derive_seed, evaluate_arm, fit_autoencoder, fit_detector, load_source, training_sets, run_experiment, run_setting1, run_setting2, run_setting3,
    ComparisonRow, DegradationConfig, ExperimentSpec, FileSource, FleetSetup, InputFormat, MachineReport, Scenario,
    SeriesPoint, Setting1Outcome, Setting2Outcome, Setting3Outcome, TrainingSets,
};
