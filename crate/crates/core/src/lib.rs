//! Condition monitoring of rotating machinery from multichannel vibration
//! batches: an LSTM autoencoder trained on healthy data, Mahalanobis scoring
//! of reconstruction errors, a handcrafted feature extractor and an
//! Isolation Forest baseline.

pub mod anomaly;
pub mod error;
pub mod eval;
pub mod features;
pub mod iforest;
pub mod io;
pub mod model;
pub mod neural;
pub mod signal;
pub mod synth;
pub mod training;

pub use anomaly::{
    anomaly_score, calibrate_threshold, classify, detect_degradation_point, fit_error_gaussian,
    AnomalyVerdict, DegradationReport, ErrorGaussian, ScoredBatch, Threshold, ThresholdMethod,
};
pub use error::{Error, ErrorClass, Result};
pub use eval::{ExperimentSpec, MetricsReport};
pub use features::{extract_all, FeatureConfig, FeatureVector};
pub use iforest::{ForestConfig, IsolationForestModel};
pub use model::{MonitorModel, WindowSpec};
pub use neural::{Architecture, AutoencoderParams, LatentCode, ReconstructionError};
pub use signal::{
    apply_normalizer, fit_normalizer, split_dataset, DatasetSplits, Label, NormalizationStats,
    SplitSpec, VibrationBatch,
};
pub use synth::{AnomalyMode, SynthConfig};
pub use training::{train, TrainConfig, TrainOutcome};
