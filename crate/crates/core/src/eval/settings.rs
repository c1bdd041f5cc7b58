use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, metrics_from_counts, ranking_auc, Averaging, ConfusionCounts, MetricsReport};
use crate::anomaly::{
    calibrate_threshold, detect_degradation_point, fit_error_gaussian, DegradationReport, ScoredBatch, Threshold,
};
use crate::error::{Error, Result};
use crate::features::{extract_all, features_csv, FeatureConfig};
use crate::iforest::{self, ForestConfig};
use crate::io::{write_atomic, write_json, write_toml};
use crate::model::{windowed, MonitorModel, WindowSpec};
use crate::signal::{
    apply_normalizer, attach_labels, fit_normalizer, load_csv, load_labels, load_nasa_ascii, split_dataset, Label,
    NormalizationStats, SplitSpec, VibrationBatch,
};
use crate::synth::{fleet, generate_anomalous, generate_run_to_failure, FleetJitter, SynthConfig};
use crate::training::{train_from_config, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    #[default]
    Csv,
    Nasa,
}

/// Recorded data on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSource {
    /// CSV file, or a directory of ASCII files for the `nasa` format.
    pub path: PathBuf,
    #[serde(default)]
    pub format: InputFormat,
    pub channels: usize,
    /// Optional `machine_id,batch_index,label` sidecar.
    #[serde(default)]
    pub labels: Option<PathBuf>,
}

/// Loads batches and attaches labels; the flag tells whether every batch
/// ended up labeled.
pub fn load_source(src: &FileSource) -> Result<(Vec<VibrationBatch>, bool)> {
    let mut batches = match src.format {
        InputFormat::Csv => load_csv(&src.path, src.channels)?,
        InputFormat::Nasa => load_nasa_ascii(&src.path, src.channels)?,
    };
    if let Some(path) = &src.labels {
        attach_labels(&mut batches, &load_labels(path)?);
    }
    let labeled = !batches.is_empty() && batches.iter().all(|b| b.label.is_some());
    Ok((batches, labeled))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Randomly placed anomalies of the configured mode.
    #[default]
    Anomalies,
    /// Healthy run followed by growing degradation.
    RunToFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationConfig {
    pub window: usize,
    pub min_fraction: f64,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        DegradationConfig {
            window: 20,
            min_fraction: 0.8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FleetSetup {
    /// Number of synthetic machines.
    pub machines: usize,
    /// Machines kept out of training; empty means the last one.
    pub held_out: Vec<String>,
    pub jitter: FleetJitter,
}

impl Default for FleetSetup {
    fn default() -> Self {
        FleetSetup {
            machines: 5,
            held_out: Vec::new(),
            jitter: FleetJitter::default(),
        }
    }
}

/// A complete, rerunnable experiment. The top-level `seed` drives every
/// random component; seeds nested in the sub-configs are overwritten.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub setting: u8,
    pub seed: u64,
    /// Recorded data; when absent, data is generated from `synth`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<FileSource>,
    pub synth: SynthConfig,
    pub scenario: Scenario,
    pub split: SplitSpec,
    pub train: TrainConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<WindowSpec>,
    pub quantile: f64,
    pub degradation: DegradationConfig,
    pub fleet: FleetSetup,
    pub features: FeatureConfig,
    pub forest: ForestConfig,
    pub contamination: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            setting: 1,
            seed: 0,
            input: None,
            synth: SynthConfig::default(),
            scenario: Scenario::default(),
            split: SplitSpec::default(),
            train: TrainConfig::default(),
            window: None,
            quantile: 0.99,
            degradation: DegradationConfig::default(),
            fleet: FleetSetup::default(),
            features: FeatureConfig::default(),
            forest: ForestConfig::default(),
            contamination: 0.1,
            output: None,
        }
    }
}

const SYNTH_STREAM: u64 = 1;
const TRAIN_STREAM: u64 = 2;
const FOREST_STREAM: u64 = 3;

/// Independent seed for one component of an experiment.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.setting) {
            return Err(Error::Config(format!("setting must be 1, 2 or 3, got {}", self.setting)));
        }
        self.split.validate()?;
        self.train.validate()?;
        if self.input.is_none() {
            self.synth.validate()?;
        }
        if !(0.0..=1.0).contains(&self.quantile) {
            return Err(Error::Config(format!("quantile {} is outside [0, 1]", self.quantile)));
        }
        if !(self.contamination > 0.0 && self.contamination < 1.0) {
            return Err(Error::Config(format!("contamination {} is outside (0, 1)", self.contamination)));
        }
        Ok(())
    }

    fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: derive_seed(self.seed, SYNTH_STREAM),
            ..self.synth.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, TRAIN_STREAM),
            ..self.train.clone()
        }
    }

    fn forest_config(&self) -> ForestConfig {
        ForestConfig {
            seed: derive_seed(self.seed, FOREST_STREAM),
            ..self.forest
        }
    }

    /// Batches of one machine, whether all are labeled, and the true onset
    /// when known.
    pub fn single_machine_data(&self) -> Result<(Vec<VibrationBatch>, bool, Option<usize>)> {
        match &self.input {
            Some(src) => {
                let (b, labeled) = load_source(src)?;
                Ok((b, labeled, None))
            }
            None => match self.scenario {
                Scenario::Anomalies => Ok((generate_anomalous(&self.synth_config())?, true, None)),
                Scenario::RunToFailure => {
                    let (b, onset) = generate_run_to_failure(&self.synth_config())?;
                    Ok((b, true, Some(onset)))
                }
            },
        }
    }
}

/// One scored batch of the chronological series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub machine_id: String,
    pub batch_index: usize,
    pub split: String,
    pub score: f64,
    pub predicted: Label,
    pub truth: Option<Label>,
}

fn series_csv(series: &[SeriesPoint], tau: f64) -> String {
    let mut out = String::from("machine_id,batch_index,split,score,threshold,predicted,truth\n");
    for p in series {
        let truth = p.truth.map_or(String::new(), |l| l.code().to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.machine_id,
            p.batch_index,
            p.split,
            p.score,
            tau,
            p.predicted.code(),
            truth
        );
    }
    out
}

/// Scores computed in parallel, returned in input order.
fn score_all(model: &MonitorModel, batches: &[VibrationBatch]) -> Result<Vec<ScoredBatch>> {
    batches.par_iter().map(|b| model.score(b)).collect()
}

fn errors_all(model: &MonitorModel, batches: &[VibrationBatch]) -> Result<Vec<Vec<f64>>> {
    batches.par_iter().map(|b| model.batch_error(b)).collect()
}

/// Network inputs: the normalizer fitted on `train` and both sets
/// standardized and windowed.
pub struct TrainingSets {
    pub stats: NormalizationStats,
    pub train: Vec<VibrationBatch>,
    pub val_normal: Vec<VibrationBatch>,
}

pub fn training_sets(
    train: &[VibrationBatch],
    val_normal: &[VibrationBatch],
    window: Option<WindowSpec>,
) -> Result<TrainingSets> {
    let inner = || -> Result<TrainingSets> {
        let stats = fit_normalizer(train)?;
        let prepare = |set: &[VibrationBatch]| -> Result<Vec<VibrationBatch>> {
            let normalized = set
                .iter()
                .map(|b| apply_normalizer(b, &stats))
                .collect::<Result<Vec<_>>>()?;
            windowed(&normalized, window)
        };
        Ok(TrainingSets {
            train: prepare(train)?,
            val_normal: prepare(val_normal)?,
            stats,
        })
    };
    inner().map_err(|e| e.at_stage("normalize"))
}

/// Standardizes on the training set and trains the autoencoder.
pub fn fit_autoencoder(
    train: &[VibrationBatch],
    val_normal: &[VibrationBatch],
    config: &TrainConfig,
    window: Option<WindowSpec>,
) -> Result<(MonitorModel, TrainOutcome)> {
    let sets = training_sets(train, val_normal, window)?;
    let outcome = train_from_config(&sets.train, &sets.val_normal, config).map_err(|e| e.at_stage("train"))?;
    let model = MonitorModel::new(outcome.params.clone(), sets.stats, window);
    Ok((model, outcome))
}

/// Fits the error Gaussian on `V_N` and calibrates τ on `V_A`.
pub fn fit_detector(
    model: &MonitorModel,
    val_normal: &[VibrationBatch],
    val_mixed: &[VibrationBatch],
    quantile: f64,
) -> Result<MonitorModel> {
    let mut model = model.clone();
    let errs = errors_all(&model, val_normal).map_err(|e| e.at_stage("score"))?;
    model.gaussian = Some(fit_error_gaussian(&errs).map_err(|e| e.at_stage("fit-gaussian"))?);
    let vn: Vec<f64> = score_all(&model, val_normal)?.into_iter().map(|s| s.score).collect();
    let va: Vec<(f64, Option<Label>)> = score_all(&model, val_mixed)?
        .into_iter()
        .zip(val_mixed)
        .map(|(s, b)| (s.score, b.label))
        .collect();
    model.threshold = Some(calibrate_threshold(&vn, &va, quantile).map_err(|e| e.at_stage("calibrate"))?);
    Ok(model)
}

fn split_tags(splits: &crate::signal::DatasetSplits) -> BTreeMap<(String, usize), &'static str> {
    let mut tags = BTreeMap::new();
    for (name, set) in [
        ("train", &splits.train),
        ("val_normal", &splits.val_normal),
        ("val_mixed", &splits.val_mixed),
        ("test", &splits.test),
    ] {
        for b in set {
            tags.insert((b.machine_id.clone(), b.batch_index), name);
        }
    }
    tags
}

fn scored_series(
    model: &MonitorModel,
    batches: &[VibrationBatch],
    tags: &BTreeMap<(String, usize), &'static str>,
) -> Result<Vec<SeriesPoint>> {
    let tau = model.threshold.as_ref().map_or(f64::INFINITY, |t| t.tau);
    Ok(score_all(model, batches)
        .map_err(|e| e.at_stage("score"))?
        .into_iter()
        .zip(batches)
        .map(|(s, b)| SeriesPoint {
            machine_id: b.machine_id.clone(),
            batch_index: b.batch_index,
            split: tags
                .get(&(b.machine_id.clone(), b.batch_index))
                .copied()
                .unwrap_or("unsplit")
                .to_string(),
            score: s.score,
            predicted: if s.score > tau { Label::Anomalous } else { Label::Normal },
            truth: b.label,
        })
        .collect())
}

/// Weighted and anomaly-class metrics over the test points, when labeled.
fn test_metrics(series: &[SeriesPoint]) -> Result<Option<(MetricsReport, MetricsReport)>> {
    let test: Vec<&SeriesPoint> = series.iter().filter(|p| p.split == "test").collect();
    if test.is_empty() || test.iter().any(|p| p.truth.is_none()) {
        return Ok(None);
    }
    let truth: Vec<Label> = test.iter().filter_map(|p| p.truth).collect();
    let pred: Vec<Label> = test.iter().map(|p| p.predicted).collect();
    Ok(Some((
        compute_metrics(&truth, &pred, Averaging::Weighted)?,
        compute_metrics(&truth, &pred, Averaging::AnomalyClass)?,
    )))
}

const METRICS_HEADER: &str = "machine_id,averaging,precision,recall,tpr,fpr,f1,tp,fp,tn,fn\n";

fn metrics_row(out: &mut String, machine: &str, m: &MetricsReport) {
    let avg = match m.averaging {
        Averaging::AnomalyClass => "anomaly-class",
        Averaging::Weighted => "weighted",
    };
    let c: ConfusionCounts = m.counts;
    let _ = writeln!(
        out,
        "{machine},{avg},{},{},{},{},{},{},{},{},{}",
        m.precision, m.recall, m.tpr, m.fpr, m.f1, c.tp, c.fp, c.tn, c.fn_
    );
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    write_atomic(&dir.join(name), text.as_bytes())
}

fn prepare_output(dir: Option<&Path>) -> Result<()> {
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn need_setting(spec: &ExperimentSpec, setting: u8) -> Result<()> {
    spec.validate()?;
    if spec.setting != setting {
        return Err(Error::Config(format!(
            "spec is for setting {}, not setting {setting}",
            spec.setting
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting1Outcome {
    pub machine_id: String,
    /// Absent when the test split is unlabeled.
    pub weighted: Option<MetricsReport>,
    pub anomaly_class: Option<MetricsReport>,
    pub threshold: Threshold,
    pub degradation: DegradationReport,
    /// Batch index at the detected onset.
    pub onset_batch: Option<usize>,
    pub true_onset: Option<usize>,
    pub best_epoch: Option<usize>,
    #[serde(skip)]
    pub series: Vec<SeriesPoint>,
    #[serde(skip)]
    pub model: Option<MonitorModel>,
}

/// Single-machine pipeline: standardize, train on `T_N`, fit the Gaussian on
/// `V_N`, calibrate τ on `V_A`, classify the test split and locate the
/// degradation onset over the whole chronological series.
pub fn run_setting1(spec: &ExperimentSpec, out: Option<&Path>) -> Result<Setting1Outcome> {
    need_setting(spec, 1)?;
    prepare_output(out)?;
    let (batches, labeled, true_onset) = spec.single_machine_data().map_err(|e| e.at_stage("load"))?;
    let splits = split_dataset(batches.clone(), &spec.split, labeled).map_err(|e| e.at_stage("split"))?;
    let (base, outcome) = fit_autoencoder(&splits.train, &splits.val_normal, &spec.train_config(), spec.window)?;
    let model = fit_detector(&base, &splits.val_normal, &splits.val_mixed, spec.quantile)?;
    let threshold = model.threshold.clone().expect("calibrated");
    let series = scored_series(&model, &batches, &split_tags(&splits))?;
    let metrics = test_metrics(&series)?;
    let scores: Vec<f64> = series.iter().map(|p| p.score).collect();
    let degradation = detect_degradation_point(
        &scores,
        threshold.tau,
        spec.degradation.window,
        spec.degradation.min_fraction,
    )
    .map_err(|e| e.at_stage("degradation"))?;
    let result = Setting1Outcome {
        machine_id: batches[0].machine_id.clone(),
        onset_batch: degradation.onset_index.map(|i| series[i].batch_index),
        weighted: metrics.as_ref().map(|m| m.0.clone()),
        anomaly_class: metrics.map(|m| m.1),
        threshold,
        degradation,
        true_onset,
        best_epoch: outcome.best_epoch,
        series,
        model: Some(model),
    };
    if let Some(dir) = out {
        let model = result.model.as_ref().expect("model");
        let write = || -> Result<()> {
            model.save(&dir.join("model.json"))?;
            write_text(dir, "train_log.csv", &outcome.log_csv())?;
            write_text(dir, "scores.csv", &series_csv(&result.series, result.threshold.tau))?;
            let mut m = String::from(METRICS_HEADER);
            for r in [&result.weighted, &result.anomaly_class].into_iter().flatten() {
                metrics_row(&mut m, &result.machine_id, r);
            }
            write_text(dir, "metrics.csv", &m)?;
            write_json(&dir.join("degradation.json"), &result.degradation)?;
            write_json(&dir.join("report.json"), &result)?;
            write_toml(&dir.join("spec.toml"), spec)
        };
        write().map_err(|e| e.at_stage("write"))?;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineReport {
    pub machine_id: String,
    pub held_out: bool,
    pub threshold: Threshold,
    pub weighted: Option<MetricsReport>,
    pub anomaly_class: Option<MetricsReport>,
    #[serde(skip)]
    pub series: Vec<SeriesPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting2Outcome {
    pub training_machines: Vec<String>,
    pub machines: Vec<MachineReport>,
    pub best_epoch: Option<usize>,
}

fn group_by_machine(batches: Vec<VibrationBatch>) -> Vec<(String, Vec<VibrationBatch>)> {
    let mut groups: Vec<(String, Vec<VibrationBatch>)> = Vec::new();
    for b in batches {
        match groups.iter_mut().find(|g| g.0 == b.machine_id) {
            Some(g) => g.1.push(b),
            None => groups.push((b.machine_id.clone(), vec![b])),
        }
    }
    groups
}

/// Cross-machine pipeline: one autoencoder trained on the pooled healthy
/// training data of the non-held-out machines; each machine gets its own
/// Gaussian and τ from its own validation splits.
pub fn run_setting2(spec: &ExperimentSpec, out: Option<&Path>) -> Result<Setting2Outcome> {
    need_setting(spec, 2)?;
    prepare_output(out)?;
    let (groups, labeled) = match &spec.input {
        Some(src) => {
            let (b, labeled) = load_source(src).map_err(|e| e.at_stage("load"))?;
            (group_by_machine(b), labeled)
        }
        None => {
            let configs = fleet(&spec.synth_config(), spec.fleet.machines, spec.fleet.jitter)
                .map_err(|e| e.at_stage("load"))?;
            let groups = configs
                .iter()
                .map(|c| Ok((c.machine_id.clone(), generate_anomalous(c)?)))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| e.at_stage("load"))?;
            (groups, true)
        }
    };
    if groups.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "cross-machine evaluation needs at least 2 machines, found {}",
            groups.len()
        ))
        .at_stage("load"));
    }
    let held_out: Vec<String> = if spec.fleet.held_out.is_empty() {
        vec![groups.last().expect("non-empty").0.clone()]
    } else {
        spec.fleet.held_out.clone()
    };
    for id in &held_out {
        if !groups.iter().any(|g| &g.0 == id) {
            return Err(Error::Config(format!("held-out machine {id:?} is not in the data")));
        }
    }

    let mut per_machine = Vec::new();
    for (id, batches) in groups {
        let splits = split_dataset(batches.clone(), &spec.split, labeled)
            .map_err(|e| Error::Validation(format!("machine {id}: {e}")).at_stage("split"))?;
        per_machine.push((id, batches, splits));
    }
    let mut pool_train = Vec::new();
    let mut pool_val = Vec::new();
    let mut training_machines = Vec::new();
    for (id, _, s) in &per_machine {
        if !held_out.contains(id) {
            training_machines.push(id.clone());
            pool_train.extend(s.train.iter().cloned());
            pool_val.extend(s.val_normal.iter().cloned());
        }
    }
    if pool_train.is_empty() {
        return Err(Error::InsufficientData("the healthy training pool is empty".into()).at_stage("train"));
    }
    let (base, outcome) = fit_autoencoder(&pool_train, &pool_val, &spec.train_config(), spec.window)?;

    let mut machines = Vec::new();
    for (id, batches, splits) in &per_machine {
        let model = fit_detector(&base, &splits.val_normal, &splits.val_mixed, spec.quantile)?;
        let series = scored_series(&model, batches, &split_tags(splits))?;
        let metrics = test_metrics(&series)?;
        machines.push(MachineReport {
            machine_id: id.clone(),
            held_out: held_out.contains(id),
            threshold: model.threshold.clone().expect("calibrated"),
            weighted: metrics.as_ref().map(|m| m.0.clone()),
            anomaly_class: metrics.map(|m| m.1),
            series,
        });
    }
    let result = Setting2Outcome {
        training_machines,
        machines,
        best_epoch: outcome.best_epoch,
    };
    if let Some(dir) = out {
        let write = || -> Result<()> {
            base.save(&dir.join("model.json"))?;
            write_text(dir, "train_log.csv", &outcome.log_csv())?;
            let mut m = String::from(METRICS_HEADER);
            for r in &result.machines {
                for rep in [&r.weighted, &r.anomaly_class].into_iter().flatten() {
                    metrics_row(&mut m, &r.machine_id, rep);
                }
                write_text(dir, &format!("scores_{}.csv", r.machine_id), &series_csv(&r.series, r.threshold.tau))?;
            }
            write_text(dir, "metrics.csv", &m)?;
            write_json(&dir.join("report.json"), &result)?;
            write_toml(&dir.join("spec.toml"), spec)
        };
        write().map_err(|e| e.at_stage("write"))?;
    }
    Ok(result)
}

/// One arm of the feature-set comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub arm: String,
    pub feature_dim: usize,
    pub evaluated: usize,
    pub true_anomalies: usize,
    pub flagged: usize,
    pub precision: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub f1: f64,
    pub auc: f64,
    pub trees: usize,
    pub subsample_size: usize,
    pub forest_seed: u64,
    pub contamination: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting3Outcome {
    pub rows: Vec<ComparisonRow>,
    #[serde(skip)]
    pub scores: Vec<(String, Vec<f64>)>,
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(
        "arm,feature_dim,evaluated,true_anomalies,flagged,precision,tpr,fpr,f1,auc,trees,subsample_size,forest_seed,contamination\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.arm,
            r.feature_dim,
            r.evaluated,
            r.true_anomalies,
            r.flagged,
            r.precision,
            r.tpr,
            r.fpr,
            r.f1,
            r.auc,
            r.trees,
            r.subsample_size,
            r.forest_seed,
            r.contamination
        );
    }
    out
}

/// Fits one forest on `train` features and evaluates it on `eval`.
pub fn evaluate_arm(
    arm: &str,
    train: &[Vec<f64>],
    eval: &[Vec<f64>],
    truth: &[bool],
    forest: &ForestConfig,
    contamination: f64,
) -> Result<(ComparisonRow, Vec<f64>)> {
    let model = iforest::fit(train, forest).map_err(|e| e.at_stage("iforest"))?;
    let scores = model.score_all(eval).map_err(|e| e.at_stage("iforest"))?;
    let flagged = iforest::predict_from_scores(&scores, contamination)?;
    let mut c = ConfusionCounts::default();
    for (&t, &p) in truth.iter().zip(&flagged) {
        match (t, p) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fn_ += 1,
        }
    }
    let m = metrics_from_counts(c, Averaging::AnomalyClass);
    Ok((
        ComparisonRow {
            arm: arm.to_string(),
            feature_dim: eval.first().map_or(0, Vec::len),
            evaluated: eval.len(),
            true_anomalies: c.tp + c.fn_,
            flagged: c.tp + c.fp,
            precision: m.precision,
            tpr: m.tpr,
            fpr: m.fpr,
            f1: m.f1,
            auc: ranking_auc(&scores, truth)?,
            trees: forest.trees,
            subsample_size: forest.subsample_size,
            forest_seed: forest.seed,
            contamination,
        },
        scores,
    ))
}

/// Feature-set comparison: latent codes of the trained autoencoder (AFE)
/// against handcrafted time-domain features (MFE), each fed to an Isolation
/// Forest with the same configuration and seed. Forests are fitted on the
/// training split and evaluated on every other batch.
pub fn run_setting3(spec: &ExperimentSpec, out: Option<&Path>) -> Result<Setting3Outcome> {
    need_setting(spec, 3)?;
    prepare_output(out)?;
    let (batches, labeled, _) = spec.single_machine_data().map_err(|e| e.at_stage("load"))?;
    if !labeled {
        return Err(Error::InsufficientData("the feature comparison needs labeled batches".into()).at_stage("load"));
    }
    let splits = split_dataset(batches, &spec.split, labeled).map_err(|e| e.at_stage("split"))?;
    let (model, outcome) = fit_autoencoder(&splits.train, &splits.val_normal, &spec.train_config(), spec.window)?;
    let mut eval_set: Vec<VibrationBatch> = splits
        .val_normal
        .iter()
        .chain(&splits.val_mixed)
        .chain(&splits.test)
        .cloned()
        .collect();
    eval_set.sort_by_key(|b| b.batch_index);
    let truth: Vec<bool> = eval_set.iter().map(VibrationBatch::is_anomalous).collect();

    let afe = |set: &[VibrationBatch]| -> Result<Vec<Vec<f64>>> {
        set.par_iter().map(|b| model.batch_latent(b)).collect()
    };
    let mfe = |set: &[VibrationBatch]| -> Result<Vec<Vec<f64>>> {
        set.par_iter()
            .map(|b| extract_all(b, &spec.features).map(|f| f.values))
            .collect()
    };
    let stage = |e: Error| e.at_stage("features");
    let afe_train = afe(&splits.train).map_err(stage)?;
    let afe_eval = afe(&eval_set).map_err(stage)?;
    let mfe_train = mfe(&splits.train).map_err(stage)?;
    let mfe_eval = mfe(&eval_set).map_err(stage)?;

    let forest = spec.forest_config();
    let (afe_row, afe_scores) = evaluate_arm("AFE_IF", &afe_train, &afe_eval, &truth, &forest, spec.contamination)?;
    let (mfe_row, mfe_scores) = evaluate_arm("MFE_IF", &mfe_train, &mfe_eval, &truth, &forest, spec.contamination)?;
    let result = Setting3Outcome {
        rows: vec![afe_row, mfe_row],
        scores: vec![("AFE_IF".into(), afe_scores), ("MFE_IF".into(), mfe_scores)],
    };
    if let Some(dir) = out {
        let write = || -> Result<()> {
            model.save(&dir.join("model.json"))?;
            write_text(dir, "train_log.csv", &outcome.log_csv())?;
            write_text(dir, "comparison.csv", &comparison_csv(&result.rows))?;
            let d = eval_set[0].channels();
            let latent_names: Vec<String> = (0..afe_eval[0].len()).map(|k| format!("z{k}")).collect();
            write_text(dir, "features_afe.csv", &features_csv(&eval_set, &latent_names, &afe_eval))?;
            write_text(dir, "features_mfe.csv", &features_csv(&eval_set, &spec.features.names(d), &mfe_eval))?;
            let mut s = String::from("machine_id,batch_index,afe_score,mfe_score,truth\n");
            for (i, b) in eval_set.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    b.machine_id,
                    b.batch_index,
                    result.scores[0].1[i],
                    result.scores[1].1[i],
                    u8::from(truth[i])
                );
            }
            write_text(dir, "iforest_scores.csv", &s)?;
            write_json(&dir.join("report.json"), &result)?;
            write_toml(&dir.join("spec.toml"), spec)
        };
        write().map_err(|e| e.at_stage("write"))?;
    }
    Ok(result)
}

/// Runs whichever setting the spec names and writes a summary of it.
pub fn run_experiment(spec: &ExperimentSpec, out: Option<&Path>) -> Result<String> {
    match spec.setting {
        1 => {
            let r = run_setting1(spec, out)?;
            let mut s = String::new();
            if let Some(m) = &r.weighted {
                let _ = writeln!(s, "weighted f1 {:.4} fpr {:.4} tpr {:.4}", m.f1, m.fpr, m.tpr);
            }
            let _ = writeln!(s, "threshold {}", r.threshold.tau);
            match r.onset_batch {
                Some(b) => {
                    let _ = writeln!(s, "degradation onset at batch {b}");
                }
                None => s.push_str("no degradation onset\n"),
            }
            Ok(s)
        }
        2 => {
            let r = run_setting2(spec, out)?;
            let mut s = String::new();
            for m in &r.machines {
                let tag = if m.held_out { " (held out)" } else { "" };
                if let Some(w) = &m.weighted {
                    let _ = writeln!(s, "{}{tag}: weighted f1 {:.4} fpr {:.4}", m.machine_id, w.f1, w.fpr);
                }
            }
            Ok(s)
        }
        3 => {
            let r = run_setting3(spec, out)?;
            let mut s = String::new();
            for row in &r.rows {
                let _ = writeln!(
                    s,
                    "{}: auc {:.4} precision {:.4} tpr {:.4} fpr {:.4}",
                    row.arm, row.auc, row.precision, row.tpr, row.fpr
                );
            }
            Ok(s)
        }
        other => Err(Error::Config(format!("setting must be 1, 2 or 3, got {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(setting: u8) -> ExperimentSpec {
        ExperimentSpec {
            setting,
            synth: SynthConfig {
                n_batches: 60,
                timesteps: 24,
                ..SynthConfig::default()
            },
            split: SplitSpec {
                train: 0.5,
                val_normal: 0.15,
                val_mixed: 0.15,
                test: 0.2,
            },
            train: TrainConfig {
                epochs: 3,
                hidden_sizes: vec![6, 3],
                minibatch_size: 8,
                ..TrainConfig::default()
            },
            fleet: FleetSetup {
                machines: 3,
                ..FleetSetup::default()
            },
            forest: ForestConfig {
                trees: 20,
                ..ForestConfig::default()
            },
            ..ExperimentSpec::default()
        }
    }

    #[test]
    fn spec_round_trips_through_toml() {
        let spec = small(2);
        let text = toml::to_string(&spec).unwrap();
        let back: ExperimentSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
        assert!(toml::from_str::<ExperimentSpec>("bogus = 1").is_err());
    }

    #[test]
    fn setting_mismatch_is_rejected() {
        assert!(run_setting1(&small(2), None).is_err());
    }

    #[test]
    fn setting1_is_reproducible() {
        let spec = small(1);
        let a = run_setting1(&spec, None).unwrap();
        let b = run_setting1(&spec, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.series, b.series);
        assert_eq!(a.series.len(), 60);
    }

    #[test]
    fn setting2_reports_each_machine() {
        let r = run_setting2(&small(2), None).unwrap();
        assert_eq!(r.machines.len(), 3);
        assert_eq!(r.training_machines, vec!["rm-0", "rm-1"]);
        assert!(r.machines[2].held_out);
    }

    #[test]
    fn setting2_needs_a_healthy_pool() {
        let mut spec = small(2);
        spec.fleet.machines = 2;
        spec.fleet.held_out = vec!["rm-0".into(), "rm-1".into()];
        let err = run_setting2(&spec, None).unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
    }

    #[test]
    fn identical_feature_sets_give_identical_rows() {
        let train: Vec<Vec<f64>> = (0..50).map(|i| vec![(i as f64).sin(), (i as f64 * 0.3).cos()]).collect();
        let mut eval = train[..20].to_vec();
        eval.push(vec![5.0, 5.0]);
        let truth: Vec<bool> = (0..21).map(|i| i == 20).collect();
        let f = ForestConfig::default();
        let (a, sa) = evaluate_arm("x", &train, &eval, &truth, &f, 0.1).unwrap();
        let (b, sb) = evaluate_arm("x", &train, &eval, &truth, &f, 0.1).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(a.auc, 1.0);
    }

    #[test]
    fn seed_streams_differ() {
        assert_ne!(derive_seed(0, 1), derive_seed(0, 2));
        assert_ne!(derive_seed(0, 1), derive_seed(1, 1));
    }
}
