use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rotorwatch_core::anomaly::{detect_degradation_point, verdicts_csv};
use rotorwatch_core::eval::{
    fit_autoencoder, fit_detector, load_source, ranking_auc, run_experiment, training_sets, ExperimentSpec,
    FileSource, InputFormat,
};
use rotorwatch_core::features::{extract_all, write_features_csv, FeatureConfig};
use rotorwatch_core::iforest::{self, ForestConfig};
use rotorwatch_core::io::{read_toml, write_atomic, write_json, write_toml};
use rotorwatch_core::signal::{apply_normalizer, fit_normalizer, split_dataset, to_csv_string, write_csv, write_labels};
use rotorwatch_core::synth::{self, fleet, FleetJitter, GroundTruth, SynthConfig};
use rotorwatch_core::training::{hyper_search, SearchSpace};
use rotorwatch_core::{classify, Error, ErrorClass, MonitorModel, Result, VibrationBatch};

#[derive(Parser)]
#[command(name = "rotorwatch", version, about = "Vibration condition monitoring with an LSTM autoencoder")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "ROTORWATCH_OUT", default_value = "rotorwatch-out")]
    out: PathBuf,
    /// Number of channels in the input data.
    #[arg(long, global = true)]
    channels: Option<usize>,
    /// Input data layout.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Nasa,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthScenario {
    Normal,
    Anomalies,
    RunToFailure,
}

#[derive(Args)]
struct InputArgs {
    /// CSV file, or directory of ASCII files with `--format nasa`.
    #[arg(long)]
    input: PathBuf,
    /// `machine_id,batch_index,label` sidecar.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load recorded data, standardize it and export it in the canonical layout.
    Ingest(InputArgs),
    /// Generate a synthetic dataset with ground truth.
    Synth {
        #[arg(long, value_enum, default_value = "anomalies")]
        scenario: SynthScenario,
        /// Generate a fleet of this many similar machines.
        #[arg(long)]
        machines: Option<usize>,
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Train the autoencoder and calibrate the detector from an experiment spec.
    Train {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
    },
    /// Score batches with a trained model.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        input: InputArgs,
    },
    /// Score a chronological series and locate the degradation onset.
    Monitor {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        /// Confirmation window in batches.
        #[arg(long, default_value_t = 20)]
        window: usize,
        /// Fraction of the window that must exceed the threshold.
        #[arg(long, default_value_t = 0.8)]
        min_fraction: f64,
    },
    /// Extract handcrafted time-domain features.
    Features {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        bins: Option<usize>,
        #[arg(long)]
        ar_order: Option<usize>,
    },
    /// Isolation Forest over handcrafted features.
    Iforest {
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        trees: Option<usize>,
        #[arg(long)]
        subsample_size: Option<usize>,
        #[arg(long, default_value_t = 0.1)]
        contamination: f64,
    },
    /// Run the experiment described by `--config`.
    Eval,
    /// Random search over training hyperparameters.
    Hypersearch {
        /// TOML search space.
        #[arg(long)]
        space: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        budget: usize,
    },
}

fn input_format(f: Option<Format>) -> InputFormat {
    match f {
        Some(Format::Nasa) => InputFormat::Nasa,
        _ => InputFormat::Csv,
    }
}

fn config_or_default<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    // A config file that does not parse is a configuration problem, not bad data.
    path.as_deref().map_or_else(
        || Ok(T::default()),
        |p| {
            read_toml(p).map_err(|e| match e {
                Error::Format { path, message } => Error::Config(format!("{}: {message}", path.display())),
                other => other,
            })
        },
    )
}

fn require_channels(g: &Global) -> Result<usize> {
    g.channels
        .ok_or_else(|| Error::Config("--channels is required for this input".into()))
}

fn load_input(g: &Global, args: &InputArgs, channels: usize) -> Result<Vec<VibrationBatch>> {
    let src = FileSource {
        path: args.input.clone(),
        format: input_format(g.format),
        channels,
        labels: args.labels.clone(),
    };
    load_source(&src).map(|(b, _)| b).map_err(|e| e.at_stage("load"))
}

fn out_dir(g: &Global) -> Result<&Path> {
    std::fs::create_dir_all(&g.out).map_err(|e| Error::io(&g.out, e))?;
    Ok(&g.out)
}

fn announce(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn ingest(g: &Global, args: &InputArgs) -> Result<()> {
    let batches = load_input(g, args, require_channels(g)?)?;
    let stats = fit_normalizer(&batches).map_err(|e| e.at_stage("normalize"))?;
    let standardized = batches
        .iter()
        .map(|b| apply_normalizer(b, &stats))
        .collect::<Result<Vec<_>>>()?;
    let dir = out_dir(g)?;
    let paths = [dir.join("data.csv"), dir.join("standardized.csv"), dir.join("normalization.json")];
    write_csv(&batches, &paths[0])?;
    write_atomic(&paths[1], to_csv_string(&standardized)?.as_bytes())?;
    write_json(&paths[2], &stats)?;
    announce(&paths);
    if batches.iter().any(|b| b.label.is_some()) {
        let p = dir.join("labels.csv");
        write_labels(&batches, &p)?;
        announce(&[p]);
    }
    let b = &batches[0];
    println!("{} batches of {} x {}", batches.len(), b.channels(), b.timesteps());
    Ok(())
}

fn synth_cmd(g: &Global, scenario: SynthScenario, machines: Option<usize>, batches: Option<usize>) -> Result<()> {
    let mut base: SynthConfig = config_or_default(&g.config)?;
    if let Some(s) = g.seed {
        base.seed = s;
    }
    if let Some(n) = batches {
        base.n_batches = n;
    }
    let configs = match machines {
        Some(m) => fleet(&base, m, FleetJitter::default())?,
        None => vec![base],
    };
    let mut all = Vec::new();
    let mut truth = Vec::new();
    for c in &configs {
        let (b, onset) = match scenario {
            SynthScenario::Normal => (synth::generate_normal(c)?, None),
            SynthScenario::Anomalies => (synth::generate_anomalous(c)?, None),
            SynthScenario::RunToFailure => {
                let (b, k) = synth::generate_run_to_failure(c)?;
                (b, Some(k))
            }
        };
        truth.push(GroundTruth::from_batches(&b, onset));
        all.extend(b);
    }
    let dir = out_dir(g)?;
    let paths = [dir.join("data.csv"), dir.join("labels.csv"), dir.join("truth.json")];
    write_csv(&all, &paths[0])?;
    write_labels(&all, &paths[1])?;
    write_json(&paths[2], &truth)?;
    announce(&paths);
    Ok(())
}

fn experiment_spec(g: &Global, input: Option<&PathBuf>, labels: Option<&PathBuf>) -> Result<ExperimentSpec> {
    let mut spec: ExperimentSpec = config_or_default(&g.config)?;
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    if let Some(path) = input {
        spec.input = Some(FileSource {
            path: path.clone(),
            format: input_format(g.format),
            channels: require_channels(g)?,
            labels: labels.cloned(),
        });
    }
    spec.validate()?;
    Ok(spec)
}

fn train_cmd(g: &Global, input: Option<&PathBuf>, labels: Option<&PathBuf>, epochs: Option<usize>, lr: Option<f64>) -> Result<()> {
    let mut spec = experiment_spec(g, input, labels)?;
    if let Some(e) = epochs {
        spec.train.epochs = e;
    }
    if let Some(lr) = lr {
        spec.train.learning_rate = lr;
    }
    let (batches, labeled, _) = spec.single_machine_data().map_err(|e| e.at_stage("load"))?;
    let splits = split_dataset(batches, &spec.split, labeled).map_err(|e| e.at_stage("split"))?;
    let (base, outcome) = fit_autoencoder(&splits.train, &splits.val_normal, &spec.train_config(), spec.window)?;
    let model = fit_detector(&base, &splits.val_normal, &splits.val_mixed, spec.quantile)?;
    let dir = out_dir(g)?;
    let paths = [dir.join("model.json"), dir.join("train_log.csv"), dir.join("threshold.json")];
    model.save(&paths[0])?;
    write_atomic(&paths[1], outcome.log_csv().as_bytes())?;
    write_json(&paths[2], model.threshold.as_ref().expect("calibrated"))?;
    announce(&paths);
    if let Some(best) = outcome.best_epoch {
        println!("best epoch {best}, validation loss {}", outcome.history[best - 1].val_loss);
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<MonitorModel> {
    MonitorModel::load(path).map_err(|e| e.at_stage("load-model"))
}

fn score_series(g: &Global, model_path: &Path, args: &InputArgs) -> Result<(MonitorModel, Vec<VibrationBatch>, Vec<rotorwatch_core::ScoredBatch>)> {
    let model = load_model(model_path)?;
    let channels = g.channels.unwrap_or(model.channels());
    if channels != model.channels() {
        return Err(Error::dimension("input channels (model expects)", model.channels(), channels).at_stage("score"));
    }
    let batches = load_input(g, args, channels)?;
    let scored = batches
        .iter()
        .map(|b| model.score(b))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_stage("score"))?;
    Ok((model, batches, scored))
}

fn score_cmd(g: &Global, model_path: &Path, args: &InputArgs) -> Result<Vec<f64>> {
    let (model, _, scored) = score_series(g, model_path, args)?;
    let threshold = model
        .threshold
        .as_ref()
        .ok_or_else(|| Error::Validation("model has no calibrated threshold".into()))?;
    let verdicts = classify(&scored, threshold);
    let dir = out_dir(g)?;
    let path = dir.join("scores.csv");
    write_atomic(&path, verdicts_csv(&verdicts, threshold).as_bytes())?;
    announce(&[path]);
    let flagged = verdicts.iter().filter(|v| v.label.is_anomalous()).count();
    println!("{flagged} of {} batches above threshold {}", verdicts.len(), threshold.tau);
    Ok(scored.into_iter().map(|s| s.score).collect())
}

fn monitor_cmd(g: &Global, model_path: &Path, args: &InputArgs, window: usize, min_fraction: f64) -> Result<()> {
    let scores = score_cmd(g, model_path, args)?;
    let model = load_model(model_path)?;
    let tau = model.threshold.as_ref().expect("checked by score").tau;
    let report = detect_degradation_point(&scores, tau, window, min_fraction).map_err(|e| e.at_stage("degradation"))?;
    let path = g.out.join("degradation.json");
    write_json(&path, &report)?;
    announce(&[path]);
    match report.onset_index {
        Some(i) => println!("degradation onset at position {i}"),
        None => println!("no degradation onset"),
    }
    Ok(())
}

fn feature_matrix(batches: &[VibrationBatch], config: &FeatureConfig) -> Result<Vec<rotorwatch_core::FeatureVector>> {
    batches
        .iter()
        .map(|b| {
            extract_all(b, config).map_err(|e| {
                Error::Validation(format!("batch {} of {}: {e}", b.batch_index, b.machine_id)).at_stage("features")
            })
        })
        .collect()
}

fn features_cmd(g: &Global, args: &InputArgs, bins: Option<usize>, ar_order: Option<usize>) -> Result<()> {
    let mut config: FeatureConfig = config_or_default(&g.config)?;
    config.bins = bins.unwrap_or(config.bins);
    config.ar_order = ar_order.unwrap_or(config.ar_order);
    let batches = load_input(g, args, require_channels(g)?)?;
    let features = feature_matrix(&batches, &config)?;
    let path = out_dir(g)?.join("features.csv");
    write_features_csv(&path, &batches, &config, &features)?;
    announce(&[path]);
    Ok(())
}

fn iforest_cmd(g: &Global, args: &InputArgs, trees: Option<usize>, subsample: Option<usize>, contamination: f64) -> Result<()> {
    let mut config: ForestConfig = config_or_default(&g.config)?;
    config.trees = trees.unwrap_or(config.trees);
    config.subsample_size = subsample.unwrap_or(config.subsample_size);
    if let Some(s) = g.seed {
        config.seed = s;
    }
    let batches = load_input(g, args, require_channels(g)?)?;
    let points: Vec<Vec<f64>> = feature_matrix(&batches, &FeatureConfig::default())?
        .into_iter()
        .map(|f| f.values)
        .collect();
    let model = iforest::fit(&points, &config).map_err(|e| e.at_stage("iforest"))?;
    let scores = model.score_all(&points)?;
    let flagged = iforest::predict_from_scores(&scores, contamination)?;
    let path = out_dir(g)?.join("iforest_scores.csv");
    write_atomic(&path, iforest::scores_csv(&scores, &flagged).as_bytes())?;
    announce(&[path]);
    if batches.iter().all(|b| b.label.is_some()) {
        let truth: Vec<bool> = batches.iter().map(VibrationBatch::is_anomalous).collect();
        if let Ok(auc) = ranking_auc(&scores, &truth) {
            println!("ranking AUC {auc:.4}");
        }
    }
    Ok(())
}

fn eval_cmd(g: &Global) -> Result<()> {
    if g.config.is_none() {
        return Err(Error::Config("eval needs --config with an experiment spec".into()));
    }
    let spec = experiment_spec(g, None, None)?;
    let dir = out_dir(g)?;
    print!("{}", run_experiment(&spec, Some(dir))?);
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn hypersearch_cmd(g: &Global, space: Option<&PathBuf>, budget: usize) -> Result<()> {
    let spec = experiment_spec(g, None, None)?;
    let mut space: SearchSpace = config_or_default(&space.cloned())?;
    space.base.hidden_sizes = spec.train.hidden_sizes.clone();
    let (batches, labeled, _) = spec.single_machine_data().map_err(|e| e.at_stage("load"))?;
    let splits = split_dataset(batches, &spec.split, labeled).map_err(|e| e.at_stage("split"))?;
    let sets = training_sets(&splits.train, &splits.val_normal, spec.window)?;
    let report = hyper_search(&space, budget, spec.train_config().seed, &sets.train, &sets.val_normal)
        .map_err(|e| e.at_stage("hypersearch"))?;
    let dir = out_dir(g)?;
    let paths = [dir.join("trials.csv"), dir.join("best_train.toml")];
    write_atomic(&paths[0], report.trials_csv().as_bytes())?;
    write_toml(&paths[1], &report.best)?;
    announce(&paths);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Ingest(args) => ingest(g, args),
        Command::Synth { scenario, machines, batches } => synth_cmd(g, *scenario, *machines, *batches),
        Command::Train { input, labels, epochs, learning_rate } => {
            train_cmd(g, input.as_ref(), labels.as_ref(), *epochs, *learning_rate)
        }
        Command::Score { model, input } => score_cmd(g, model, input).map(|_| ()),
        Command::Monitor { model, input, window, min_fraction } => monitor_cmd(g, model, input, *window, *min_fraction),
        Command::Features { input, bins, ar_order } => features_cmd(g, input, *bins, *ar_order),
        Command::Iforest { input, trees, subsample_size, contamination } => {
            iforest_cmd(g, input, *trees, *subsample_size, *contamination)
        }
        Command::Eval => eval_cmd(g),
        Command::Hypersearch { space, budget } => hypersearch_cmd(g, space.as_ref(), *budget),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Io => 3,
        ErrorClass::Input => 4,
        ErrorClass::Config => 5,
        ErrorClass::Numerical => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rotorwatch: error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
