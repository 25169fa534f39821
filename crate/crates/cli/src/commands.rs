//! The work behind each subcommand, returning typed results so the binary
//! only parses flags and prints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use gcf_core::data::{
    generate_synthetic, split_stratified, DataError, Dataset, RunManifest, SplitAssignment,
    SynthOptions,
};
use gcf_core::graph::GraphVariant;
use gcf_core::model::{ModelConfig, ModelError};
use gcf_core::parallel::Parallelism;
use gcf_core::tensor::{BackwardFault, OpKind};
use gcf_core::train::{
    self, evaluate, find_kink_free_point, grad_check, EpochRecord, EvalReport, GradCheckOptions,
    GradCheckReport, TrainError,
};
use gcf_core::{GcfModel, Precision, Real};

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.gcf";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const SPLIT_FILE: &str = "split.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const ABLATION_JSON: &str = "ablation.json";
pub const ABLATION_CSV: &str = "ablation.csv";

/// Errors surfaced to the user, each with a fixed exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Verification(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Checkpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Verification(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Checkpoint(_) => 5,
        }
    }

    /// `error[E<code>]: <message>` on a single line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], "; ");
        format!("error[E{}]: {msg}", self.exit_code())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Data(e.to_string()),
            other => CliError::Checkpoint(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| io_error(path, e))
}

fn to_json_pretty<S: Serialize>(value: &S) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

fn load_manifest(config: &RunConfig) -> Result<RunManifest, CliError> {
    let path = config.manifest.as_ref().ok_or_else(|| {
        CliError::Config("no manifest given (set data.manifest or pass --manifest)".into())
    })?;
    Ok(RunManifest::load(path)?)
}

/// Outcome of one training run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub model: String,
    pub variant: Option<String>,
    pub best_epoch: usize,
    /// Digest of the backbone parameters before the first update.
    pub backbone_init_digest: String,
    pub report: EvalReport,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

struct LoadedData<T> {
    manifest: RunManifest,
    split: SplitAssignment,
    train: Dataset<T>,
    test: Dataset<T>,
}

fn load_data<T: Real>(config: &RunConfig) -> Result<LoadedData<T>, CliError> {
    let manifest = load_manifest(config)?;
    let split = split_stratified(&manifest, config.seed, config.test_fraction)?;
    let size = config.backbone.input_size;
    let channels = config.backbone.input_channels;
    let mode = Parallelism::default();
    let train = Dataset::load(&manifest, &split.train, size, channels, mode)?;
    let test = Dataset::load(&manifest, &split.test, size, channels, mode)?;
    log::info!(
        "split: {} train, {} test samples",
        train.len(),
        test.len()
    );
    Ok(LoadedData {
        manifest,
        split,
        train,
        test,
    })
}

fn train_one<T: Real>(
    config: &RunConfig,
    data: &LoadedData<T>,
    out_dir: &Path,
) -> Result<TrainSummary, CliError> {
    let model_config = config.model_config(data.manifest.num_classes());
    let model = GcfModel::new(model_config.clone())?;
    let params = model.init_params::<T>(config.seed);
    let backbone_init_digest = params.digest("backbone.");

    create_dir(out_dir)?;
    write_file(&out_dir.join(CONFIG_FILE), config.to_text())?;
    write_file(&out_dir.join(SPLIT_FILE), data.split.to_json())?;

    let metrics_path = out_dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| io_error(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let mut write_failure: Option<std::io::Error> = None;
    let outcome = train::train(
        &model,
        params,
        &data.train,
        &data.test,
        &config.train_config(),
        |record: &EpochRecord| {
            if write_failure.is_none() {
                let line = serde_json::to_string(record).expect("plain data serializes");
                if let Err(e) = writeln!(metrics, "{line}") {
                    write_failure = Some(e);
                }
            }
        },
    );
    let flushed = metrics.flush();
    if let Some(e) = write_failure {
        return Err(io_error(&metrics_path, e));
    }
    flushed.map_err(|e| io_error(&metrics_path, e))?;
    let outcome = outcome?;

    Checkpoint::from_params(&model_config, &outcome.best_params)
        .save(&out_dir.join(CHECKPOINT_FILE))?;
    write_file(&out_dir.join(REPORT_FILE), to_json_pretty(&outcome.report))?;
    Ok(TrainSummary {
        model: train::model_label(&model),
        variant: model.topology().map(|t| t.variant().to_string()),
        best_epoch: outcome.best_epoch,
        backbone_init_digest,
        report: outcome.report,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Trains one model and writes checkpoint, metrics, report, split and the
/// resolved config into `config.out_dir`.
pub fn run_train(config: &RunConfig) -> Result<TrainSummary, CliError> {
    config.validate()?;
    match config.precision {
        Precision::F32 => train_one(config, &load_data::<f32>(config)?, &config.out_dir),
        Precision::F64 => train_one(config, &load_data::<f64>(config)?, &config.out_dir),
    }
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub model: String,
    pub test_accuracy: f64,
    pub best_epoch: usize,
    pub backbone_init_digest: String,
}

/// The four rows in table order: CNN-only, then GCF with each graph variant.
pub fn ablation_configs(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut runs = Vec::with_capacity(4);
    let mut baseline = base.clone();
    baseline.graph.enabled = false;
    baseline.out_dir = base.out_dir.join("cnn-only");
    runs.push(("CNN-only".to_string(), baseline));
    for variant in GraphVariant::ALL {
        let mut c = base.clone();
        c.graph.enabled = true;
        c.graph.variant = variant;
        c.out_dir = base.out_dir.join(format!("gcf-{}", variant.as_str().to_lowercase()));
        runs.push((format!("GCF-{variant}"), c));
    }
    runs
}

fn ablate_typed<T: Real>(config: &RunConfig) -> Result<Vec<AblationRow>, CliError> {
    let data = load_data::<T>(config)?;
    let mut rows = Vec::with_capacity(4);
    for (label, run_config) in ablation_configs(config) {
        log::info!("ablation: training {label}");
        let summary = train_one(&run_config, &data, &run_config.out_dir)?;
        rows.push(AblationRow {
            model: label,
            test_accuracy: summary.report.accuracy,
            best_epoch: summary.best_epoch,
            backbone_init_digest: summary.backbone_init_digest,
        });
    }
    Ok(rows)
}

/// Renders rows as CSV with a header line.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("model,test_accuracy,best_epoch,backbone_init_digest\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{}\n",
            r.model, r.test_accuracy, r.best_epoch, r.backbone_init_digest
        ));
    }
    s
}

/// Trains the CNN-only baseline and the three graph variants sequentially
/// with one seed and writes `ablation.json` and `ablation.csv`.
pub fn run_ablate(config: &RunConfig) -> Result<Vec<AblationRow>, CliError> {
    config.validate()?;
    let rows = match config.precision {
        Precision::F32 => ablate_typed::<f32>(config)?,
        Precision::F64 => ablate_typed::<f64>(config)?,
    };
    create_dir(&config.out_dir)?;
    write_file(&config.out_dir.join(ABLATION_JSON), to_json_pretty(&rows))?;
    write_file(&config.out_dir.join(ABLATION_CSV), ablation_csv(&rows))?;
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub checkpoint: PathBuf,
    /// Evaluate only the test indices of this split; otherwise every sample.
    pub split: Option<PathBuf>,
    /// Where to write the report; defaults to the checkpoint's directory.
    pub out_dir: Option<PathBuf>,
}

fn eval_typed<T: Real>(
    config: &RunConfig,
    model_config: &ModelConfig,
    manifest: &RunManifest,
    checkpoint: &Checkpoint,
    indices: &[usize],
) -> Result<EvalReport, CliError> {
    let params = checkpoint.to_params::<T>(model_config)?;
    let model = GcfModel::new(model_config.clone())?;
    let data = Dataset::<T>::load(
        manifest,
        indices,
        config.backbone.input_size,
        config.backbone.input_channels,
        Parallelism::default(),
    )?;
    Ok(evaluate(&model, &params, &data, Parallelism::default())?)
}

pub fn run_eval(config: &RunConfig, request: &EvalRequest) -> Result<EvalReport, CliError> {
    config.validate()?;
    let manifest = load_manifest(config)?;
    let model_config = config.model_config(manifest.num_classes());
    let checkpoint = Checkpoint::load(&request.checkpoint)?;
    let indices = match &request.split {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            let split = SplitAssignment::from_json(&text)
                .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            if let Some(&bad) = split.test.iter().find(|&&i| i >= manifest.len()) {
                return Err(CliError::Data(format!(
                    "{}: index {bad} out of range for a manifest of {} samples",
                    path.display(),
                    manifest.len()
                )));
            }
            split.test
        }
        None => (0..manifest.len()).collect(),
    };
    let report = match config.precision {
        Precision::F32 => eval_typed::<f32>(config, &model_config, &manifest, &checkpoint, &indices)?,
        Precision::F64 => eval_typed::<f64>(config, &model_config, &manifest, &checkpoint, &indices)?,
    };
    let out_dir = request.out_dir.clone().unwrap_or_else(|| {
        request
            .checkpoint
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."))
    });
    create_dir(&out_dir)?;
    write_file(&out_dir.join(EVAL_REPORT_FILE), to_json_pretty(&report))?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct GradCheckRequest {
    pub variant: GraphVariant,
    pub seed: u64,
    /// Scales the upstream gradient of one op kind during backward.
    pub fault: Option<OpKind>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckOutcome {
    pub report: GradCheckReport,
    pub attempts: usize,
}

/// Gradient check of the tiny model in 64-bit, at a point resampled until
/// every ReLU input and max-pool winner is at least 1e-3 from a kink.
pub fn run_gradcheck(request: &GradCheckRequest) -> Result<GradCheckOutcome, CliError> {
    let model = GcfModel::new(ModelConfig::tiny(request.variant))?;
    let point = find_kink_free_point(&model, request.seed, 1e-3, 500)?;
    let opts = GradCheckOptions {
        seed: request.seed,
        fault: request.fault.map(|op| BackwardFault { op, scale: 1.5 }),
        ..GradCheckOptions::default()
    };
    let report = grad_check(&model, &point.params, &point.image, point.label, &opts)?;
    Ok(GradCheckOutcome {
        report,
        attempts: point.attempts,
    })
}

pub fn run_synth(opts: &SynthOptions, out_dir: &Path) -> Result<RunManifest, CliError> {
    Ok(generate_synthetic(opts, out_dir)?)
}
