use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gcf_cli::commands::{
    self, AblationRow, CliError, EvalRequest, GradCheckRequest, CHECKPOINT_FILE,
};
use gcf_cli::RunConfig;
use gcf_core::data::SynthOptions;
use gcf_core::graph::GraphVariant;
use gcf_core::tensor::OpKind;
use gcf_core::train::EvalReport;
use gcf_core::Precision;

#[derive(Parser)]
#[command(name = "gcf", version, about = "Grid-graph fusion models for expression recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write checkpoint, metrics and report
    Train(RunArgs),
    /// Evaluate a checkpoint on a manifest
    Eval(EvalArgs),
    /// Train CNN-only and GCF-V1/V2/V3 with one seed and compare
    Ablate(RunArgs),
    /// Verify analytic gradients of a tiny model against finite differences
    Gradcheck(GradcheckArgs),
    /// Generate the synthetic region-blob dataset
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Configuration file (`key = value` with sections)
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<GraphVariant>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    precision: Option<Precision>,
    /// Override any config key, e.g. `--set train.epochs=5`
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for item in &self.overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                CliError::Config(format!("--set expects KEY=VALUE, got `{item}`"))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(variant) = self.variant {
            config.graph.variant = variant;
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        if let Some(manifest) = &self.manifest {
            config.manifest = Some(manifest.clone());
        }
        if let Some(precision) = self.precision {
            config.precision = precision;
        }
        Ok(config)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint to evaluate; defaults to `<out>/checkpoint.gcf`
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate only the test indices of this split file
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultOp {
    Relu,
    Matmul,
    Conv2d,
    Softmax,
    Maxpool,
    Avgpool,
}

impl From<FaultOp> for OpKind {
    fn from(op: FaultOp) -> Self {
        match op {
            FaultOp::Relu => OpKind::Relu,
            FaultOp::Matmul => OpKind::MatMul,
            FaultOp::Conv2d => OpKind::Conv2d,
            FaultOp::Softmax => OpKind::Softmax,
            FaultOp::Maxpool => OpKind::MaxPool2d,
            FaultOp::Avgpool => OpKind::AvgPool2d,
        }
    }
}

#[derive(Args)]
struct GradcheckArgs {
    /// Only `graph.variant` is read from the file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    variant: Option<GraphVariant>,
    #[arg(long, hide = true)]
    inject_fault: Option<FaultOp>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    n_per_class: usize,
    #[arg(long, default_value_t = 7)]
    classes: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Pixel noise standard deviation as a fraction of the intensity range
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    #[arg(long, default_value_t = 48)]
    size: usize,
}

fn print_report(report: &EvalReport) {
    println!(
        "accuracy {:.4} ({} samples, mean loss {:.4})",
        report.accuracy, report.samples, report.mean_loss
    );
    println!("confusion (rows: true, columns: predicted)");
    for row in &report.confusion {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>5}")).collect();
        println!("{}", cells.join(""));
    }
}

fn print_ablation(rows: &[AblationRow]) {
    println!("{:<10} {:>13} {:>10}  backbone init digest", "model", "test accuracy", "best epoch");
    for r in rows {
        println!(
            "{:<10} {:>13.4} {:>10}  {}",
            r.model, r.test_accuracy, r.best_epoch, r.backbone_init_digest
        );
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => {
            let config = args.resolve()?;
            let summary = commands::run_train(&config)?;
            println!("{} best epoch {}", summary.model, summary.best_epoch);
            print_report(&summary.report);
            println!("artifacts in {}", summary.out_dir.display());
        }
        Command::Eval(args) => {
            let config = args.run.resolve()?;
            let request = EvalRequest {
                checkpoint: args
                    .checkpoint
                    .unwrap_or_else(|| config.out_dir.join(CHECKPOINT_FILE)),
                split: args.split,
                out_dir: args.run.out.clone(),
            };
            let report = commands::run_eval(&config, &request)?;
            print_report(&report);
        }
        Command::Ablate(args) => {
            let config = args.resolve()?;
            let rows = commands::run_ablate(&config)?;
            print_ablation(&rows);
        }
        Command::Gradcheck(args) => {
            let mut variant = GraphVariant::V1;
            if let Some(path) = &args.config {
                variant = RunConfig::load(path)?.graph.variant;
            }
            if let Some(v) = args.variant {
                variant = v;
            }
            let outcome = commands::run_gradcheck(&GradCheckRequest {
                variant,
                seed: args.seed,
                fault: args.inject_fault.map(OpKind::from),
            })?;
            let report = &outcome.report;
            println!("{:<26} {:>7} {:>14} {:>14}", "tensor", "checked", "max rel err", "max abs err");
            for t in &report.tensors {
                println!(
                    "{:<26} {:>7} {:>14.3e} {:>14.3e}",
                    t.name, t.checked, t.max_rel_error, t.max_abs_error
                );
            }
            if let Some(m) = report.kink_margin {
                println!("kink margin {m:.3e} after {} draw(s)", outcome.attempts);
            }
            let verdict = if report.passed { "PASS" } else { "FAIL" };
            println!(
                "{verdict}: max relative error {:.3e} (tolerance {:.0e})",
                report.max_rel_error, report.tolerance
            );
            if !report.passed {
                return Err(CliError::Verification(format!(
                    "gradient check failed: max relative error {:.3e} >= {:.0e}",
                    report.max_rel_error, report.tolerance
                )));
            }
        }
        Command::Synth(args) => {
            let opts = SynthOptions {
                n_per_class: args.n_per_class,
                classes: args.classes,
                seed: args.seed,
                noise_sigma: args.noise,
                size: args.size,
            };
            let manifest = commands::run_synth(&opts, &args.out)?;
            println!(
                "wrote {} images in {} classes to {}",
                manifest.len(),
                manifest.num_classes(),
                args.out.join("manifest.csv").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
