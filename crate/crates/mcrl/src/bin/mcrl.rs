//! Command-line harness: dataset generation, training, adaptation,
//! evaluation, the ablation grid, and gradient checks.
//!
//! Human-readable tables go to stdout, timing to stderr, and `--report`
//! writes the machine-readable JSON document. Every training command takes
//! a mandatory `--seed` and reruns byte-identically.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mcrl::adapt::{adapt, chain_adapt, init_model, train_source_only, AdaptConfig, AdaptMode};
use mcrl::data::{generate_shift_benchmark, load_csv, save_csv};
use mcrl::error::{Error, Result};
use mcrl::eval::{evaluate_model, run_ablation_grid};
use mcrl::gradcheck;
use mcrl::kernels::{BandwidthRule, KernelConfig, WeightScaling};
use mcrl::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelDims, ModelParams};
use mcrl::report::{grid_table, gradcheck_table, metrics_table, trace_table, Document};
use mcrl::selection::SelectionPolicy;
use mcrl::{EmbeddingDataset, LabelRole, ShiftSpec};

#[derive(Parser)]
#[command(
    name = "mcrl",
    version,
    about = "Feature-space domain adaptation with multi-cluster reference alignment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shift benchmark as a source/target CSV pair.
    Generate(GenerateArgs),
    /// Train a classifier on labeled source data only.
    TrainSource(TrainSourceArgs),
    /// Adapt a classifier to an unlabeled target domain.
    Adapt(AdaptArgs),
    /// Adapt through an ordered chain of target domains.
    Chain(ChainArgs),
    /// Evaluate a checkpoint on labeled data.
    Evaluate(EvaluateArgs),
    /// Run every selection policy of the ablation grid over a seed set.
    Grid(GridArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Write post-transform features of a dataset to CSV.
    DumpFeatures(DumpFeaturesArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Built-in benchmark name (ambiguity-16 or null-16).
    #[arg(long, conflicts_with = "spec")]
    preset: Option<String>,
    /// Path to a benchmark spec JSON file.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the seed stored in the benchmark description.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory receiving source.csv and target.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct HyperArgs {
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(Args)]
struct ModelArgs {
    /// Hidden width of the feature transform.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Feature dimension the alignment loss acts on.
    #[arg(long, default_value_t = 32)]
    feat_dim: usize,
    /// Class count; defaults to the highest source label + 1.
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum PolicyArg {
    SingleLabel,
    Hard,
    Soft,
    Ratio,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    EndToEnd,
    TwoStage,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum BandwidthArg {
    Median,
    Fixed,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum ScalingArg {
    PerClassSum,
    LiteralInverseNt,
}

#[derive(Args)]
struct AlignArgs {
    /// Weight of the alignment term.
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    /// Ramp the alignment weight in over training progress.
    #[arg(long)]
    lambda_ramp: bool,
    #[arg(long, value_enum, default_value_t = PolicyArg::Soft)]
    policy: PolicyArg,
    /// Cluster count for the hard and soft policies (default 3).
    #[arg(long)]
    k: Option<usize>,
    /// Confidence-ratio bound for the ratio policy.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum, default_value_t = ModeArg::EndToEnd)]
    mode: ModeArg,
    /// Update only the classifier head during adaptation.
    #[arg(long)]
    freeze_g: bool,
    /// Pseudo-label the full target once per epoch instead of per batch.
    #[arg(long)]
    global_clusters: bool,
    #[arg(long, value_enum, default_value_t = BandwidthArg::Median)]
    bandwidth: BandwidthArg,
    /// Base bandwidth, required with --bandwidth fixed.
    #[arg(long)]
    sigma_sq: Option<f64>,
    #[arg(long, value_enum, default_value_t = ScalingArg::PerClassSum)]
    scaling: ScalingArg,
}

impl AlignArgs {
    fn policy(&self) -> Result<SelectionPolicy> {
        let field_clash = |field: &'static str, policy: &str| {
            Err(Error::InvalidConfig {
                field,
                reason: format!("does not apply to the {policy} policy"),
            })
        };
        match self.policy {
            PolicyArg::SingleLabel => {
                if self.k.is_some() {
                    return field_clash("k", "single-label");
                }
                if self.threshold.is_some() {
                    return field_clash("threshold", "single-label");
                }
                Ok(SelectionPolicy::SingleLabel)
            }
            PolicyArg::Hard | PolicyArg::Soft => {
                if self.threshold.is_some() {
                    return field_clash("threshold", "hard/soft");
                }
                let k = self.k.unwrap_or(3);
                Ok(match self.policy {
                    PolicyArg::Hard => SelectionPolicy::Hard { k },
                    _ => SelectionPolicy::Soft { k },
                })
            }
            PolicyArg::Ratio => {
                if self.k.is_some() {
                    return field_clash("k", "ratio");
                }
                let threshold = self.threshold.ok_or(Error::InvalidConfig {
                    field: "threshold",
                    reason: "required by the ratio policy".to_string(),
                })?;
                Ok(SelectionPolicy::Ratio { threshold })
            }
        }
    }

    fn kernel(&self) -> Result<KernelConfig> {
        let bandwidth_rule = match self.bandwidth {
            BandwidthArg::Median => {
                if self.sigma_sq.is_some() {
                    return Err(Error::InvalidConfig {
                        field: "sigma_sq",
                        reason: "applies only with --bandwidth fixed".to_string(),
                    });
                }
                BandwidthRule::MedianHeuristic
            }
            BandwidthArg::Fixed => {
                let sigma_sq = self.sigma_sq.ok_or(Error::InvalidConfig {
                    field: "sigma_sq",
                    reason: "required with --bandwidth fixed".to_string(),
                })?;
                BandwidthRule::Fixed { sigma_sq }
            }
        };
        Ok(KernelConfig {
            bandwidth_rule,
            weight_scaling: match self.scaling {
                ScalingArg::PerClassSum => WeightScaling::PerClassSum,
                ScalingArg::LiteralInverseNt => WeightScaling::LiteralInverseNt,
            },
            ..KernelConfig::default()
        })
    }

    fn config(&self, hyper: &HyperArgs, seed: u64) -> Result<AdaptConfig> {
        Ok(AdaptConfig {
            lr: hyper.lr,
            momentum: hyper.momentum,
            epochs: hyper.epochs,
            batch_size: hyper.batch_size,
            lambda: self.lambda,
            lambda_ramp: self.lambda_ramp,
            policy: self.policy()?,
            kernel: self.kernel()?,
            mode: match self.mode {
                ModeArg::EndToEnd => AdaptMode::EndToEnd,
                ModeArg::TwoStage => AdaptMode::TwoStage,
            },
            freeze_g: self.freeze_g,
            global_clusters: self.global_clusters,
            seed,
        })
    }
}

#[derive(Args)]
struct TrainSourceArgs {
    /// Labeled source CSV.
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out_checkpoint: Option<PathBuf>,
    /// Write the run document to this path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AdaptArgs {
    /// Labeled source CSV.
    #[arg(long)]
    source: PathBuf,
    /// Target CSV; a label column, if present, is used for evaluation only.
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long, conflicts_with_all = ["hidden", "feat_dim", "classes"])]
    init_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    align: AlignArgs,
    #[arg(long)]
    out_checkpoint: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ChainArgs {
    /// Labeled source CSV.
    #[arg(long)]
    source: PathBuf,
    /// Target CSV for one chain stage; repeat in stage order.
    #[arg(long = "target", required = true)]
    targets: Vec<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long, conflicts_with_all = ["hidden", "feat_dim", "classes"])]
    init_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    align: AlignArgs,
    /// Directory receiving stage-{i}.ckpt after each stage.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Labeled CSV to score.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Labeled source CSV.
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// Comma-separated seed list shared by every grid row.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Weight of the alignment term.
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long)]
    lambda_ramp: bool,
    #[arg(long, value_enum, default_value_t = ModeArg::EndToEnd)]
    mode: ModeArg,
    #[arg(long)]
    freeze_g: bool,
    #[arg(long)]
    global_clusters: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per gradient family.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DumpFeaturesArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV of post-transform features (plus labels when present).
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Generate(a) => cmd_generate(a),
        Command::TrainSource(a) => cmd_train_source(a),
        Command::Adapt(a) => cmd_adapt(a),
        Command::Chain(a) => cmd_chain(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Grid(a) => cmd_grid(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::DumpFeatures(a) => cmd_dump_features(a),
    }
}

fn load_spec(args: &GenerateArgs) -> Result<ShiftSpec> {
    let mut spec = match (&args.preset, &args.spec) {
        (Some(name), None) => ShiftSpec::preset(name)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|source| Error::Io { path: path.clone(), source })?;
            ShiftSpec::from_json(&text)?
        }
        _ => {
            return Err(Error::invalid_argument(
                "exactly one of --preset and --spec is required",
            ))
        }
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    Ok(spec)
}

fn cmd_generate(args: GenerateArgs) -> Result<ExitCode> {
    let spec = load_spec(&args)?;
    let (source, target) = generate_shift_benchmark(&spec)?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|source| Error::Io { path: args.out_dir.clone(), source })?;
    let src_path = args.out_dir.join("source.csv");
    let tgt_path = args.out_dir.join("target.csv");
    save_csv(&source, &src_path)?;
    save_csv(&target, &tgt_path)?;
    println!(
        "wrote {} ({} samples) and {} ({} samples), {} classes, dim {}",
        src_path.display(),
        source.n(),
        tgt_path.display(),
        target.n(),
        spec.n_classes,
        spec.dim
    );
    Ok(ExitCode::SUCCESS)
}

/// Resolves the class count the model is built with: the override when
/// given, otherwise the count implied by the source labels.
fn resolve_classes(source: &EmbeddingDataset, over: Option<usize>) -> Result<usize> {
    match over {
        None => Ok(source.n_classes()),
        Some(c) if c >= source.n_classes() => Ok(c),
        Some(c) => Err(Error::InvalidConfig {
            field: "classes",
            reason: format!("{c} is below the {} classes present in the data", source.n_classes()),
        }),
    }
}

fn model_dims(source: &EmbeddingDataset, model: &ModelArgs) -> Result<ModelDims> {
    let n_classes = resolve_classes(source, model.classes)?;
    ModelDims::new(source.dim(), model.hidden, model.feat_dim, n_classes)
}

/// Loads an initial model either from a checkpoint or by seeded init.
fn initial_model(
    init_checkpoint: Option<&Path>,
    source: &EmbeddingDataset,
    model_args: &ModelArgs,
    seed: u64,
) -> Result<ModelParams> {
    match init_checkpoint {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let dims = ckpt.params.dims();
            ckpt.validate_dims(source.dim(), dims.n_classes)?;
            if dims.n_classes < source.n_classes() {
                return Err(Error::DimensionMismatch {
                    checkpoint: format!("n_classes={}", dims.n_classes),
                    required: format!("n_classes={}", source.n_classes()),
                });
            }
            Ok(ckpt.params)
        }
        None => Ok(init_model(model_dims(source, model_args)?, seed)),
    }
}

fn write_checkpoint(
    path: Option<&Path>,
    params: &ModelParams,
    seed: u64,
    epochs: u64,
) -> Result<()> {
    if let Some(path) = path {
        let ckpt = Checkpoint { params: params.clone(), rng_seed: seed, epoch: epochs };
        save_checkpoint(&ckpt, path)?;
        eprintln!("checkpoint written to {}", path.display());
    }
    Ok(())
}

fn write_document<T: serde::Serialize>(
    path: Option<&Path>,
    kind: &str,
    payload: &T,
) -> Result<()> {
    if let Some(path) = path {
        Document::new(kind, payload).write(path)?;
        eprintln!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_train_source(args: TrainSourceArgs) -> Result<ExitCode> {
    let started = Instant::now();
    let source = load_csv(&args.source, LabelRole::Train)?;
    let model = initial_model(None, &source, &args.model, args.seed)?;
    let cfg = AdaptConfig {
        lr: args.hyper.lr,
        momentum: args.hyper.momentum,
        epochs: args.hyper.epochs,
        batch_size: args.hyper.batch_size,
        lambda: 0.0,
        policy: SelectionPolicy::SingleLabel,
        seed: args.seed,
        ..AdaptConfig::default()
    };
    let (model, report) = train_source_only(model, &source, &cfg)?;
    print!("{}", trace_table(&report));
    if let Some(metrics) = &report.final_metrics {
        println!("final metrics on the training set:");
        print!("{}", metrics_table(metrics));
    }
    write_checkpoint(args.out_checkpoint.as_deref(), &model, args.seed, cfg.epochs as u64)?;
    write_document(args.report.as_deref(), "train_source", &report)?;
    eprintln!("train-source finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(ExitCode::SUCCESS)
}

fn cmd_adapt(args: AdaptArgs) -> Result<ExitCode> {
    let started = Instant::now();
    let source = load_csv(&args.source, LabelRole::Train)?;
    let target = load_csv(&args.target, LabelRole::EvalOnly)?;
    let model = initial_model(args.init_checkpoint.as_deref(), &source, &args.model, args.seed)?;
    let cfg = args.align.config(&args.hyper, args.seed)?;
    let (model, report) = adapt(model, &source, &target, &cfg)?;
    print!("{}", trace_table(&report));
    if let Some(metrics) = &report.final_metrics {
        println!("final metrics on the target:");
        print!("{}", metrics_table(metrics));
    }
    write_checkpoint(args.out_checkpoint.as_deref(), &model, args.seed, cfg.epochs as u64)?;
    write_document(args.report.as_deref(), "adapt", &report)?;
    eprintln!("adapt finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(ExitCode::SUCCESS)
}

fn cmd_chain(args: ChainArgs) -> Result<ExitCode> {
    let started = Instant::now();
    let source = load_csv(&args.source, LabelRole::Train)?;
    let targets = args
        .targets
        .iter()
        .map(|p| load_csv(p, LabelRole::EvalOnly))
        .collect::<Result<Vec<_>>>()?;
    let target_refs: Vec<&EmbeddingDataset> = targets.iter().collect();
    let model = initial_model(args.init_checkpoint.as_deref(), &source, &args.model, args.seed)?;
    let cfg = args.align.config(&args.hyper, args.seed)?;
    if let Some(dir) = &args.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.clone(), source })?;
    }
    let (_, reports) = chain_adapt(
        model,
        &source,
        &target_refs,
        &cfg,
        args.checkpoint_dir.as_deref(),
    )?;
    for (stage, report) in reports.iter().enumerate() {
        println!("stage {stage} ({}):", args.targets[stage].display());
        print!("{}", trace_table(report));
        if let Some(metrics) = &report.final_metrics {
            print!("{}", metrics_table(metrics));
        }
    }
    write_document(args.report.as_deref(), "chain", &reports)?;
    eprintln!("chain finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(ExitCode::SUCCESS)
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = load_csv(&args.data, LabelRole::EvalOnly)?;
    if !data.has_labels() {
        return Err(Error::invalid_argument(format!(
            "{} has no label column to evaluate against",
            args.data.display()
        )));
    }
    let metrics = evaluate_model(&ckpt.params, &data)?;
    print!("{}", metrics_table(&metrics));
    write_document(args.report.as_deref(), "evaluate", &metrics)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_grid(args: GridArgs) -> Result<ExitCode> {
    let started = Instant::now();
    let source = load_csv(&args.source, LabelRole::Train)?;
    let target = load_csv(&args.target, LabelRole::EvalOnly)?;
    let dims = model_dims(&source, &args.model)?;
    // The policy is the grid axis; the base config carries everything else.
    let base_cfg = AdaptConfig {
        lr: args.hyper.lr,
        momentum: args.hyper.momentum,
        epochs: args.hyper.epochs,
        batch_size: args.hyper.batch_size,
        lambda: args.lambda,
        lambda_ramp: args.lambda_ramp,
        mode: match args.mode {
            ModeArg::EndToEnd => AdaptMode::EndToEnd,
            ModeArg::TwoStage => AdaptMode::TwoStage,
        },
        freeze_g: args.freeze_g,
        global_clusters: args.global_clusters,
        ..AdaptConfig::default()
    };
    let grid = run_ablation_grid(dims, &source, &target, &base_cfg, &args.seeds)?;
    print!("{}", grid_table(&grid));
    write_document(args.report.as_deref(), "grid", &grid)?;
    eprintln!("grid finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    if args.instances == 0 {
        return Err(Error::InvalidConfig {
            field: "instances",
            reason: "must be at least 1".to_string(),
        });
    }
    let reports = gradcheck::run_all(args.seed, args.instances);
    print!("{}", gradcheck_table(&reports));
    write_document(args.report.as_deref(), "gradcheck", &reports)?;
    let all_passed = reports.iter().all(|r| r.passed);
    Ok(if all_passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn cmd_dump_features(args: DumpFeaturesArgs) -> Result<ExitCode> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let data = load_csv(&args.data, LabelRole::EvalOnly)?;
    if data.dim() != ckpt.params.dims().d_in {
        return Err(Error::DimensionMismatch {
            checkpoint: format!("d_in={}", ckpt.params.dims().d_in),
            required: format!("d_in={}", data.dim()),
        });
    }
    let features = ckpt.params.forward_features(data.features());
    let provenance = format!("features of {}", data.provenance());
    let out = match data.eval_labels() {
        Some(labels) => EmbeddingDataset::new_labeled(
            features,
            labels.to_vec(),
            data.n_classes(),
            LabelRole::EvalOnly,
            provenance,
        )?,
        None => EmbeddingDataset::new_unlabeled(features, provenance)?,
    };
    save_csv(&out, &args.out)?;
    println!("wrote {} feature rows to {}", out.n(), args.out.display());
    Ok(ExitCode::SUCCESS)
}
