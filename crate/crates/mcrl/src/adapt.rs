//! Training loops: source-only pretraining, joint adaptation, chaining.
//!
//! Adaptation minimizes `CE(source) + lambda * alignment(source, target)`
//! per mini-batch. The alignment term is the class-conditional kernel MMD
//! from [`crate::kernels`], fed by pseudo-label cluster weights from
//! [`crate::selection`]. Cluster choice and weights are treated as constants
//! of the step; gradients flow only through the feature extractor.
//!
//! Every run draws from named sub-streams of one seed (model init, source
//! shuffling, target shuffling), so toggling the alignment term on or off
//! never changes the batches the classifier sees. With `lambda = 0` the
//! adaptation loop collapses to the plain source-only loop, bit for bit.

use std::path::Path;
use std::time::Instant;

use crate::data::batch_indices;
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, MetricsReport};
use crate::kernels::{class_conditional_mmd, KernelConfig, MIN_CLUSTER_SIZE};
use crate::model::{save_checkpoint, Checkpoint, ModelDims, ModelParams};
use crate::numerics::{derive_seed, Mat, Rng, SgdState};
use crate::selection::{build_weights, pseudo_labels, ReferenceWeights, SelectionPolicy};
use crate::EmbeddingDataset;

/// Sub-stream tags under the run seed. Init is separate from the shuffles
/// so a reloaded checkpoint replays shuffles without replaying init.
const STREAM_INIT: u64 = 0;
const STREAM_SOURCE_SHUFFLE: u64 = 1;
const STREAM_TARGET_SHUFFLE: u64 = 2;
/// Stage-2 streams of the two-stage protocol.
const STREAM_STAGE2_SOURCE: u64 = 3;
const STREAM_STAGE2_TARGET: u64 = 4;
/// Chain stage `i >= 1` runs under `derive_seed(seed, CHAIN_BASE + i)`;
/// stage 0 keeps the base seed so a one-element chain equals a plain run.
const STREAM_CHAIN_BASE: u64 = 16;

/// Whether adaptation trains jointly from scratch or pseudo-labels with a
/// classifier pretrained on source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    EndToEnd,
    TwoStage,
}

/// Hyperparameters for [`train_source_only`], [`adapt`] and [`chain_adapt`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdaptConfig {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Trade-off weight on the alignment term.
    pub lambda: f64,
    /// Ramp lambda from 0 to its full value over training progress
    /// `p` as `lambda * (2 / (1 + exp(-10 p)) - 1)`. Off by default so
    /// ablations compare fixed weights.
    pub lambda_ramp: bool,
    pub policy: SelectionPolicy,
    pub kernel: KernelConfig,
    pub mode: AdaptMode,
    /// Update only the classifier head; the feature extractor stays fixed.
    pub freeze_g: bool,
    /// Pseudo-label the whole target set once per epoch instead of per
    /// batch.
    pub global_clusters: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            lr: 0.01,
            momentum: 0.9,
            epochs: 20,
            batch_size: 32,
            lambda: 0.5,
            lambda_ramp: false,
            policy: SelectionPolicy::Soft { k: 3 },
            kernel: KernelConfig::default(),
            mode: AdaptMode::EndToEnd,
            freeze_g: false,
            global_clusters: false,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let bad = |field: &'static str, reason: String| {
            Err(Error::InvalidConfig { field, reason })
        };
        if !self.lr.is_finite() || self.lr < 0.0 {
            return bad("lr", format!("must be a nonnegative real, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".to_string());
        }
        if self.batch_size < 2 {
            // alignment clusters need at least 2 samples
            return bad("batch_size", "must be at least 2".to_string());
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return bad("lambda", format!("must be a nonnegative real, got {}", self.lambda));
        }
        self.policy.validate(n_classes)?;
        self.kernel.validate()?;
        Ok(())
    }
}

/// Per-epoch target metrics, recorded when the target carries eval labels.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochEval {
    pub top1: f64,
    pub top3: f64,
    pub macro_f1: f64,
}

/// One epoch of the training trace. `ce_loss` is the mean over samples
/// seen that epoch, so it is invariant to how a shuffle splits batches.
/// `mcrl_loss` and `active_class_rate` are per-batch statistics and
/// average over steps.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub ce_loss: f64,
    pub mcrl_loss: f64,
    pub active_class_rate: f64,
    pub target_eval: Option<EpochEval>,
}

/// Outcome of a training run: config echo, per-epoch trace, final metrics.
///
/// `wall_clock_secs` is informational and deliberately left out of the
/// serialized form so equal runs produce equal bytes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdaptReport {
    pub config: AdaptConfig,
    pub trace: Vec<EpochTrace>,
    pub final_metrics: Option<MetricsReport>,
    /// Steps where no class was active and the update fell back to CE only.
    pub degenerate_steps: usize,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Glorot-initialized parameters from the run seed's init stream.
pub fn init_model(dims: ModelDims, seed: u64) -> ModelParams {
    ModelParams::init(dims, &mut Rng::derived(seed, STREAM_INIT))
}

/// Seed governing chain stage `stage` under base seed `base_seed`.
pub fn chain_stage_seed(base_seed: u64, stage: usize) -> u64 {
    if stage == 0 {
        base_seed
    } else {
        derive_seed(base_seed, STREAM_CHAIN_BASE + stage as u64)
    }
}

/// Batches one shuffled pass produces, accounting for the merge of a
/// trailing single-sample batch.
fn epoch_batch_count(n: usize, batch_size: usize) -> usize {
    let chunks = n.div_ceil(batch_size);
    if chunks > 1 && n % batch_size == 1 {
        chunks - 1
    } else {
        chunks
    }
}

/// Endless source batch supply: reshuffles whenever a pass runs out. One
/// source pass consumed in full matches `batch_indices` draw for draw.
struct SourceStream {
    rng: Rng,
    n: usize,
    batch_size: usize,
    queue: std::collections::VecDeque<Vec<usize>>,
}

impl SourceStream {
    fn new(n: usize, batch_size: usize, rng: Rng) -> Self {
        SourceStream { rng, n, batch_size, queue: std::collections::VecDeque::new() }
    }

    fn next_batch(&mut self) -> Result<Vec<usize>> {
        if self.queue.is_empty() {
            self.queue.extend(batch_indices(self.n, self.batch_size, &mut self.rng)?);
        }
        Ok(self.queue.pop_front().expect("refill produced at least one batch"))
    }
}

fn check_training_inputs(dims: ModelDims, ds: &EmbeddingDataset, labels: &[usize]) -> Result<()> {
    if ds.dim() != dims.d_in {
        return Err(Error::invalid_argument(format!(
            "dataset dim {} does not match model input dim {}",
            ds.dim(),
            dims.d_in
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= dims.n_classes) {
        return Err(Error::invalid_argument(format!(
            "label {bad} out of range for {} classes",
            dims.n_classes
        )));
    }
    Ok(())
}

fn epoch_eval(model: &ModelParams, target: Option<&EmbeddingDataset>) -> Result<Option<EpochEval>> {
    match target {
        Some(ds) if ds.eval_labels().is_some() => {
            let m = evaluate_model(model, ds)?;
            Ok(Some(EpochEval { top1: m.top1, top3: m.top3, macro_f1: m.macro_f1 }))
        }
        _ => Ok(None),
    }
}

/// Zero-filled gradient set for the feature blocks, used when `freeze_g`
/// holds them fixed.
fn zero_feature_grads(dims: ModelDims) -> [Mat; 4] {
    let shapes = dims.block_shapes();
    [
        Mat::zeros(shapes[0].0, shapes[0].1),
        Mat::zeros(shapes[1].0, shapes[1].1),
        Mat::zeros(shapes[2].0, shapes[2].1),
        Mat::zeros(shapes[3].0, shapes[3].1),
    ]
}

/// The plain CE loop over source passes. Shared by source-only training and
/// the `lambda = 0` degenerate case of adaptation, which makes their
/// equivalence structural rather than numerical.
fn run_ce_epochs(
    model: &mut ModelParams,
    source: &EmbeddingDataset,
    labels: &[usize],
    cfg: &AdaptConfig,
    stream: &mut SourceStream,
    eval_target: Option<&EmbeddingDataset>,
) -> Result<Vec<EpochTrace>> {
    let dims = model.dims();
    let mut sgd = if cfg.lr > 0.0 {
        Some(SgdState::new(cfg.lr, cfg.momentum, &dims.block_shapes())?)
    } else {
        None
    };
    let steps = epoch_batch_count(source.n(), cfg.batch_size);
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut ce_sum = 0.0;
        let mut samples = 0usize;
        for _ in 0..steps {
            let batch = stream.next_batch()?;
            let xs = source.features().gather_rows(&batch);
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let out = model.ce_loss_and_grads(&xs, &ys)?;
            ce_sum += out.loss * batch.len() as f64;
            samples += batch.len();
            if let Some(sgd) = sgd.as_mut() {
                if cfg.freeze_g {
                    let zg = zero_feature_grads(dims);
                    let grads = [&zg[0], &zg[1], &zg[2], &zg[3], &out.grad_wc, &out.grad_bc];
                    sgd.step(&mut model.blocks_mut(), &grads);
                } else {
                    let g = model.backward_through_g(&xs, &out.grad_features);
                    let grads = [&g.w1, &g.b1, &g.w2, &g.b2, &out.grad_wc, &out.grad_bc];
                    sgd.step(&mut model.blocks_mut(), &grads);
                }
            }
        }
        trace.push(EpochTrace {
            epoch,
            ce_loss: ce_sum / samples as f64,
            mcrl_loss: 0.0,
            active_class_rate: 0.0,
            target_eval: epoch_eval(model, eval_target)?,
        });
    }
    Ok(trace)
}

/// Trains the classifier on labeled source data with mini-batch SGD.
/// Final metrics are computed on the training set.
pub fn train_source_only(
    mut model: ModelParams,
    source: &EmbeddingDataset,
    cfg: &AdaptConfig,
) -> Result<(ModelParams, AdaptReport)> {
    let started = Instant::now();
    let dims = model.dims();
    cfg.validate(dims.n_classes)?;
    let labels = source
        .train_labels()
        .ok_or_else(|| Error::invalid_argument("source-only training needs train labels"))?;
    check_training_inputs(dims, source, labels)?;

    let mut stream = SourceStream::new(
        source.n(),
        cfg.batch_size,
        Rng::derived(cfg.seed, STREAM_SOURCE_SHUFFLE),
    );
    let trace = run_ce_epochs(&mut model, source, labels, cfg, &mut stream, None)?;
    let final_metrics = Some(evaluate_model(&model, source)?);
    let report = AdaptReport {
        config: cfg.clone(),
        trace,
        final_metrics,
        degenerate_steps: 0,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Restriction of full-dataset reference weights to one batch.
fn slice_weights(full: &ReferenceWeights, batch: &[usize]) -> Result<ReferenceWeights> {
    let rows: Vec<Vec<(usize, f64)>> = batch.iter().map(|&j| full.row(j).to_vec()).collect();
    ReferenceWeights::new(full.n_classes(), rows)
}

fn ramp_factor(p: f64) -> f64 {
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

/// One adaptation phase: target passes define epochs, source batches come
/// from an endless reshuffling stream. `pseudo_source` supplies the
/// pseudo-labeling model when it is not the live one.
#[allow(clippy::too_many_arguments)]
fn run_adapt_epochs(
    model: &mut ModelParams,
    source: &EmbeddingDataset,
    source_labels: &[usize],
    target: &EmbeddingDataset,
    cfg: &AdaptConfig,
    pseudo_source: Option<&ModelParams>,
    source_stream: &mut SourceStream,
    target_rng: &mut Rng,
) -> Result<(Vec<EpochTrace>, usize)> {
    let dims = model.dims();
    let c = dims.n_classes;
    let mut sgd = if cfg.lr > 0.0 {
        Some(SgdState::new(cfg.lr, cfg.momentum, &dims.block_shapes())?)
    } else {
        None
    };
    let steps_per_epoch = epoch_batch_count(target.n(), cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut degenerate = 0usize;
    let mut global_step = 0usize;
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let target_batches = batch_indices(target.n(), cfg.batch_size, target_rng)?;
        // epoch-level pseudo-labeling over the full target set
        let full_weights = if cfg.global_clusters {
            let scorer = pseudo_source.unwrap_or(model);
            let logits = scorer.forward(target.features());
            Some(build_weights(&pseudo_labels(&logits)?, &cfg.policy)?)
        } else {
            None
        };

        let mut ce_sum = 0.0;
        let mut ce_samples = 0usize;
        let mut mcrl_sum = 0.0;
        let mut active_sum = 0.0;
        for tb in &target_batches {
            let sb = source_stream.next_batch()?;
            let xs = source.features().gather_rows(&sb);
            let ys: Vec<usize> = sb.iter().map(|&i| source_labels[i]).collect();
            let ce = model.ce_loss_and_grads(&xs, &ys)?;
            ce_samples += sb.len();

            let xt = target.features().gather_rows(tb);
            let ft = model.forward_features(&xt);
            let weights = match &full_weights {
                Some(full) => slice_weights(full, tb)?,
                None => {
                    let logits = match pseudo_source {
                        Some(frozen) => frozen.forward(&xt),
                        None => model.forward_logits(&ft),
                    };
                    build_weights(&pseudo_labels(&logits)?, &cfg.policy)?
                }
            };

            let fs = model.forward_features(&xs);
            let mmd = class_conditional_mmd(&fs, &ys, &ft, &weights, &cfg.kernel, MIN_CLUSTER_SIZE)?;
            if mmd.active_classes == 0 {
                degenerate += 1;
            }

            let lambda = if cfg.lambda_ramp {
                cfg.lambda * ramp_factor((global_step + 1) as f64 / total_steps as f64)
            } else {
                cfg.lambda
            };

            ce_sum += ce.loss * sb.len() as f64;
            mcrl_sum += mmd.loss;
            active_sum += mmd.active_classes as f64 / c as f64;
            global_step += 1;

            if let Some(sgd) = sgd.as_mut() {
                if cfg.freeze_g {
                    let zg = zero_feature_grads(dims);
                    let grads = [&zg[0], &zg[1], &zg[2], &zg[3], &ce.grad_wc, &ce.grad_bc];
                    sgd.step(&mut model.blocks_mut(), &grads);
                } else {
                    // d/dF [CE + lambda * MMD], then through the extractor
                    let mut gf_src = ce.grad_features;
                    gf_src.scaled_add(lambda, &mmd.grad_source);
                    let mut g = model.backward_through_g(&xs, &gf_src);

                    let mut gf_tgt = mmd.grad_target;
                    gf_tgt.scale(lambda);
                    let gt = model.backward_through_g(&xt, &gf_tgt);
                    g.w1.scaled_add(1.0, &gt.w1);
                    g.b1.scaled_add(1.0, &gt.b1);
                    g.w2.scaled_add(1.0, &gt.w2);
                    g.b2.scaled_add(1.0, &gt.b2);

                    let grads = [&g.w1, &g.b1, &g.w2, &g.b2, &ce.grad_wc, &ce.grad_bc];
                    sgd.step(&mut model.blocks_mut(), &grads);
                }
            }
        }
        let steps = target_batches.len() as f64;
        trace.push(EpochTrace {
            epoch,
            ce_loss: ce_sum / ce_samples as f64,
            mcrl_loss: mcrl_sum / steps,
            active_class_rate: active_sum / steps,
            target_eval: epoch_eval(model, Some(target))?,
        });
    }
    Ok((trace, degenerate))
}

/// Adapts the model to an unlabeled target domain.
///
/// End-to-end mode pseudo-labels each batch with the live model. Two-stage
/// mode first runs a full source-only phase (identical to
/// [`train_source_only`]), then adapts with pseudo-labels from a frozen
/// copy of the stage-1 model; its report traces the adaptation phase.
pub fn adapt(
    mut model: ModelParams,
    source: &EmbeddingDataset,
    target: &EmbeddingDataset,
    cfg: &AdaptConfig,
) -> Result<(ModelParams, AdaptReport)> {
    let started = Instant::now();
    let dims = model.dims();
    cfg.validate(dims.n_classes)?;
    let source_labels = source
        .train_labels()
        .ok_or_else(|| Error::invalid_argument("adaptation needs labeled source data"))?;
    check_training_inputs(dims, source, source_labels)?;
    if target.dim() != dims.d_in {
        return Err(Error::invalid_argument(format!(
            "target dim {} does not match model input dim {}",
            target.dim(),
            dims.d_in
        )));
    }

    let mut frozen = None;
    let (source_tag, target_tag) = match cfg.mode {
        AdaptMode::EndToEnd => (STREAM_SOURCE_SHUFFLE, STREAM_TARGET_SHUFFLE),
        AdaptMode::TwoStage => {
            let mut stage1 = SourceStream::new(
                source.n(),
                cfg.batch_size,
                Rng::derived(cfg.seed, STREAM_SOURCE_SHUFFLE),
            );
            run_ce_epochs(&mut model, source, source_labels, cfg, &mut stage1, None)?;
            frozen = Some(model.clone());
            (STREAM_STAGE2_SOURCE, STREAM_STAGE2_TARGET)
        }
    };

    let mut source_stream =
        SourceStream::new(source.n(), cfg.batch_size, Rng::derived(cfg.seed, source_tag));
    let (trace, degenerate_steps) = if cfg.lambda == 0.0 {
        let eval_target = target.eval_labels().is_some().then_some(target);
        let trace =
            run_ce_epochs(&mut model, source, source_labels, cfg, &mut source_stream, eval_target)?;
        (trace, 0)
    } else {
        let mut target_rng = Rng::derived(cfg.seed, target_tag);
        run_adapt_epochs(
            &mut model,
            source,
            source_labels,
            target,
            cfg,
            frozen.as_ref(),
            &mut source_stream,
            &mut target_rng,
        )?
    };

    let final_metrics = if target.eval_labels().is_some() {
        Some(evaluate_model(&model, target)?)
    } else {
        None
    };
    let report = AdaptReport {
        config: cfg.clone(),
        trace,
        final_metrics,
        degenerate_steps,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Runs [`adapt`] over an ordered list of targets, threading the model
/// through. Stage `i` runs under [`chain_stage_seed`]; when a checkpoint
/// directory is given, `stage-{i}.ckpt` records the model after stage `i`
/// with the base seed and the number of completed stages, so any suffix of
/// the chain can be replayed from a checkpoint.
pub fn chain_adapt(
    mut model: ModelParams,
    source: &EmbeddingDataset,
    targets: &[&EmbeddingDataset],
    cfg: &AdaptConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(ModelParams, Vec<AdaptReport>)> {
    if targets.is_empty() {
        return Err(Error::invalid_argument("chain needs at least one target"));
    }
    let mut reports = Vec::with_capacity(targets.len());
    for (stage, target) in targets.iter().enumerate() {
        let at_stage = |e: Error| Error::ChainStage { stage, source: Box::new(e) };
        let stage_cfg = AdaptConfig { seed: chain_stage_seed(cfg.seed, stage), ..cfg.clone() };
        let (next, report) = adapt(model, source, target, &stage_cfg).map_err(at_stage)?;
        model = next;
        reports.push(report);
        if let Some(dir) = checkpoint_dir {
            let ckpt = Checkpoint {
                params: model.clone(),
                rng_seed: cfg.seed,
                epoch: (stage + 1) as u64,
            };
            save_checkpoint(&ckpt, &dir.join(format!("stage-{stage}.ckpt"))).map_err(at_stage)?;
        }
    }
    Ok((model, reports))
}
