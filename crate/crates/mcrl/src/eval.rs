//! Classification metrics: top-k accuracy, confusion matrix, macro-F1.
//!
//! Macro-F1 averages per-class F1 without support weighting, so classes a
//! model never predicts drag the score down instead of vanishing from it.

use crate::adapt::{adapt, init_model, train_source_only, AdaptConfig};
use crate::error::{Error, Result};
use crate::model::{ModelDims, ModelParams};
use crate::numerics::Mat;
use crate::selection::{top_k, SelectionPolicy};
use crate::EmbeddingDataset;

/// Evaluation summary for one model on one labeled dataset.
/// `confusion[actual][predicted]` holds raw counts.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub top1: f64,
    pub top3: f64,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<u64>>,
    pub n_eval: usize,
}

fn check_labels(n_rows: usize, y: &[usize], n_classes: usize) -> Result<()> {
    if n_rows == 0 {
        return Err(Error::invalid_argument("no rows to score"));
    }
    if y.len() != n_rows {
        return Err(Error::invalid_argument(format!(
            "{} labels for {} rows",
            y.len(),
            n_rows
        )));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
        return Err(Error::invalid_argument(format!(
            "label {bad} out of range for {n_classes} classes"
        )));
    }
    Ok(())
}

/// Fraction of rows whose true label ranks among the `k` largest scores.
/// Scores are ranked as-is; softmax would not change the order. Ties break
/// toward the lower class index, as everywhere else.
pub fn topk_accuracy(logits: &Mat, y: &[usize], k: usize) -> Result<f64> {
    let c = logits.cols();
    check_labels(logits.rows(), y, c)?;
    if k == 0 || k > c {
        return Err(Error::invalid_argument(format!(
            "k = {k} outside 1..={c}"
        )));
    }
    let mut hits = 0usize;
    for (i, &label) in y.iter().enumerate() {
        if top_k(logits.row(i), k)?.contains(&label) {
            hits += 1;
        }
    }
    Ok(hits as f64 / y.len() as f64)
}

/// Counts `confusion[actual][predicted]` under argmax prediction.
pub fn confusion_matrix(logits: &Mat, y: &[usize], n_classes: usize) -> Result<Vec<Vec<u64>>> {
    if logits.cols() != n_classes {
        return Err(Error::invalid_argument(format!(
            "logit width {} does not match {n_classes} classes",
            logits.cols()
        )));
    }
    check_labels(logits.rows(), y, n_classes)?;
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (i, &label) in y.iter().enumerate() {
        let pred = top_k(logits.row(i), 1)?[0];
        m[label][pred] += 1;
    }
    Ok(m)
}

/// Unweighted mean of per-class F1 over a square count matrix.
///
/// Per class, F1 = 2·TP / (predicted + actual), which equals 2PR/(P+R)
/// under the convention that an undefined precision or recall is 0. A class
/// with no predictions and no members contributes 0.
pub fn macro_f1(confusion: &[Vec<u64>]) -> Result<f64> {
    let c = confusion.len();
    if c == 0 {
        return Err(Error::invalid_argument("empty confusion matrix"));
    }
    if confusion.iter().any(|row| row.len() != c) {
        return Err(Error::invalid_argument("confusion matrix is not square"));
    }
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(Error::invalid_argument("confusion matrix is all zero"));
    }
    let mut sum = 0.0;
    for cls in 0..c {
        let tp = confusion[cls][cls];
        let actual: u64 = confusion[cls].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[cls]).sum();
        if actual + predicted > 0 {
            sum += 2.0 * tp as f64 / (actual + predicted) as f64;
        }
    }
    Ok(sum / c as f64)
}

/// Scores `params` on a labeled dataset. Top-3 falls back to top-C when the
/// problem has fewer than three classes.
pub fn evaluate_model(params: &ModelParams, ds: &EmbeddingDataset) -> Result<MetricsReport> {
    let y = ds
        .eval_labels()
        .ok_or_else(|| Error::invalid_argument("evaluation needs a labeled dataset"))?;
    let c = params.dims().n_classes;
    if ds.dim() != params.dims().d_in {
        return Err(Error::invalid_argument(format!(
            "dataset dim {} does not match model input dim {}",
            ds.dim(),
            params.dims().d_in
        )));
    }
    let logits = params.forward(ds.features());
    let confusion = confusion_matrix(&logits, y, c)?;
    Ok(MetricsReport {
        top1: topk_accuracy(&logits, y, 1)?,
        top3: topk_accuracy(&logits, y, 3.min(c))?,
        macro_f1: macro_f1(&confusion)?,
        confusion,
        n_eval: ds.n(),
    })
}

/// The nine policy rows of the ablation grid, in fixed emission order:
/// ratio thresholds, then hard K, then soft K.
pub fn grid_policies() -> [SelectionPolicy; 9] {
    [
        SelectionPolicy::Ratio { threshold: 1.1 },
        SelectionPolicy::Ratio { threshold: 1.2 },
        SelectionPolicy::Ratio { threshold: 1.5 },
        SelectionPolicy::Hard { k: 2 },
        SelectionPolicy::Hard { k: 3 },
        SelectionPolicy::Hard { k: 4 },
        SelectionPolicy::Soft { k: 2 },
        SelectionPolicy::Soft { k: 3 },
        SelectionPolicy::Soft { k: 4 },
    ]
}

/// One grid row: a policy (or the source-only baseline) with its per-seed
/// final target top-1 scores.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridRow {
    pub label: String,
    /// `None` marks the source-only baseline.
    pub policy: Option<SelectionPolicy>,
    pub top1_per_seed: Vec<f64>,
    pub mean_top1: Option<f64>,
    pub error: Option<String>,
}

/// Ablation results: the source-only baseline plus one row per grid policy,
/// each a mean of final target top-1 over the shared seed set.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AblationGrid {
    pub seeds: Vec<u64>,
    pub baseline: GridRow,
    pub rows: Vec<GridRow>,
}

fn finish_row(
    label: String,
    policy: Option<SelectionPolicy>,
    outcome: Result<Vec<f64>>,
) -> GridRow {
    match outcome {
        Ok(top1s) => {
            let mean = top1s.iter().sum::<f64>() / top1s.len() as f64;
            GridRow { label, policy, top1_per_seed: top1s, mean_top1: Some(mean), error: None }
        }
        Err(e) => GridRow {
            label,
            policy,
            top1_per_seed: Vec::new(),
            mean_top1: None,
            error: Some(e.to_string()),
        },
    }
}

/// Runs one adaptation per (policy, seed) cell plus the source-only
/// baseline, scoring final target top-1. A failing row records its error
/// and leaves the rest of the grid intact. Assembly order is fixed, so
/// reruns with equal inputs produce identical grids.
pub fn run_ablation_grid(
    dims: ModelDims,
    source: &EmbeddingDataset,
    target: &EmbeddingDataset,
    base_cfg: &AdaptConfig,
    seeds: &[u64],
) -> Result<AblationGrid> {
    if seeds.is_empty() {
        return Err(Error::invalid_argument("ablation grid needs at least one seed"));
    }
    if target.eval_labels().is_none() {
        return Err(Error::invalid_argument("ablation grid needs target eval labels"));
    }

    let baseline_outcome = seeds
        .iter()
        .map(|&seed| {
            let cfg = AdaptConfig { seed, ..base_cfg.clone() };
            let (model, _) = train_source_only(init_model(dims, seed), source, &cfg)?;
            Ok(evaluate_model(&model, target)?.top1)
        })
        .collect::<Result<Vec<f64>>>();
    let baseline = finish_row("source_only".to_string(), None, baseline_outcome);

    let rows = grid_policies()
        .into_iter()
        .map(|policy| {
            let outcome = seeds
                .iter()
                .map(|&seed| {
                    let cfg = AdaptConfig { policy, seed, ..base_cfg.clone() };
                    let (_, report) = adapt(init_model(dims, seed), source, target, &cfg)?;
                    let metrics = report
                        .final_metrics
                        .expect("labeled target always yields final metrics");
                    Ok(metrics.top1)
                })
                .collect::<Result<Vec<f64>>>();
            finish_row(policy.to_string(), Some(policy), outcome)
        })
        .collect();

    Ok(AblationGrid { seeds: seeds.to_vec(), baseline, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::LabelRole;

    fn random_instance(n: usize, c: usize, seed: u64) -> (Mat, Vec<usize>) {
        let mut rng = Rng::new(seed);
        let mut logits = Mat::zeros(n, c);
        for i in 0..n {
            for j in 0..c {
                logits.set(i, j, rng.next_normal());
            }
        }
        let y: Vec<usize> = (0..n).map(|_| (rng.next_u64() % c as u64) as usize).collect();
        (logits, y)
    }

    #[test]
    fn top_c_is_always_one() {
        for seed in 0..5 {
            let (logits, y) = random_instance(20, 4, seed);
            assert_eq!(topk_accuracy(&logits, &y, 4).unwrap(), 1.0);
        }
    }

    #[test]
    fn one_hot_logits_score_perfectly() {
        let y = vec![2usize, 0, 1];
        let mut logits = Mat::zeros(3, 3);
        for (i, &c) in y.iter().enumerate() {
            logits.set(i, c, 10.0);
        }
        assert_eq!(topk_accuracy(&logits, &y, 1).unwrap(), 1.0);
    }

    #[test]
    fn matches_brute_force_membership_scan() {
        let (logits, y) = random_instance(50, 5, 77);
        for k in 1..=5 {
            let got = topk_accuracy(&logits, &y, k).unwrap();
            let mut hits = 0;
            for (i, &label) in y.iter().enumerate() {
                let row = logits.row(i);
                let mut order: Vec<usize> = (0..5).collect();
                order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
                if order[..k].contains(&label) {
                    hits += 1;
                }
            }
            assert_eq!(got, hits as f64 / 50.0, "k = {k}");
        }
    }

    #[test]
    fn topk_is_monotone_in_k() {
        for seed in 0..10 {
            let (logits, y) = random_instance(30, 6, seed);
            let mut prev = 0.0;
            for k in 1..=6 {
                let acc = topk_accuracy(&logits, &y, k).unwrap();
                assert!(acc >= prev);
                prev = acc;
            }
        }
    }

    #[test]
    fn topk_argument_errors() {
        let (logits, mut y) = random_instance(10, 3, 1);
        assert!(topk_accuracy(&logits, &y, 0).is_err());
        assert!(topk_accuracy(&logits, &y, 4).is_err());
        y[3] = 3;
        assert!(topk_accuracy(&logits, &y, 1).is_err());
    }

    #[test]
    fn diagonal_confusion_scores_one() {
        let m = vec![vec![5, 0, 0], vec![0, 2, 0], vec![0, 0, 9]];
        assert_eq!(macro_f1(&m).unwrap(), 1.0);
    }

    #[test]
    fn two_class_hand_value() {
        let m = vec![vec![8, 2], vec![3, 7]];
        let got = macro_f1(&m).unwrap();
        let exact = (16.0 / 21.0 + 14.0 / 19.0) / 2.0;
        assert!((got - exact).abs() < 1e-12);
        assert!((got - 0.74937).abs() < 1e-5);
    }

    #[test]
    fn macro_f1_rejects_bad_matrices() {
        assert!(macro_f1(&[]).is_err());
        assert!(macro_f1(&[vec![0, 0], vec![0, 0]]).is_err());
        assert!(macro_f1(&[vec![1, 2], vec![3]]).is_err());
    }

    #[test]
    fn zero_support_class_contributes_zero() {
        // class 2 never predicted, never actual
        let m = vec![vec![4, 1, 0], vec![2, 3, 0], vec![0, 0, 0]];
        let f0 = 2.0 * 4.0 / (5.0 + 6.0);
        let f1 = 2.0 * 3.0 / (5.0 + 4.0);
        let want = (f0 + f1 + 0.0) / 3.0;
        assert!((macro_f1(&m).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn matches_per_class_loop_oracle() {
        let mut rng = Rng::new(2024);
        for _ in 0..200 {
            let c = 2 + (rng.next_u64() % 5) as usize;
            let m: Vec<Vec<u64>> = (0..c)
                .map(|_| (0..c).map(|_| rng.next_u64() % 7).collect())
                .collect();
            if m.iter().flatten().all(|&v| v == 0) {
                continue;
            }
            let got = macro_f1(&m).unwrap();
            let mut sum = 0.0;
            for cls in 0..c {
                let tp = m[cls][cls] as f64;
                let actual: u64 = m[cls].iter().sum();
                let predicted: u64 = m.iter().map(|r| r[cls]).sum();
                let p = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
                let r = if actual > 0 { tp / actual as f64 } else { 0.0 };
                sum += if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            }
            assert!((got - sum / c as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn macro_f1_is_relabeling_equivariant() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let c = 3 + (rng.next_u64() % 3) as usize;
            let m: Vec<Vec<u64>> = (0..c)
                .map(|_| (0..c).map(|_| rng.next_u64() % 5 + 1).collect())
                .collect();
            let mut perm: Vec<usize> = (0..c).collect();
            rng.shuffle(&mut perm);
            let permuted: Vec<Vec<u64>> = (0..c)
                .map(|i| (0..c).map(|j| m[perm[i]][perm[j]]).collect())
                .collect();
            let a = macro_f1(&m).unwrap();
            let b = macro_f1(&permuted).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_counts_sum_to_n() {
        let (logits, y) = random_instance(40, 4, 9);
        let m = confusion_matrix(&logits, &y, 4).unwrap();
        let total: u64 = m.iter().flatten().sum();
        assert_eq!(total, 40);
        for (i, &label) in y.iter().enumerate() {
            let pred = top_k(logits.row(i), 1).unwrap()[0];
            assert!(m[label][pred] > 0);
        }
    }

    #[test]
    fn evaluate_model_end_to_end() {
        let dims = ModelDims::new(3, 4, 5, 2).unwrap();
        let mut rng = Rng::new(11);
        let params = ModelParams::init(dims, &mut rng);
        let mut x = Mat::zeros(6, 3);
        for i in 0..6 {
            for j in 0..3 {
                x.set(i, j, rng.next_normal());
            }
        }
        let ds = EmbeddingDataset::new_labeled(
            x,
            vec![0, 1, 0, 1, 0, 1],
            2,
            LabelRole::EvalOnly,
            "test",
        )
        .unwrap();
        let report = evaluate_model(&params, &ds).unwrap();
        assert_eq!(report.n_eval, 6);
        let total: u64 = report.confusion.iter().flatten().sum();
        assert_eq!(total, 6);
        assert!(report.top3 >= report.top1);
        // C = 2, so top-3 falls back to top-2 = top-C = 1
        assert_eq!(report.top3, 1.0);
        assert!((0.0..=1.0).contains(&report.macro_f1));

        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    fn tiny_benchmark() -> (EmbeddingDataset, EmbeddingDataset) {
        let spec = crate::ShiftSpec {
            n_classes: 4,
            dim: 4,
            n_per_class_source: 12,
            n_per_class_target: 8,
            source_sigma: 0.5,
            target_sigma: 0.6,
            rotation_angle: 0.1,
            bias: 0.3,
            class_overlap: 0.0,
            seed: 5,
        };
        crate::data::generate_shift_benchmark(&spec).unwrap()
    }

    fn tiny_grid_cfg() -> AdaptConfig {
        AdaptConfig {
            epochs: 2,
            batch_size: 8,
            policy: SelectionPolicy::Soft { k: 3 },
            ..AdaptConfig::default()
        }
    }

    #[test]
    fn grid_emits_nine_policy_rows_in_fixed_order() {
        let (source, target) = tiny_benchmark();
        let dims = ModelDims::new(4, 6, 4, 4).unwrap();
        let grid =
            run_ablation_grid(dims, &source, &target, &tiny_grid_cfg(), &[1, 2]).unwrap();
        let labels: Vec<&str> = grid.rows.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(
            labels,
            [
                "ratio(t=1.1)",
                "ratio(t=1.2)",
                "ratio(t=1.5)",
                "hard(k=2)",
                "hard(k=3)",
                "hard(k=4)",
                "soft(k=2)",
                "soft(k=3)",
                "soft(k=4)"
            ]
        );
        assert_eq!(grid.baseline.label, "source_only");
        assert_eq!(grid.seeds, vec![1, 2]);
        for row in grid.rows.iter().chain([&grid.baseline]) {
            assert!(row.error.is_none(), "{}: {:?}", row.label, row.error);
            assert_eq!(row.top1_per_seed.len(), 2);
            let mean = row.mean_top1.unwrap();
            assert!((0.0..=1.0).contains(&mean));
        }
    }

    #[test]
    fn lambda_zero_grid_collapses_to_the_baseline() {
        let (source, target) = tiny_benchmark();
        let dims = ModelDims::new(4, 6, 4, 4).unwrap();
        let cfg = AdaptConfig { lambda: 0.0, ..tiny_grid_cfg() };
        let grid = run_ablation_grid(dims, &source, &target, &cfg, &[3]).unwrap();
        for row in &grid.rows {
            assert_eq!(row.top1_per_seed, grid.baseline.top1_per_seed, "{}", row.label);
        }
    }

    #[test]
    fn grid_reruns_identically() {
        let (source, target) = tiny_benchmark();
        let dims = ModelDims::new(4, 6, 4, 4).unwrap();
        let g1 = run_ablation_grid(dims, &source, &target, &tiny_grid_cfg(), &[7]).unwrap();
        let g2 = run_ablation_grid(dims, &source, &target, &tiny_grid_cfg(), &[7]).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn failing_rows_record_errors_without_sinking_the_grid() {
        // 3 classes: the k=4 rows cannot validate, everything else runs
        let spec = crate::ShiftSpec {
            n_classes: 3,
            dim: 3,
            n_per_class_source: 8,
            n_per_class_target: 6,
            source_sigma: 0.5,
            target_sigma: 0.5,
            rotation_angle: 0.0,
            bias: 0.0,
            class_overlap: 0.0,
            seed: 6,
        };
        let (source, target) = crate::data::generate_shift_benchmark(&spec).unwrap();
        let dims = ModelDims::new(3, 5, 3, 3).unwrap();
        let cfg = AdaptConfig {
            epochs: 1,
            batch_size: 6,
            policy: SelectionPolicy::Soft { k: 3 },
            ..AdaptConfig::default()
        };
        let grid = run_ablation_grid(dims, &source, &target, &cfg, &[4]).unwrap();
        for row in &grid.rows {
            let expect_error = row.label == "hard(k=4)" || row.label == "soft(k=4)";
            assert_eq!(row.error.is_some(), expect_error, "{}", row.label);
            assert_eq!(row.mean_top1.is_none(), expect_error);
        }
    }

    #[test]
    fn grid_argument_errors() {
        let (source, target) = tiny_benchmark();
        let dims = ModelDims::new(4, 6, 4, 4).unwrap();
        assert!(run_ablation_grid(dims, &source, &target, &tiny_grid_cfg(), &[]).is_err());
        let unlabeled =
            EmbeddingDataset::new_unlabeled(target.features().clone(), "t").unwrap();
        assert!(run_ablation_grid(dims, &source, &unlabeled, &tiny_grid_cfg(), &[1]).is_err());
    }

    #[test]
    fn evaluate_model_needs_labels_and_matching_dim() {
        let dims = ModelDims::new(3, 4, 3, 2).unwrap();
        let mut rng = Rng::new(1);
        let params = ModelParams::init(dims, &mut rng);
        let unlabeled =
            EmbeddingDataset::new_unlabeled(Mat::from_fn(4, 3, |_, _| 0.5), "t").unwrap();
        assert!(evaluate_model(&params, &unlabeled).is_err());
        let wrong_dim = EmbeddingDataset::new_labeled(
            Mat::from_fn(4, 2, |_, _| 0.5),
            vec![0, 1, 0, 1],
            2,
            LabelRole::Train,
            "t",
        )
        .unwrap();
        assert!(evaluate_model(&params, &wrong_dim).is_err());
    }
}
