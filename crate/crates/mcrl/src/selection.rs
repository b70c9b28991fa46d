//! Reference-cluster selection for unlabeled target samples.
//!
//! The classifier's outputs on a target batch are turned into a sparse
//! weight matrix: row j lists the source classes sample j should be pulled
//! toward, with a weight per class. Four policies:
//!
//! - `SingleLabel`: the argmax class, weight 1 (plain pseudo-labeling).
//! - `Hard(K)`: the K most probable classes, each weight 1.
//! - `Soft(K)`: the K most probable classes, each weighted by the sigmoid of
//!   its raw logit.
//! - `Ratio(t)`: the top class alone when the top-two probability ratio
//!   exceeds t (the prediction is decisive), otherwise the top two classes.
//!
//! Everything here is stop-gradient: weights are data as far as the loss is
//! concerned. Ties in any ranking break toward the lowest class index.

use crate::error::{Error, Result};
use crate::numerics::{sigmoid_saturating, softmax_in_place, Mat};

/// How target samples choose their reference clusters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum SelectionPolicy {
    SingleLabel,
    Hard { k: usize },
    Soft { k: usize },
    Ratio { threshold: f64 },
}

impl SelectionPolicy {
    /// Checks the policy against a class count.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        match *self {
            SelectionPolicy::SingleLabel => Ok(()),
            SelectionPolicy::Hard { k } | SelectionPolicy::Soft { k } => {
                if k == 0 || k > n_classes {
                    Err(Error::invalid_argument(format!(
                        "selection K={k} out of range for {n_classes} classes"
                    )))
                } else {
                    Ok(())
                }
            }
            SelectionPolicy::Ratio { threshold } => {
                if !threshold.is_finite() || threshold <= 0.0 {
                    Err(Error::invalid_argument(format!(
                        "ratio threshold must be positive and finite, got {threshold}"
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Largest number of clusters any sample can receive under this policy.
    pub fn max_clusters(&self) -> usize {
        match *self {
            SelectionPolicy::SingleLabel => 1,
            SelectionPolicy::Hard { k } | SelectionPolicy::Soft { k } => k,
            SelectionPolicy::Ratio { .. } => 2,
        }
    }
}

impl std::fmt::Display for SelectionPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            SelectionPolicy::SingleLabel => write!(f, "single_label"),
            SelectionPolicy::Hard { k } => write!(f, "hard(k={k})"),
            SelectionPolicy::Soft { k } => write!(f, "soft(k={k})"),
            SelectionPolicy::Ratio { threshold } => write!(f, "ratio(t={threshold})"),
        }
    }
}

/// Classifier outputs on a target batch, one row per sample.
#[derive(Debug, Clone)]
pub struct PseudoLabels {
    /// Raw logits, n_t x C.
    pub logits: Mat,
    /// Softmax probabilities, n_t x C.
    pub probs: Mat,
    /// Argmax class per sample, ties toward the lowest index.
    pub argmax: Vec<usize>,
}

/// Builds pseudo-label state from raw logits.
pub fn pseudo_labels(logits: &Mat) -> Result<PseudoLabels> {
    if logits.cols() < 2 {
        return Err(Error::invalid_argument("pseudo labels need at least 2 classes"));
    }
    if !logits.is_finite() {
        return Err(Error::invalid_argument("pseudo labels: non-finite logits"));
    }
    let mut probs = logits.clone();
    let mut argmax = Vec::with_capacity(logits.rows());
    for i in 0..logits.rows() {
        softmax_in_place(probs.row_mut(i));
        let row = logits.row(i);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        argmax.push(best);
    }
    Ok(PseudoLabels { logits: logits.clone(), probs, argmax })
}

/// The `k` distinct classes with the largest values in `p`, in descending
/// order, ties toward the lowest index.
pub fn top_k(p: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > p.len() {
        return Err(Error::invalid_argument(format!(
            "top_k: k={k} out of range for {} classes",
            p.len()
        )));
    }
    // repeated max-scan; k is tiny so no need for a partial sort
    let mut taken = vec![false; p.len()];
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for c in 0..p.len() {
            if taken[c] {
                continue;
            }
            if best.is_none() || p[c] > p[best.unwrap()] {
                best = Some(c);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        out.push(b);
    }
    Ok(out)
}

/// Sparse per-sample cluster weights over `n_classes` classes.
///
/// Row j holds `(class, weight)` pairs with distinct classes and
/// nonnegative finite weights; a sample's clusters are listed in the order
/// the policy selected them (descending probability).
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceWeights {
    n_classes: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl ReferenceWeights {
    pub fn new(n_classes: usize, rows: Vec<Vec<(usize, f64)>>) -> Result<Self> {
        for (j, row) in rows.iter().enumerate() {
            let mut seen = vec![false; n_classes];
            for &(c, w) in row {
                if c >= n_classes {
                    return Err(Error::invalid_argument(format!(
                        "weights row {j}: class {c} out of range"
                    )));
                }
                if seen[c] {
                    return Err(Error::invalid_argument(format!(
                        "weights row {j}: class {c} listed twice"
                    )));
                }
                seen[c] = true;
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::invalid_argument(format!(
                        "weights row {j}: bad weight {w} for class {c}"
                    )));
                }
            }
        }
        Ok(ReferenceWeights { n_classes, rows })
    }

    pub fn n_samples(&self) -> usize {
        self.rows.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, j: usize) -> &[(usize, f64)] {
        &self.rows[j]
    }

    /// Weight of class `c` for sample `j` (0 when unselected).
    pub fn weight(&self, j: usize, c: usize) -> f64 {
        self.rows[j]
            .iter()
            .find(|&&(cls, _)| cls == c)
            .map_or(0.0, |&(_, w)| w)
    }

    /// Sample indices with a strictly positive weight on class `c`, with the
    /// weights, in ascending sample order.
    pub fn class_members(&self, c: usize) -> (Vec<usize>, Vec<f64>) {
        let mut idx = Vec::new();
        let mut w = Vec::new();
        for (j, row) in self.rows.iter().enumerate() {
            for &(cls, weight) in row {
                if cls == c && weight > 0.0 {
                    idx.push(j);
                    w.push(weight);
                }
            }
        }
        (idx, w)
    }

    /// Total weight assigned to class `c` across all samples.
    pub fn class_mass(&self, c: usize) -> f64 {
        self.rows
            .iter()
            .map(|row| {
                row.iter()
                    .filter(|&&(cls, _)| cls == c)
                    .map(|&(_, w)| w)
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Applies a selection policy to classifier outputs.
pub fn build_weights(pl: &PseudoLabels, policy: &SelectionPolicy) -> Result<ReferenceWeights> {
    let c = pl.probs.cols();
    policy.validate(c)?;
    let mut rows = Vec::with_capacity(pl.probs.rows());
    for j in 0..pl.probs.rows() {
        let p = pl.probs.row(j);
        let row = match *policy {
            SelectionPolicy::SingleLabel => vec![(pl.argmax[j], 1.0)],
            SelectionPolicy::Hard { k } => {
                top_k(p, k)?.into_iter().map(|cls| (cls, 1.0)).collect()
            }
            SelectionPolicy::Soft { k } => top_k(p, k)?
                .into_iter()
                .map(|cls| (cls, sigmoid_saturating(pl.logits.get(j, cls))))
                .collect(),
            SelectionPolicy::Ratio { threshold } => {
                let top2 = top_k(p, 2)?;
                let (c1, c2) = (top2[0], top2[1]);
                // decisive prediction: align with the top class only
                if p[c1] / p[c2] > threshold {
                    vec![(c1, 1.0)]
                } else {
                    vec![(c1, 1.0), (c2, 1.0)]
                }
            }
        };
        rows.push(row);
    }
    ReferenceWeights::new(c, rows)
}

/// Diagnostics over a weight matrix.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SelectionReport {
    /// `clusters_per_sample[m]` = number of samples with exactly m clusters.
    pub clusters_per_sample: Vec<usize>,
    /// Summed weight per class.
    pub class_mass: Vec<f64>,
}

/// Histogram of clusters-per-sample plus per-class total mass.
pub fn selection_report(weights: &ReferenceWeights) -> SelectionReport {
    let max_len = weights
        .rows
        .iter()
        .map(|r| r.len())
        .max()
        .unwrap_or(0);
    let mut hist = vec![0usize; max_len + 1];
    for row in &weights.rows {
        hist[row.len()] += 1;
    }
    let mass = (0..weights.n_classes).map(|c| weights.class_mass(c)).collect();
    SelectionReport { clusters_per_sample: hist, class_mass: mass }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn labels_of(logit_rows: &[Vec<f64>]) -> PseudoLabels {
        pseudo_labels(&Mat::from_rows(logit_rows)).unwrap()
    }

    #[test]
    fn argmax_basic_and_tie_rule() {
        let pl = labels_of(&[vec![3.0, 1.0, 2.0], vec![5.0, 5.0, 0.0]]);
        assert_eq!(pl.argmax, vec![0, 0]);
    }

    #[test]
    fn argmax_matches_linear_scan_oracle() {
        let mut rng = Rng::new(8);
        for _ in 0..100 {
            let c = 2 + rng.next_below(9) as usize;
            let row: Vec<f64> = (0..c).map(|_| rng.next_uniform(-4.0, 4.0)).collect();
            let pl = labels_of(&[row.clone()]);
            let mut best = 0;
            for i in 1..c {
                if row[i] > row[best] {
                    best = i;
                }
            }
            assert_eq!(pl.argmax[0], best);
        }
    }

    #[test]
    fn probs_are_softmax_of_logits() {
        let pl = labels_of(&[vec![1.0, 2.0, 3.0]]);
        let sum: f64 = pl.probs.row(0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!((pl.probs.get(0, 2) - 0.6652409557748219).abs() < 1e-12);
    }

    #[test]
    fn pseudo_labels_reject_bad_input() {
        assert!(pseudo_labels(&Mat::from_rows(&[vec![1.0]])).is_err());
        assert!(pseudo_labels(&Mat::from_rows(&[vec![1.0, f64::NAN]])).is_err());
    }

    #[test]
    fn top_k_basic() {
        assert_eq!(top_k(&[0.5, 0.3, 0.2], 2).unwrap(), vec![0, 1]);
        assert_eq!(top_k(&[0.2, 0.3, 0.5], 3).unwrap(), vec![2, 1, 0]);
        assert!(top_k(&[0.5, 0.5], 0).is_err());
        assert!(top_k(&[0.5, 0.5], 3).is_err());
    }

    #[test]
    fn top_k_ties_toward_lowest_index() {
        assert_eq!(top_k(&[0.4, 0.4, 0.2], 1).unwrap(), vec![0]);
        assert_eq!(top_k(&[0.2, 0.4, 0.4], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        let mut rng = Rng::new(77);
        for _ in 0..100 {
            let c = 4 + rng.next_below(8) as usize;
            let p: Vec<f64> = (0..c).map(|_| rng.next_f64()).collect();
            let got = top_k(&p, 3).unwrap();
            let mut idx: Vec<usize> = (0..c).collect();
            idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
            assert_eq!(got, idx[..3].to_vec());
        }
    }

    #[test]
    fn single_label_weights() {
        let pl = labels_of(&[vec![0.0, 2.0, 1.0]]);
        let w = build_weights(&pl, &SelectionPolicy::SingleLabel).unwrap();
        assert_eq!(w.row(0), &[(1, 1.0)]);
    }

    #[test]
    fn hard_weights_are_unit_on_top_k() {
        let pl = labels_of(&[vec![0.0, 2.0, 1.0, -1.0]]);
        let w = build_weights(&pl, &SelectionPolicy::Hard { k: 2 }).unwrap();
        assert_eq!(w.row(0), &[(1, 1.0), (2, 1.0)]);
    }

    #[test]
    fn hard_one_equals_single_label_everywhere() {
        let mut rng = Rng::new(5);
        for _ in 0..50 {
            let c = 2 + rng.next_below(6) as usize;
            let rows: Vec<Vec<f64>> =
                (0..4).map(|_| (0..c).map(|_| rng.next_uniform(-3.0, 3.0)).collect()).collect();
            let pl = labels_of(&rows);
            let hard1 = build_weights(&pl, &SelectionPolicy::Hard { k: 1 }).unwrap();
            let single = build_weights(&pl, &SelectionPolicy::SingleLabel).unwrap();
            assert_eq!(hard1, single);
        }
    }

    #[test]
    fn soft_weights_are_sigmoids_of_selected_logits() {
        let pl = labels_of(&[vec![0.0, 2.0, 1.0]]);
        let w = build_weights(&pl, &SelectionPolicy::Soft { k: 2 }).unwrap();
        let row = w.row(0);
        assert_eq!(row[0].0, 1);
        assert!((row[0].1 - sigmoid_saturating(2.0)).abs() < 1e-15);
        assert_eq!(row[1].0, 2);
        assert!((row[1].1 - sigmoid_saturating(1.0)).abs() < 1e-15);
    }

    #[test]
    fn soft_with_zero_logits_gives_half_weights() {
        let pl = labels_of(&[vec![0.0, 0.0, 0.0, 0.0]]);
        let w = build_weights(&pl, &SelectionPolicy::Soft { k: 3 }).unwrap();
        for &(_, weight) in w.row(0) {
            assert_eq!(weight, 0.5);
        }
    }

    #[test]
    fn soft_selection_set_equals_hard_selection_set() {
        let mut rng = Rng::new(31);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> =
                (0..3).map(|_| (0..5).map(|_| rng.next_uniform(-3.0, 3.0)).collect()).collect();
            let pl = labels_of(&rows);
            let soft = build_weights(&pl, &SelectionPolicy::Soft { k: 3 }).unwrap();
            let hard = build_weights(&pl, &SelectionPolicy::Hard { k: 3 }).unwrap();
            for j in 0..3 {
                let sc: Vec<usize> = soft.row(j).iter().map(|&(c, _)| c).collect();
                let hc: Vec<usize> = hard.row(j).iter().map(|&(c, _)| c).collect();
                assert_eq!(sc, hc);
                // hard weights are soft weights with every sigmoid replaced by 1
                assert!(hard.row(j).iter().all(|&(_, w)| w == 1.0));
            }
        }
    }

    #[test]
    fn ratio_branches_at_paper_thresholds() {
        // probabilities with p1/p2 = 1.2: decisive at t=1.1, ambiguous at t=1.5
        let p1 = 1.2f64;
        let logits = vec![p1.ln(), 0.0, -30.0];
        let pl = labels_of(&[logits]);
        let ratio = pl.probs.get(0, 0) / pl.probs.get(0, 1);
        assert!((ratio - 1.2).abs() < 1e-9);

        let w_low = build_weights(&pl, &SelectionPolicy::Ratio { threshold: 1.1 }).unwrap();
        assert_eq!(w_low.row(0).len(), 1);
        assert_eq!(w_low.row(0)[0], (0, 1.0));

        let w_high = build_weights(&pl, &SelectionPolicy::Ratio { threshold: 1.5 }).unwrap();
        assert_eq!(w_high.row(0).len(), 2);
        assert_eq!(w_high.row(0), &[(0, 1.0), (1, 1.0)]);
    }

    #[test]
    fn ratio_below_one_collapses_to_single_label() {
        // p1/p2 >= 1 always exceeds a sub-unit threshold, so only top-1 remains
        let mut rng = Rng::new(93);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> =
                (0..4).map(|_| (0..6).map(|_| rng.next_uniform(-3.0, 3.0)).collect()).collect();
            let pl = labels_of(&rows);
            let ratio = build_weights(&pl, &SelectionPolicy::Ratio { threshold: 0.5 }).unwrap();
            let single = build_weights(&pl, &SelectionPolicy::SingleLabel).unwrap();
            assert_eq!(ratio, single);
        }
    }

    #[test]
    fn ratio_with_huge_threshold_always_selects_two() {
        let mut rng = Rng::new(94);
        for _ in 0..50 {
            let rows: Vec<Vec<f64>> =
                (0..4).map(|_| (0..6).map(|_| rng.next_uniform(-3.0, 3.0)).collect()).collect();
            let pl = labels_of(&rows);
            let w = build_weights(&pl, &SelectionPolicy::Ratio { threshold: 1e9 }).unwrap();
            for j in 0..4 {
                assert_eq!(w.row(j).len(), 2);
            }
        }
    }

    #[test]
    fn logit_shift_preserves_selection_sets() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let base: Vec<f64> = (0..5).map(|_| rng.next_uniform(-3.0, 3.0)).collect();
            let c = rng.next_uniform(-50.0, 50.0);
            let shifted: Vec<f64> = base.iter().map(|v| v + c).collect();
            let pl_a = labels_of(&[base]);
            let pl_b = labels_of(&[shifted]);
            assert_eq!(pl_a.argmax, pl_b.argmax);
            for policy in [
                SelectionPolicy::Hard { k: 3 },
                SelectionPolicy::Ratio { threshold: 1.2 },
            ] {
                let wa = build_weights(&pl_a, &policy).unwrap();
                let wb = build_weights(&pl_b, &policy).unwrap();
                let ca: Vec<usize> = wa.row(0).iter().map(|&(cls, _)| cls).collect();
                let cb: Vec<usize> = wb.row(0).iter().map(|&(cls, _)| cls).collect();
                assert_eq!(ca, cb);
            }
        }
    }

    #[test]
    fn row_sparsity_never_exceeds_policy_limit() {
        let mut rng = Rng::new(41);
        let rows: Vec<Vec<f64>> =
            (0..20).map(|_| (0..8).map(|_| rng.next_uniform(-3.0, 3.0)).collect()).collect();
        let pl = labels_of(&rows);
        for policy in [
            SelectionPolicy::SingleLabel,
            SelectionPolicy::Hard { k: 4 },
            SelectionPolicy::Soft { k: 2 },
            SelectionPolicy::Ratio { threshold: 1.3 },
        ] {
            let w = build_weights(&pl, &policy).unwrap();
            for j in 0..20 {
                assert!(w.row(j).len() <= policy.max_clusters());
            }
        }
    }

    #[test]
    fn policy_validation() {
        assert!(SelectionPolicy::Hard { k: 0 }.validate(4).is_err());
        assert!(SelectionPolicy::Hard { k: 5 }.validate(4).is_err());
        assert!(SelectionPolicy::Soft { k: 4 }.validate(4).is_ok());
        assert!(SelectionPolicy::Ratio { threshold: f64::NAN }.validate(4).is_err());
        assert!(SelectionPolicy::Ratio { threshold: 0.0 }.validate(4).is_err());
        assert!(SelectionPolicy::Ratio { threshold: 1.1 }.validate(4).is_ok());
    }

    #[test]
    fn weights_reject_malformed_rows() {
        assert!(ReferenceWeights::new(3, vec![vec![(3, 1.0)]]).is_err());
        assert!(ReferenceWeights::new(3, vec![vec![(1, 1.0), (1, 0.5)]]).is_err());
        assert!(ReferenceWeights::new(3, vec![vec![(1, -0.1)]]).is_err());
        assert!(ReferenceWeights::new(3, vec![vec![(1, f64::NAN)]]).is_err());
        assert!(ReferenceWeights::new(3, vec![vec![(1, 1.0), (0, 0.5)]]).is_ok());
    }

    #[test]
    fn class_members_ascend_and_match_weight_lookup() {
        let w = ReferenceWeights::new(
            3,
            vec![vec![(2, 0.7)], vec![(0, 1.0), (2, 0.3)], vec![(1, 0.9)]],
        )
        .unwrap();
        let (idx, wts) = w.class_members(2);
        assert_eq!(idx, vec![0, 1]);
        assert_eq!(wts, vec![0.7, 0.3]);
        assert_eq!(w.weight(1, 2), 0.3);
        assert_eq!(w.weight(2, 2), 0.0);
    }

    #[test]
    fn report_histogram_for_hard_three() {
        let mut rng = Rng::new(55);
        let rows: Vec<Vec<f64>> =
            (0..10).map(|_| (0..6).map(|_| rng.next_uniform(-3.0, 3.0)).collect()).collect();
        let pl = labels_of(&rows);
        let w = build_weights(&pl, &SelectionPolicy::Hard { k: 3 }).unwrap();
        let report = selection_report(&w);
        assert_eq!(report.clusters_per_sample, vec![0, 0, 0, 10]);
        let total_mass: f64 = report.class_mass.iter().sum();
        assert!((total_mass - 30.0).abs() < 1e-12);
    }

    #[test]
    fn report_counts_and_mass_match_hand_enumeration() {
        let pl = labels_of(&[
            vec![3.0, 0.0, 0.0],  // decisive: 1 cluster
            vec![0.1, 0.0, -5.0], // close top-2: 2 clusters
            vec![0.0, 0.05, -4.0],
            vec![4.0, -1.0, -1.0],
            vec![-2.0, -2.1, 3.0],
        ]);
        let w = build_weights(&pl, &SelectionPolicy::Ratio { threshold: 1.5 }).unwrap();
        let report = selection_report(&w);
        assert_eq!(report.clusters_per_sample, vec![0, 3, 2]);
        let n_t: usize = report.clusters_per_sample.iter().sum();
        assert_eq!(n_t, 5);
        assert_eq!(report.class_mass, vec![4.0, 2.0, 1.0]);
    }
}
