//! Gaussian multi-kernel MMD with weighted sample sets and a
//! class-conditional composite, all with exact feature gradients.
//!
//! The squared maximum mean discrepancy between weighted sets A and B under
//! the averaged kernel k̄ is the biased V-statistic
//!
//! ```text
//! MMD² = Σᵢⱼ αᵢαⱼ k̄(aᵢ,aⱼ) − 2 Σᵢⱼ αᵢβⱼ k̄(aᵢ,bⱼ) + Σᵢⱼ βᵢβⱼ k̄(bᵢ,bⱼ)
//! ```
//!
//! with coefficients α, β derived from the sample weights. Being a squared
//! norm in the kernel's feature space it is nonnegative up to roundoff; no
//! clamping is applied. Weights and bandwidth are stop-gradient: gradients
//! are exact partials with respect to feature rows only.
//!
//! The three double sums share one accumulation order, so two bitwise-equal
//! sets give a value of exactly 0 and exactly zero gradients.

use crate::error::{Error, Result};
use crate::numerics::{sq_dist, Mat};
use crate::selection::ReferenceWeights;

/// Bandwidth multipliers of the default kernel family.
pub const DEFAULT_MULTIPLIERS: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

/// Fewest source samples a class needs in a batch before its MMD term is
/// formed; singleton clusters make the estimator degenerate.
pub const MIN_CLUSTER_SIZE: usize = 2;

/// How the base bandwidth σ² is chosen.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule")]
pub enum BandwidthRule {
    /// Median of pairwise squared distances over the pooled sets, computed
    /// fresh for every call (per mini-batch during training).
    MedianHeuristic,
    Fixed { sigma_sq: f64 },
}

/// How per-sample weights are turned into MMD coefficients in the
/// class-conditional loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScaling {
    /// Target weights normalized to sum 1 within each class cluster.
    PerClassSum,
    /// Target weights divided by the full target batch size, which deflates
    /// sparse clusters; kept as a fidelity toggle.
    LiteralInverseNt,
}

/// Kernel family configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelConfig {
    pub bandwidth_rule: BandwidthRule,
    /// Per-kernel bandwidth factors; kernel m uses `multiplier * sigma_sq`.
    /// The family is combined by uniform averaging.
    pub multipliers: Vec<f64>,
    /// Consumed by [`class_conditional_mmd`]; [`mmd2_weighted`] always
    /// normalizes per set.
    pub weight_scaling: WeightScaling,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            bandwidth_rule: BandwidthRule::MedianHeuristic,
            multipliers: DEFAULT_MULTIPLIERS.to_vec(),
            weight_scaling: WeightScaling::PerClassSum,
        }
    }
}

impl KernelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.multipliers.is_empty() {
            return Err(Error::InvalidConfig {
                field: "multipliers",
                reason: "must be nonempty".to_string(),
            });
        }
        if self.multipliers.iter().any(|&m| !m.is_finite() || m <= 0.0) {
            return Err(Error::InvalidConfig {
                field: "multipliers",
                reason: "all multipliers must be positive and finite".to_string(),
            });
        }
        if let BandwidthRule::Fixed { sigma_sq } = self.bandwidth_rule {
            if !sigma_sq.is_finite() || sigma_sq <= 0.0 {
                return Err(Error::InvalidConfig {
                    field: "bandwidth_rule",
                    reason: format!("fixed sigma_sq must be positive and finite, got {sigma_sq}"),
                });
            }
        }
        Ok(())
    }

    /// Base bandwidth for a pair of feature sets under this config.
    pub fn resolve_sigma_sq(&self, f_a: &Mat, f_b: &Mat) -> Result<f64> {
        match self.bandwidth_rule {
            BandwidthRule::Fixed { sigma_sq } => Ok(sigma_sq),
            BandwidthRule::MedianHeuristic => median_heuristic_bandwidth(f_a, f_b),
        }
    }
}

/// A feature matrix with one nonnegative weight per row.
#[derive(Debug, Clone, Copy)]
pub struct WeightedSet<'a> {
    features: &'a Mat,
    weights: &'a [f64],
}

impl<'a> WeightedSet<'a> {
    pub fn new(features: &'a Mat, weights: &'a [f64]) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::invalid_argument("weighted set needs at least one sample"));
        }
        if weights.len() != features.rows() {
            return Err(Error::invalid_argument(format!(
                "weight count {} does not match {} feature rows",
                weights.len(),
                features.rows()
            )));
        }
        if !features.is_finite() {
            return Err(Error::invalid_argument("weighted set: non-finite feature"));
        }
        if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
            return Err(Error::invalid_argument("weighted set: weights must be nonnegative"));
        }
        Ok(WeightedSet { features, weights })
    }

    pub fn features(&self) -> &Mat {
        self.features
    }

    pub fn weights(&self) -> &[f64] {
        self.weights
    }
}

/// Median of nonzero pairwise squared distances over the pooled rows of both
/// matrices; 1 when every pair coincides. Needs at least 2 pooled points.
pub fn median_heuristic_bandwidth(f_a: &Mat, f_b: &Mat) -> Result<f64> {
    assert_eq!(f_a.cols(), f_b.cols(), "bandwidth: feature width mismatch");
    let n = f_a.rows() + f_b.rows();
    if n < 2 {
        return Err(Error::invalid_argument("median bandwidth needs at least 2 points"));
    }
    let row = |i: usize| {
        if i < f_a.rows() {
            f_a.row(i)
        } else {
            f_b.row(i - f_a.rows())
        }
    };
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let d2 = sq_dist(row(i), row(j));
            if d2 > 0.0 {
                dists.push(d2);
            }
        }
    }
    if dists.is_empty() {
        return Ok(1.0);
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = dists.len() / 2;
    if dists.len() % 2 == 1 {
        Ok(dists[mid])
    } else {
        Ok(0.5 * (dists[mid - 1] + dists[mid]))
    }
}

/// Averaged kernel value and gradient slope for one squared distance:
/// `kbar = (1/M) Σ exp(−d²/(2 mₘ σ²))` and
/// `slope = (1/M) Σ exp(−d²/(2 mₘ σ²)) / (mₘ σ²)`, so that
/// `∂kbar/∂x = slope · (y − x)`.
fn kernel_scalars(d2: f64, sigma_sq: f64, multipliers: &[f64]) -> (f64, f64) {
    let mut k = 0.0;
    let mut s = 0.0;
    for &m in multipliers {
        let denom = m * sigma_sq;
        let e = (-d2 / (2.0 * denom)).exp();
        k += e;
        s += e / denom;
    }
    let inv_m = 1.0 / multipliers.len() as f64;
    (k * inv_m, s * inv_m)
}

/// MMD² plus exact feature gradients for explicit per-sample coefficients
/// (already scaled; not normalized here).
fn mmd2_core(
    f_a: &Mat,
    alpha: &[f64],
    f_b: &Mat,
    beta: &[f64],
    sigma_sq: f64,
    multipliers: &[f64],
) -> (f64, Mat, Mat) {
    let (m_a, m_b, d) = (f_a.rows(), f_b.rows(), f_a.cols());
    assert_eq!(f_b.cols(), d, "mmd: feature width mismatch");
    let mut s_aa = 0.0;
    let mut s_ab = 0.0;
    let mut s_bb = 0.0;
    let mut grad_a = Mat::zeros(m_a, d);
    let mut grad_b = Mat::zeros(m_b, d);
    let mut toward = vec![0.0; d];
    let mut away = vec![0.0; d];

    for i in 0..m_a {
        let ai = f_a.row(i);
        toward.iter_mut().for_each(|v| *v = 0.0);
        away.iter_mut().for_each(|v| *v = 0.0);
        for q in 0..m_a {
            let aq = f_a.row(q);
            let (k, s) = kernel_scalars(sq_dist(ai, aq), sigma_sq, multipliers);
            s_aa += alpha[i] * alpha[q] * k;
            let coef = alpha[q] * s;
            for t in 0..d {
                toward[t] += coef * (aq[t] - ai[t]);
            }
        }
        for j in 0..m_b {
            let bj = f_b.row(j);
            let (k, s) = kernel_scalars(sq_dist(ai, bj), sigma_sq, multipliers);
            s_ab += alpha[i] * beta[j] * k;
            let coef = beta[j] * s;
            for t in 0..d {
                away[t] += coef * (bj[t] - ai[t]);
            }
        }
        // same-set attraction minus cross-set attraction; identical sets
        // cancel exactly
        for t in 0..d {
            grad_a.set(i, t, 2.0 * alpha[i] * (toward[t] - away[t]));
        }
    }

    for j in 0..m_b {
        let bj = f_b.row(j);
        toward.iter_mut().for_each(|v| *v = 0.0);
        away.iter_mut().for_each(|v| *v = 0.0);
        for q in 0..m_b {
            let bq = f_b.row(q);
            let (k, s) = kernel_scalars(sq_dist(bj, bq), sigma_sq, multipliers);
            s_bb += beta[j] * beta[q] * k;
            let coef = beta[q] * s;
            for t in 0..d {
                toward[t] += coef * (bq[t] - bj[t]);
            }
        }
        for i in 0..m_a {
            let ai = f_a.row(i);
            let (_, s) = kernel_scalars(sq_dist(bj, ai), sigma_sq, multipliers);
            let coef = alpha[i] * s;
            for t in 0..d {
                away[t] += coef * (ai[t] - bj[t]);
            }
        }
        for t in 0..d {
            grad_b.set(j, t, 2.0 * beta[j] * (toward[t] - away[t]));
        }
    }

    (s_aa + s_bb - 2.0 * s_ab, grad_a, grad_b)
}

/// Result of [`mmd2_weighted`].
#[derive(Debug, Clone)]
pub struct Mmd2 {
    /// Biased estimate; nonnegative up to roundoff.
    pub value: f64,
    pub grad_a: Mat,
    pub grad_b: Mat,
}

/// Weighted MMD² between two sets with per-set weight normalization
/// (coefficients α = w_A/Σw_A, β = w_B/Σw_B).
pub fn mmd2_weighted(a: &WeightedSet, b: &WeightedSet, cfg: &KernelConfig) -> Result<Mmd2> {
    cfg.validate()?;
    let sum_a: f64 = a.weights().iter().sum();
    let sum_b: f64 = b.weights().iter().sum();
    if sum_a <= 0.0 {
        return Err(Error::EmptyCluster { side: "A" });
    }
    if sum_b <= 0.0 {
        return Err(Error::EmptyCluster { side: "B" });
    }
    let alpha: Vec<f64> = a.weights().iter().map(|w| w / sum_a).collect();
    let beta: Vec<f64> = b.weights().iter().map(|w| w / sum_b).collect();
    let sigma_sq = cfg.resolve_sigma_sq(a.features(), b.features())?;
    let (value, grad_a, grad_b) =
        mmd2_core(a.features(), &alpha, b.features(), &beta, sigma_sq, &cfg.multipliers);
    Ok(Mmd2 { value, grad_a, grad_b })
}

/// Result of [`class_conditional_mmd`].
#[derive(Debug, Clone)]
pub struct ClassConditionalMmd {
    /// Mean MMD² over active classes; 0 when none is active.
    pub loss: f64,
    /// n_s x d, rows aligned with the source batch.
    pub grad_source: Mat,
    /// n_t x d, rows aligned with the target batch.
    pub grad_target: Mat,
    /// Classes that contributed a term this batch.
    pub active_classes: usize,
}

/// Class-conditional MMD between labeled source features and weighted target
/// features.
///
/// A class is active when it has at least `min_cluster_size` source samples
/// in the batch and positive total target weight. The loss is the mean of
/// per-class weighted MMD² terms over active classes, evaluated in ascending
/// class order with one bandwidth resolved from the pooled batch. Zero
/// active classes is a degenerate batch, not an error: the caller falls back
/// to plain cross-entropy for the step.
pub fn class_conditional_mmd(
    source_features: &Mat,
    source_labels: &[usize],
    target_features: &Mat,
    wref: &ReferenceWeights,
    cfg: &KernelConfig,
    min_cluster_size: usize,
) -> Result<ClassConditionalMmd> {
    cfg.validate()?;
    let n_s = source_features.rows();
    let n_t = target_features.rows();
    let d = source_features.cols();
    if n_s == 0 || n_t == 0 {
        return Err(Error::invalid_argument("class-conditional mmd: empty batch"));
    }
    if target_features.cols() != d {
        return Err(Error::invalid_argument("class-conditional mmd: feature width mismatch"));
    }
    if source_labels.len() != n_s {
        return Err(Error::invalid_argument("class-conditional mmd: label count mismatch"));
    }
    if wref.n_samples() != n_t {
        return Err(Error::invalid_argument("class-conditional mmd: weight row count mismatch"));
    }
    let n_classes = wref.n_classes();
    for (i, &y) in source_labels.iter().enumerate() {
        if y >= n_classes {
            return Err(Error::invalid_argument(format!(
                "label {y} at source row {i} out of range for {n_classes} classes"
            )));
        }
    }
    if !source_features.is_finite() || !target_features.is_finite() {
        return Err(Error::invalid_argument("class-conditional mmd: non-finite feature"));
    }

    // one bandwidth per batch, shared by every class term
    let sigma_sq = cfg.resolve_sigma_sq(source_features, target_features)?;

    let mut grad_source = Mat::zeros(n_s, d);
    let mut grad_target = Mat::zeros(n_t, d);
    let mut loss_sum = 0.0;
    let mut active = 0usize;

    for c in 0..n_classes {
        let src_idx: Vec<usize> = (0..n_s).filter(|&i| source_labels[i] == c).collect();
        if src_idx.len() < min_cluster_size {
            continue;
        }
        let (tgt_idx, tgt_w) = wref.class_members(c);
        if tgt_idx.is_empty() {
            continue;
        }

        let f_s = source_features.gather_rows(&src_idx);
        let f_t = target_features.gather_rows(&tgt_idx);
        let alpha = vec![1.0 / src_idx.len() as f64; src_idx.len()];
        let beta: Vec<f64> = match cfg.weight_scaling {
            WeightScaling::PerClassSum => {
                let sum: f64 = tgt_w.iter().sum();
                tgt_w.iter().map(|w| w / sum).collect()
            }
            WeightScaling::LiteralInverseNt => tgt_w.iter().map(|w| w / n_t as f64).collect(),
        };

        let (value, g_s, g_t) = mmd2_core(&f_s, &alpha, &f_t, &beta, sigma_sq, &cfg.multipliers);
        loss_sum += value;
        grad_source.scatter_add_rows(&src_idx, &g_s);
        grad_target.scatter_add_rows(&tgt_idx, &g_t);
        active += 1;
    }

    let mut loss = 0.0;
    if active > 0 {
        let inv = 1.0 / active as f64;
        loss = loss_sum * inv;
        grad_source.scale(inv);
        grad_target.scale(inv);
    }
    Ok(ClassConditionalMmd { loss, grad_source, grad_target, active_classes: active })
}
