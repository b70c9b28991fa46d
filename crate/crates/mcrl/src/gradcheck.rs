//! Finite-difference verification of analytic gradients.
//!
//! Every differentiable loss in the crate can be checked here against central
//! differences. The checks run on small randomly-sized instances so they stay
//! fast enough to be part of the regular test suite and the `gradcheck` CLI
//! command.

use crate::kernels::{
    class_conditional_mmd, mmd2_weighted, BandwidthRule, KernelConfig, WeightedSet,
    MIN_CLUSTER_SIZE,
};
use crate::model::{ModelDims, ModelParams, N_BLOCKS};
use crate::numerics::{derive_seed, Mat, Rng};
use crate::selection::{build_weights, pseudo_labels, SelectionPolicy};

/// Step used for central differences.
pub const FD_EPSILON: f64 = 1e-5;

/// Maximum accepted relative error between analytic and numeric gradients.
pub const FD_REL_TOLERANCE: f64 = 1e-5;

/// Denominator floor: gradients this small are compared on an absolute scale
/// (effective absolute tolerance `FD_REL_TOLERANCE * DENOM_FLOOR` = 1e-8),
/// which keeps finite-difference roundoff from failing near-zero coordinates.
const DENOM_FLOOR: f64 = 1e-3;

/// Relative error with a floored denominator; 0 when both sides vanish.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    diff / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Result of one gradient-check family.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    /// Which loss was checked.
    pub name: String,
    /// Number of random instances exercised.
    pub instances: usize,
    /// Total parameter coordinates compared.
    pub coords: usize,
    /// Worst relative error seen across all coordinates.
    pub max_rel_err: f64,
    /// Threshold the worst error is held to.
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    fn new(name: &str, instances: usize, coords: usize, max_rel_err: f64) -> Self {
        GradCheckReport {
            name: name.to_string(),
            instances,
            coords,
            max_rel_err,
            tolerance: FD_REL_TOLERANCE,
            passed: max_rel_err <= FD_REL_TOLERANCE,
        }
    }
}

/// Compares analytic block gradients against central differences of `loss`
/// over every coordinate of every parameter block. Returns the worst relative
/// error and the number of coordinates touched.
pub fn fd_check_blocks(
    params: &mut ModelParams,
    analytic: &[&Mat; N_BLOCKS],
    mut loss: impl FnMut(&ModelParams) -> f64,
) -> (f64, usize) {
    let mut max_err: f64 = 0.0;
    let mut coords = 0;
    for b in 0..N_BLOCKS {
        assert_eq!(
            (analytic[b].rows(), analytic[b].cols()),
            (params.blocks()[b].rows(), params.blocks()[b].cols()),
            "gradient block {b} shape mismatch"
        );
        for idx in 0..params.blocks()[b].data().len() {
            let orig = params.blocks()[b].data()[idx];
            params.blocks_mut()[b].data_mut()[idx] = orig + FD_EPSILON;
            let up = loss(params);
            params.blocks_mut()[b].data_mut()[idx] = orig - FD_EPSILON;
            let down = loss(params);
            params.blocks_mut()[b].data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * FD_EPSILON);
            max_err = max_err.max(relative_error(analytic[b].data()[idx], numeric));
            coords += 1;
        }
    }
    (max_err, coords)
}

/// Random small model dims for check instances.
fn random_dims(rng: &mut Rng) -> ModelDims {
    let d_in = 2 + rng.next_below(3) as usize;
    let hidden = 2 + rng.next_below(4) as usize;
    let feat_dim = 2 + rng.next_below(3) as usize;
    let n_classes = 2 + rng.next_below(3) as usize;
    ModelDims::new(d_in, hidden, feat_dim, n_classes).unwrap()
}

fn random_model(dims: ModelDims, rng: &mut Rng) -> ModelParams {
    let mut params = ModelParams::init(dims, rng);
    // nonzero biases so their gradients are exercised away from the origin
    for b in [&mut params.b1, &mut params.b2, &mut params.bc] {
        for v in b.data_mut() {
            *v = rng.next_uniform(-0.3, 0.3);
        }
    }
    params
}

fn random_inputs(n: usize, dims: ModelDims, rng: &mut Rng) -> (Mat, Vec<usize>) {
    let x = Mat::from_fn(n, dims.d_in, |_, _| rng.next_uniform(-1.5, 1.5));
    let labels = (0..n).map(|_| rng.next_below(dims.n_classes as u64) as usize).collect();
    (x, labels)
}

/// Checks the full cross-entropy gradient (head blocks plus the chain through
/// the feature transform) on `instances` random problems.
pub fn check_ce_gradients(seed: u64, instances: usize) -> GradCheckReport {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for _ in 0..instances {
        let dims = random_dims(&mut rng);
        let mut params = random_model(dims, &mut rng);
        let n = 3 + rng.next_below(5) as usize;
        let (x, labels) = random_inputs(n, dims, &mut rng);

        let out = params.ce_loss_and_grads(&x, &labels).unwrap();
        let g = params.backward_through_g(&x, &out.grad_features);
        let analytic = [&g.w1, &g.b1, &g.w2, &g.b2, &out.grad_wc, &out.grad_bc];
        let (err, c) = fd_check_blocks(&mut params, &analytic, |p| {
            p.ce_loss_and_grads(&x, &labels).unwrap().loss
        });
        worst = worst.max(err);
        coords += c;
    }
    GradCheckReport::new("cross_entropy", instances, coords, worst)
}

/// Checks `backward_through_g` against finite differences of a random linear
/// functional of the features.
pub fn check_feature_backward(seed: u64, instances: usize) -> GradCheckReport {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for _ in 0..instances {
        let dims = random_dims(&mut rng);
        let mut params = random_model(dims, &mut rng);
        let n = 2 + rng.next_below(5) as usize;
        let x = Mat::from_fn(n, dims.d_in, |_, _| rng.next_uniform(-1.5, 1.5));
        let coeff = Mat::from_fn(n, dims.feat_dim, |_, _| rng.next_uniform(-1.0, 1.0));

        let g = params.backward_through_g(&x, &coeff);
        let zero_wc = Mat::zeros(dims.feat_dim, dims.n_classes);
        let zero_bc = Mat::zeros(1, dims.n_classes);
        let analytic = [&g.w1, &g.b1, &g.w2, &g.b2, &zero_wc, &zero_bc];
        let (err, c) = fd_check_blocks(&mut params, &analytic, |p| {
            let f = p.forward_features(&x);
            f.data().iter().zip(coeff.data()).map(|(a, b)| a * b).sum()
        });
        worst = worst.max(err);
        coords += c;
    }
    GradCheckReport::new("feature_backward", instances, coords, worst)
}

/// Central differences over every entry of one feature matrix.
fn fd_check_mat(m: &mut Mat, analytic: &Mat, mut loss: impl FnMut(&Mat) -> f64) -> (f64, usize) {
    assert_eq!(
        (analytic.rows(), analytic.cols()),
        (m.rows(), m.cols()),
        "gradient matrix shape mismatch"
    );
    let mut max_err: f64 = 0.0;
    let mut coords = 0;
    for idx in 0..m.data().len() {
        let orig = m.data()[idx];
        m.data_mut()[idx] = orig + FD_EPSILON;
        let up = loss(m);
        m.data_mut()[idx] = orig - FD_EPSILON;
        let down = loss(m);
        m.data_mut()[idx] = orig;
        let numeric = (up - down) / (2.0 * FD_EPSILON);
        max_err = max_err.max(relative_error(analytic.data()[idx], numeric));
        coords += 1;
    }
    (max_err, coords)
}

/// Fixed-bandwidth kernel config for finite differencing. The analytic
/// gradients treat the bandwidth as a constant of the batch, so the check
/// must hold it constant too; the median rule would move it with every
/// perturbation.
fn fd_kernel_config(rng: &mut Rng) -> KernelConfig {
    KernelConfig {
        bandwidth_rule: BandwidthRule::Fixed { sigma_sq: rng.next_uniform(0.5, 2.0) },
        ..KernelConfig::default()
    }
}

/// Checks the feature gradients of the weighted MMD² estimator on random
/// weighted set pairs.
pub fn check_mmd_gradients(seed: u64, instances: usize) -> GradCheckReport {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for _ in 0..instances {
        let d = 2 + rng.next_below(3) as usize;
        let m_a = 2 + rng.next_below(4) as usize;
        let m_b = 2 + rng.next_below(4) as usize;
        let mut fa = Mat::from_fn(m_a, d, |_, _| rng.next_uniform(-1.5, 1.5));
        let mut fb = Mat::from_fn(m_b, d, |_, _| rng.next_uniform(-1.5, 1.5));
        let wa: Vec<f64> = (0..m_a).map(|_| rng.next_uniform(0.1, 2.0)).collect();
        let wb: Vec<f64> = (0..m_b).map(|_| rng.next_uniform(0.1, 2.0)).collect();
        let cfg = fd_kernel_config(&mut rng);

        let value = |fa: &Mat, fb: &Mat| {
            mmd2_weighted(
                &WeightedSet::new(fa, &wa).unwrap(),
                &WeightedSet::new(fb, &wb).unwrap(),
                &cfg,
            )
            .unwrap()
            .value
        };
        let out = mmd2_weighted(
            &WeightedSet::new(&fa, &wa).unwrap(),
            &WeightedSet::new(&fb, &wb).unwrap(),
            &cfg,
        )
        .unwrap();

        let fb_fixed = fb.clone();
        let (err_a, ca) = fd_check_mat(&mut fa, &out.grad_a, |m| value(m, &fb_fixed));
        let fa_fixed = fa.clone();
        let (err_b, cb) = fd_check_mat(&mut fb, &out.grad_b, |m| value(&fa_fixed, m));
        worst = worst.max(err_a).max(err_b);
        coords += ca + cb;
    }
    GradCheckReport::new("weighted_mmd", instances, coords, worst)
}

/// Checks the full composite objective `CE + lambda * alignment` through
/// every parameter block. Cluster weights come from the unperturbed model
/// and stay frozen, matching the stop-gradient treatment of selection.
pub fn check_composite_gradients(seed: u64, instances: usize) -> GradCheckReport {
    let mut rng = Rng::new(seed);
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for i in 0..instances {
        let dims = random_dims(&mut rng);
        let mut params = random_model(dims, &mut rng);
        let n_s = 4 + rng.next_below(4) as usize;
        let n_t = 4 + rng.next_below(4) as usize;
        let (xs, mut ys) = random_inputs(n_s, dims, &mut rng);
        // guarantee one class big enough to form a cluster
        ys[1] = ys[0];
        let xt = Mat::from_fn(n_t, dims.d_in, |_, _| rng.next_uniform(-1.5, 1.5));
        let lambda = rng.next_uniform(0.2, 1.0);
        let policy = match i % 3 {
            0 => SelectionPolicy::SingleLabel,
            1 => SelectionPolicy::Hard { k: 2 },
            _ => SelectionPolicy::Soft { k: 2 },
        };
        let cfg = fd_kernel_config(&mut rng);

        let ft0 = params.forward_features(&xt);
        let logits0 = params.forward_logits(&ft0);
        let weights = build_weights(&pseudo_labels(&logits0).unwrap(), &policy).unwrap();

        let fs0 = params.forward_features(&xs);
        let ce = params.ce_loss_and_grads(&xs, &ys).unwrap();
        let mmd = class_conditional_mmd(&fs0, &ys, &ft0, &weights, &cfg, MIN_CLUSTER_SIZE).unwrap();

        let mut gf_src = ce.grad_features.clone();
        gf_src.scaled_add(lambda, &mmd.grad_source);
        let mut g = params.backward_through_g(&xs, &gf_src);
        let mut gf_tgt = mmd.grad_target.clone();
        gf_tgt.scale(lambda);
        let gt = params.backward_through_g(&xt, &gf_tgt);
        g.w1.scaled_add(1.0, &gt.w1);
        g.b1.scaled_add(1.0, &gt.b1);
        g.w2.scaled_add(1.0, &gt.w2);
        g.b2.scaled_add(1.0, &gt.b2);

        let analytic = [&g.w1, &g.b1, &g.w2, &g.b2, &ce.grad_wc, &ce.grad_bc];
        let (err, c) = fd_check_blocks(&mut params, &analytic, |p| {
            let ce = p.ce_loss_and_grads(&xs, &ys).unwrap().loss;
            let fs = p.forward_features(&xs);
            let ft = p.forward_features(&xt);
            let mmd = class_conditional_mmd(&fs, &ys, &ft, &weights, &cfg, MIN_CLUSTER_SIZE)
                .unwrap()
                .loss;
            ce + lambda * mmd
        });
        worst = worst.max(err);
        coords += c;
    }
    GradCheckReport::new("composite_adaptation", instances, coords, worst)
}

/// Runs every gradient-check family on independent sub-streams of `seed`.
pub fn run_all(seed: u64, instances: usize) -> Vec<GradCheckReport> {
    vec![
        check_ce_gradients(derive_seed(seed, 1), instances),
        check_feature_backward(derive_seed(seed, 2), instances),
        check_mmd_gradients(derive_seed(seed, 3), instances),
        check_composite_gradients(derive_seed(seed, 4), instances),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        // below the floor, differences are measured absolutely
        assert!(relative_error(1e-9, 0.0) < 1e-5);
    }

    #[test]
    fn ce_gradients_match_finite_differences() {
        let report = check_ce_gradients(7, 8);
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        assert!(report.coords > 0);
    }

    #[test]
    fn feature_backward_matches_finite_differences() {
        let report = check_feature_backward(11, 8);
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn mmd_gradients_match_finite_differences() {
        let report = check_mmd_gradients(13, 8);
        assert!(report.passed, "max rel err {}", report.max_rel_err);
        assert!(report.coords > 0);
    }

    #[test]
    fn composite_gradients_match_finite_differences() {
        let report = check_composite_gradients(17, 8);
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn composite_check_exercises_active_alignment_terms() {
        // the composite family must not silently degenerate to CE-only:
        // rebuild the first instance and confirm a cluster is active
        let mut rng = Rng::new(derive_seed(17, 4));
        let dims = random_dims(&mut rng);
        let params = random_model(dims, &mut rng);
        let n_s = 4 + rng.next_below(4) as usize;
        let n_t = 4 + rng.next_below(4) as usize;
        let (xs, mut ys) = random_inputs(n_s, dims, &mut rng);
        ys[1] = ys[0];
        let xt = Mat::from_fn(n_t, dims.d_in, |_, _| rng.next_uniform(-1.5, 1.5));
        let _ = rng.next_uniform(0.2, 1.0);
        let cfg = fd_kernel_config(&mut rng);
        let ft = params.forward_features(&xt);
        let weights = build_weights(
            &pseudo_labels(&params.forward_logits(&ft)).unwrap(),
            &SelectionPolicy::SingleLabel,
        )
        .unwrap();
        let fs = params.forward_features(&xs);
        let mmd = class_conditional_mmd(&fs, &ys, &ft, &weights, &cfg, MIN_CLUSTER_SIZE).unwrap();
        assert!(mmd.active_classes > 0 || mmd.loss == 0.0);
    }

    #[test]
    fn run_all_reports_every_family_and_passes() {
        let reports = run_all(23, 4);
        let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            names,
            ["cross_entropy", "feature_backward", "weighted_mmd", "composite_adaptation"]
        );
        assert!(reports.iter().all(|r| r.passed));
    }

    #[test]
    fn fd_harness_detects_a_wrong_gradient() {
        let mut rng = Rng::new(3);
        let dims = ModelDims::new(2, 2, 2, 2).unwrap();
        let mut params = random_model(dims, &mut rng);
        let (x, labels) = random_inputs(4, dims, &mut rng);
        let out = params.ce_loss_and_grads(&x, &labels).unwrap();
        let g = params.backward_through_g(&x, &out.grad_features);
        let mut bad_wc = out.grad_wc.clone();
        bad_wc.set(0, 0, bad_wc.get(0, 0) + 0.5);
        let analytic = [&g.w1, &g.b1, &g.w2, &g.b2, &bad_wc, &out.grad_bc];
        let (err, _) = fd_check_blocks(&mut params, &analytic, |p| {
            p.ce_loss_and_grads(&x, &labels).unwrap().loss
        });
        assert!(err > FD_REL_TOLERANCE);
    }
}
