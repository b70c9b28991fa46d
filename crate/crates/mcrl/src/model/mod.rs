//! Trainable pipeline: a one-hidden-layer tanh feature transform feeding a
//! linear classifier head.
//!
//! The transform plays the role a deep backbone would in an image system;
//! keeping it small and smooth means every gradient in the crate can be
//! verified against finite differences. Forward passes are pure functions of
//! the parameters, so identical inputs give bitwise-identical outputs.
//!
//! Block order is fixed as `[w1, b1, w2, b2, wc, bc]` everywhere: optimizer
//! state, checkpoints, and gradient checks all index blocks the same way.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Mat, Rng, EXP_CLAMP};

/// Number of parameter blocks in a model.
pub const N_BLOCKS: usize = 6;

/// Canonical block names, index-aligned with [`ModelParams::blocks`].
pub const BLOCK_NAMES: [&str; N_BLOCKS] = ["w1", "b1", "w2", "b2", "wc", "bc"];

/// Layer widths of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub d_in: usize,
    pub hidden: usize,
    pub feat_dim: usize,
    pub n_classes: usize,
}

impl ModelDims {
    pub fn new(d_in: usize, hidden: usize, feat_dim: usize, n_classes: usize) -> Result<Self> {
        if d_in == 0 || hidden == 0 || feat_dim == 0 {
            return Err(Error::invalid_argument("model dims must all be positive"));
        }
        if n_classes < 2 {
            return Err(Error::invalid_argument(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        Ok(ModelDims { d_in, hidden, feat_dim, n_classes })
    }

    /// Shapes of the six parameter blocks, in canonical order.
    pub fn block_shapes(&self) -> [(usize, usize); N_BLOCKS] {
        [
            (self.d_in, self.hidden),
            (1, self.hidden),
            (self.hidden, self.feat_dim),
            (1, self.feat_dim),
            (self.feat_dim, self.n_classes),
            (1, self.n_classes),
        ]
    }
}

/// All trainable parameters: feature transform (w1, b1, w2, b2 with tanh
/// after the first layer) and classifier head (wc, bc).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
    pub wc: Mat,
    pub bc: Mat,
}

/// Gradients of the feature-transform blocks.
#[derive(Debug, Clone)]
pub struct FeatureGrads {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

/// Cross-entropy loss output: head gradients plus the feature gradient,
/// which callers may add to before backpropagating through the transform.
#[derive(Debug, Clone)]
pub struct CeOutput {
    pub loss: f64,
    pub grad_wc: Mat,
    pub grad_bc: Mat,
    pub grad_features: Mat,
}

impl ModelParams {
    /// Zero-initialized model (useful for tests; real runs use [`init`]).
    ///
    /// [`init`]: ModelParams::init
    pub fn zeros(dims: ModelDims) -> Self {
        let [s1, s2, s3, s4, s5, s6] = dims.block_shapes();
        ModelParams {
            dims,
            w1: Mat::zeros(s1.0, s1.1),
            b1: Mat::zeros(s2.0, s2.1),
            w2: Mat::zeros(s3.0, s3.1),
            b2: Mat::zeros(s4.0, s4.1),
            wc: Mat::zeros(s5.0, s5.1),
            bc: Mat::zeros(s6.0, s6.1),
        }
    }

    /// Glorot-uniform weights, zero biases, drawn in block order from `rng`.
    pub fn init(dims: ModelDims, rng: &mut Rng) -> Self {
        let mut model = ModelParams::zeros(dims);
        let glorot = |m: &mut Mat, fan_in: usize, fan_out: usize, rng: &mut Rng| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in m.data_mut() {
                *v = rng.next_uniform(-a, a);
            }
        };
        glorot(&mut model.w1, dims.d_in, dims.hidden, rng);
        glorot(&mut model.w2, dims.hidden, dims.feat_dim, rng);
        glorot(&mut model.wc, dims.feat_dim, dims.n_classes, rng);
        model
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn blocks(&self) -> [&Mat; N_BLOCKS] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.wc, &self.bc]
    }

    pub fn blocks_mut(&mut self) -> [&mut Mat; N_BLOCKS] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.wc,
            &mut self.bc,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.is_finite())
    }

    /// Feature transform: `tanh(x * w1 + b1) * w2 + b2`, row per sample.
    pub fn forward_features(&self, x: &Mat) -> Mat {
        assert_eq!(x.cols(), self.dims.d_in, "forward_features: input width mismatch");
        let hidden = self.hidden_activation(x);
        let mut f = hidden.matmul(&self.w2);
        f.add_row_vector(&self.b2);
        f
    }

    /// Classifier head: `features * wc + bc`.
    pub fn forward_logits(&self, features: &Mat) -> Mat {
        assert_eq!(features.cols(), self.dims.feat_dim, "forward_logits: feature width mismatch");
        let mut z = features.matmul(&self.wc);
        z.add_row_vector(&self.bc);
        z
    }

    /// Features then logits in one call.
    pub fn forward(&self, x: &Mat) -> Mat {
        self.forward_logits(&self.forward_features(x))
    }

    /// Mean cross-entropy of the head on `x` against integer labels, with
    /// exact gradients for the head and for the features.
    pub fn ce_loss_and_grads(&self, x: &Mat, labels: &[usize]) -> Result<CeOutput> {
        let n = x.rows();
        if n == 0 {
            return Err(Error::invalid_argument("ce loss: empty batch"));
        }
        assert_eq!(labels.len(), n, "ce loss: label count mismatch");
        let c = self.dims.n_classes;
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::invalid_argument(format!(
                    "label {y} at row {i} out of range for {c} classes"
                )));
            }
        }

        let features = self.forward_features(x);
        let logits = self.forward_logits(&features);

        // loss via log-sum-exp; dz = (softmax - onehot) / n
        let mut loss = 0.0;
        let mut dz = logits.clone();
        for i in 0..n {
            let row = dz.row_mut(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).max(-EXP_CLAMP).exp();
                sum += *v;
            }
            loss += sum.ln() + max - logits.get(i, labels[i]);
            for v in row.iter_mut() {
                *v /= sum;
            }
            row[labels[i]] -= 1.0;
        }
        loss /= n as f64;
        dz.scale(1.0 / n as f64);

        let grad_wc = features.transpose().matmul(&dz);
        let grad_bc = dz.col_sums();
        let grad_features = dz.matmul(&self.wc.transpose());
        Ok(CeOutput { loss, grad_wc, grad_bc, grad_features })
    }

    /// Backpropagate an arbitrary feature gradient through the transform,
    /// returning exact gradients for `w1, b1, w2, b2`.
    pub fn backward_through_g(&self, x: &Mat, grad_features: &Mat) -> FeatureGrads {
        assert_eq!(x.cols(), self.dims.d_in, "backward_through_g: input width mismatch");
        assert_eq!(grad_features.rows(), x.rows(), "backward_through_g: row count mismatch");
        assert_eq!(
            grad_features.cols(),
            self.dims.feat_dim,
            "backward_through_g: feature width mismatch"
        );
        let hidden = self.hidden_activation(x);

        let grad_w2 = hidden.transpose().matmul(grad_features);
        let grad_b2 = grad_features.col_sums();

        // d(hidden pre-activation) = (grad_f * w2^T) .* (1 - tanh^2)
        let mut d_hidden = grad_features.matmul(&self.w2.transpose());
        for r in 0..d_hidden.rows() {
            for c in 0..d_hidden.cols() {
                let a = hidden.get(r, c);
                d_hidden.set(r, c, d_hidden.get(r, c) * (1.0 - a * a));
            }
        }
        let grad_w1 = x.transpose().matmul(&d_hidden);
        let grad_b1 = d_hidden.col_sums();
        FeatureGrads { w1: grad_w1, b1: grad_b1, w2: grad_w2, b2: grad_b2 }
    }

    /// Row-wise softmax over the model's logits.
    pub fn predict_probs(&self, x: &Mat) -> Mat {
        let mut z = self.forward(x);
        for i in 0..z.rows() {
            softmax_in_place(z.row_mut(i));
        }
        z
    }

    fn hidden_activation(&self, x: &Mat) -> Mat {
        let mut h = x.matmul(&self.w1);
        h.add_row_vector(&self.b1);
        h.map(f64::tanh)
    }
}
