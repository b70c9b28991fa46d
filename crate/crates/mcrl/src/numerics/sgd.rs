//! Mini-batch SGD with classic (heavy-ball) momentum.

use crate::error::{Error, Result};
use crate::numerics::Mat;

/// Optimizer state: one velocity buffer per parameter block.
///
/// The update is the classic momentum form
/// `v <- momentum * v + grad; param <- param - lr * v`.
#[derive(Debug, Clone)]
pub struct SgdState {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Mat>,
}

impl SgdState {
    /// `shapes` fixes the parameter block layout for the lifetime of the state.
    pub fn new(learning_rate: f64, momentum: f64, shapes: &[(usize, usize)]) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidConfig {
                field: "learning_rate",
                reason: format!("must be a positive real, got {learning_rate}"),
            });
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig {
                field: "momentum",
                reason: format!("must lie in [0, 1), got {momentum}"),
            });
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            velocity: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Apply one update to every block. Block count and shapes must match the
    /// layout given at construction; anything else is a caller bug.
    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[&Mat]) {
        assert_eq!(params.len(), self.velocity.len(), "sgd step: block count mismatch");
        assert_eq!(grads.len(), self.velocity.len(), "sgd step: grad count mismatch");
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            assert_eq!(
                (param.rows(), param.cols()),
                (vel.rows(), vel.cols()),
                "sgd step: param shape drifted from velocity"
            );
            assert_eq!(
                (grad.rows(), grad.cols()),
                (vel.rows(), vel.cols()),
                "sgd step: grad shape mismatch"
            );
            debug_assert!(grad.is_finite(), "sgd step: non-finite gradient");
            vel.scale(self.momentum);
            vel.scaled_add(1.0, grad);
            param.scaled_add(-self.learning_rate, vel);
        }
    }
}
