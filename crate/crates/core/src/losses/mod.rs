//! Loss terms and the iteration-dependent weight schedule.
//!
//! [`pure`] holds f64 reference implementations with hand-derived gradients;
//! [`tensor`] holds the autograd versions used by the training loop.

pub mod pure;
pub mod tensor;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub use pure::{ceiling, huber, smoothness, warp_consistency};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Huber transition point, in pixels.
    pub huber_c: f64,
    /// Weight of the smoothness term.
    pub w1: f64,
    /// Weight of the ceiling term inside the unsupervised group.
    pub w2: f64,
    pub u_start: f64,
    pub u_end: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            huber_c: 3.0,
            w1: 1.0,
            w2: 1.0,
            u_start: 1.0,
            u_end: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.huber_c > 0.0, "huber_c must be positive");
        ensure!(
            self.w1 >= 0.0 && self.w2 >= 0.0 && self.u_start >= 0.0,
            "loss weights must be non-negative"
        );
        ensure!(self.u_start <= self.u_end, "u_start must not exceed u_end");
        Ok(())
    }

    /// Linear ramp from `u_start` at `i = 0` to `u_end` at `i = i_max`.
    pub fn u(&self, i: u64, i_max: u64) -> f64 {
        if i_max == 0 {
            return self.u_start;
        }
        let frac = (i.min(i_max)) as f64 / i_max as f64;
        self.u_start + (self.u_end - self.u_start) * frac
    }
}

/// Scalar values of the four loss groups for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub huber: f64,
    pub smooth: f64,
    pub mse: f64,
    pub ceil: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        [self.huber, self.smooth, self.mse, self.ceil]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `huber + w1 * smooth + u(i) * (mse + w2 * ceil)`.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights, i: u64, i_max: u64) -> Result<f64> {
    ensure!(i <= i_max, "iteration {i} beyond i_max {i_max}");
    let u = weights.u(i, i_max);
    Ok(terms.huber + weights.w1 * terms.smooth + u * (terms.mse + weights.w2 * terms.ceil))
}
