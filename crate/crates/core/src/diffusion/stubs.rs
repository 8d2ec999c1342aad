//! Closed-form noise predictors for checking samplers and training code
//! without a trained network.

use candle_core::Tensor;

use super::{NoisePredictor, NoiseSchedule};
use crate::error::{ensure, Result};

/// Predicts the same value at every pixel.
#[derive(Debug, Clone, Copy)]
pub struct ConstantEpsilon(pub f64);

impl NoisePredictor for ConstantEpsilon {
    fn predict_noise(&self, x_t: &Tensor, _t: &[usize]) -> Result<Tensor> {
        Ok((x_t.ones_like()? * self.0)?)
    }
}

/// Knows the clean batch `x0` and returns the exact noise that produced
/// `x_t`: `(x_t - sqrt(ab) * x0) / sqrt(1 - ab)`.
pub struct OracleEpsilon {
    pub x0: Tensor,
    pub schedule: NoiseSchedule,
}

impl NoisePredictor for OracleEpsilon {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let n = x_t.dim(0)?;
        ensure!(t.len() == n, "{} timesteps for a batch of {n}", t.len());
        let (sa, sb): (Vec<f64>, Vec<f64>) = t.iter().map(|&ti| self.schedule.coefficients(ti)).unzip();
        let dev = x_t.device();
        let dt = x_t.dtype();
        let sa = Tensor::new(sa.as_slice(), dev)?.to_dtype(dt)?.reshape((n, 1, 1, 1))?;
        let sb = Tensor::new(sb.as_slice(), dev)?.to_dtype(dt)?.reshape((n, 1, 1, 1))?;
        let x0 = self.x0.to_dtype(dt)?;
        Ok((x_t - x0.broadcast_mul(&sa)?)?.broadcast_div(&sb)?)
    }
}

/// Always predicts zero.
#[derive(Debug, Clone, Copy)]
pub struct ZeroEpsilon;

impl NoisePredictor for ZeroEpsilon {
    fn predict_noise(&self, x_t: &Tensor, _t: &[usize]) -> Result<Tensor> {
        Ok(x_t.zeros_like()?)
    }
}
