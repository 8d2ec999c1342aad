use candle_core::Tensor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::ImageSlice;
use crate::error::{ensure, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub t_train: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            t_train: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Linear variance schedule with cumulative products
/// `alphas_bar[t] = prod_{s <= t} (1 - betas[s])`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        ensure!(cfg.t_train >= 2, "t_train must be at least 2");
        ensure!(
            0.0 < cfg.beta_start && cfg.beta_start < cfg.beta_end && cfg.beta_end < 1.0,
            "need 0 < beta_start < beta_end < 1"
        );
        let n = cfg.t_train;
        let betas: Vec<f64> = (0..n)
            .map(|i| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64)
            .collect();
        let mut acc = 1.0;
        let alphas_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_bar })
    }

    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        ensure!(t < self.t_train(), "timestep {t} outside [0, {})", self.t_train());
        Ok(())
    }

    /// `(sqrt(alpha_bar), sqrt(1 - alpha_bar))` at `t`.
    pub fn coefficients(&self, t: usize) -> (f64, f64) {
        let a = self.alphas_bar[t];
        (a.sqrt(), (1.0 - a).sqrt())
    }
}

/// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps`.
pub fn forward_noise(x0: &ImageSlice, t: usize, eps: &Array2<f64>, sched: &NoiseSchedule) -> Result<Array2<f64>> {
    forward_noise_array(&x0.pixels, t, eps, sched)
}

pub fn forward_noise_array(x0: &Array2<f64>, t: usize, eps: &Array2<f64>, sched: &NoiseSchedule) -> Result<Array2<f64>> {
    sched.check_t(t)?;
    ensure!(x0.dim() == eps.dim(), "noise shape differs from image shape");
    let (a, b) = sched.coefficients(t);
    Ok(x0.mapv(|v| a * v) + eps.mapv(|e| b * e))
}

/// Batched version with one timestep per item (`N x C x H x W`).
pub fn forward_noise_tensor(x0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let n = x0.dim(0)?;
    ensure!(t.len() == n, "{} timesteps for a batch of {n}", t.len());
    for &ti in t {
        sched.check_t(ti)?;
    }
    let (sa, sb): (Vec<f64>, Vec<f64>) = t.iter().map(|&ti| sched.coefficients(ti)).unzip();
    let shape = (n, 1, 1, 1);
    let sa = Tensor::new(sa.as_slice(), x0.device())?.to_dtype(x0.dtype())?.reshape(shape)?;
    let sb = Tensor::new(sb.as_slice(), x0.device())?.to_dtype(x0.dtype())?.reshape(shape)?;
    Ok((x0.broadcast_mul(&sa)? + eps.broadcast_mul(&sb)?)?)
}
