//! Partial-corruption editing with a deterministic DDIM reverse pass.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{forward_noise_tensor, DiffusionModelPair, NoisePredictor, NoiseSchedule};
use crate::data::ImageSlice;
use crate::error::{ensure, Result};
use crate::nn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub gamma: f64,
    pub ddim_steps: usize,
    /// Index into the DDIM sub-schedule the input is corrupted to before
    /// denoising; 0 means no edit.
    pub start_step: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            ddim_steps: 50,
            start_step: 15,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.ddim_steps >= 1, "ddim_steps must be >= 1");
        ensure!(
            self.start_step <= self.ddim_steps,
            "start_step {} exceeds ddim_steps {}",
            self.start_step,
            self.ddim_steps
        );
        ensure!(self.gamma.is_finite(), "gamma must be finite");
        Ok(())
    }
}

/// Sub-schedule `tau_k = min(k * T / S, T - 1)` for `k = 0..=S`.
pub fn ddim_timesteps(ddim_steps: usize, t_train: usize) -> Vec<usize> {
    (0..=ddim_steps)
        .map(|k| (k * t_train / ddim_steps).min(t_train - 1))
        .collect()
}

/// Batched edit. `x0` is `N x 1 x H x W`, `eps` the corruption noise of the
/// same shape; the computation runs in the dtype of `x0`.
pub fn generate_counterfactual_batch<M: NoisePredictor>(
    pair: &DiffusionModelPair<M>,
    x0: &Tensor,
    eps: &Tensor,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    cfg.validate()?;
    ensure!(x0.dims() == eps.dims(), "noise shape differs from image shape");
    if cfg.start_step == 0 {
        return Ok(x0.clone());
    }
    let n = x0.dim(0)?;
    let taus = ddim_timesteps(cfg.ddim_steps, sched.t_train());
    let mut x = forward_noise_tensor(x0, &vec![taus[cfg.start_step]; n], eps, sched)?;
    for k in (0..=cfg.start_step).rev() {
        let t = taus[k];
        let ab = sched.alphas_bar[t];
        let ab_prev = if k == 0 { 1.0 } else { sched.alphas_bar[taus[k - 1]] };
        let e = pair.guided(&x, &vec![t; n], cfg.gamma)?;
        let x0_hat = ((&x - (&e * (1.0 - ab).sqrt())?)? / ab.sqrt())?;
        x = ((x0_hat * ab_prev.sqrt())? + (e * (1.0 - ab_prev).sqrt())?)?;
    }
    Ok(x.clamp(-1.0, 1.0)?)
}

/// Edits one slice towards the negative class. The only randomness is the
/// corruption noise drawn from `rng`.
pub fn generate_counterfactual<M: NoisePredictor, R: Rng + ?Sized>(
    pair: &DiffusionModelPair<M>,
    x0: &ImageSlice,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<ImageSlice> {
    cfg.validate()?;
    let (h, w) = x0.pixels.dim();
    let eps: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    if cfg.start_step == 0 {
        return Ok(x0.clone());
    }
    let x = Tensor::from_vec(x0.pixels.iter().copied().collect::<Vec<f64>>(), (1, 1, h, w), &Device::Cpu)?;
    let eps = Tensor::from_vec(eps, (1, 1, h, w), &Device::Cpu)?;
    let out = generate_counterfactual_batch(pair, &x, &eps, cfg, sched)?.to_dtype(DType::F64)?;
    let pixels: Array2<f64> = nn::tensor_plane(&out, 0, 0)?;
    ImageSlice::new(pixels, x0.pixel_size_mm, x0.slice_index)
}

#[cfg(test)]
mod tests {
    use super::super::stubs::{ConstantEpsilon, OracleEpsilon};
    use super::super::ScheduleConfig;
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn slice() -> ImageSlice {
        ImageSlice::new(
            Array2::from_shape_fn((12, 12), |(r, c)| ((r as f64 * 0.5).sin() * (c as f64 * 0.3).cos()) * 0.9),
            0.86,
            3,
        )
        .unwrap()
    }

    fn oracle_pair(x0: &ImageSlice, sched: &NoiseSchedule) -> DiffusionModelPair<OracleEpsilon> {
        let (h, w) = x0.pixels.dim();
        let t = Tensor::from_vec(x0.pixels.iter().copied().collect::<Vec<f64>>(), (1, 1, h, w), &Device::Cpu).unwrap();
        let mk = || OracleEpsilon {
            x0: t.clone(),
            schedule: sched.clone(),
        };
        DiffusionModelPair::new(mk(), mk())
    }

    #[test]
    fn sub_schedule() {
        let t = ddim_timesteps(50, 1000);
        assert_eq!(t.len(), 51);
        assert_eq!(t[0], 0);
        assert_eq!(t[15], 300);
        assert_eq!(t[50], 999);
        assert_eq!(ddim_timesteps(1000, 1000)[999], 999);
    }

    #[test]
    fn zero_start_step_is_identity_and_seed_determinism() {
        let sched = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let pair = DiffusionModelPair::new(ConstantEpsilon(0.1), ConstantEpsilon(-0.1));
        let x0 = slice();
        let cfg = GuidanceConfig {
            start_step: 0,
            ..Default::default()
        };
        let out = generate_counterfactual(&pair, &x0, &cfg, &sched, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out, x0);

        let cfg = GuidanceConfig::default();
        let a = generate_counterfactual(&pair, &x0, &cfg, &sched, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = generate_counterfactual(&pair, &x0, &cfg, &sched, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn exact_noise_reconstructs_input() {
        let sched = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let x0 = slice();
        let pair = oracle_pair(&x0, &sched);
        for cfg in [
            GuidanceConfig::default(),
            GuidanceConfig {
                gamma: 1.0,
                ddim_steps: 50,
                start_step: 50,
            },
            GuidanceConfig {
                gamma: 2.0,
                ddim_steps: 1000,
                start_step: 1000,
            },
        ] {
            let out = generate_counterfactual(&pair, &x0, &cfg, &sched, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
            let rms = ((&out.pixels - &x0.pixels).mapv(|d| d * d).mean().unwrap()).sqrt();
            assert!(rms < 1e-3, "rms {rms} for {cfg:?}");
        }
    }

    #[test]
    fn rejects_bad_config() {
        let sched = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
        let pair = DiffusionModelPair::new(ConstantEpsilon(0.0), ConstantEpsilon(0.0));
        let cfg = GuidanceConfig {
            start_step: 51,
            ..Default::default()
        };
        assert!(generate_counterfactual(&pair, &slice(), &cfg, &sched, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
