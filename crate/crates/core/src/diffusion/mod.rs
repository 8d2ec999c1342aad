//! Noise schedule, paired noise-prediction models, guided DDIM editing and the
//! score-difference representation.

pub mod ddim;
pub mod schedule;
pub mod stubs;
pub mod train;
pub mod unet;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;

use crate::data::ImageSlice;
use crate::error::{ensure, Result};
use crate::nn;

pub use ddim::{ddim_timesteps, generate_counterfactual, generate_counterfactual_batch, GuidanceConfig};
pub use schedule::{forward_noise, forward_noise_array, forward_noise_tensor, NoiseSchedule, ScheduleConfig};
pub use train::{diffusion_loss, train_step_diffusion, DiffusionTrainer, StepOutcome};
pub use unet::{NoiseUNet, UNetConfig};

/// Anything that maps `(x_t, t)` to a noise estimate of the same shape.
///
/// `x_t` is `N x 1 x H x W`; `t` holds one timestep per batch item.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        (**self).predict_noise(x_t, t)
    }
}

/// Model U sees every slice; model C sees only negative-class slices.
pub struct DiffusionModelPair<M = NoiseUNet> {
    pub model_u: M,
    pub model_c: M,
}

impl<M: NoisePredictor> DiffusionModelPair<M> {
    pub fn new(model_u: M, model_c: M) -> Self {
        Self { model_u, model_c }
    }

    /// `gamma * eps_C + (1 - gamma) * eps_U`, in the dtype of `x_t`.
    pub fn guided(&self, x_t: &Tensor, t: &[usize], gamma: f64) -> Result<Tensor> {
        let dtype = x_t.dtype();
        if gamma == 1.0 {
            return Ok(self.model_c.predict_noise(x_t, t)?.to_dtype(dtype)?);
        }
        if gamma == 0.0 {
            return Ok(self.model_u.predict_noise(x_t, t)?.to_dtype(dtype)?);
        }
        let c = self.model_c.predict_noise(x_t, t)?.to_dtype(dtype)?;
        let u = self.model_u.predict_noise(x_t, t)?.to_dtype(dtype)?;
        Ok(((c * gamma)? + (u * (1.0 - gamma))?)?)
    }

    /// `eps_U(x_t, t) - eps_C(x_t, t)` with both models on the same input.
    pub fn score_difference(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let dtype = x_t.dtype();
        let u = self.model_u.predict_noise(x_t, t)?.to_dtype(dtype)?;
        let c = self.model_c.predict_noise(x_t, t)?.to_dtype(dtype)?;
        Ok((u - c)?)
    }

    /// Corrupts a batch to per-item timesteps with the given noise and
    /// returns the score difference.
    pub fn representation_batch(
        &self,
        x0: &Tensor,
        t: &[usize],
        eps: &Tensor,
        sched: &NoiseSchedule,
    ) -> Result<Tensor> {
        let x_t = forward_noise_tensor(x0, t, eps, sched)?;
        self.score_difference(&x_t, t)
    }
}

fn plane(img: &Array2<f64>) -> Result<Tensor> {
    let (h, w) = img.dim();
    Ok(Tensor::from_vec(img.iter().copied().collect::<Vec<f64>>(), (1, 1, h, w), &Device::Cpu)?)
}

/// Single-image form of [`DiffusionModelPair::guided`], computed in f64.
pub fn guided_epsilon<M: NoisePredictor>(
    pair: &DiffusionModelPair<M>,
    x_t: &Array2<f64>,
    t: usize,
    gamma: f64,
) -> Result<Array2<f64>> {
    ensure!(x_t.iter().all(|v| v.is_finite()), "x_t must be finite");
    let out = pair.guided(&plane(x_t)?, &[t], gamma)?;
    nn::tensor_plane(&out, 0, 0)
}

/// Score-difference map of one slice at noise level `t_repr`.
pub fn extract_representation<M: NoisePredictor>(
    pair: &DiffusionModelPair<M>,
    x0: &ImageSlice,
    t_repr: usize,
    eps: &Array2<f64>,
    sched: &NoiseSchedule,
) -> Result<Array2<f64>> {
    let x_t = forward_noise(x0, t_repr, eps, sched)?;
    let d = pair.score_difference(&plane(&x_t)?.to_dtype(DType::F64)?, &[t_repr])?;
    nn::tensor_plane(&d, 0, 0)
}
