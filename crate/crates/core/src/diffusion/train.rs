//! Noise-prediction training step.

use candle_core::{DType, Tensor};
use candle_nn::Optimizer;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{forward_noise_tensor, NoisePredictor, NoiseSchedule};
use crate::error::{Error, Result};

/// Mean squared error between `model(x_t, t)` and `eps`.
pub fn diffusion_loss<M: NoisePredictor>(
    model: &M,
    x0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    let x_t = forward_noise_tensor(x0, t, eps, sched)?;
    let pred = model.predict_noise(&x_t, t)?.to_dtype(x0.dtype())?;
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub t: Vec<usize>,
}

/// Samples `t ~ U[0, T)` and standard-normal noise per item, evaluates the
/// loss and applies one optimizer update. The loss is returned even when it
/// is not finite; the update is skipped in that case.
pub fn train_step_diffusion<M: NoisePredictor, O: Optimizer, R: Rng + ?Sized>(
    model: &M,
    opt: &mut O,
    x0: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<StepOutcome> {
    let n = x0.dim(0)?;
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(0..sched.t_train())).collect();
    let eps: Vec<f32> = (0..x0.elem_count())
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    let eps = Tensor::from_vec(eps, x0.shape(), x0.device())?.to_dtype(x0.dtype())?;
    let loss = diffusion_loss(model, x0, &t, &eps, sched)?;
    let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if value.is_finite() {
        opt.backward_step(&loss)?;
    }
    Ok(StepOutcome { loss: value, t })
}

/// Owns the optimizer, rng and loss history for one model.
pub struct DiffusionTrainer<'a, M, O, R> {
    pub model: &'a M,
    pub opt: O,
    pub rng: R,
    pub schedule: NoiseSchedule,
    pub iteration: u64,
    pub history: Vec<f64>,
}

impl<'a, M: NoisePredictor, O: Optimizer, R: Rng> DiffusionTrainer<'a, M, O, R> {
    pub fn new(model: &'a M, opt: O, rng: R, schedule: NoiseSchedule) -> Self {
        Self {
            model,
            opt,
            rng,
            schedule,
            iteration: 0,
            history: Vec::new(),
        }
    }

    /// One update; a non-finite loss aborts with the iteration, the sampled
    /// timesteps and the recent loss history.
    pub fn step(&mut self, x0: &Tensor) -> Result<f64> {
        let out = train_step_diffusion(self.model, &mut self.opt, x0, &self.schedule, &mut self.rng)?;
        if !out.loss.is_finite() {
            let tail = &self.history[self.history.len().saturating_sub(20)..];
            return Err(Error::NonFinite(format!(
                "diffusion loss {} at iteration {}, t = {:?}, recent losses {:?}",
                out.loss, self.iteration, out.t, tail
            )));
        }
        self.iteration += 1;
        self.history.push(out.loss);
        Ok(out.loss)
    }
}
