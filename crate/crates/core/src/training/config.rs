use serde::{Deserialize, Serialize};

use crate::deform::DeformNetConfig;
use crate::diffusion::{GuidanceConfig, ScheduleConfig, UNetConfig};
use crate::error::{ensure, Result};
use crate::losses::LossWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub iterations: u64,
    /// Sampling weight of positive-case slices when training model U.
    pub mls_upsample: f64,
    /// When set, negatives are subsampled to this multiple of the positive
    /// case count and positives are re-weighted to balance them, overriding
    /// `mls_upsample`.
    pub negative_multiple: Option<f64>,
    /// Checkpoint period in iterations; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub unet: UNetConfig,
    pub schedule: ScheduleConfig,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            batch: 4,
            iterations: 200_000,
            mls_upsample: 10.0,
            negative_multiple: None,
            checkpoint_every: 10_000,
            unet: UNetConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformTrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    /// Share of each batch taken from labeled slices.
    pub labeled_share: f64,
    /// Fraction of positive volumes whose unlabeled slices enter training.
    pub unlabeled_fraction: f64,
    /// Stack the score-difference map onto the image as a second channel.
    pub use_representation: bool,
    pub augment: bool,
    pub rotation_range_deg: f64,
    pub net: DeformNetConfig,
    pub loss: LossWeights,
    pub guidance: GuidanceConfig,
}

impl Default for DeformTrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            batch: 16,
            epochs: 100,
            labeled_share: 0.5,
            unlabeled_fraction: 1.0,
            use_representation: true,
            augment: true,
            rotation_range_deg: 15.0,
            net: DeformNetConfig::default(),
            loss: LossWeights::default(),
            guidance: GuidanceConfig::default(),
        }
    }
}

impl DeformTrainConfig {
    /// Network config with the input channel count implied by
    /// `use_representation`.
    pub fn net_config(&self) -> DeformNetConfig {
        DeformNetConfig {
            input_channels: if self.use_representation { 2 } else { 1 },
            ..self.net.clone()
        }
    }

    /// `(labeled, unlabeled)` items per step when both pools are non-empty.
    pub fn split_batch(&self) -> (usize, usize) {
        let l = ((self.batch as f64 * self.labeled_share).round() as usize).clamp(1, self.batch);
        (l, self.batch - l)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub diffusion: DiffusionTrainConfig,
    pub deformation: DeformTrainConfig,
    /// Noise level of the representation at inference time.
    pub repr_t_inference: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            diffusion: DiffusionTrainConfig::default(),
            deformation: DeformTrainConfig::default(),
            repr_t_inference: 600,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.diffusion;
        ensure!(d.lr > 0.0 && d.weight_decay >= 0.0, "diffusion lr must be positive");
        ensure!(d.batch >= 1 && d.iterations >= 1, "diffusion batch and iterations must be positive");
        ensure!(d.mls_upsample > 0.0, "mls_upsample must be positive");
        if let Some(k) = d.negative_multiple {
            ensure!(k > 0.0, "negative_multiple must be positive");
        }
        d.unet.validate()?;
        ensure!(
            self.repr_t_inference < d.schedule.t_train,
            "repr_t_inference {} must be below t_train {}",
            self.repr_t_inference,
            d.schedule.t_train
        );
        let f = &self.deformation;
        ensure!(f.lr > 0.0 && f.weight_decay >= 0.0, "deformation lr must be positive");
        ensure!(f.batch >= 1 && f.epochs >= 1, "deformation batch and epochs must be positive");
        ensure!(
            (0.0..=1.0).contains(&f.labeled_share) && (0.0..=1.0).contains(&f.unlabeled_fraction),
            "labeled_share and unlabeled_fraction must lie in [0, 1]"
        );
        ensure!(f.rotation_range_deg >= 0.0, "rotation range must be >= 0");
        f.net_config().validate()?;
        f.loss.validate()?;
        f.guidance.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.deformation.split_batch(), (8, 8));
        let text = toml::to_string(&c).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        let partial: TrainConfig = toml::from_str("[deformation]\nepochs = 3\n").unwrap();
        assert_eq!(partial.deformation.epochs, 3);
        assert_eq!(partial.diffusion.batch, 4);
    }

    #[test]
    fn rejects_out_of_range_noise_level() {
        let c = TrainConfig {
            repr_t_inference: 1000,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
