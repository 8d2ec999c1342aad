//! Diffusion pretraining, semi-supervised deformation training and
//! volume inference.

pub mod checkpoint;
pub mod config;
pub mod deformation;
pub mod diffusion;
pub mod inference;

pub use checkpoint::{load_deform_net, load_pair, load_unet, save_deform_net, save_unet};
pub use config::{DeformTrainConfig, DiffusionTrainConfig, TrainConfig};
pub use deformation::{train_deformation, DeformTraining, StepLog, METRICS_HEADER};
pub use diffusion::{diffusion_pools, pretrain_diffusion, train_noise_model, PretrainOutput, SlicePool};
pub use inference::{infer_volume, slice_noise_seed, PredictionRecord, SlicePrediction, VolumePrediction};

use crate::data::Dataset;
use crate::error::{ensure, Result};

/// Splits off the last `round(n * test_fraction)` cases (by id order) as
/// the held-out set.
pub fn split_holdout(dataset: &Dataset, test_fraction: f64) -> Result<(Dataset, Dataset)> {
    ensure!(
        (0.0..1.0).contains(&test_fraction),
        "test_fraction must lie in [0, 1)"
    );
    let n = dataset.cases.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let (train, test) = dataset.cases.split_at(n - n_test);
    Ok((Dataset::new(train.to_vec()), Dataset::new(test.to_vec())))
}
