//! Pretraining of the unconditional (U) and negative-only (C) noise models.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::Device;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array2;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{save_unet, MODEL_C, MODEL_U};
use super::config::{DiffusionTrainConfig, TrainConfig};
use crate::data::Dataset;
use crate::diffusion::{DiffusionModelPair, DiffusionTrainer, NoiseSchedule, NoiseUNet};
use crate::error::{ensure, Error, Result};
use crate::nn::{self, TrainingMeta};

/// Slices a model is trained on, with sampling weights.
#[derive(Debug, Clone)]
pub struct SlicePool<'a> {
    pub images: Vec<&'a Array2<f64>>,
    pub weights: Vec<f64>,
}

/// Pools for model U and model C.
///
/// U sees every positive slice with weight `mls_upsample` and every retained
/// negative slice with weight 1. With `negative_multiple = k`, negative cases
/// are subsampled (seeded) to `round(k * positives)` cases and the positive
/// weight becomes `negative_slices / positive_slices`.
pub fn diffusion_pools<'a>(
    dataset: &'a Dataset,
    cfg: &DiffusionTrainConfig,
    seed: u64,
) -> Result<(SlicePool<'a>, SlicePool<'a>)> {
    let pos: Vec<_> = dataset.positives().collect();
    let mut neg: Vec<_> = dataset.negatives().collect();
    ensure!(
        !neg.is_empty(),
        "model C needs negative-class slices but the dataset has none"
    );
    let mut pos_weight = cfg.mls_upsample;
    if let Some(k) = cfg.negative_multiple {
        let keep = ((k * pos.len() as f64).round() as usize).clamp(1, neg.len());
        neg.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15));
        neg.truncate(keep);
        neg.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let pos_slices: usize = pos.iter().map(|v| v.slices.len()).sum();
        let neg_slices: usize = neg.iter().map(|v| v.slices.len()).sum();
        if pos_slices > 0 {
            pos_weight = neg_slices as f64 / pos_slices as f64;
        }
    }
    let mut u = SlicePool {
        images: Vec::new(),
        weights: Vec::new(),
    };
    let mut c = u.clone();
    for v in &pos {
        for s in &v.slices {
            u.images.push(&s.pixels);
            u.weights.push(pos_weight);
        }
    }
    for v in &neg {
        for s in &v.slices {
            u.images.push(&s.pixels);
            u.weights.push(1.0);
            c.images.push(&s.pixels);
            c.weights.push(1.0);
        }
    }
    Ok((u, c))
}

fn adamw(model: &NoiseUNet, cfg: &DiffusionTrainConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        model.varmap().all_vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    )?)
}

/// Trains one model for `cfg.iterations` steps on weighted draws from `pool`.
/// Returns the loss history.
pub fn train_noise_model(
    model: &NoiseUNet,
    pool: &SlicePool,
    cfg: &DiffusionTrainConfig,
    seed: u64,
    mut on_step: impl FnMut(u64, f64) -> Result<()>,
) -> Result<Vec<f64>> {
    ensure!(!pool.images.is_empty(), "empty training pool");
    let sched = NoiseSchedule::new(&cfg.schedule)?;
    let index = WeightedIndex::new(&pool.weights).map_err(|e| Error::Validation(format!("sampling weights: {e}")))?;
    let mut draw_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let mut trainer = DiffusionTrainer::new(model, adamw(model, cfg)?, noise_rng, sched);
    for it in 0..cfg.iterations {
        let picks: Vec<&Array2<f64>> = (0..cfg.batch).map(|_| pool.images[index.sample(&mut draw_rng)]).collect();
        let x0 = nn::images_to_tensor(&picks, model.device())?;
        let loss = trainer.step(&x0)?;
        on_step(it, loss)?;
    }
    Ok(trainer.history)
}

pub struct PretrainOutput {
    pub pair: DiffusionModelPair,
    pub history_u: Vec<f64>,
    pub history_c: Vec<f64>,
}

/// Trains model U then model C. With an output directory, writes
/// `diffusion_loss.csv` and checkpoints `diffusion_u` / `diffusion_c`.
pub fn pretrain_diffusion(dataset: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<PretrainOutput> {
    cfg.validate()?;
    let d = &cfg.diffusion;
    let (pool_u, pool_c) = diffusion_pools(dataset, d, cfg.seed)?;
    if let Some((h, w)) = dataset.image_size() {
        let m = d.unet.size_multiple();
        ensure!(h % m == 0 && w % m == 0, "image size {h}x{w} must be divisible by {m}");
    }
    let device = Device::Cpu;
    let mut csv = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("diffusion_loss.csv");
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "model,iteration,loss").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut train = |name: &str, pool: &SlicePool, seed: u64| -> Result<(NoiseUNet, Vec<f64>)> {
        let model = NoiseUNet::new(d.unet.clone(), seed, &device)?;
        log::info!("training {name} on {} slices for {} iterations", pool.images.len(), d.iterations);
        let history = train_noise_model(&model, pool, d, seed, |it, loss| {
            if let Some((f, path)) = csv.as_mut() {
                writeln!(f, "{name},{it},{loss}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            if let Some(dir) = out {
                if d.checkpoint_every > 0 && (it + 1) % d.checkpoint_every == 0 && it + 1 < d.iterations {
                    save_unet(&dir.join(name), &model, &meta(it + 1, loss))?;
                }
            }
            if (it + 1) % 100 == 0 {
                log::info!("{name} iteration {} loss {loss:.5}", it + 1);
            }
            Ok(())
        })?;
        if let Some(dir) = out {
            save_unet(&dir.join(name), &model, &meta(d.iterations, *history.last().unwrap_or(&f64::NAN)))?;
        }
        Ok((model, history))
    };
    let (u, history_u) = train(MODEL_U, &pool_u, cfg.seed.wrapping_mul(2).wrapping_add(11))?;
    let (c, history_c) = train(MODEL_C, &pool_c, cfg.seed.wrapping_mul(2).wrapping_add(12))?;
    Ok(PretrainOutput {
        pair: DiffusionModelPair::new(u, c),
        history_u,
        history_c,
    })
}

fn meta(iteration: u64, loss: f64) -> TrainingMeta {
    TrainingMeta {
        iteration,
        schedule: serde_json::json!({ "last_loss": loss }),
    }
}
