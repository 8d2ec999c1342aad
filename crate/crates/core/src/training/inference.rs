//! Volume-level inference.

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::deformation::network_input;
use crate::data::Volume;
use crate::deform::{max_displacement, DeformNet, DeformationField};
use crate::diffusion::{DiffusionModelPair, NoisePredictor, NoiseSchedule};
use crate::error::{ensure, Result};
use crate::nn;

const INFER_BATCH: usize = 8;

/// Stable 64-bit FNV-1a, used to derive per-slice noise seeds.
fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed of the representation noise for one slice.
pub fn slice_noise_seed(seed: u64, case_id: &str, slice_index: usize) -> u64 {
    let mut h = fnv1a(&seed.to_le_bytes(), 0xcbf2_9ce4_8422_2325);
    h = fnv1a(case_id.as_bytes(), h);
    fnv1a(&(slice_index as u64).to_le_bytes(), h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlicePrediction {
    pub slice_index: usize,
    pub mls_mm: f64,
    /// Pixel of the largest displacement, `(row, col)`.
    pub location: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumePrediction {
    pub case_id: String,
    pub slices: Vec<SlicePrediction>,
    pub volume_mls_mm: f64,
    pub fields: Vec<DeformationField>,
}

/// Serializable part of a [`VolumePrediction`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub case_id: String,
    pub volume_mls_mm: f64,
    pub slices: Vec<SlicePrediction>,
}

impl VolumePrediction {
    pub fn record(&self) -> PredictionRecord {
        PredictionRecord {
            case_id: self.case_id.clone(),
            volume_mls_mm: self.volume_mls_mm,
            slices: self.slices.clone(),
        }
    }
}

impl From<PredictionRecord> for VolumePrediction {
    fn from(r: PredictionRecord) -> Self {
        Self {
            case_id: r.case_id,
            slices: r.slices,
            volume_mls_mm: r.volume_mls_mm,
            fields: Vec::new(),
        }
    }
}

/// Predicts a field for every slice at the fixed noise level
/// `cfg.repr_t_inference`, and reports the largest displacement per slice
/// and over the volume.
pub fn infer_volume<M: NoisePredictor>(
    volume: &Volume,
    net: &DeformNet,
    pair: &DiffusionModelPair<M>,
    cfg: &TrainConfig,
) -> Result<VolumePrediction> {
    ensure!(!volume.slices.is_empty(), "case {}: empty volume", volume.case_id);
    let sched = NoiseSchedule::new(&cfg.diffusion.schedule)?;
    sched.check_t(cfg.repr_t_inference)?;
    let use_repr = net.config().input_channels == 2;
    let device = Device::Cpu;
    let mut slices = Vec::with_capacity(volume.slices.len());
    let mut fields = Vec::with_capacity(volume.slices.len());
    for chunk in volume.slices.chunks(INFER_BATCH) {
        let imgs: Vec<_> = chunk.iter().map(|s| &s.pixels).collect();
        let x0 = nn::images_to_tensor(&imgs, &device)?;
        let (_, _, h, w) = x0.dims4()?;
        let mut noise = Vec::with_capacity(chunk.len() * h * w);
        for s in chunk {
            let mut rng = ChaCha8Rng::seed_from_u64(slice_noise_seed(cfg.seed, &volume.case_id, s.slice_index));
            noise.extend((0..h * w).map(|_| rng.sample::<f64, _>(StandardNormal) as f32));
        }
        let eps = Tensor::from_vec(noise, (chunk.len(), 1, h, w), &device)?;
        let t = vec![cfg.repr_t_inference; chunk.len()];
        let input = network_input(pair, &x0, &t, &eps, &sched, use_repr)?;
        let (_, phi) = net.forward_deformation(&input)?;
        for (b, s) in chunk.iter().enumerate() {
            let field = DeformationField::new(nn::tensor_field(&phi, b)?)?;
            let (mag, location) = max_displacement(&field);
            slices.push(SlicePrediction {
                slice_index: s.slice_index,
                mls_mm: mag * s.pixel_size_mm,
                location,
            });
            fields.push(field);
        }
    }
    let volume_mls_mm = slices.iter().map(|s| s.mls_mm).fold(0.0, f64::max);
    Ok(VolumePrediction {
        case_id: volume.case_id.clone(),
        slices,
        volume_mls_mm,
        fields,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform::DeformNetConfig;
    use crate::diffusion::stubs::ConstantEpsilon;
    use crate::synthetic::{generate_phantom_case, PhantomSpec};

    #[test]
    fn untrained_network_predicts_zero_shift() {
        let spec = PhantomSpec {
            image_size: 16,
            shift_range_px: (1.0, 2.0),
            slices_per_case: 3,
            labeled_slices_per_case: 1,
            ..Default::default()
        };
        let case = generate_phantom_case(&spec, "x", true, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let net = DeformNet::new(
            DeformNetConfig {
                levels: 2,
                base_channels: 4,
                ..Default::default()
            },
            0,
            &Device::Cpu,
        )
        .unwrap();
        let pair = DiffusionModelPair::new(ConstantEpsilon(0.2), ConstantEpsilon(0.0));
        let p = infer_volume(&case.volume, &net, &pair, &TrainConfig::default()).unwrap();
        assert_eq!(p.slices.len(), 3);
        assert!(p.slices.iter().all(|s| s.mls_mm == 0.0));
        assert_eq!(p.volume_mls_mm, 0.0);

        let mut empty = case.volume.clone();
        empty.slices.clear();
        assert!(infer_volume(&empty, &net, &pair, &TrainConfig::default()).is_err());
    }

    #[test]
    fn noise_seeds_are_stable() {
        assert_eq!(slice_noise_seed(1, "a", 2), slice_noise_seed(1, "a", 2));
        assert_ne!(slice_noise_seed(1, "a", 2), slice_noise_seed(1, "a", 3));
        assert_ne!(slice_noise_seed(1, "a", 2), slice_noise_seed(2, "a", 2));
    }
}
