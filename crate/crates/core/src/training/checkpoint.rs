use std::path::Path;

use candle_core::Device;

use crate::deform::{DeformNet, DeformNetConfig};
use crate::diffusion::{DiffusionModelPair, NoiseUNet, UNetConfig};
use crate::error::Result;
use crate::nn::{self, TrainingMeta};

pub const MODEL_U: &str = "diffusion_u";
pub const MODEL_C: &str = "diffusion_c";
pub const DEFORM: &str = "deform";

pub fn save_unet(stem: &Path, model: &NoiseUNet, meta: &TrainingMeta) -> Result<()> {
    nn::save_checkpoint(stem, model.varmap(), model.config(), meta)
}

pub fn load_unet(stem: &Path, device: &Device) -> Result<(NoiseUNet, TrainingMeta)> {
    let (config, meta): (UNetConfig, _) = nn::read_checkpoint_config(stem)?;
    let mut model = NoiseUNet::new(config, 0, device)?;
    nn::load_checkpoint_weights(stem, model.varmap_mut())?;
    Ok((model, meta))
}

pub fn save_deform_net(stem: &Path, net: &DeformNet, meta: &TrainingMeta) -> Result<()> {
    nn::save_checkpoint(stem, net.varmap(), net.config(), meta)
}

pub fn load_deform_net(stem: &Path, device: &Device) -> Result<(DeformNet, TrainingMeta)> {
    let (config, meta): (DeformNetConfig, _) = nn::read_checkpoint_config(stem)?;
    let mut net = DeformNet::new(config, 0, device)?;
    nn::load_checkpoint_weights(stem, net.varmap_mut())?;
    Ok((net, meta))
}

/// Loads `diffusion_u` and `diffusion_c` from `dir`.
pub fn load_pair(dir: &Path, device: &Device) -> Result<DiffusionModelPair> {
    let (u, _) = load_unet(&dir.join(MODEL_U), device)?;
    let (c, _) = load_unet(&dir.join(MODEL_C), device)?;
    Ok(DiffusionModelPair::new(u, c))
}

pub fn pair_exists(dir: &Path) -> bool {
    [MODEL_U, MODEL_C]
        .iter()
        .all(|m| dir.join(m).with_extension("safetensors").is_file())
}
