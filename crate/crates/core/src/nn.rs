//! Shared network plumbing: seeded initialization, array/tensor conversion and
//! checkpoint files.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::VarMap;
use ndarray::{Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a named parameter starts out.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamInit {
    Zeros,
    Ones,
    /// He-normal with standard deviation `sqrt(2 / fan_in)`.
    HeNormal,
}

/// Re-initializes every variable from `seed`, visiting names in sorted order
/// so that the result does not depend on hash-map iteration.
///
/// Candle's CPU random source cannot be seeded, hence this pass.
pub fn seeded_init(varmap: &VarMap, seed: u64, rule: impl Fn(&str) -> ParamInit) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock");
    let mut names: Vec<&String> = data.keys().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in names {
        let var = &data[name];
        let shape = var.shape().clone();
        let dims = shape.dims();
        let n = shape.elem_count();
        let values: Vec<f32> = match rule(name) {
            ParamInit::Zeros => vec![0.0; n],
            ParamInit::Ones => vec![1.0; n],
            ParamInit::HeNormal => {
                let fan_in: usize = dims.iter().skip(1).product::<usize>().max(1);
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

/// Default rule: biases zero, normalization scales one, everything else He.
pub fn default_rule(name: &str) -> ParamInit {
    if name.ends_with(".bias") {
        ParamInit::Zeros
    } else if name.contains("norm") && name.ends_with(".weight") {
        ParamInit::Ones
    } else {
        ParamInit::HeNormal
    }
}

/// Snapshot of all parameters as name -> flat f32 values, sorted by name.
pub fn parameter_snapshot(varmap: &VarMap) -> Result<Vec<(String, Vec<f32>)>> {
    let data = varmap.data().lock().expect("varmap lock");
    let mut out: Vec<(String, Vec<f32>)> = data
        .iter()
        .map(|(k, v)| {
            let vals = v.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            Ok((k.clone(), vals))
        })
        .collect::<candle_core::Result<_>>()?;
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

pub fn image_to_tensor(img: &Array2<f64>, device: &Device) -> Result<Tensor> {
    let (h, w) = img.dim();
    let v: Vec<f32> = img.iter().map(|&x| x as f32).collect();
    Ok(Tensor::from_vec(v, (1, 1, h, w), device)?)
}

/// Stacks equally sized images into an `N x 1 x H x W` f32 tensor.
pub fn images_to_tensor(imgs: &[&Array2<f64>], device: &Device) -> Result<Tensor> {
    let (h, w) = imgs.first().map(|i| i.dim()).unwrap_or((0, 0));
    let mut v = Vec::with_capacity(imgs.len() * h * w);
    for img in imgs {
        assert_eq!(img.dim(), (h, w), "images must share a shape");
        v.extend(img.iter().map(|&x| x as f32));
    }
    Ok(Tensor::from_vec(v, (imgs.len(), 1, h, w), device)?)
}

pub fn tensor_to_array4(t: &Tensor) -> Result<Array4<f64>> {
    let (n, c, h, w) = t.dims4()?;
    let v: Vec<f64> = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(Array4::from_shape_vec((n, c, h, w), v).expect("shape"))
}

/// Item `b`, channel `c` of an `N x C x H x W` tensor.
pub fn tensor_plane(t: &Tensor, b: usize, c: usize) -> Result<Array2<f64>> {
    let (_, _, h, w) = t.dims4()?;
    let v: Vec<f64> = t.get(b)?.get(c)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(Array2::from_shape_vec((h, w), v).expect("shape"))
}

/// Item `b` of an `N x 2 x H x W` field tensor.
pub fn tensor_field(t: &Tensor, b: usize) -> Result<Array3<f64>> {
    let (_, c, h, w) = t.dims4()?;
    let v: Vec<f64> = t.get(b)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    Ok(Array3::from_shape_vec((c, h, w), v).expect("shape"))
}

pub fn field_to_tensor(f: &Array3<f64>, device: &Device) -> Result<Tensor> {
    let (c, h, w) = f.dim();
    let v: Vec<f32> = f.iter().map(|&x| x as f32).collect();
    Ok(Tensor::from_vec(v, (1, c, h, w), device)?)
}

/// Training bookkeeping stored next to the weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub iteration: u64,
    /// Free-form schedule state (e.g. the current guidance weight).
    #[serde(default)]
    pub schedule: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Sidecar<C> {
    config: C,
    meta: TrainingMeta,
}

fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("safetensors"), stem.with_extension("json"))
}

/// Writes `<stem>.safetensors` (named parameter arrays) and `<stem>.json`
/// (network config plus training metadata).
pub fn save_checkpoint<C: Serialize>(stem: &Path, varmap: &VarMap, config: &C, meta: &TrainingMeta) -> Result<()> {
    if let Some(dir) = stem.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (weights, sidecar) = checkpoint_paths(stem);
    varmap.save(&weights)?;
    let json = serde_json::to_string_pretty(&Sidecar { config, meta: meta.clone() })?;
    fs::write(&sidecar, json).map_err(|e| Error::io(&sidecar, e))
}

pub fn read_checkpoint_config<C: DeserializeOwned>(stem: &Path) -> Result<(C, TrainingMeta)> {
    let (_, sidecar) = checkpoint_paths(stem);
    let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
    let s: Sidecar<C> = serde_json::from_str(&text).map_err(|e| Error::format(&sidecar, e.to_string()))?;
    Ok((s.config, s.meta))
}

pub fn load_checkpoint_weights(stem: &Path, varmap: &mut VarMap) -> Result<()> {
    let (weights, _) = checkpoint_paths(stem);
    if !weights.is_file() {
        return Err(Error::io(
            &weights,
            std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint weights missing"),
        ));
    }
    varmap.load(&weights)?;
    Ok(())
}

/// Largest group count from {32, 16, 8, 4, 2, 1} that divides `channels`.
pub fn group_count(channels: usize) -> usize {
    [32, 16, 8, 4, 2, 1]
        .into_iter()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}
