//! U-shaped velocity network with coarse-to-fine velocity heads.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{conv2d, Conv2d, Conv2dConfig, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use super::field::VelocityField;
use super::ops;
use crate::error::{ensure, Error, Result};
use crate::nn::{self, ParamInit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeformNetConfig {
    /// Number of scales; level `l` runs at `1 / 2^l` resolution.
    pub levels: usize,
    pub base_channels: usize,
    /// 1 for the image alone, 2 when the score-difference map is stacked on.
    pub input_channels: usize,
    pub integration_steps: u32,
    pub leaky_slope: f64,
}

impl Default for DeformNetConfig {
    fn default() -> Self {
        Self {
            levels: 4,
            base_channels: 16,
            input_channels: 2,
            integration_steps: 7,
            leaky_slope: 0.2,
        }
    }
}

impl DeformNetConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.levels >= 1, "levels must be >= 1");
        ensure!(self.base_channels >= 1, "base_channels must be >= 1");
        ensure!(
            (1..=2).contains(&self.input_channels),
            "input_channels must be 1 or 2"
        );
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

struct DoubleConv {
    a: Conv2d,
    b: Conv2d,
}

impl DoubleConv {
    fn new(cin: usize, cout: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            a: conv2d(cin, cout, 3, cfg, vb.pp("conv_a"))?,
            b: conv2d(cout, cout, 3, cfg, vb.pp("conv_b"))?,
        })
    }

    fn forward(&self, x: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
        let x = candle_nn::ops::leaky_relu(&self.a.forward(x)?, slope)?;
        candle_nn::ops::leaky_relu(&self.b.forward(&x)?, slope)
    }
}

/// Velocity-prediction network.
///
/// Encoder levels use two 3x3 convolutions with channels `base * 2^l` and 2x2
/// max pooling between levels. Every decoder level, and the bottleneck, ends
/// in a 2-channel velocity head; heads are summed from coarse to fine with a
/// bilinear ×2 upsampling between levels. All heads start at zero, so an
/// untrained network predicts the identity deformation.
pub struct DeformNet {
    config: DeformNetConfig,
    varmap: VarMap,
    device: Device,
    encoders: Vec<DoubleConv>,
    decoders: Vec<DoubleConv>,
    heads: Vec<Conv2d>,
}

fn init_rule(name: &str) -> ParamInit {
    if name.starts_with("head") {
        ParamInit::Zeros
    } else {
        nn::default_rule(name)
    }
}

impl DeformNet {
    pub fn new(config: DeformNetConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, device);
        let mut encoders = Vec::new();
        for l in 0..config.levels {
            let cin = if l == 0 {
                config.input_channels
            } else {
                config.channels(l - 1)
            };
            encoders.push(DoubleConv::new(cin, config.channels(l), vb.pp(format!("enc{l}")))?);
        }
        // decoders[l] for l in 0..levels-1 merges level l+1 features with the skip
        let mut decoders = Vec::new();
        for l in 0..config.levels - 1 {
            decoders.push(DoubleConv::new(
                config.channels(l + 1) + config.channels(l),
                config.channels(l),
                vb.pp(format!("dec{l}")),
            )?);
        }
        let head_cfg = Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        let mut heads = Vec::new();
        for l in 0..config.levels {
            heads.push(conv2d(config.channels(l), 2, 3, head_cfg, vb.pp(format!("head{l}")))?);
        }
        nn::seeded_init(&varmap, seed, init_rule)?;
        Ok(Self {
            config,
            varmap,
            device: device.clone(),
            encoders,
            decoders,
            heads,
        })
    }

    pub fn config(&self) -> &DeformNetConfig {
        &self.config
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    pub fn varmap_mut(&mut self) -> &mut VarMap {
        &mut self.varmap
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.config.levels - 1)
    }

    /// `N x input_channels x H x W` -> `N x 2 x H x W` velocity.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        let m = self.size_multiple();
        if c != self.config.input_channels || h % m != 0 || w % m != 0 {
            return Err(Error::Validation(format!(
                "deformation input {:?} needs {} channels and sides divisible by {m}",
                x.dims(),
                self.config.input_channels
            )));
        }
        let slope = self.config.leaky_slope;
        let mut skips = Vec::with_capacity(self.config.levels);
        let mut feat = x.clone();
        for (l, enc) in self.encoders.iter().enumerate() {
            if l > 0 {
                feat = feat.max_pool2d(2)?;
            }
            feat = enc.forward(&feat, slope)?;
            skips.push(feat.clone());
        }
        let top = self.config.levels - 1;
        let mut velocity = self.heads[top].forward(&feat)?;
        for l in (0..top).rev() {
            let (_, _, sh, sw) = skips[l].dims4()?;
            let up = feat.upsample_nearest2d(sh, sw)?;
            feat = self.decoders[l].forward(&Tensor::cat(&[&up, &skips[l]], 1)?, slope)?;
            velocity = (ops::upsample_bilinear2x(&velocity)? + self.heads[l].forward(&feat)?)?;
        }
        Ok(velocity)
    }

    /// Velocity and its integrated deformation, both `N x 2 x H x W`.
    pub fn forward_deformation(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let v = self.forward(x)?;
        let phi = ops::integrate(&v, self.config.integration_steps)?;
        Ok((v, phi))
    }
}

/// Runs the network on a single stacked input (`C x H x W` channels given as
/// a list of planes) and returns the velocity field.
pub fn predict_velocity(model: &DeformNet, channels: &[&ndarray::Array2<f64>]) -> Result<VelocityField> {
    ensure!(
        channels.iter().all(|c| c.iter().all(|v| v.is_finite())),
        "network inputs must be finite"
    );
    let planes = nn::images_to_tensor(channels, model.device())?; // C x 1 x H x W
    let (c, _, h, w) = planes.dims4()?;
    let x = planes.reshape((1, c, h, w))?;
    let v = model.forward(&x)?;
    VelocityField::new(nn::tensor_field(&v, 0)?)
}
