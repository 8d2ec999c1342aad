//! DDPM-style noise-prediction U-Net.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{conv2d, group_norm, linear, Conv2d, Conv2dConfig, GroupNorm, Linear, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use super::NoisePredictor;
use crate::error::{ensure, Error, Result};
use crate::nn::{self, group_count, ParamInit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// Channel multiplier per resolution; its length is the number of
    /// resolutions.
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    /// Spatial sizes at which self-attention is applied.
    pub attention_resolutions: Vec<usize>,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 64,
            channel_mults: vec![1, 2, 2],
            res_blocks: 2,
            attention_resolutions: vec![16],
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.base_channels >= 1, "base_channels must be positive");
        ensure!(!self.channel_mults.is_empty(), "need at least one resolution");
        ensure!(self.res_blocks >= 1, "res_blocks must be >= 1");
        Ok(())
    }

    pub fn size_multiple(&self) -> usize {
        1 << (self.channel_mults.len() - 1)
    }
}

fn conv3(cin: usize, cout: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    conv2d(
        cin,
        cout,
        3,
        Conv2dConfig {
            padding: 1,
            ..Default::default()
        },
        vb,
    )
}

fn conv1(cin: usize, cout: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    conv2d(cin, cout, 1, Default::default(), vb)
}

fn norm(ch: usize, vb: VarBuilder) -> candle_core::Result<GroupNorm> {
    group_norm(group_count(ch), ch, 1e-5, vb)
}

struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(cin: usize, cout: usize, temb_dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            norm1: norm(cin, vb.pp("norm1"))?,
            conv1: conv3(cin, cout, vb.pp("conv1"))?,
            temb: linear(temb_dim, cout, vb.pp("temb"))?,
            norm2: norm(cout, vb.pp("norm2"))?,
            conv2: conv3(cout, cout, vb.pp("conv2"))?,
            skip: if cin != cout {
                Some(conv1(cin, cout, vb.pp("skip"))?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.conv1.forward(&candle_nn::ops::silu(&self.norm1.forward(x)?)?)?;
        let t = self.temb.forward(&candle_nn::ops::silu(temb)?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&candle_nn::ops::silu(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        skip + h
    }
}

struct Attention {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
}

impl Attention {
    fn new(ch: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Self {
            norm: norm(ch, vb.pp("norm"))?,
            qkv: conv1(ch, 3 * ch, vb.pp("qkv"))?,
            proj: conv1(ch, ch, vb.pp("proj"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?.reshape((n, 3, c, h * w))?;
        let q = qkv.get_on_dim(1, 0)?.transpose(1, 2)?.contiguous()?; // n, hw, c
        let k = qkv.get_on_dim(1, 1)?.contiguous()?; // n, c, hw
        let v = qkv.get_on_dim(1, 2)?.transpose(1, 2)?.contiguous()?; // n, hw, c
        let attn = (q.matmul(&k)? / (c as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&attn, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((n, c, h, w))?;
        x + self.proj.forward(&out)?
    }
}

enum Layer {
    Res(ResBlock),
    Attn(Attention),
    Down(Conv2d),
    Up(Conv2d),
}

/// Noise-prediction network `eps_hat(x_t, t)` for single-channel images.
///
/// Residual blocks with group normalization and a sinusoidal timestep
/// embedding, strided-convolution downsampling, nearest-neighbour plus
/// convolution upsampling, and self-attention at the configured resolutions.
pub struct NoiseUNet {
    config: UNetConfig,
    varmap: VarMap,
    device: Device,
    temb1: Linear,
    temb2: Linear,
    conv_in: Conv2d,
    down: Vec<Layer>,
    mid: Vec<Layer>,
    up: Vec<Layer>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
}

fn init_rule(name: &str) -> ParamInit {
    // residual branches and the output start at zero, as in improved DDPM
    if name.ends_with("conv2.weight") || name.starts_with("conv_out") || name.ends_with("proj.weight") {
        ParamInit::Zeros
    } else {
        nn::default_rule(name)
    }
}

impl NoiseUNet {
    pub fn new(config: UNetConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, device);
        let base = config.base_channels;
        let temb_dim = 4 * base;
        let temb1 = linear(base, temb_dim, vb.pp("temb1"))?;
        let temb2 = linear(temb_dim, temb_dim, vb.pp("temb2"))?;
        let conv_in = conv3(1, base, vb.pp("conv_in"))?;

        // Attention blocks exist after every down/up residual block and are
        // switched on at run time by the feature-map size. The bottleneck
        // always attends.
        let levels = config.channel_mults.len();
        let mut down = Vec::new();
        let mut skip_channels = vec![base];
        let mut ch = base;
        let mut idx = 0;
        for (level, mult) in config.channel_mults.iter().enumerate() {
            let cout = base * mult;
            for _ in 0..config.res_blocks {
                down.push(Layer::Res(ResBlock::new(ch, cout, temb_dim, vb.pp(format!("down{idx}")))?));
                idx += 1;
                ch = cout;
                down.push(Layer::Attn(Attention::new(ch, vb.pp(format!("down{idx}")))?));
                idx += 1;
                skip_channels.push(ch);
            }
            if level + 1 < levels {
                let ds = conv2d(
                    ch,
                    ch,
                    3,
                    Conv2dConfig {
                        padding: 1,
                        stride: 2,
                        ..Default::default()
                    },
                    vb.pp(format!("down{idx}")),
                )?;
                down.push(Layer::Down(ds));
                idx += 1;
                skip_channels.push(ch);
            }
        }
        let mid = vec![
            Layer::Res(ResBlock::new(ch, ch, temb_dim, vb.pp("mid0"))?),
            Layer::Attn(Attention::new(ch, vb.pp("mid1"))?),
            Layer::Res(ResBlock::new(ch, ch, temb_dim, vb.pp("mid2"))?),
        ];
        let mut up = Vec::new();
        let mut idx = 0;
        for level in (0..levels).rev() {
            let cout = base * config.channel_mults[level];
            for _ in 0..=config.res_blocks {
                let skip = skip_channels.pop().expect("skip bookkeeping");
                up.push(Layer::Res(ResBlock::new(ch + skip, cout, temb_dim, vb.pp(format!("up{idx}")))?));
                idx += 1;
                ch = cout;
                up.push(Layer::Attn(Attention::new(ch, vb.pp(format!("up{idx}")))?));
                idx += 1;
            }
            if level > 0 {
                up.push(Layer::Up(conv3(ch, ch, vb.pp(format!("up{idx}")))?));
                idx += 1;
            }
        }
        let out_norm = norm(ch, vb.pp("out_norm"))?;
        let conv_out = conv3(ch, 1, vb.pp("conv_out"))?;
        nn::seeded_init(&varmap, seed, init_rule)?;
        Ok(Self {
            config,
            varmap,
            device: device.clone(),
            temb1,
            temb2,
            conv_in,
            down,
            mid,
            up,
            out_norm,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
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

    fn timestep_embedding(&self, t: &[usize]) -> candle_core::Result<Tensor> {
        let dim = self.config.base_channels;
        let half = (dim / 2).max(1);
        let scale = if half > 1 {
            (10000f64).ln() / (half - 1) as f64
        } else {
            0.0
        };
        let mut v = Vec::with_capacity(t.len() * dim);
        for &ti in t {
            let mut row = vec![0f32; dim];
            for i in 0..half {
                let arg = ti as f64 * (-(i as f64) * scale).exp();
                row[i] = arg.sin() as f32;
                if half + i < dim {
                    row[half + i] = arg.cos() as f32;
                }
            }
            v.extend(row);
        }
        Tensor::from_vec(v, (t.len(), dim), &self.device)
    }

    fn attend(&self, x: &Tensor, layer: &Attention) -> candle_core::Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h == w && self.config.attention_resolutions.contains(&h) {
            layer.forward(x)
        } else {
            Ok(x.clone())
        }
    }

    fn run(&self, x: &Tensor, t: &[usize]) -> candle_core::Result<Tensor> {
        let temb = self.timestep_embedding(t)?;
        let temb = self.temb2.forward(&candle_nn::ops::silu(&self.temb1.forward(&temb)?)?)?;
        let mut h = self.conv_in.forward(x)?;
        let mut skips = vec![h.clone()];
        for layer in &self.down {
            match layer {
                Layer::Res(r) => h = r.forward(&h, &temb)?,
                Layer::Attn(a) => {
                    h = self.attend(&h, a)?;
                    skips.push(h.clone());
                }
                Layer::Down(c) => {
                    h = c.forward(&h)?;
                    skips.push(h.clone());
                }
                Layer::Up(_) => unreachable!(),
            }
        }
        for layer in &self.mid {
            match layer {
                Layer::Res(r) => h = r.forward(&h, &temb)?,
                Layer::Attn(a) => h = a.forward(&h)?,
                _ => unreachable!(),
            }
        }
        for layer in &self.up {
            match layer {
                Layer::Res(r) => {
                    let skip = skips.pop().expect("skip bookkeeping");
                    h = r.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb)?;
                }
                Layer::Attn(a) => h = self.attend(&h, a)?,
                Layer::Up(c) => {
                    let (_, _, hh, ww) = h.dims4()?;
                    h = c.forward(&h.upsample_nearest2d(2 * hh, 2 * ww)?)?;
                }
                Layer::Down(_) => unreachable!(),
            }
        }
        self.conv_out
            .forward(&candle_nn::ops::silu(&self.out_norm.forward(&h)?)?)
    }
}

impl NoisePredictor for NoiseUNet {
    fn predict_noise(&self, x_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let (n, c, h, w) = x_t.dims4()?;
        let m = self.config.size_multiple();
        if c != 1 || t.len() != n || h % m != 0 || w % m != 0 {
            return Err(Error::Validation(format!(
                "noise model input {:?} with {} timesteps; need 1 channel, sides divisible by {m}",
                x_t.dims(),
                t.len()
            )));
        }
        Ok(self.run(&x_t.to_dtype(DType::F32)?, t)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetConfig {
        UNetConfig {
            base_channels: 8,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            attention_resolutions: vec![8],
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let a = NoiseUNet::new(tiny(), 3, &Device::Cpu).unwrap();
        let b = NoiseUNet::new(tiny(), 3, &Device::Cpu).unwrap();
        // make the zero-initialized output path live
        for net in [&a, &b] {
            let data = net.varmap().data().lock().unwrap();
            let w = &data["conv_out.weight"];
            w.set(&(w.as_tensor().ones_like().unwrap() * 0.05).unwrap()).unwrap();
        }
        let x = Tensor::randn(0f32, 1.0, (2, 1, 16, 16), &Device::Cpu).unwrap();
        let ya = a.predict_noise(&x, &[3, 700]).unwrap();
        let yb = b.predict_noise(&x, &[3, 700]).unwrap();
        assert_eq!(ya.dims(), &[2, 1, 16, 16]);
        let va = ya.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let vb = yb.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(va, vb);
        assert!(va.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn rejects_bad_input() {
        let a = NoiseUNet::new(tiny(), 3, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 1, 15, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(a.predict_noise(&x, &[1]).is_err());
        let x = Tensor::zeros((2, 1, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(a.predict_noise(&x, &[1]).is_err());
    }
}
