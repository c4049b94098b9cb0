//! Image ↔ latent codecs.
//!
//! Three interchangeable codecs stand in for a pre-trained autoencoder:
//! `identity` (latent = image), `pooled` (block mean down, nearest-neighbour up)
//! and `learned` (two 3×3 convolutions per side, trained on reconstruction).

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{size_err, Error, Result};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{GradTable, ParamTable};
use crate::rng::{self, Domain};
use crate::tensor::{Image, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CodecKind {
    Identity,
    Pooled,
    Learned,
}

impl fmt::Display for CodecKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CodecKind::Identity => "identity",
            CodecKind::Pooled => "pooled",
            CodecKind::Learned => "learned",
        })
    }
}

impl FromStr for CodecKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(CodecKind::Identity),
            "pooled" => Ok(CodecKind::Pooled),
            "learned" => Ok(CodecKind::Learned),
            other => Err(Error::Config(format!("unknown codec '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub mode: CodecKind,
    pub downscale_factor: usize,
    pub latent_channels: usize,
    /// Width of the hidden layer of the learned codec.
    pub hidden_channels: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            mode: CodecKind::Pooled,
            downscale_factor: 4,
            latent_channels: 1,
            hidden_channels: 16,
        }
    }
}

impl CodecConfig {
    pub fn identity() -> Self {
        Self {
            mode: CodecKind::Identity,
            downscale_factor: 1,
            latent_channels: 1,
            ..Default::default()
        }
    }

    pub fn pooled(factor: usize) -> Self {
        Self {
            mode: CodecKind::Pooled,
            downscale_factor: factor,
            latent_channels: 1,
            ..Default::default()
        }
    }

    pub fn learned(factor: usize, latent_channels: usize) -> Self {
        Self {
            mode: CodecKind::Learned,
            downscale_factor: factor,
            latent_channels,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.downscale_factor == 0 || self.latent_channels == 0 {
            return Err(Error::Config("codec factor and channels must be >= 1".into()));
        }
        match self.mode {
            CodecKind::Identity if self.downscale_factor != 1 || self.latent_channels != 1 => Err(
                Error::Config("identity codec requires factor 1 and 1 latent channel".into()),
            ),
            CodecKind::Pooled if self.latent_channels != 1 => {
                Err(Error::Config("pooled codec produces exactly 1 latent channel".into()))
            }
            CodecKind::Learned if self.hidden_channels == 0 => {
                Err(Error::Config("learned codec needs hidden channels >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn latent_dims(&self, image_dims: (usize, usize)) -> Result<(usize, usize)> {
        let f = self.downscale_factor;
        let (h, w) = image_dims;
        if h % f != 0 || w % f != 0 {
            return Err(size_err(format!("image {}x{} not divisible by factor {}", h, w, f)));
        }
        Ok((h / f, w / f))
    }
}

/// A latent field `[C, H_l, W_l]` and the codec that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub data: Tensor,
    pub codec: CodecKind,
}

impl Latent {
    pub fn new(data: Tensor, codec: CodecKind) -> Self {
        Self { data, codec }
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn spatial(&self) -> (usize, usize) {
        let s = self.data.shape();
        (s[s.len() - 2], s[s.len() - 1])
    }
}

/// Settings for [`Codec::pretrain`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            seed: 0,
            optimizer: AdamWConfig {
                lr: 3e-3,
                weight_decay: 0.0,
                ..Default::default()
            },
        }
    }
}

const LEARNED_PARAMS: [&str; 8] = [
    "codec.enc1.w",
    "codec.enc1.b",
    "codec.enc2.w",
    "codec.enc2.b",
    "codec.dec1.w",
    "codec.dec1.b",
    "codec.dec2.w",
    "codec.dec2.b",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Codec {
    config: CodecConfig,
    params: ParamTable,
}

fn fan_in_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_vec(shape, rng::normals(rng, n).into_iter().map(|z| z * std).collect())
        .expect("shape product")
}

impl Codec {
    /// Builds a codec; the learned variant is initialized from `seed`.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamTable::new();
        if config.mode == CodecKind::Learned {
            let (hc, lc) = (config.hidden_channels, config.latent_channels);
            let mut r = rng::keyed(seed, Domain::Codec, 0, 0);
            params.insert("codec.enc1.w", fan_in_normal(&mut r, &[hc, 1, 3, 3], 9))?;
            params.insert("codec.enc1.b", Tensor::zeros(&[hc]))?;
            params.insert("codec.enc2.w", fan_in_normal(&mut r, &[lc, hc, 3, 3], hc * 9))?;
            params.insert("codec.enc2.b", Tensor::zeros(&[lc]))?;
            params.insert("codec.dec1.w", fan_in_normal(&mut r, &[hc, lc, 3, 3], lc * 9))?;
            params.insert("codec.dec1.b", Tensor::zeros(&[hc]))?;
            params.insert("codec.dec2.w", fan_in_normal(&mut r, &[1, hc, 3, 3], hc * 9))?;
            params.insert("codec.dec2.b", Tensor::zeros(&[1]))?;
        }
        Ok(Self { config, params })
    }

    /// Restores a learned codec from a parameter table (extra entries ignored).
    pub fn from_params(config: CodecConfig, table: &ParamTable) -> Result<Self> {
        let mut codec = Self::new(config, 0)?;
        if config.mode == CodecKind::Learned {
            for name in LEARNED_PARAMS {
                let src = table.require(name)?;
                let dst = codec.params.get_mut(name).expect("initialized");
                if src.shape() != dst.shape() {
                    return Err(size_err(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        name,
                        src.shape(),
                        dst.shape()
                    )));
                }
                *dst = src.clone();
            }
        }
        Ok(codec)
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn kind(&self) -> CodecKind {
        self.config.mode
    }

    pub fn params(&self) -> &ParamTable {
        &self.params
    }

    pub fn latent_dims(&self, image_dims: (usize, usize)) -> Result<(usize, usize)> {
        self.config.latent_dims(image_dims)
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        LEARNED_PARAMS
            .iter()
            .map(|n| {
                let t = self.params.get(n).expect("learned params").clone();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect()
    }

    fn encode_with(&self, g: &mut Graph, x: Var, p: &[Var]) -> Result<Var> {
        match self.config.mode {
            CodecKind::Identity => Ok(x),
            CodecKind::Pooled => g.avg_pool(x, self.config.downscale_factor),
            CodecKind::Learned => {
                let h = g.conv2d(x, p[0], p[1])?;
                let h = g.silu(h);
                let h = g.avg_pool(h, self.config.downscale_factor)?;
                g.conv2d(h, p[2], p[3])
            }
        }
    }

    fn decode_with(&self, g: &mut Graph, z: Var, p: &[Var]) -> Result<Var> {
        match self.config.mode {
            CodecKind::Identity => Ok(z),
            CodecKind::Pooled => g.upsample(z, self.config.downscale_factor),
            CodecKind::Learned => {
                let h = g.conv2d(z, p[4], p[5])?;
                let h = g.silu(h);
                let h = g.upsample(h, self.config.downscale_factor)?;
                g.conv2d(h, p[6], p[7])
            }
        }
    }

    /// Differentiable decode of a `[B, C, H_l, W_l]` node with frozen codec
    /// parameters; gradients flow to `z` only.
    pub fn decode_graph(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let p = if self.config.mode == CodecKind::Learned {
            self.bind(g, false)
        } else {
            Vec::new()
        };
        self.decode_with(g, z, &p)
    }

    pub fn encode(&self, img: &Image) -> Result<Latent> {
        let (h, w) = img.dims();
        self.latent_dims((h, w))?;
        if self.config.mode == CodecKind::Identity {
            return Ok(Latent::new(img.to_tensor(), CodecKind::Identity));
        }
        let mut g = Graph::new();
        let x = g.constant(img.to_tensor().reshape(&[1, 1, h, w])?);
        let p = if self.config.mode == CodecKind::Learned {
            self.bind(&mut g, false)
        } else {
            Vec::new()
        };
        let z = self.encode_with(&mut g, x, &p)?;
        let t = g.value(z).clone();
        let s = t.shape().to_vec();
        Ok(Latent::new(t.reshape(&s[1..])?, self.config.mode))
    }

    pub fn decode(&self, z: &Latent) -> Result<Image> {
        let (c, lh, lw) = match z.data.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(size_err(format!("latent must be [C, H, W], got {:?}", s))),
        };
        if c != self.config.latent_channels {
            return Err(size_err(format!(
                "latent has {} channels, codec expects {}",
                c, self.config.latent_channels
            )));
        }
        if self.config.mode == CodecKind::Identity {
            return Image::from_tensor(&z.data);
        }
        let mut g = Graph::new();
        let zv = g.constant(z.data.clone().reshape(&[1, c, lh, lw])?);
        let x = self.decode_graph(&mut g, zv)?;
        Image::from_tensor(&g.value(x).clone().reshape(&[
            lh * self.config.downscale_factor,
            lw * self.config.downscale_factor,
        ])?)
    }

    /// Fits the learned codec to `dataset` by minimizing mean squared
    /// reconstruction error. Returns the loss recorded before each step.
    pub fn pretrain(&mut self, dataset: &[Image], cfg: &PretrainConfig) -> Result<Vec<f64>> {
        if self.config.mode != CodecKind::Learned {
            return Err(Error::Usage(format!(
                "pretraining requires the learned codec, not '{}'",
                self.config.mode
            )));
        }
        if cfg.steps > 0 && dataset.is_empty() {
            return Err(Error::Usage("pretraining needs at least one image".into()));
        }
        cfg.optimizer.validate()?;
        let mut opt = AdamW::new();
        let mut curve = Vec::with_capacity(cfg.steps as usize);
        for step in 0..cfg.steps {
            let mut r = rng::keyed(cfg.seed, Domain::Codec, 1, step);
            let bs = cfg.batch_size.max(1);
            let picks: Vec<&Image> = (0..bs)
                .map(|_| &dataset[r.random_range(0..dataset.len())])
                .collect();
            let (h, w) = picks[0].dims();
            let mut data = Vec::with_capacity(bs * h * w);
            for img in &picks {
                if img.dims() != (h, w) {
                    return Err(size_err("pretraining images must share dims"));
                }
                data.extend_from_slice(img.data());
            }
            let batch = Tensor::from_vec(&[bs, 1, h, w], data)?;
            let mut g = Graph::new();
            let x = g.constant(batch.clone());
            let p = self.bind(&mut g, true);
            let z = self.encode_with(&mut g, x, &p)?;
            let y = self.decode_with(&mut g, z, &p)?;
            let loss = g.mse(y, batch)?;
            curve.push(g.value(loss).item());
            let mut grads = g.backward(loss);
            let table: GradTable = LEARNED_PARAMS
                .iter()
                .zip(&p)
                .filter_map(|(n, v)| grads.take(*v).map(|t| (n.to_string(), t)))
                .collect();
            opt.update(&cfg.optimizer, &mut self.params, &table)?;
        }
        Ok(curve)
    }

    /// Mean squared reconstruction error over a set of images.
    pub fn reconstruction_mse(&self, images: &[Image]) -> Result<f64> {
        let mut total = 0.0;
        for img in images {
            let back = self.decode(&self.encode(img)?)?;
            total += back
                .data()
                .iter()
                .zip(img.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / img.data().len() as f64;
        }
        Ok(total / images.len().max(1) as f64)
    }
}
