//! Flat `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are errors. Every
//! key and its default is listed in [`KEYS`].

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};
use tulabm_core::codec::PretrainConfig;
use tulabm_core::{
    Ablation, BoundaryConfig, BridgeConfig, CodecConfig, DenoiserConfig, Error, PhantomSpec, TrainConfig,
};

use crate::error::{CliError, Result};
use crate::io;

/// Size of the train/held-out split used by `ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblateConfig {
    pub train_count: usize,
    pub eval_count: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            train_count: 256,
            eval_count: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub phantom: PhantomSpec,
    pub codec: CodecConfig,
    pub pretrain: PretrainConfig,
    pub model: DenoiserConfig,
    pub bridge: BridgeConfig,
    pub train: TrainConfig,
    pub ablate: AblateConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            codec: CodecConfig::default(),
            pretrain: PretrainConfig::default(),
            model: DenoiserConfig::default(),
            bridge: BridgeConfig::default(),
            train: TrainConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Recognized keys with a short description, in serialization order.
pub const KEYS: &[(&str, &str)] = &[
    ("phantom.side", "phantom side length in pixels, power of two"),
    ("phantom.tumor_count_min", "fewest tumors per phantom"),
    ("phantom.tumor_count_max", "most tumors per phantom"),
    ("phantom.radius_min", "smallest tumor semi-axis (pixels)"),
    ("phantom.radius_max", "largest tumor semi-axis (pixels)"),
    ("phantom.enhancement_gain", "tumor enhancement in the contrast image"),
    ("phantom.texture_scale", "amplitude of the background texture"),
    ("phantom.nc_contrast", "tumor darkening in the non-contrast image"),
    ("codec.mode", "identity | pooled | learned"),
    ("codec.factor", "spatial downscale factor"),
    ("codec.latent_channels", "latent channels (learned codec)"),
    ("codec.hidden_channels", "hidden width (learned codec)"),
    ("pretrain.steps", "codec pre-training steps"),
    ("pretrain.batch_size", "codec pre-training batch size"),
    ("pretrain.lr", "codec pre-training learning rate"),
    ("model.base_channels", "denoiser width"),
    ("model.depth", "denoiser down/up levels"),
    ("model.time_embed_dim", "sinusoidal time feature size (even)"),
    ("model.attention", "bottleneck attention on/off"),
    ("model.alpha_tumor", "tumor attention bias strength"),
    ("model.head_dim", "attention head width"),
    ("model.heads", "attention heads"),
    ("bridge.sigma", "bridge noise scale"),
    ("bridge.timesteps", "comma-separated training/sampling times in [0,1)"),
    ("bridge.stochastic", "inject bridge noise between sampler steps"),
    ("train.lambda_pixel", "pixel loss weight"),
    ("train.lambda_boundary", "boundary loss weight"),
    ("train.lr", "AdamW learning rate"),
    ("train.beta1", "AdamW first-moment decay"),
    ("train.beta2", "AdamW second-moment decay"),
    ("train.weight_decay", "AdamW decoupled weight decay"),
    ("train.eps", "AdamW epsilon"),
    ("train.batch_size", "pairs per step"),
    ("train.steps", "optimizer steps"),
    ("train.ablation", "full | no_bl | no_bl_no_tubam"),
    ("train.checkpoint_every", "steps between checkpoints (0 = final only)"),
    ("boundary.d_max", "distance clip radius (pixels)"),
    ("boundary.tau", "boundary weight temperature"),
    ("boundary.norm", "l1 | l2"),
    ("ablate.train_count", "pairs used for training in ablate"),
    ("ablate.eval_count", "held-out pairs evaluated in ablate"),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::Core(Error::Config(format!("{} = {}: {}", key, value, e))))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(CliError::Core(Error::Config(format!("{} = {}: expected true or false", key, value)))),
    }
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = io::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| CliError::format(path, "config is not UTF-8"))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Core(Error::Config(format!("line {}: expected key = value", n + 1))))?;
            s.set(k.trim(), v.trim())?;
        }
        s.finalize()?;
        Ok(s)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let p = &mut self.phantom;
        match key {
            "phantom.side" => p.side = parse(key, v)?,
            "phantom.tumor_count_min" => p.tumor_count_range.0 = parse(key, v)?,
            "phantom.tumor_count_max" => p.tumor_count_range.1 = parse(key, v)?,
            "phantom.radius_min" => p.tumor_radius_range.0 = parse(key, v)?,
            "phantom.radius_max" => p.tumor_radius_range.1 = parse(key, v)?,
            "phantom.enhancement_gain" => p.enhancement_gain = parse(key, v)?,
            "phantom.texture_scale" => p.background_texture_scale = parse(key, v)?,
            "phantom.nc_contrast" => p.tumor_nc_contrast = parse(key, v)?,
            "codec.mode" => self.codec.mode = parse(key, v)?,
            "codec.factor" => self.codec.downscale_factor = parse(key, v)?,
            "codec.latent_channels" => self.codec.latent_channels = parse(key, v)?,
            "codec.hidden_channels" => self.codec.hidden_channels = parse(key, v)?,
            "pretrain.steps" => self.pretrain.steps = parse(key, v)?,
            "pretrain.batch_size" => self.pretrain.batch_size = parse(key, v)?,
            "pretrain.lr" => self.pretrain.optimizer.lr = parse(key, v)?,
            "model.base_channels" => self.model.base_channels = parse(key, v)?,
            "model.depth" => self.model.depth = parse(key, v)?,
            "model.time_embed_dim" => self.model.time_embed_dim = parse(key, v)?,
            "model.attention" => self.model.attention_at_bottleneck = parse_bool(key, v)?,
            "model.alpha_tumor" => self.model.attention.alpha_tumor = parse(key, v)?,
            "model.head_dim" => self.model.attention.head_dim = parse(key, v)?,
            "model.heads" => self.model.attention.heads = parse(key, v)?,
            "bridge.sigma" => self.bridge.sigma = parse(key, v)?,
            "bridge.timesteps" => {
                self.bridge.timesteps = v
                    .split(',')
                    .map(|t| parse(key, t.trim()))
                    .collect::<Result<Vec<f64>>>()?
            }
            "bridge.stochastic" => self.bridge.stochastic_sampling = parse_bool(key, v)?,
            "train.lambda_pixel" => self.train.lambda_pixel = parse(key, v)?,
            "train.lambda_boundary" => self.train.lambda_boundary = parse(key, v)?,
            "train.lr" => self.train.optimizer.lr = parse(key, v)?,
            "train.beta1" => self.train.optimizer.beta1 = parse(key, v)?,
            "train.beta2" => self.train.optimizer.beta2 = parse(key, v)?,
            "train.weight_decay" => self.train.optimizer.weight_decay = parse(key, v)?,
            "train.eps" => self.train.optimizer.eps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.steps" => self.train.steps = parse(key, v)?,
            "train.ablation" => self.train.ablation = parse(key, v)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse(key, v)?,
            "boundary.d_max" => self.train.boundary.d_max = parse(key, v)?,
            "boundary.tau" => self.train.boundary.tau = parse(key, v)?,
            "boundary.norm" => self.train.boundary.norm = parse(key, v)?,
            "ablate.train_count" => self.ablate.train_count = parse(key, v)?,
            "ablate.eval_count" => self.ablate.eval_count = parse(key, v)?,
            _ => return Err(CliError::Core(Error::Config(format!("unknown config key '{}'", key)))),
        }
        Ok(())
    }

    /// Derives dependent fields and validates every section.
    pub fn finalize(&mut self) -> Result<()> {
        self.model.in_channels = self.codec.latent_channels;
        self.phantom.validate()?;
        self.codec.validate()?;
        self.model.validate()?;
        self.bridge.validate()?;
        self.train.validate()?;
        self.pretrain.optimizer.validate()?;
        Ok(())
    }

    /// Sets every seed-bearing field.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.phantom.seed = seed;
        self.train.seed = seed;
        self.pretrain.seed = seed;
        self
    }

    fn value(&self, key: &str) -> String {
        let p = &self.phantom;
        let o = &self.train.optimizer;
        let b = &self.train.boundary;
        match key {
            "phantom.side" => p.side.to_string(),
            "phantom.tumor_count_min" => p.tumor_count_range.0.to_string(),
            "phantom.tumor_count_max" => p.tumor_count_range.1.to_string(),
            "phantom.radius_min" => p.tumor_radius_range.0.to_string(),
            "phantom.radius_max" => p.tumor_radius_range.1.to_string(),
            "phantom.enhancement_gain" => p.enhancement_gain.to_string(),
            "phantom.texture_scale" => p.background_texture_scale.to_string(),
            "phantom.nc_contrast" => p.tumor_nc_contrast.to_string(),
            "codec.mode" => self.codec.mode.to_string(),
            "codec.factor" => self.codec.downscale_factor.to_string(),
            "codec.latent_channels" => self.codec.latent_channels.to_string(),
            "codec.hidden_channels" => self.codec.hidden_channels.to_string(),
            "pretrain.steps" => self.pretrain.steps.to_string(),
            "pretrain.batch_size" => self.pretrain.batch_size.to_string(),
            "pretrain.lr" => self.pretrain.optimizer.lr.to_string(),
            "model.base_channels" => self.model.base_channels.to_string(),
            "model.depth" => self.model.depth.to_string(),
            "model.time_embed_dim" => self.model.time_embed_dim.to_string(),
            "model.attention" => self.model.attention_at_bottleneck.to_string(),
            "model.alpha_tumor" => self.model.attention.alpha_tumor.to_string(),
            "model.head_dim" => self.model.attention.head_dim.to_string(),
            "model.heads" => self.model.attention.heads.to_string(),
            "bridge.sigma" => self.bridge.sigma.to_string(),
            "bridge.timesteps" => self
                .bridge
                .timesteps
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "bridge.stochastic" => self.bridge.stochastic_sampling.to_string(),
            "train.lambda_pixel" => self.train.lambda_pixel.to_string(),
            "train.lambda_boundary" => self.train.lambda_boundary.to_string(),
            "train.lr" => o.lr.to_string(),
            "train.beta1" => o.beta1.to_string(),
            "train.beta2" => o.beta2.to_string(),
            "train.weight_decay" => o.weight_decay.to_string(),
            "train.eps" => o.eps.to_string(),
            "train.batch_size" => self.train.batch_size.to_string(),
            "train.steps" => self.train.steps.to_string(),
            "train.ablation" => self.train.ablation.to_string(),
            "train.checkpoint_every" => self.train.checkpoint_every.to_string(),
            "boundary.d_max" => b.d_max.to_string(),
            "boundary.tau" => b.tau.to_string(),
            "boundary.norm" => b.norm.to_string(),
            "ablate.train_count" => self.ablate.train_count.to_string(),
            "ablate.eval_count" => self.ablate.eval_count.to_string(),
            _ => unreachable!("every key in KEYS has a value"),
        }
    }

    /// Canonical text; `parse(to_text())` reproduces the settings.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|(k, _)| format!("{} = {}\n", k, self.value(k))).collect()
    }

    /// Hash of the keys that fix parameter shapes and their meaning:
    /// codec, network and bridge settings. Training-only keys (steps,
    /// learning rate, ablation) and the sampler noise switch are excluded so a
    /// checkpoint stays loadable by `infer` and resumable with more steps.
    pub fn model_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, _) in KEYS {
            let model_key = k.starts_with("codec.") || k.starts_with("model.") || k.starts_with("bridge.");
            if model_key && *k != "bridge.stochastic" {
                h.update(format!("{}={}\n", k, self.value(k)).as_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn ablation_variant(&self, ablation: Ablation) -> Self {
        let mut s = self.clone();
        s.train.ablation = ablation;
        s
    }

    pub fn boundary(&self) -> &BoundaryConfig {
        &self.train.boundary
    }
}

/// `--help` text for the config file format.
pub fn keys_help() -> String {
    let d = Settings::default();
    let mut out = String::from("Config file keys (key = value; # starts a comment):\n");
    for (k, desc) in KEYS {
        out.push_str(&format!("  {:<26} {} [default {}]\n", k, desc, d.value(k)));
    }
    out
}
