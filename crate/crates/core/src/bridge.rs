//! Latent Brownian bridge: interpolant, drift target, terminal prediction,
//! latent loss and the few-step sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::Latent;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeConfig {
    pub sigma: f64,
    pub timesteps: Vec<f64>,
    pub stochastic_sampling: bool,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            sigma: 0.008,
            timesteps: vec![0.0, 0.25, 0.5, 0.75],
            stochastic_sampling: false,
        }
    }
}

impl BridgeConfig {
    /// Evenly spaced schedule `{0, 1/k, ..., (k-1)/k}`.
    pub fn uniform_schedule(k: usize) -> Vec<f64> {
        (0..k).map(|i| i as f64 / k as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if self.timesteps.is_empty() {
            return Err(Error::Config("timestep list is empty".into()));
        }
        if let Some(t) = self.timesteps.iter().find(|t| !(0.0..1.0).contains(*t)) {
            return Err(Error::Config(format!("timestep {} outside [0, 1)", t)));
        }
        if self.timesteps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("timesteps must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// One training draw on the bridge.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeSample {
    pub z_t: Latent,
    pub t: f64,
    pub target_drift: Tensor,
    pub noise: Tensor,
}

/// `(1-t) z0 + t z1 + sigma sqrt(t(1-t)) eps`.
pub fn interpolate(z0: &Latent, z1: &Latent, t: f64, sigma: f64, eps: &Tensor) -> Result<Latent> {
    z0.data.check_same_shape(&z1.data)?;
    z0.data.check_same_shape(eps)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t = {} outside [0, 1]", t)));
    }
    let noise_scale = sigma * (t * (1.0 - t)).sqrt();
    let data: Vec<f64> = z0
        .data
        .data()
        .iter()
        .zip(z1.data.data())
        .zip(eps.data())
        .map(|((&a, &b), &e)| (1.0 - t) * a + t * b + noise_scale * e)
        .collect();
    Ok(Latent {
        data: Tensor::from_vec(z0.data.shape(), data)?,
        codec: z0.codec,
    })
}

/// `(z1 - z_t) / (1 - t)`.
pub fn target_drift(z1: &Latent, z_t: &Latent, t: f64) -> Result<Tensor> {
    if !(t < 1.0) {
        return Err(Error::Domain(format!("drift target undefined at t = {}", t)));
    }
    let inv = 1.0 / (1.0 - t);
    z1.data.zip_with(&z_t.data, |a, b| (a - b) * inv)
}

pub fn draw_sample(
    z0: &Latent,
    z1: &Latent,
    cfg: &BridgeConfig,
    rng: &mut impl Rng,
) -> Result<BridgeSample> {
    cfg.validate()?;
    z0.data.check_same_shape(&z1.data)?;
    let t = cfg.timesteps[rng.random_range(0..cfg.timesteps.len())];
    let noise = Tensor::from_vec(z0.data.shape(), rng::normals(rng, z0.data.len()))?;
    let z_t = interpolate(z0, z1, t, cfg.sigma, &noise)?;
    let target_drift = target_drift(z1, &z_t, t)?;
    Ok(BridgeSample {
        z_t,
        t,
        target_drift,
        noise,
    })
}

/// `(1-t) v + z_t`.
pub fn predict_terminal(v: &Tensor, z_t: &Latent, t: f64) -> Result<Latent> {
    if !(t < 1.0) {
        return Err(Error::Domain(format!("terminal prediction undefined at t = {}", t)));
    }
    Ok(Latent {
        data: v.zip_with(&z_t.data, |a, b| (1.0 - t) * a + b)?,
        codec: z_t.codec,
    })
}

/// Mean squared error over all elements.
pub fn latent_loss(v_pred: &Tensor, target: &Tensor) -> Result<f64> {
    v_pred.check_same_shape(target)?;
    let n = v_pred.len().max(1) as f64;
    Ok(v_pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Few-step transport from `z0`.
///
/// At each scheduled time the drift is turned into a terminal estimate; between
/// steps the state is moved along the bridge toward that estimate. The estimate
/// from the last step is returned. `drift_fn` is called exactly once per
/// timestep and never at `t = 1`.
pub fn sample<F>(z0: &Latent, mut drift_fn: F, cfg: &BridgeConfig, rng: &mut impl Rng) -> Result<Latent>
where
    F: FnMut(&Latent, f64) -> Result<Tensor>,
{
    cfg.validate()?;
    let steps = &cfg.timesteps;
    let noise_sigma = if cfg.stochastic_sampling { cfg.sigma } else { 0.0 };
    let mut z = z0.clone();
    let mut terminal = z0.clone();
    for (k, &t) in steps.iter().enumerate() {
        let v = drift_fn(&z, t)?;
        terminal = predict_terminal(&v, &z, t)?;
        if let Some(&next) = steps.get(k + 1) {
            let s = (next - t) / (1.0 - t);
            let eps = if cfg.stochastic_sampling {
                Tensor::from_vec(z.data.shape(), rng::normals(rng, z.data.len()))?
            } else {
                Tensor::zeros(z.data.shape())
            };
            z = interpolate(&z, &terminal, s, noise_sigma, &eps)?;
        }
    }
    Ok(terminal)
}
