//! Optimization of the combined objective
//! `latent + λ_pixel · pixel + λ_boundary · boundary`, ablation variants,
//! and evaluation through the few-step sampler.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::boundary::{boundary_weights, BoundaryConfig, LossNorm};
use crate::bridge::{self, BridgeConfig, BridgeSample};
use crate::codec::{Codec, Latent};
use crate::denoiser::{self, BoundParams, DenoiserConfig, DenoiserParams};
use crate::error::{size_err, Error, Result};
use crate::metrics::{image_metrics, MetricsReport};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::GradTable;
use crate::phantoms::PhantomPair;
use crate::preprocess::mask_to_latent;
use crate::rng::{self, Domain};
use crate::tensor::{Image, Tensor};
use crate::tubam::LatentMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// All three loss terms and tumor-biased attention.
    Full,
    /// Boundary loss removed.
    NoBl,
    /// Boundary loss removed and masks withheld from attention.
    NoBlNoTubam,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoBl, Ablation::NoBlNoTubam];

    pub fn uses_boundary_loss(self) -> bool {
        self == Ablation::Full
    }

    pub fn uses_masks(self) -> bool {
        self != Ablation::NoBlNoTubam
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoBl => "no_bl",
            Ablation::NoBlNoTubam => "no_bl_no_tubam",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_bl" => Ok(Ablation::NoBl),
            "no_bl_no_tubam" => Ok(Ablation::NoBlNoTubam),
            other => Err(Error::Config(format!("unknown ablation '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_pixel: f64,
    pub lambda_boundary: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub ablation: Ablation,
    pub optimizer: AdamWConfig,
    pub boundary: BoundaryConfig,
    /// Write a checkpoint every this many steps (0 disables periodic ones).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_pixel: 18.0,
            lambda_boundary: 14.0,
            batch_size: 8,
            steps: 2000,
            seed: 0,
            ablation: Ablation::Full,
            optimizer: AdamWConfig::default(),
            boundary: BoundaryConfig::default(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_pixel >= 0.0 && self.lambda_boundary >= 0.0) {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.boundary.validate()
    }
}

/// Losses of one optimization step. `total = latent + λp·pixel + λb·boundary`
/// with the configured weights; `boundary` is zero when the variant omits it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub latent_loss: f64,
    pub pixel_loss: f64,
    pub boundary_loss: f64,
    pub total_loss: f64,
    /// Wall-clock seconds; excluded from determinism comparisons.
    pub wall_time_s: f64,
}

impl StepReport {
    /// Equality of every deterministic field, bit for bit.
    pub fn same_losses(&self, other: &StepReport) -> bool {
        self.step == other.step
            && self.latent_loss.to_bits() == other.latent_loss.to_bits()
            && self.pixel_loss.to_bits() == other.pixel_loss.to_bits()
            && self.boundary_loss.to_bits() == other.boundary_loss.to_bits()
            && self.total_loss.to_bits() == other.total_loss.to_bits()
    }
}

/// Pair with everything the objective needs precomputed: the codec is frozen,
/// so latents and weights never change during training.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedPair {
    pub z0: Latent,
    pub z1: Latent,
    pub target: Tensor,
    pub weights: Tensor,
    pub latent_mask: LatentMask,
}

pub fn prepare(pairs: &[PhantomPair], codec: &Codec, boundary: &BoundaryConfig) -> Result<Vec<PreparedPair>> {
    pairs
        .iter()
        .map(|p| {
            let z0 = codec.encode(&p.nc)?;
            let z1 = codec.encode(&p.ce)?;
            let latent_mask = mask_to_latent(&p.mask, z0.spatial())?;
            let weights = boundary_weights(&p.mask, boundary)?.weights.to_tensor();
            Ok(PreparedPair {
                z0,
                z1,
                target: p.ce.to_tensor(),
                weights,
                latent_mask,
            })
        })
        .collect()
}

/// Everything that stays fixed over a training run.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub train: &'a TrainConfig,
    pub denoiser: &'a DenoiserConfig,
    pub bridge: &'a BridgeConfig,
    pub codec: &'a Codec,
}

/// Where the drift comes from when building the objective.
#[derive(Debug, Clone, Copy)]
pub enum DriftSource<'a> {
    Network(&'a DenoiserParams),
    /// Fixed per-item drifts, e.g. the exact bridge target.
    Fixed(&'a [Tensor]),
}

/// Recorded objective for one batch.
pub struct Objective {
    pub graph: Graph,
    pub bound: Option<BoundParams>,
    pub latent: Var,
    pub pixel: Var,
    pub boundary: Option<Var>,
    pub total: Var,
}

impl Objective {
    pub fn report(&self, step: u64, wall_time_s: f64) -> StepReport {
        StepReport {
            step,
            latent_loss: self.graph.value(self.latent).item(),
            pixel_loss: self.graph.value(self.pixel).item(),
            boundary_loss: self.boundary.map_or(0.0, |b| self.graph.value(b).item()),
            total_loss: self.graph.value(self.total).item(),
            wall_time_s,
        }
    }

    pub fn gradients(&self) -> Option<GradTable> {
        self.bound.as_ref().map(|b| b.gradients(&self.graph, self.total))
    }
}

fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| size_err("empty batch"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        first.check_same_shape(t)?;
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(&shape, data)
}

/// Builds the batch objective from drawn bridge samples.
pub fn build_objective(
    ctx: &Context<'_>,
    batch: &[&PreparedPair],
    samples: &[BridgeSample],
    drift: DriftSource<'_>,
) -> Result<Objective> {
    if batch.is_empty() || batch.len() != samples.len() {
        return Err(size_err("batch and samples must be nonempty and aligned"));
    }
    let ablation = ctx.train.ablation;
    let mut g = Graph::new();
    let z_t = stack(&samples.iter().map(|s| &s.z_t.data).collect::<Vec<_>>())?;
    let ts: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let (v, bound) = match drift {
        DriftSource::Network(params) => {
            let bound = BoundParams::bind(&mut g, params, true);
            let masks: Vec<Option<LatentMask>> = batch
                .iter()
                .map(|p| ablation.uses_masks().then(|| p.latent_mask.clone()))
                .collect();
            let z = g.constant(z_t.clone());
            (denoiser::forward_graph(&mut g, ctx.denoiser, &bound, z, &ts, &masks)?, Some(bound))
        }
        DriftSource::Fixed(drifts) => {
            if drifts.len() != batch.len() {
                return Err(size_err("one fixed drift per batch item required"));
            }
            (g.constant(stack(&drifts.iter().collect::<Vec<_>>())?), None)
        }
    };
    let targets = stack(&samples.iter().map(|s| &s.target_drift).collect::<Vec<_>>())?;
    let latent = g.mse(v, targets)?;

    let scaled = g.scale_batch(v, ts.iter().map(|t| 1.0 - t).collect())?;
    let zc = g.constant(z_t);
    let z1_hat = g.add(scaled, zc)?;
    let x1_hat = ctx.codec.decode_graph(&mut g, z1_hat)?;
    let x1 = stack(&batch.iter().map(|p| &p.target).collect::<Vec<_>>())?;
    if g.value(x1_hat).shape() != x1.shape() {
        return Err(size_err(format!(
            "decoded shape {:?} differs from target {:?}",
            g.value(x1_hat).shape(),
            x1.shape()
        )));
    }
    let pixel = g.weighted_l1(x1_hat, x1.clone(), None)?;
    let mut terms = vec![(latent, 1.0), (pixel, ctx.train.lambda_pixel)];
    let boundary = if ablation.uses_boundary_loss() {
        let w = stack(&batch.iter().map(|p| &p.weights).collect::<Vec<_>>())?;
        let b = match ctx.train.boundary.norm {
            LossNorm::L1 => g.weighted_l1(x1_hat, x1, Some(w))?,
            LossNorm::L2 => g.weighted_l2(x1_hat, x1, w)?,
        };
        terms.push((b, ctx.train.lambda_boundary));
        Some(b)
    } else {
        None
    };
    let total = g.combine(terms)?;
    Ok(Objective {
        graph: g,
        bound,
        latent,
        pixel,
        boundary,
        total,
    })
}

/// Dataset indices for `step`: consecutive slices of per-epoch permutations,
/// each permutation keyed by `(seed, epoch)`.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    let mut cached: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|i| {
            let pos = step * batch_size as u64 + i;
            let epoch = pos / n as u64;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut rng::keyed(seed, Domain::Shuffle, epoch, 0));
                cached = Some((epoch, perm));
            }
            cached.as_ref().expect("just set").1[(pos % n as u64) as usize]
        })
        .collect()
}

/// Bridge draws for `step`, one stream per batch slot.
pub fn draw_batch_samples(
    ctx: &Context<'_>,
    batch: &[&PreparedPair],
    step: u64,
) -> Result<Vec<BridgeSample>> {
    batch
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut r = rng::keyed(ctx.train.seed, Domain::Sample, step, i as u64);
            bridge::draw_sample(&p.z0, &p.z1, ctx.bridge, &mut r)
        })
        .collect()
}

/// Parameters, optimizer moments and the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: DenoiserParams,
    pub optimizer: AdamW,
}

impl TrainState {
    pub fn fresh(cfg: &DenoiserConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            step: 0,
            params: denoiser::init(cfg, seed)?,
            optimizer: AdamW::new(),
        })
    }
}

/// One optimizer step on the batch scheduled for `state.step`.
pub fn train_step(state: &mut TrainState, data: &[PreparedPair], ctx: &Context<'_>) -> Result<StepReport> {
    if data.is_empty() {
        return Err(Error::Usage("training data is empty".into()));
    }
    let start = Instant::now();
    let step = state.step;
    let batch: Vec<&PreparedPair> = batch_indices(ctx.train.seed, step, ctx.train.batch_size, data.len())
        .into_iter()
        .map(|i| &data[i])
        .collect();
    let samples = draw_batch_samples(ctx, &batch, step)?;
    let objective = build_objective(ctx, &batch, &samples, DriftSource::Network(&state.params))?;
    let mut report = objective.report(step, 0.0);
    if !report.total_loss.is_finite() {
        return Err(Error::NonFinite {
            step,
            detail: format!("{:?}", report),
        });
    }
    let grads = objective.gradients().expect("network drift");
    state.optimizer.update(&ctx.train.optimizer, &mut state.params.table, &grads)?;
    state.step += 1;
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Runs steps until `ctx.train.steps`, calling `sink` after every step.
pub fn train<F>(data: &[PreparedPair], ctx: &Context<'_>, mut state: TrainState, mut sink: F) -> Result<(TrainState, Vec<StepReport>)>
where
    F: FnMut(&TrainState, &StepReport) -> Result<()>,
{
    ctx.train.validate()?;
    ctx.denoiser.validate()?;
    ctx.bridge.validate()?;
    let mut reports = Vec::new();
    while state.step < ctx.train.steps {
        let report = train_step(&mut state, data, ctx)?;
        sink(&state, &report)?;
        reports.push(report);
    }
    Ok((state, reports))
}

/// Outcome of translating one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image: Image,
    pub drift_evaluations: usize,
}

/// Encode, transport with the sampler, decode and clamp to `[0, 1]`.
pub fn predict(
    params: &DenoiserParams,
    cfg: &DenoiserConfig,
    bridge_cfg: &BridgeConfig,
    codec: &Codec,
    nc: &Image,
    rng_seed: u64,
    index: u64,
) -> Result<Prediction> {
    let z0 = codec.encode(nc)?;
    let mut drift = denoiser::drift_fn(cfg, params);
    let mut evaluations = 0;
    let mut r = rng::keyed(rng_seed, Domain::Inference, index, 0);
    let z1 = bridge::sample(
        &z0,
        |z, t| {
            evaluations += 1;
            drift(z, t)
        },
        bridge_cfg,
        &mut r,
    )?;
    let mut image = codec.decode(&z1)?;
    image.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(Prediction {
        image,
        drift_evaluations: evaluations,
    })
}

/// Whole-image and tumor-region metrics of the sampler's output on `pairs`.
pub fn evaluate(
    params: &DenoiserParams,
    cfg: &DenoiserConfig,
    pairs: &[PhantomPair],
    bridge_cfg: &BridgeConfig,
    codec: &Codec,
    seed: u64,
) -> Result<MetricsReport> {
    let records = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let pred = predict(params, cfg, bridge_cfg, codec, &p.nc, seed, i as u64)?;
            image_metrics(&pred.image, &p.ce, &p.mask)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_records(records))
}

/// Trailing moving average; entry `i` averages `values[i+1-window ..= i]`
/// (fewer at the start).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}
