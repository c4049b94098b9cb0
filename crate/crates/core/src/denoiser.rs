//! Drift network: a small U-shaped convolutional network with sinusoidal time
//! conditioning and one tumor-biased attention block at the bottleneck.
//!
//! ```text
//! z ─ conv_in ─ enc0 ─┬─ pool ─ enc1 ─┬─ pool ─ enc2 ─ attn ─ up ─ dec2 ─ up ─ dec1 ─ conv_out
//!                     └──── skip ─────┼───────────────────────────────┘            │
//!                                     └──────────── skip ──────────────────────────┘
//! ```
//! Every level adds a learned projection of the time features after its first
//! convolution. The output convolution starts at zero, so an untrained network
//! predicts zero drift.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::codec::Latent;
use crate::error::{size_err, Error, Result};
use crate::params::{GradTable, ParamTable};
use crate::rng::{self, Domain};
use crate::tensor::Tensor;
use crate::tubam::{AttentionConfig, LatentMask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub attention_at_bottleneck: bool,
    pub attention: AttentionConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_channels: 16,
            depth: 2,
            time_embed_dim: 32,
            attention_at_bottleneck: true,
            attention: AttentionConfig::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::Config("depth and channel counts must be >= 1".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("time_embed_dim must be a positive even number".into()));
        }
        self.attention.validate()
    }

    /// Every parameter name with its shape, in construction order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.base_channels;
        let t = self.time_embed_dim;
        let a = self.attention.inner_dim();
        let mut out = vec![
            ("in.w".to_string(), vec![c, self.in_channels, 3, 3]),
            ("in.b".to_string(), vec![c]),
        ];
        for l in 0..=self.depth {
            out.push((format!("enc{}.w", l), vec![c, c, 3, 3]));
            out.push((format!("enc{}.b", l), vec![c]));
            out.push((format!("time{}.w", l), vec![c, t]));
            out.push((format!("time{}.b", l), vec![c]));
        }
        for p in ["q", "k", "v"] {
            out.push((format!("attn.{}.w", p), vec![a, c, 1, 1]));
            out.push((format!("attn.{}.b", p), vec![a]));
        }
        out.push(("attn.o.w".to_string(), vec![c, a, 1, 1]));
        out.push(("attn.o.b".to_string(), vec![c]));
        for l in 1..=self.depth {
            out.push((format!("dec{}.w", l), vec![c, 2 * c, 3, 3]));
            out.push((format!("dec{}.b", l), vec![c]));
        }
        out.push(("out.w".to_string(), vec![self.in_channels, c, 3, 3]));
        out.push(("out.b".to_string(), vec![self.in_channels]));
        out
    }
}

/// Parameters of the drift network and the seed they were created from.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub table: ParamTable,
    pub seed: u64,
}

/// Prefix used when denoiser parameters share a table with other components.
pub const PARAM_PREFIX: &str = "denoiser.";

pub fn init(cfg: &DenoiserConfig, seed: u64) -> Result<DenoiserParams> {
    cfg.validate()?;
    let mut table = ParamTable::new();
    for (k, (name, shape)) in cfg.param_shapes().into_iter().enumerate() {
        let n: usize = shape.iter().product();
        let is_bias = name.ends_with(".b");
        let value = if is_bias || name.starts_with("out.") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let std = 1.0 / (fan_in as f64).sqrt();
            let mut r = rng::keyed(seed, Domain::Init, k as u64, 0);
            Tensor::from_vec(&shape, rng::normals(&mut r, n).into_iter().map(|z| z * std).collect())?
        };
        table.insert(name, value)?;
    }
    Ok(DenoiserParams { table, seed })
}

/// Sinusoidal features of `t`, half sines and half cosines, with `t` scaled by
/// 1000 so the four training times are well separated.
pub fn time_features(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp())
        .collect();
    out.extend(freqs.iter().map(|f| (1000.0 * t * f).sin()));
    out.extend(freqs.iter().map(|f| (1000.0 * t * f).cos()));
    out
}

/// Graph handles for every parameter.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind(g: &mut Graph, params: &DenoiserParams, trainable: bool) -> Self {
        let vars = params
            .table
            .iter()
            .map(|(name, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Validation(format!("missing parameter '{}'", name)))
    }

    /// Gradient for every bound parameter; zeros where the loss does not
    /// depend on the parameter.
    pub fn gradients(&self, g: &Graph, root: Var) -> GradTable {
        let mut grads = g.backward(root);
        self.vars
            .iter()
            .map(|(name, &v)| {
                let t = grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()));
                (name.clone(), t)
            })
            .collect()
    }
}

/// Batched forward pass on a `[B, C, H, W]` node. `masks[i]` is the latent
/// tumor mask of item `i` (at latent resolution) or `None`.
pub fn forward_graph(
    g: &mut Graph,
    cfg: &DenoiserConfig,
    p: &BoundParams,
    z: Var,
    ts: &[f64],
    masks: &[Option<LatentMask>],
) -> Result<Var> {
    let shape = g.value(z).shape().to_vec();
    let (bs, c, h, w) = match shape.as_slice() {
        [b, c, h, w] => (*b, *c, *h, *w),
        s => return Err(size_err(format!("denoiser input must be [B, C, H, W], got {:?}", s))),
    };
    if c != cfg.in_channels {
        return Err(size_err(format!("latent has {} channels, denoiser expects {}", c, cfg.in_channels)));
    }
    let scale = 1usize << cfg.depth;
    if h % scale != 0 || w % scale != 0 {
        return Err(size_err(format!("latent {}x{} not divisible by 2^{}", h, w, cfg.depth)));
    }
    if ts.len() != bs || masks.len() != bs {
        return Err(size_err("one time and one mask slot per batch item required"));
    }
    if let Some(t) = ts.iter().find(|t| !(0.0..1.0).contains(*t)) {
        return Err(Error::Domain(format!("t = {} outside [0, 1)", t)));
    }

    let feats: Vec<f64> = ts.iter().flat_map(|&t| time_features(t, cfg.time_embed_dim)).collect();
    let feats = g.constant(Tensor::from_vec(&[bs, cfg.time_embed_dim], feats)?);
    let mut temb = Vec::with_capacity(cfg.depth + 1);
    for l in 0..=cfg.depth {
        temb.push(g.linear(feats, p.get(&format!("time{}.w", l))?, p.get(&format!("time{}.b", l))?)?);
    }

    let x = g.conv2d(z, p.get("in.w")?, p.get("in.b")?)?;
    let x = g.add_channel_bias(x, temb[0])?;
    let x = g.silu(x);
    let x = g.conv2d(x, p.get("enc0.w")?, p.get("enc0.b")?)?;
    let mut h_cur = g.silu(x);
    let mut skips = vec![h_cur];
    for (l, &te) in temb.iter().enumerate().skip(1) {
        let x = g.avg_pool(h_cur, 2)?;
        let x = g.conv2d(x, p.get(&format!("enc{}.w", l))?, p.get(&format!("enc{}.b", l))?)?;
        let x = g.add_channel_bias(x, te)?;
        h_cur = g.silu(x);
        skips.push(h_cur);
    }

    if cfg.attention_at_bottleneck {
        let pooled: Vec<Option<LatentMask>> = masks
            .iter()
            .map(|m| {
                m.as_ref()
                    .map(|m| {
                        if m.dims() != (h, w) {
                            return Err(size_err(format!(
                                "latent mask {:?} does not match latent {}x{}",
                                m.dims(),
                                h,
                                w
                            )));
                        }
                        m.downsample(scale)
                    })
                    .transpose()
            })
            .collect::<Result<_>>()?;
        let q = g.conv2d(h_cur, p.get("attn.q.w")?, p.get("attn.q.b")?)?;
        let k = g.conv2d(h_cur, p.get("attn.k.w")?, p.get("attn.k.b")?)?;
        let v = g.conv2d(h_cur, p.get("attn.v.w")?, p.get("attn.v.b")?)?;
        let a = g.attention(q, k, v, cfg.attention.heads, &pooled, cfg.attention.alpha_tumor)?;
        let o = g.conv2d(a, p.get("attn.o.w")?, p.get("attn.o.b")?)?;
        h_cur = g.add(h_cur, o)?;
    }

    for l in (1..=cfg.depth).rev() {
        let up = g.upsample(h_cur, 2)?;
        let cat = g.concat(up, skips[l - 1])?;
        let x = g.conv2d(cat, p.get(&format!("dec{}.w", l))?, p.get(&format!("dec{}.b", l))?)?;
        h_cur = g.silu(x);
    }
    g.conv2d(h_cur, p.get("out.w")?, p.get("out.b")?)
}

/// Drift for a single latent.
pub fn forward(
    cfg: &DenoiserConfig,
    params: &DenoiserParams,
    z_t: &Latent,
    t: f64,
    mask: Option<&LatentMask>,
) -> Result<Tensor> {
    let shape = z_t.data.shape().to_vec();
    let mut batched = vec![1];
    batched.extend_from_slice(&shape);
    let mut g = Graph::new();
    let p = BoundParams::bind(&mut g, params, false);
    let z = g.constant(z_t.data.clone().reshape(&batched)?);
    let out = forward_graph(&mut g, cfg, &p, z, &[t], &[mask.cloned()])?;
    g.value(out).clone().reshape(&shape)
}

/// Inference drift function: the signature has no mask, so sampling cannot
/// see one.
pub fn drift_fn<'a>(
    cfg: &'a DenoiserConfig,
    params: &'a DenoiserParams,
) -> impl FnMut(&Latent, f64) -> Result<Tensor> + 'a {
    move |z, t| forward(cfg, params, z, t, None)
}

/// Copy of `table` with every name prefixed by [`PARAM_PREFIX`].
pub fn export_table(params: &DenoiserParams) -> ParamTable {
    params
        .table
        .iter()
        .map(|(k, v)| (format!("{}{}", PARAM_PREFIX, k), v.clone()))
        .collect()
}

/// Inverse of [`export_table`], validated against the configured shapes.
pub fn import_table(cfg: &DenoiserConfig, table: &ParamTable, seed: u64) -> Result<DenoiserParams> {
    let mut out = ParamTable::new();
    for (name, shape) in cfg.param_shapes() {
        let t = table.require(&format!("{}{}", PARAM_PREFIX, name))?;
        if t.shape() != shape.as_slice() {
            return Err(size_err(format!(
                "parameter {} has shape {:?}, config expects {:?}",
                name,
                t.shape(),
                shape
            )));
        }
        out.insert(name, t.clone())?;
    }
    Ok(DenoiserParams { table: out, seed })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::codec::CodecKind;

    fn rand_latent(c: usize, h: usize, w: usize, seed: u64) -> Latent {
        let mut r = rng::keyed(seed, Domain::Sample, 3, 3);
        Latent::new(Tensor::from_vec(&[c, h, w], rng::normals(&mut r, c * h * w)).unwrap(), CodecKind::Pooled)
    }

    /// Perturb every parameter so no path is dead.
    pub(crate) fn randomized(cfg: &DenoiserConfig, seed: u64) -> DenoiserParams {
        let mut p = init(cfg, seed).unwrap();
        for (i, (_, t)) in p.table.iter_mut().enumerate() {
            let mut r = rng::keyed(seed, Domain::Init, 1000 + i as u64, 1);
            let noise = rng::normals(&mut r, t.len());
            for (v, z) in t.data_mut().iter_mut().zip(noise) {
                *v += 0.1 * z;
            }
        }
        p
    }

    #[test]
    fn init_is_deterministic_and_output_zero() {
        let cfg = DenoiserConfig::default();
        let a = init(&cfg, 7).unwrap();
        assert_eq!(a, init(&cfg, 7).unwrap());
        assert_ne!(a.table.digest(), init(&cfg, 8).unwrap().table.digest());
        assert!(a.table.get("out.w").unwrap().data().iter().all(|&v| v == 0.0));
        let z = rand_latent(1, 16, 16, 1);
        let out = forward(&cfg, &a, &z, 0.25, None).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_parameter_count_matches_shape_walk() {
        // Independent walk: conv (cout*cin*k*k + cout), linear (out*in + out).
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
        let lin = |o: usize, i: usize| o * i + o;
        let (c, t, depth) = (16, 32, 2);
        let expected = conv(c, 1, 3)
            + (depth + 1) * (conv(c, c, 3) + lin(c, t))
            + 3 * conv(16, c, 1)
            + conv(c, 16, 1)
            + depth * conv(c, 2 * c, 3)
            + conv(1, c, 3);
        assert_eq!(expected, 19_185);
        let p = init(&DenoiserConfig::default(), 0).unwrap();
        assert_eq!(p.table.scalar_count(), expected);
    }

    #[test]
    fn shape_contract() {
        let cfg = DenoiserConfig::default();
        let p = randomized(&cfg, 2);
        for side in [16, 64] {
            let z = rand_latent(1, side, side, 4);
            let out = forward(&cfg, &p, &z, 0.5, None).unwrap();
            assert_eq!(out.shape(), z.data.shape());
        }
        let bad = rand_latent(2, 16, 16, 4);
        assert!(matches!(forward(&cfg, &p, &bad, 0.5, None), Err(Error::Size(_))));
        let odd = rand_latent(1, 10, 10, 4);
        assert!(matches!(forward(&cfg, &p, &odd, 0.5, None), Err(Error::Size(_))));
    }

    #[test]
    fn empty_mask_equals_no_mask_and_mask_changes_output() {
        let cfg = DenoiserConfig::default();
        let p = randomized(&cfg, 3);
        let z = rand_latent(1, 16, 16, 5);
        let none = forward(&cfg, &p, &z, 0.25, None).unwrap();
        let zero = forward(&cfg, &p, &z, 0.25, Some(&LatentMask::zeros(16, 16))).unwrap();
        assert!(none.max_abs_diff(&zero) < 1e-7);
        let mut cells = vec![0u8; 256];
        for r in 2..9 {
            for c in 3..10 {
                cells[r * 16 + c] = 1;
            }
        }
        let m = LatentMask::new(16, 16, cells).unwrap();
        let masked = forward(&cfg, &p, &z, 0.25, Some(&m)).unwrap();
        assert!(none.max_abs_diff(&masked) > 0.0);
        assert!(forward(&cfg, &p, &z, 0.25, Some(&LatentMask::zeros(8, 8))).is_err());
    }

    #[test]
    fn time_changes_output() {
        let cfg = DenoiserConfig::default();
        let p = randomized(&cfg, 4);
        let z = rand_latent(1, 16, 16, 6);
        let a = forward(&cfg, &p, &z, 0.0, None).unwrap();
        let b = forward(&cfg, &p, &z, 0.75, None).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-6);
    }

    #[test]
    fn disabled_attention_has_zero_gradient() {
        let cfg = DenoiserConfig { attention_at_bottleneck: false, ..Default::default() };
        let p = randomized(&cfg, 5);
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &p, true);
        let z = g.constant(rand_latent(1, 16, 16, 7).data.reshape(&[1, 1, 16, 16]).unwrap());
        let out = forward_graph(&mut g, &cfg, &bound, z, &[0.5], &[None]).unwrap();
        let target = Tensor::full(&[1, 1, 16, 16], 0.3);
        let loss = g.mse(out, target).unwrap();
        let grads = bound.gradients(&g, loss);
        assert_eq!(grads.len(), p.table.len());
        for (name, gr) in &grads {
            assert!(gr.is_finite());
            if name.starts_with("attn.") {
                assert!(gr.data().iter().all(|&v| v == 0.0), "{}", name);
            }
        }
        assert!(grads["enc1.w"].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn export_import_round_trip() {
        let cfg = DenoiserConfig::default();
        let p = randomized(&cfg, 6);
        let back = import_table(&cfg, &export_table(&p), p.seed).unwrap();
        assert_eq!(back, p);
        let small = DenoiserConfig { base_channels: 8, ..cfg };
        assert!(import_table(&small, &export_table(&p), 0).is_err());
    }
}
