//! Distance-to-boundary maps, exponential boundary weights and the
//! boundary-weighted pixel loss.
//!
//! The boundary of a tumor is the set of tumor pixels with at least one
//! non-tumor 4-neighbour; pixels outside the image count as non-tumor.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{size_err, Error, Result};
use crate::tensor::{Image, TumorMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossNorm {
    L1,
    L2,
}

impl fmt::Display for LossNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossNorm::L1 => "l1",
            LossNorm::L2 => "l2",
        })
    }
}

impl FromStr for LossNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(LossNorm::L1),
            "l2" => Ok(LossNorm::L2),
            other => Err(Error::Config(format!("unknown norm '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConfig {
    pub d_max: f64,
    pub tau: f64,
    pub norm: LossNorm,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self {
            d_max: 8.0,
            tau: 0.25,
            norm: LossNorm::L1,
        }
    }
}

impl BoundaryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_max >= 1.0 && self.d_max.is_finite()) {
            return Err(Error::Config(format!("d_max must be >= 1, got {}", self.d_max)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Per-pixel boundary weights in `[0, 1]`, zero outside the tumor.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMap {
    pub weights: Image,
}

/// Tumor pixels touching a non-tumor 4-neighbour or the image border.
pub fn boundary_set(mask: &TumorMask) -> Vec<(usize, usize)> {
    let (h, w) = mask.dims();
    let mut out = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let edge = r == 0
                || c == 0
                || r + 1 == h
                || c + 1 == w
                || !mask.get(r - 1, c)
                || !mask.get(r + 1, c)
                || !mask.get(r, c - 1)
                || !mask.get(r, c + 1);
            if edge {
                out.push((r, c));
            }
        }
    }
    out
}

const FAR: f64 = f64::INFINITY;

/// Exact 1D squared distance transform (lower envelope of parabolas) over the
/// finite entries of `f`. Entries with no finite source stay infinite.
fn squared_dt_1d(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + (p * p) as f64;
                    let s = (fq - fp) / (2.0 * (q as f64 - p as f64));
                    if s <= *z.last().expect("parallel stacks") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|x| *x = FAR);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest seed.
fn squared_edt(seeds: &[(usize, usize)], h: usize, w: usize) -> Vec<f64> {
    let mut grid = vec![FAR; h * w];
    for &(r, c) in seeds {
        grid[r * w + c] = 0.0;
    }
    let (mut v, mut z) = (Vec::new(), Vec::new());
    let mut col = vec![0.0; h];
    let mut tmp = vec![0.0; h.max(w)];
    for c in 0..w {
        for r in 0..h {
            col[r] = grid[r * w + c];
        }
        squared_dt_1d(&col, &mut tmp[..h], &mut v, &mut z);
        for r in 0..h {
            grid[r * w + c] = tmp[r];
        }
    }
    for r in 0..h {
        let row = grid[r * w..(r + 1) * w].to_vec();
        squared_dt_1d(&row, &mut tmp[..w], &mut v, &mut z);
        grid[r * w..(r + 1) * w].copy_from_slice(&tmp[..w]);
    }
    grid
}

/// Normalized distance of each tumor pixel to the tumor boundary, clipped at
/// `d_max` and divided by it. Zero outside the tumor and for an empty mask.
pub fn distance_map(mask: &TumorMask, d_max: f64) -> Result<Image> {
    if !(d_max >= 1.0) {
        return Err(Error::Config(format!("d_max must be >= 1, got {}", d_max)));
    }
    if mask.data().iter().any(|&v| v > 1) {
        return Err(Error::Validation("mask must be binary".into()));
    }
    let (h, w) = mask.dims();
    let seeds = boundary_set(mask);
    if seeds.is_empty() {
        return Ok(Image::zeros(h, w));
    }
    let sq = squared_edt(&seeds, h, w);
    let data = (0..h * w)
        .map(|i| {
            if mask.data()[i] == 1 {
                sq[i].sqrt().min(d_max) / d_max
            } else {
                0.0
            }
        })
        .collect();
    Image::from_vec(h, w, data)
}

/// `exp(-D(p) / tau) * m(p)`.
pub fn boundary_weights(mask: &TumorMask, cfg: &BoundaryConfig) -> Result<WeightMap> {
    cfg.validate()?;
    let d = distance_map(mask, cfg.d_max)?;
    let (h, w) = mask.dims();
    let data = d
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&dist, &m)| if m == 1 { (-dist / cfg.tau).exp() } else { 0.0 })
        .collect();
    Ok(WeightMap {
        weights: Image::from_vec(h, w, data)?,
    })
}

fn check3(pred: &Image, target: &Image, weights: &WeightMap) -> Result<()> {
    if pred.dims() != target.dims() || pred.dims() != weights.weights.dims() {
        return Err(size_err(format!(
            "boundary loss operands differ: {:?} {:?} {:?}",
            pred.dims(),
            target.dims(),
            weights.weights.dims()
        )));
    }
    Ok(())
}

/// `ℓ(W ⊙ pred, W ⊙ target)`, mean-reduced over all pixels.
pub fn boundary_loss(pred: &Image, target: &Image, weights: &WeightMap, norm: LossNorm) -> Result<f64> {
    check3(pred, target, weights)?;
    let n = pred.data().len().max(1) as f64;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(weights.weights.data())
        .map(|((&p, &t), &w)| {
            let d = w * p - w * t;
            match norm {
                LossNorm::L1 => d.abs(),
                LossNorm::L2 => d * d,
            }
        })
        .sum();
    Ok(total / n)
}

/// Gradient of [`boundary_loss`] with respect to `pred`.
pub fn boundary_loss_grad(pred: &Image, target: &Image, weights: &WeightMap, norm: LossNorm) -> Result<Image> {
    check3(pred, target, weights)?;
    let n = pred.data().len().max(1) as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .zip(weights.weights.data())
        .map(|((&p, &t), &w)| {
            let d = w * p - w * t;
            match norm {
                LossNorm::L1 => w * d.signum() * f64::from(u8::from(d != 0.0)) / n,
                LossNorm::L2 => 2.0 * w * d / n,
            }
        })
        .collect();
    Image::from_vec(pred.height(), pred.width(), data)
}
