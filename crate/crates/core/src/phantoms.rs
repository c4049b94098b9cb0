//! Paired synthetic non-contrast / contrast-enhanced images with tumor masks.
//!
//! A pair is a pure function of `(spec, index)`: every random quantity is drawn
//! from a stream keyed by `(seed, index)`, so generating index 17 alone gives the
//! same pixels as generating it as part of a dataset.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Domain};
use crate::tensor::{Image, TumorMask};

/// Standard deviation of the pixel noise added to the non-contrast image.
pub const NC_NOISE_STD: f64 = 0.01;
/// Peak extra intensity of the vessel curve in the enhanced image.
pub const VESSEL_ENHANCEMENT: f64 = 0.3;
/// Peak intensity of the vessel curve already visible without contrast.
pub const VESSEL_BASELINE: f64 = 0.08;
/// Half-width (pixels) beyond which the vessel profile is exactly zero.
const VESSEL_HALF_WIDTH: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub side: usize,
    pub tumor_count_range: (u32, u32),
    pub tumor_radius_range: (f64, f64),
    pub enhancement_gain: f64,
    pub background_texture_scale: f64,
    /// Darkening of tumor tissue in the non-contrast image; gives the model a
    /// faint cue about where enhancement will appear.
    pub tumor_nc_contrast: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            side: 64,
            tumor_count_range: (1, 3),
            tumor_radius_range: (4.0, 9.0),
            enhancement_gain: 0.35,
            background_texture_scale: 0.1,
            tumor_nc_contrast: 0.12,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 16 || !self.side.is_power_of_two() {
            return Err(Error::Config(format!(
                "phantom side must be a power of two >= 16, got {}",
                self.side
            )));
        }
        let (cmin, cmax) = self.tumor_count_range;
        if cmin > cmax {
            return Err(Error::Config(format!(
                "tumor count range [{}, {}] is inverted",
                cmin, cmax
            )));
        }
        let (rmin, rmax) = self.tumor_radius_range;
        if !(rmin > 0.0 && rmin <= rmax && rmax.is_finite()) {
            return Err(Error::Config(format!(
                "tumor radius range [{}, {}] is invalid",
                rmin, rmax
            )));
        }
        if !(self.enhancement_gain > 0.0 && self.enhancement_gain <= 1.0) {
            return Err(Error::Config(format!(
                "enhancement gain {} outside (0, 1]",
                self.enhancement_gain
            )));
        }
        if !(self.background_texture_scale >= 0.0 && self.background_texture_scale.is_finite()) {
            return Err(Error::Config("background texture scale must be >= 0".into()));
        }
        if !(0.0..=0.5).contains(&self.tumor_nc_contrast) {
            return Err(Error::Config("tumor nc contrast must lie in [0, 0.5]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomPair {
    pub nc: Image,
    pub ce: Image,
    pub mask: TumorMask,
}

/// Unclamped components of a pair, before noise.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomLayers {
    /// Non-contrast image without noise.
    pub nc_clean: Image,
    /// `enhancement_gain` on tumor pixels, zero elsewhere.
    pub tumor_enhancement: Image,
    /// Vessel enhancement; zero on tumor pixels.
    pub vessel_enhancement: Image,
    pub noise: Image,
    pub mask: TumorMask,
}

impl PhantomLayers {
    /// Enhanced image before clamping.
    pub fn ce_unclamped(&self) -> Image {
        let data = self
            .nc_clean
            .data()
            .iter()
            .zip(self.tumor_enhancement.data())
            .zip(self.vessel_enhancement.data())
            .map(|((a, b), c)| a + b + c)
            .collect();
        Image::from_vec(self.nc_clean.height(), self.nc_clean.width(), data).expect("same dims")
    }

    pub fn compose(&self) -> PhantomPair {
        let (h, w) = self.nc_clean.dims();
        let nc = self
            .nc_clean
            .data()
            .iter()
            .zip(self.noise.data())
            .map(|(a, n)| (a + n).clamp(0.0, 1.0))
            .collect();
        let ce = self
            .ce_unclamped()
            .data()
            .iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        PhantomPair {
            nc: Image::from_vec(h, w, nc).expect("same dims"),
            ce: Image::from_vec(h, w, ce).expect("same dims"),
            mask: self.mask.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn contains(&self, r: f64, c: f64) -> bool {
        let dy = (r - self.cy) / self.ry;
        let dx = (c - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

pub fn generate_layers(spec: &PhantomSpec, index: u64) -> Result<PhantomLayers> {
    spec.validate()?;
    let n = spec.side;
    let side = n as f64;
    let mut rng = rng::keyed(spec.seed, Domain::Phantom, index, 0);

    // Low-frequency cosine texture.
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let fy = rng.random_range(0.5..2.5) / side;
            let fx = rng.random_range(0.5..2.5) / side;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.0..1.0) / 3.0;
            (fy, fx, phase, amp)
        })
        .collect();

    let anatomy = Ellipse {
        cy: side * rng.random_range(0.45..0.55),
        cx: side * rng.random_range(0.45..0.55),
        ry: side * rng.random_range(0.32..0.42),
        rx: side * rng.random_range(0.32..0.42),
    };
    let inner = Ellipse {
        cy: anatomy.cy + side * rng.random_range(-0.05..0.05),
        cx: anatomy.cx + side * rng.random_range(-0.05..0.05),
        ry: anatomy.ry * rng.random_range(0.35..0.55),
        rx: anatomy.rx * rng.random_range(0.35..0.55),
    };

    let (cmin, cmax) = spec.tumor_count_range;
    let count = rng.random_range(cmin..=cmax);
    let (rmin, rmax) = spec.tumor_radius_range;
    let tumors: Vec<Ellipse> = (0..count)
        .map(|_| {
            let ry = if rmin < rmax { rng.random_range(rmin..=rmax) } else { rmin };
            let rx = if rmin < rmax { rng.random_range(rmin..=rmax) } else { rmin };
            Ellipse {
                cy: side * rng.random_range(0.25..0.75),
                cx: side * rng.random_range(0.25..0.75),
                ry,
                rx,
            }
        })
        .collect();

    let vessel_row = side * rng.random_range(0.2..0.8);
    let vessel_amp = side * rng.random_range(0.05..0.15);
    let vessel_period = side * rng.random_range(0.6..1.4);
    let vessel_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let noise = rng::normals(&mut rng, n * n);

    let mask = TumorMask::from_fn(n, n, |r, c| {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        tumors.iter().any(|e| e.contains(y, x))
    });

    let vessel_profile = |r: usize, c: usize| -> f64 {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        let path = vessel_row
            + vessel_amp * (std::f64::consts::TAU * x / vessel_period + vessel_phase).sin();
        let d = (y - path).abs();
        if d > VESSEL_HALF_WIDTH {
            0.0
        } else {
            (-d * d / (2.0 * 0.6 * 0.6)).exp()
        }
    };

    let nc_clean = Image::from_fn(n, n, |r, c| {
        let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
        let texture: f64 = waves
            .iter()
            .map(|&(fy, fx, phase, amp)| {
                amp * (std::f64::consts::TAU * (fy * y + fx * x) + phase).cos()
            })
            .sum();
        let mut v = 0.15 + spec.background_texture_scale * texture;
        if anatomy.contains(y, x) {
            v += 0.25;
        }
        if inner.contains(y, x) {
            v += 0.1;
        }
        if mask.get(r, c) {
            v -= spec.tumor_nc_contrast;
        }
        v + VESSEL_BASELINE * vessel_profile(r, c)
    });
    let tumor_enhancement = Image::from_fn(n, n, |r, c| {
        if mask.get(r, c) {
            spec.enhancement_gain
        } else {
            0.0
        }
    });
    let vessel_enhancement = Image::from_fn(n, n, |r, c| {
        if mask.get(r, c) {
            0.0
        } else {
            VESSEL_ENHANCEMENT * vessel_profile(r, c)
        }
    });
    let noise = Image::from_vec(
        n,
        n,
        noise.into_iter().map(|z| z * NC_NOISE_STD).collect(),
    )?;

    Ok(PhantomLayers {
        nc_clean,
        tumor_enhancement,
        vessel_enhancement,
        noise,
        mask,
    })
}

pub fn generate_pair(spec: &PhantomSpec, index: u64) -> Result<PhantomPair> {
    Ok(generate_layers(spec, index)?.compose())
}

pub fn generate_dataset(spec: &PhantomSpec, n: usize) -> Result<Vec<PhantomPair>> {
    spec.validate()?;
    (0..n as u64).map(|i| generate_pair(spec, i)).collect()
}

/// Pairs for indices `start..start + n`, e.g. a held-out split.
pub fn generate_range(spec: &PhantomSpec, start: u64, n: usize) -> Result<Vec<PhantomPair>> {
    spec.validate()?;
    (start..start + n as u64)
        .map(|i| generate_pair(spec, i))
        .collect()
}
