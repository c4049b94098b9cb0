//! PSNR and SSIM over whole images and tumor regions.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5, normalized to unit sum),
//! K₁ = 0.01, K₂ = 0.03, population moments, and averages the SSIM map over
//! every position where the window fits entirely inside the image.
//!
//! The tumor region is the mask's bounding box grown by 5 pixels on each side
//! and clamped to the image. A box narrower or shorter than the window is
//! padded to window size by mirroring its edges.

use serde::{Deserialize, Serialize};

use crate::error::{size_err, Error, Result};
use crate::tensor::{Image, TumorMask};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const TUMOR_DILATION: usize = 5;

fn same_dims(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(size_err(format!("image dims differ: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn mse(pred: &Image, target: &Image) -> Result<f64> {
    same_dims(pred, target)?;
    let n = pred.data().len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// `10 log10(range² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &Image, target: &Image, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::Domain(format!("data range must be > 0, got {}", data_range)));
    }
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filtering of `x` with the 1D kernel `k`.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|i| k[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over valid window positions.
pub fn ssim(pred: &Image, target: &Image, data_range: f64) -> Result<f64> {
    same_dims(pred, target)?;
    if !(data_range > 0.0) {
        return Err(Error::Domain(format!("data range must be > 0, got {}", data_range)));
    }
    let (h, w) = pred.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(size_err(format!(
            "image {}x{} smaller than the {}x{} SSIM window",
            h, w, SSIM_WINDOW, SSIM_WINDOW
        )));
    }
    let k = gaussian_window();
    let (x, y) = (pred.data(), target.data());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, h, w, &k);
    let my = filter_valid(y, h, w, &k);
    let mxx = filter_valid(&xx, h, w, &k);
    let myy = filter_valid(&yy, h, w, &k);
    let mxy = filter_valid(&xy, h, w, &k);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cov = mxy[i] - ux * uy;
        let num = (2.0 * ux * uy + c1) * (2.0 * cov + c2);
        let den = (ux * ux + uy * uy + c1) * (vx + vy + c2);
        total += num / den;
    }
    Ok(total / mx.len() as f64)
}

/// Row/column extent of a crop: `rows.0..rows.1`, `cols.0..cols.1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionBox {
    pub rows: (usize, usize),
    pub cols: (usize, usize),
}

/// Dilated, clamped bounding box of the mask; `None` for an empty mask.
pub fn tumor_box(mask: &TumorMask) -> Option<RegionBox> {
    let (h, w) = mask.dims();
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return None;
    }
    Some(RegionBox {
        rows: (r0.saturating_sub(TUMOR_DILATION), (r1 + TUMOR_DILATION + 1).min(h)),
        cols: (c0.saturating_sub(TUMOR_DILATION), (c1 + TUMOR_DILATION + 1).min(w)),
    })
}

/// Mirror index into `0..n` with the edge sample repeated (`abc|cba|abc...`).
fn mirror(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

fn crop_padded(img: &Image, b: RegionBox) -> Image {
    let (h, w) = (b.rows.1 - b.rows.0, b.cols.1 - b.cols.0);
    let (oh, ow) = (h.max(SSIM_WINDOW), w.max(SSIM_WINDOW));
    let (pt, pl) = ((oh - h) / 2, (ow - w) / 2);
    Image::from_fn(oh, ow, |r, c| {
        let rr = mirror(r as isize - pt as isize, h);
        let cc = mirror(c as isize - pl as isize, w);
        img.get(b.rows.0 + rr, b.cols.0 + cc)
    })
}

/// Crops `pred` and `target` to the tumor region. Fails with
/// [`Error::EmptyRegion`] when the mask is empty.
pub fn tumor_region(pred: &Image, target: &Image, mask: &TumorMask) -> Result<(Image, Image)> {
    same_dims(pred, target)?;
    if pred.dims() != mask.dims() {
        return Err(size_err("mask dims differ from image dims"));
    }
    let b = tumor_box(mask).ok_or(Error::EmptyRegion)?;
    Ok((crop_padded(pred, b), crop_padded(target, b)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub tumor_psnr: Option<f64>,
    pub tumor_ssim: Option<f64>,
}

pub fn image_metrics(pred: &Image, target: &Image, mask: &TumorMask) -> Result<ImageMetrics> {
    let psnr_v = psnr(pred, target, 1.0)?;
    let ssim_v = ssim(pred, target, 1.0)?;
    let (tumor_psnr, tumor_ssim) = match tumor_region(pred, target, mask) {
        Ok((p, t)) => (Some(psnr(&p, &t, 1.0)?), Some(ssim(&p, &t, 1.0)?)),
        Err(Error::EmptyRegion) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(ImageMetrics {
        psnr: psnr_v,
        ssim: ssim_v,
        tumor_psnr,
        tumor_ssim,
    })
}

/// Mean and population standard deviation; `count` values contributed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Aggregate> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Aggregate {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: Vec<ImageMetrics>,
    pub psnr: Option<Aggregate>,
    pub ssim: Option<Aggregate>,
    pub tumor_psnr: Option<Aggregate>,
    pub tumor_ssim: Option<Aggregate>,
}

impl MetricsReport {
    pub fn from_records(records: Vec<ImageMetrics>) -> Self {
        let col = |f: &dyn Fn(&ImageMetrics) -> Option<f64>| -> Option<Aggregate> {
            Aggregate::of(&records.iter().filter_map(f).collect::<Vec<_>>())
        };
        Self {
            psnr: col(&|m| Some(m.psnr)),
            ssim: col(&|m| Some(m.ssim)),
            tumor_psnr: col(&|m| m.tumor_psnr),
            tumor_ssim: col(&|m| m.tumor_ssim),
            records,
        }
    }
}
