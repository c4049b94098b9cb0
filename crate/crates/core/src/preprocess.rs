//! Intensity normalization, centered zero padding and mask projection to the
//! latent grid.

use serde::{Deserialize, Serialize};

use crate::error::{size_err, Error, Result};
use crate::tensor::{Image, TumorMask};
use crate::tubam::LatentMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizeConfig {
    pub lo_percentile: f64,
    pub hi_percentile: f64,
    pub pad_to: Option<usize>,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self {
            lo_percentile: 0.001,
            hi_percentile: 0.999,
            pad_to: None,
        }
    }
}

impl NormalizeConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.lo_percentile
            && self.lo_percentile < self.hi_percentile
            && self.hi_percentile <= 1.0;
        if !ok {
            return Err(Error::Config(format!(
                "percentiles must satisfy 0 <= lo < hi <= 1, got {} and {}",
                self.lo_percentile, self.hi_percentile
            )));
        }
        Ok(())
    }
}

/// Nearest-rank percentile of an ascending slice: the value at 1-based rank
/// `ceil(p * n)`, with rank clamped to `[1, n]`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Clip to the configured percentiles and rescale to `[0, 1]`. A constant image
/// maps to all zeros.
pub fn normalize(img: &Image, cfg: &NormalizeConfig) -> Result<Image> {
    cfg.validate()?;
    if img.data().is_empty() {
        return Err(size_err("cannot normalize an empty image"));
    }
    let mut sorted = img.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = nearest_rank(&sorted, cfg.lo_percentile);
    let hi = nearest_rank(&sorted, cfg.hi_percentile);
    let (h, w) = img.dims();
    if hi <= lo {
        return Ok(Image::zeros(h, w));
    }
    let span = hi - lo;
    let data = img
        .data()
        .iter()
        .map(|&v| ((v.clamp(lo, hi) - lo) / span).clamp(0.0, 1.0))
        .collect();
    Image::from_vec(h, w, data)
}

/// A padded image together with the placement of the original.
#[derive(Debug, Clone, PartialEq)]
pub struct Padded {
    pub image: Image,
    pub row_offset: usize,
    pub col_offset: usize,
    pub original_dims: (usize, usize),
}

impl Padded {
    pub fn crop_back(&self) -> Image {
        let (h, w) = self.original_dims;
        self.image
            .crop(self.row_offset, self.col_offset, h, w)
            .expect("offsets recorded at pad time")
    }
}

/// Center `img` in a `to × to` zero canvas.
pub fn pad(img: &Image, to: usize) -> Result<Padded> {
    let (h, w) = img.dims();
    if to < h || to < w {
        return Err(size_err(format!("cannot pad {}x{} down to {}", h, w, to)));
    }
    let row_offset = (to - h) / 2;
    let col_offset = (to - w) / 2;
    let mut out = Image::zeros(to, to);
    for r in 0..h {
        for c in 0..w {
            out.set(r + row_offset, c + col_offset, img.get(r, c));
        }
    }
    Ok(Padded {
        image: out,
        row_offset,
        col_offset,
        original_dims: (h, w),
    })
}

/// Block-wise max pooling of a pixel mask onto a `latent_dims` grid.
pub fn mask_to_latent(mask: &TumorMask, latent_dims: (usize, usize)) -> Result<LatentMask> {
    let (h, w) = mask.dims();
    let (lh, lw) = latent_dims;
    if lh == 0 || lw == 0 || h % lh != 0 || w % lw != 0 {
        return Err(size_err(format!(
            "mask {}x{} is not divisible into latent grid {}x{}",
            h, w, lh, lw
        )));
    }
    let (fy, fx) = (h / lh, w / lw);
    let mut cells = vec![0u8; lh * lw];
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                cells[(r / fy) * lw + c / fx] = 1;
            }
        }
    }
    LatentMask::new(lh, lw, cells)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_image_normalizes_to_zero() {
        let img = Image::from_fn(8, 8, |_, _| 0.7);
        let out = normalize(&img, &NormalizeConfig::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn endpoints_map_to_zero_and_one() {
        let img = Image::from_vec(1, 4, vec![2.0, 3.0, 4.0, 6.0]).unwrap();
        let cfg = NormalizeConfig {
            lo_percentile: 0.0,
            hi_percentile: 1.0,
            pad_to: None,
        };
        let out = normalize(&img, &cfg).unwrap();
        assert_eq!(out.data(), &[0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn ramp_clips_to_sorted_percentiles() {
        let img = Image::from_fn(1, 1000, |_, c| c as f64);
        // Independent oracle: sort, take element at ceil(p*n)-1.
        let mut sorted: Vec<f64> = img.data().to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let lo = sorted[(0.001f64 * 1000.0).ceil() as usize - 1];
        let hi = sorted[(0.999f64 * 1000.0).ceil() as usize - 1];
        assert_eq!((lo, hi), (0.0, 998.0));
        let out = normalize(&img, &NormalizeConfig::default()).unwrap();
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(0, 999), 1.0);
        assert_eq!(out.get(0, 998), 1.0);
        assert!((out.get(0, 499) - 499.0 / 998.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_percentiles_rejected() {
        let img = Image::zeros(2, 2);
        let cfg = NormalizeConfig {
            lo_percentile: 0.5,
            hi_percentile: 0.5,
            pad_to: None,
        };
        assert!(normalize(&img, &cfg).is_err());
    }

    #[test]
    fn pad_identity_and_crop_back() {
        let img = Image::from_fn(64, 64, |r, c| (r * 64 + c) as f64 / 4096.0);
        let same = pad(&img, 64).unwrap();
        assert_eq!(same.image, img);
        let big = pad(&img, 96).unwrap();
        assert_eq!(big.image.dims(), (96, 96));
        assert_eq!(big.crop_back(), img);
        assert!((big.image.data().iter().sum::<f64>() - img.data().iter().sum::<f64>()).abs() < 1e-9);
        assert!(matches!(pad(&img, 32), Err(Error::Size(_))));
    }

    #[test]
    fn mask_projection_cases() {
        let z = TumorMask::zeros(64, 64);
        assert_eq!(mask_to_latent(&z, (8, 8)).unwrap().count(), 0);
        let ones = TumorMask::from_fn(64, 64, |_, _| true);
        assert_eq!(mask_to_latent(&ones, (8, 8)).unwrap().count(), 64);

        let mut m = TumorMask::zeros(64, 64);
        m.set(5, 7, true);
        let lm = mask_to_latent(&m, (8, 8)).unwrap();
        // Brute force: cell (i,j) is the max over its 8x8 block.
        for i in 0..8 {
            for j in 0..8 {
                let mut any = false;
                for r in i * 8..i * 8 + 8 {
                    for c in j * 8..j * 8 + 8 {
                        any |= m.get(r, c);
                    }
                }
                assert_eq!(lm.get(i, j), any);
            }
        }
        assert!(lm.get(0, 0));
        assert_eq!(lm.count(), 1);
        assert!(matches!(mask_to_latent(&m, (7, 8)), Err(Error::Size(_))));
    }

    proptest! {
        #[test]
        fn normalize_output_in_unit_range(values in prop::collection::vec(-50.0f64..50.0, 1..200)) {
            let n = values.len();
            let img = Image::from_vec(1, n, values).unwrap();
            let out = normalize(&img, &NormalizeConfig::default()).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn normalize_idempotent_on_full_range(values in prop::collection::vec(0.0f64..1.0, 2..100)) {
            let mut values = values;
            values.push(0.0);
            values.push(1.0);
            let n = values.len();
            let img = Image::from_vec(1, n, values).unwrap();
            let cfg = NormalizeConfig { lo_percentile: 0.0, hi_percentile: 1.0, pad_to: None };
            let once = normalize(&img, &cfg).unwrap();
            let twice = normalize(&once, &cfg).unwrap();
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn mask_projection_is_monotone(
            bits in prop::collection::vec(any::<bool>(), 256),
            extra in prop::collection::vec(any::<bool>(), 256),
        ) {
            let a = TumorMask::from_fn(16, 16, |r, c| bits[r * 16 + c]);
            let b = TumorMask::from_fn(16, 16, |r, c| bits[r * 16 + c] || extra[r * 16 + c]);
            let la = mask_to_latent(&a, (4, 4)).unwrap();
            let lb = mask_to_latent(&b, (4, 4)).unwrap();
            for (x, y) in la.cells().iter().zip(lb.cells()) {
                prop_assert!(x <= y);
            }
        }
    }
}
