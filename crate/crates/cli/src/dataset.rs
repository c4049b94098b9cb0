//! Phantom datasets on disk: one tensor file per image and mask plus a
//! manifest describing how they were generated.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use tulabm_core::phantoms::{self, PhantomPair, PhantomSpec};

use crate::checkpoint::hex;
use crate::error::{CliError, Result};
use crate::io;
use crate::tensorfile::TensorFile;

pub const MANIFEST: &str = "manifest.txt";

pub fn nc_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("pair_{:05}_nc.tlbm", i))
}

pub fn ce_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("pair_{:05}_ce.tlbm", i))
}

pub fn mask_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("pair_{:05}_mask.tlbm", i))
}

pub fn pred_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{}_pred.tlbm", stem))
}

/// Manifest text for `count` pairs starting at index `start`.
pub fn manifest_text(spec: &PhantomSpec, start: u64, count: usize) -> String {
    format!(
        "format = tulabm-phantoms 1\nseed = {}\nstart = {}\ncount = {}\nside = {}\ntumor_count = {},{}\ntumor_radius = {},{}\nenhancement_gain = {}\ntexture_scale = {}\nnc_contrast = {}\n",
        spec.seed,
        start,
        count,
        spec.side,
        spec.tumor_count_range.0,
        spec.tumor_count_range.1,
        spec.tumor_radius_range.0,
        spec.tumor_radius_range.1,
        spec.enhancement_gain,
        spec.background_texture_scale,
        spec.tumor_nc_contrast
    )
}

pub fn manifest_hash(text: &str) -> String {
    hex(&Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub text: String,
    pub count: usize,
}

impl Manifest {
    pub fn hash(&self) -> String {
        manifest_hash(&self.text)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = String::from_utf8(io::read_file(&path)?).map_err(|_| CliError::format(&path, "not UTF-8"))?;
        let count = text
            .lines()
            .find_map(|l| l.strip_prefix("count = "))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| CliError::format(&path, "missing count"))?;
        Ok(Self { text, count })
    }
}

pub fn write_pair(dir: &Path, i: usize, pair: &PhantomPair) -> Result<()> {
    TensorFile::from_image(&pair.nc).write(&nc_path(dir, i))?;
    TensorFile::from_image(&pair.ce).write(&ce_path(dir, i))?;
    TensorFile::from_mask(&pair.mask).write(&mask_path(dir, i))
}

/// Generates pairs `start..start + count` into `dir`.
pub fn write_dataset(dir: &Path, spec: &PhantomSpec, start: u64, count: usize) -> Result<Manifest> {
    io::create_dir(dir)?;
    for i in 0..count {
        let pair = phantoms::generate_pair(spec, start + i as u64)?;
        write_pair(dir, i, &pair)?;
    }
    let text = manifest_text(spec, start, count);
    io::write_atomic(&dir.join(MANIFEST), text.as_bytes())?;
    Ok(Manifest { text, count })
}

fn read_image(path: &Path) -> Result<tulabm_core::Image> {
    TensorFile::read(path)?.to_image().map_err(|e| CliError::format(path, e))
}

pub fn read_nc(dir: &Path, i: usize) -> Result<tulabm_core::Image> {
    read_image(&nc_path(dir, i))
}

pub fn read_ce(dir: &Path, i: usize) -> Result<tulabm_core::Image> {
    read_image(&ce_path(dir, i))
}

pub fn read_mask(dir: &Path, i: usize) -> Result<tulabm_core::TumorMask> {
    let p = mask_path(dir, i);
    TensorFile::read(&p)?.to_mask().map_err(|e| CliError::format(&p, e))
}

pub fn read_pairs(dir: &Path) -> Result<(Manifest, Vec<PhantomPair>)> {
    let manifest = Manifest::read(dir)?;
    let pairs = (0..manifest.count)
        .map(|i| {
            Ok(PhantomPair {
                nc: read_nc(dir, i)?,
                ce: read_ce(dir, i)?,
                mask: read_mask(dir, i)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, pairs))
}

/// Non-contrast inputs in `dir`, sorted by name, as (stem, path). Only
/// `*_nc.tlbm` names are listed; masks are never opened.
pub fn list_inputs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(stem) = name.strip_suffix("_nc.tlbm") {
            out.push((stem.to_string(), path));
        }
    }
    out.sort();
    Ok(out)
}

/// Prediction files in `dir`, sorted, as (stem, path).
pub fn list_predictions(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(stem) = name.strip_suffix("_pred.tlbm") {
            out.push((stem.to_string(), path));
        }
    }
    out.sort();
    Ok(out)
}
