//! Implementations of the `tulabm` subcommands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use tulabm_core::phantoms::{self, PhantomPair};
use tulabm_core::trainer::{self, Context};
use tulabm_core::{Ablation, Codec, CodecKind, Image, StepReport, TrainState};

use crate::checkpoint::Checkpoint;
use crate::config::Settings;
use crate::dataset::{self, Manifest};
use crate::error::{CliError, Result};
use crate::io;
use crate::report::{self, AblationSummary, NamedReport, VariantRun};
use crate::tensorfile::TensorFile;

pub const FINAL_CHECKPOINT: &str = "final.tlck";
pub const STEP_LOG: &str = "steps.tsv";
pub const TIMING_LOG: &str = "timing.tsv";

pub fn checkpoint_name(step: u64) -> String {
    format!("step_{:07}.tlck", step)
}

/// Writes phantom pairs `0..count` into `out`.
pub fn cmd_phantoms(settings: &Settings, count: usize, out: &Path) -> Result<Manifest> {
    let m = dataset::write_dataset(out, &settings.phantom, 0, count)?;
    info!("wrote {} pairs to {} (manifest {})", count, out.display(), m.hash());
    Ok(m)
}

/// Pre-trains a learned codec on the non-contrast and contrast images in
/// `data` and stores it as a checkpoint with step 0.
pub fn cmd_pretrain_codec(settings: &Settings, data: &Path, out: &Path) -> Result<Vec<f64>> {
    if settings.codec.mode != CodecKind::Learned {
        return Err(CliError::Usage(format!(
            "pretrain-codec needs codec.mode = learned, got {}",
            settings.codec.mode
        )));
    }
    let (_, pairs) = dataset::read_pairs(data)?;
    let images: Vec<Image> = pairs.iter().flat_map(|p| [p.nc.clone(), p.ce.clone()]).collect();
    let mut codec = Codec::new(settings.codec, settings.pretrain.seed)?;
    let curve = codec.pretrain(&images, &settings.pretrain)?;
    let mse = codec.reconstruction_mse(&images)?;
    info!("codec pre-trained for {} steps, reconstruction mse {:.6}", curve.len(), mse);
    let ckpt = Checkpoint {
        digest: settings.model_digest(),
        step: 0,
        tensors: codec.params().clone(),
    };
    ckpt.write(out)?;
    Ok(curve)
}

/// Codec for `settings`: parameter-free modes are built directly, the learned
/// mode is read from a pre-training checkpoint.
pub fn load_codec(settings: &Settings, codec_ckpt: Option<&Path>) -> Result<Codec> {
    match (settings.codec.mode, codec_ckpt) {
        (CodecKind::Learned, Some(p)) => Checkpoint::read(p, Some(&settings.model_digest()))?.codec(settings.codec),
        (CodecKind::Learned, None) => Err(CliError::Usage(
            "codec.mode = learned needs --codec-checkpoint from pretrain-codec".into(),
        )),
        (_, _) => Ok(Codec::new(settings.codec, settings.train.seed)?),
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub reports: Vec<StepReport>,
    pub final_checkpoint: PathBuf,
}

/// Trains on `pairs`, writing periodic and final checkpoints plus step logs
/// into `out`. With `resume`, continues from that checkpoint's state; the
/// logs then cover only the resumed steps.
pub fn train_run(
    settings: &Settings,
    pairs: &[PhantomPair],
    codec: &Codec,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    io::create_dir(out)?;
    let digest = settings.model_digest();
    let state = match resume {
        Some(p) => Checkpoint::read(p, Some(&digest))?.train_state(&settings.model)?,
        None => TrainState::fresh(&settings.model, settings.train.seed)?,
    };
    let data = trainer::prepare(pairs, codec, settings.boundary())?;
    let ctx = Context {
        train: &settings.train,
        denoiser: &settings.model,
        bridge: &settings.bridge,
        codec,
    };
    let every = settings.train.checkpoint_every;
    let mut done: Vec<StepReport> = Vec::new();
    let result = trainer::train(&data, &ctx, state.clone(), |st, r| {
        done.push(*r);
        if r.step % 100 == 0 {
            info!("step {} total {:.6}", r.step, r.total_loss);
        }
        if every > 0 && st.step % every == 0 && st.step < settings.train.steps {
            Checkpoint::from_state(digest, st, codec)
                .write(&out.join(checkpoint_name(st.step)))
                .map_err(|e| tulabm_core::Error::Usage(format!("checkpoint at step {}: {}", st.step, e)))?;
        }
        Ok(())
    });
    io::write_atomic(&out.join(STEP_LOG), report::step_log(&done).as_bytes())?;
    io::write_atomic(&out.join(TIMING_LOG), report::timing_log(&done).as_bytes())?;
    let (state, reports) = result?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    Checkpoint::from_state(digest, &state, codec).write(&final_checkpoint)?;
    Ok(TrainOutcome {
        state,
        reports,
        final_checkpoint,
    })
}

pub fn cmd_train(settings: &Settings, data: &Path, codec_ckpt: Option<&Path>, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome> {
    let (manifest, pairs) = dataset::read_pairs(data)?;
    if pairs.is_empty() {
        return Err(CliError::Usage(format!("{} holds no pairs", data.display())));
    }
    info!("training on {} pairs (manifest {})", pairs.len(), manifest.hash());
    let codec = load_codec(settings, codec_ckpt)?;
    let outcome = train_run(settings, &pairs, &codec, out, resume);
    if let Err(CliError::Core(tulabm_core::Error::NonFinite { step, detail })) = &outcome {
        warn!("non-finite loss at step {}: {}", step, detail);
    }
    outcome
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferRecord {
    pub input: PathBuf,
    pub output: PathBuf,
    pub drift_evaluations: usize,
    pub wall_time_s: f64,
}

/// Translates a single `*_nc.tlbm` file, or every such file in a directory.
/// Only the non-contrast tensors are opened.
pub fn cmd_infer(settings: &Settings, checkpoint: &Path, input: &Path, out: &Path, seed: u64) -> Result<Vec<InferRecord>> {
    let ckpt = Checkpoint::read(checkpoint, Some(&settings.model_digest()))?;
    let codec = ckpt.codec(settings.codec)?;
    let state = ckpt.train_state(&settings.model)?;
    let jobs: Vec<(String, PathBuf, PathBuf)> = if input.is_dir() {
        io::create_dir(out)?;
        dataset::list_inputs(input)?
            .into_iter()
            .map(|(stem, p)| {
                let o = dataset::pred_path(out, &stem);
                (stem, p, o)
            })
            .collect()
    } else {
        vec![(String::new(), input.to_path_buf(), out.to_path_buf())]
    };
    let mut records = Vec::with_capacity(jobs.len());
    for (index, (_, src, dst)) in jobs.into_iter().enumerate() {
        let nc = TensorFile::read(&src)?.to_image().map_err(|e| CliError::format(&src, e))?;
        let start = Instant::now();
        let pred = trainer::predict(&state.params, &settings.model, &settings.bridge, &codec, &nc, seed, index as u64)?;
        let wall = start.elapsed().as_secs_f64();
        TensorFile::from_image(&pred.image).write(&dst)?;
        io::write_atomic(&dst.with_extension("pgm"), &io::pgm_bytes(&pred.image))?;
        info!("{} -> {} ({} drift evaluations, {:.4} s)", src.display(), dst.display(), pred.drift_evaluations, wall);
        records.push(InferRecord {
            input: src,
            output: dst,
            drift_evaluations: pred.drift_evaluations,
            wall_time_s: wall,
        });
    }
    Ok(records)
}

/// Scores `*_pred.tlbm` files in `pred` against the pairs in `data` and writes
/// `<out>.txt` and `<out>.json`.
pub fn cmd_eval(pred: &Path, data: &Path, out: &Path) -> Result<NamedReport> {
    let preds = dataset::list_predictions(pred)?;
    let manifest = Manifest::read(data)?;
    if preds.len() != manifest.count {
        return Err(CliError::CountMismatch(format!(
            "{} predictions in {} but {} pairs in {}",
            preds.len(),
            pred.display(),
            manifest.count,
            data.display()
        )));
    }
    let mut names = Vec::with_capacity(preds.len());
    let mut records = Vec::with_capacity(preds.len());
    for (i, (stem, path)) in preds.iter().enumerate() {
        let expected = format!("pair_{:05}", i);
        if stem != &expected {
            return Err(CliError::CountMismatch(format!("expected prediction {} but found {}", expected, stem)));
        }
        let p = TensorFile::read(path)?.to_image().map_err(|e| CliError::format(path, e))?;
        let target = dataset::read_ce(data, i)?;
        let mask = dataset::read_mask(data, i)?;
        records.push(tulabm_core::metrics::image_metrics(&p, &target, &mask)?);
        names.push(stem.clone());
    }
    let report = tulabm_core::MetricsReport::from_records(records);
    write_metrics(out, &names, &report)?;
    Ok(NamedReport { names, report })
}

pub fn write_metrics(out: &Path, names: &[String], report: &tulabm_core::MetricsReport) -> Result<()> {
    let txt = out.with_extension("txt");
    let json = out.with_extension("json");
    io::write_atomic(&txt, report::metrics_table(names, report).as_bytes())?;
    let named = NamedReport {
        names: names.to_vec(),
        report: report.clone(),
    };
    let body = serde_json::to_string_pretty(&named).expect("report serializes");
    io::write_atomic(&json, body.as_bytes())
}

/// Trains and evaluates every ablation variant for each seed. Training uses
/// the first `train_count` pairs and evaluation the following `eval_count`.
pub fn run_ablation(settings: &Settings, pairs: &[PhantomPair], manifest_hash: &str, seeds: &[u64]) -> Result<AblationSummary> {
    let (n, k) = (settings.ablate.train_count, settings.ablate.eval_count);
    if pairs.len() < n + k || n == 0 {
        return Err(CliError::CountMismatch(format!("ablate needs {} + {} pairs, have {}", n, k, pairs.len())));
    }
    let (train_set, rest) = pairs.split_at(n);
    let eval_set = &rest[..k];
    let codec = Codec::new(settings.codec, 0)?;
    let mut runs = Vec::new();
    for &seed in seeds {
        for ablation in Ablation::ALL {
            let mut s = settings.ablation_variant(ablation);
            s.train.seed = seed;
            let data = trainer::prepare(train_set, &codec, s.boundary())?;
            let ctx = Context {
                train: &s.train,
                denoiser: &s.model,
                bridge: &s.bridge,
                codec: &codec,
            };
            let start = Instant::now();
            let (state, reports) = trainer::train(&data, &ctx, TrainState::fresh(&s.model, seed)?, |_, _| Ok(()))?;
            let totals: Vec<f64> = reports.iter().map(|r| r.total_loss).collect();
            let ma = trainer::moving_average(&totals, 100);
            let report = trainer::evaluate(&state.params, &s.model, eval_set, &s.bridge, &codec, seed)?;
            info!(
                "{} seed {}: {} steps in {:.1} s, tumor ssim {:?}",
                ablation,
                seed,
                reports.len(),
                start.elapsed().as_secs_f64(),
                report.tumor_ssim.map(|a| a.mean)
            );
            runs.push(VariantRun {
                ablation,
                seed,
                report,
                early_total: ma.get(99).or(ma.last()).copied().unwrap_or(f64::NAN),
                final_total: ma.last().copied().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(AblationSummary {
        manifest_hash: manifest_hash.to_string(),
        train_count: n,
        eval_count: k,
        steps: settings.train.steps,
        runs,
    })
}

/// Ablation over a dataset directory, or over freshly generated phantoms when
/// `data` is `None`. Writes `ablation.txt` and `ablation.json` into `out`.
pub fn cmd_ablate(settings: &Settings, data: Option<&Path>, out: &Path, seeds: &[u64]) -> Result<AblationSummary> {
    let (hash, pairs) = match data {
        Some(d) => {
            let (m, p) = dataset::read_pairs(d)?;
            (m.hash(), p)
        }
        None => {
            let count = settings.ablate.train_count + settings.ablate.eval_count;
            let text = dataset::manifest_text(&settings.phantom, 0, count);
            (dataset::manifest_hash(&text), phantoms::generate_dataset(&settings.phantom, count)?)
        }
    };
    let summary = run_ablation(settings, &pairs, &hash, seeds)?;
    io::create_dir(out)?;
    io::write_atomic(&out.join("ablation.txt"), summary.table().as_bytes())?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    io::write_atomic(&out.join("ablation.json"), json.as_bytes())?;
    info!("ablation written to {} (manifest {})", out.display(), summary.manifest_hash);
    Ok(summary)
}
