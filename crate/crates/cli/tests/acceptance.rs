//! Acceptance suite: one PASS/FAIL line per criterion at the stated
//! tolerances and time budgets.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use tulabm_cli::commands;
use tulabm_cli::config::Settings;
use tulabm_cli::dataset;
use tulabm_core::boundary::{boundary_set, distance_map};
use tulabm_core::bridge::{self, BridgeConfig};
use tulabm_core::codec::{CodecKind, Latent};
use tulabm_core::metrics::{psnr, ssim};
use tulabm_core::phantoms::{self, PhantomSpec};
use tulabm_core::rng::{self, Domain};
use tulabm_core::trainer::{self, Context, DriftSource, PreparedPair};
use tulabm_core::tubam::{attend_heads, LatentMask};
use tulabm_core::{denoiser, Ablation, Codec, CodecConfig, DenoiserConfig, Image, Tensor, TrainConfig, TrainState, TumorMask};

type Outcome = Result<String, String>;

/// Criteria recorded as not reproduced at desk scale. A failure here is
/// reported but does not fail the target; an unexpected pass is reported too.
const KNOWN_UNMET: &[u32] = &[9];

const REFERENCE: &str = include_str!("../configs/reference.cfg");

fn latent(seed: u64, shape: &[usize]) -> Latent {
    let n = shape.iter().product();
    let mut r = rng::keyed(seed, Domain::Sample, 9_000, 0);
    Latent::new(Tensor::from_vec(shape, rng::normals(&mut r, n)).unwrap(), CodecKind::Identity)
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bridge_algebra() -> Outcome {
    let mut worst_end = 0.0f64;
    let mut worst_inv = 0.0f64;
    let mut r = rng::keyed(1, Domain::Sample, 0, 0);
    for i in 0..1000u64 {
        let z0 = latent(3 * i, &[1, 8, 8]);
        let z1 = latent(3 * i + 1, &[1, 8, 8]);
        let eps = latent(3 * i + 2, &[1, 8, 8]).data;
        let sigma = r.random_range(0.0..1.0);
        let a = bridge::interpolate(&z0, &z1, 0.0, sigma, &eps).map_err(|e| e.to_string())?;
        let b = bridge::interpolate(&z0, &z1, 1.0, sigma, &eps).map_err(|e| e.to_string())?;
        worst_end = worst_end.max(a.data.max_abs_diff(&z0.data)).max(b.data.max_abs_diff(&z1.data));

        let t: f64 = r.random_range(0.0..0.999);
        let zt = bridge::interpolate(&z0, &z1, t, sigma, &eps).map_err(|e| e.to_string())?;
        let v = bridge::target_drift(&z1, &zt, t).map_err(|e| e.to_string())?;
        let back = bridge::predict_terminal(&v, &zt, t).map_err(|e| e.to_string())?;
        for (x, y) in back.data.data().iter().zip(z1.data.data()) {
            worst_inv = worst_inv.max((x - y).abs() / y.abs().max(1.0));
        }
    }
    check(
        worst_end <= 1e-9 && worst_inv <= 1e-6,
        format!("endpoint err {:.2e} (<= 1e-9), inversion rel err {:.2e} (<= 1e-6)", worst_end, worst_inv),
    )
}

fn oracle_sampler() -> Outcome {
    let z0 = latent(11, &[1, 16, 16]);
    let z1 = latent(12, &[1, 16, 16]);
    let mut parts = Vec::new();
    let mut ok = true;
    for k in [1usize, 2, 4, 8] {
        let cfg = BridgeConfig {
            timesteps: BridgeConfig::uniform_schedule(k),
            ..Default::default()
        };
        let mut calls = 0;
        let mut r = rng::keyed(0, Domain::Inference, k as u64, 0);
        let out = bridge::sample(
            &z0,
            |z, t| {
                calls += 1;
                bridge::target_drift(&z1, z, t)
            },
            &cfg,
            &mut r,
        )
        .map_err(|e| e.to_string())?;
        let err = out.data.max_abs_diff(&z1.data);
        ok &= err <= 1e-6 && calls == k;
        parts.push(format!("k={} err {:.1e}", k, err));
    }
    check(ok, parts.join(", "))
}

fn noise_law() -> Outcome {
    let z = latent(5, &[1, 1, 1]);
    let sigma = 0.008;
    let n = 10_000;
    let mut r = rng::keyed(2, Domain::Sample, 0, 0);
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            let eps = Tensor::from_vec(&[1, 1, 1], vec![rng::normal(&mut r)]).unwrap();
            bridge::interpolate(&z, &z, 0.5, sigma, &eps).unwrap().data.data()[0]
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / n as f64;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let expected = sigma * sigma * 0.25;
    let rel = (var - expected).abs() / expected;
    check(rel <= 0.1, format!("variance {:.4e} vs {:.4e}, rel err {:.3} (<= 0.1)", var, expected, rel))
}

fn plain_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Vec<f64> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let logits: Vec<f64> = (0..n)
            .map(|j| (0..d).map(|c| q.data()[i * d + c] * k.data()[j * d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            for c in 0..d {
                out[i * d + c] += e[j] / z * v.data()[j * d + c];
            }
        }
    }
    out
}

fn tubam() -> Outcome {
    let (n, d) = (16, 8);
    let mk = |s| {
        let mut r = rng::keyed(s, Domain::Init, 0, 0);
        Tensor::from_vec(&[n, d], rng::normals(&mut r, n * d)).unwrap()
    };
    let (q, k, v) = (mk(1), mk(2), mk(3));
    let mask = LatentMask::new(4, 4, (0..16).map(|i| (i % 3 == 0) as u8).collect()).unwrap();
    let ones = LatentMask::new(4, 4, vec![1; 16]).unwrap();
    let biased = attend_heads(&q, &k, &v, 2, Some(&mask), 0.5).map_err(|e| e.to_string())?;
    let row_err = biased
        .probs
        .iter()
        .flat_map(|p| p.chunks(n).map(|r| (r.iter().sum::<f64>() - 1.0).abs()))
        .fold(0.0, f64::max);
    let reference = plain_attention(&q, &k, &v);
    let diff = |a: &Tensor| a.data().iter().zip(&reference).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let zero_alpha = diff(&attend_heads(&q, &k, &v, 1, Some(&mask), 0.0).unwrap().output);
    let all_ones = diff(&attend_heads(&q, &k, &v, 1, Some(&ones), 0.5).unwrap().output);

    let z = Tensor::zeros(&[2, 1]);
    let vals = Tensor::from_vec(&[2, 1], vec![0.0, 1.0]).unwrap();
    let m2 = LatentMask::new(1, 2, vec![1, 0]).unwrap();
    let hand = attend_heads(&z, &z, &vals, 1, Some(&m2), 3f64.ln()).unwrap();
    let p = &hand.probs[0];
    let hand_err = [(p[0], 0.75), (p[1], 0.25), (p[2], 0.5), (p[3], 0.5), (hand.output.data()[0], 0.25), (hand.output.data()[1], 0.5)]
        .iter()
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(
        row_err <= 1e-6 && zero_alpha <= 1e-7 && all_ones <= 1e-7 && hand_err <= 1e-9,
        format!(
            "row-sum err {:.1e}, alpha=0 err {:.1e}, all-ones err {:.1e}, hand example err {:.1e}",
            row_err, zero_alpha, all_ones, hand_err
        ),
    )
}

fn brute_distance(mask: &TumorMask, d_max: f64) -> Vec<f64> {
    let (h, w) = mask.dims();
    let boundary = boundary_set(mask);
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) || boundary.is_empty() {
                continue;
            }
            let best = boundary
                .iter()
                .map(|&(br, bc)| {
                    let (dy, dx) = (r as i64 - br as i64, c as i64 - bc as i64);
                    (dy * dy + dx * dx) as f64
                })
                .fold(f64::INFINITY, f64::min);
            out[r * w + c] = best.sqrt().min(d_max) / d_max;
        }
    }
    out
}

fn distance_transform() -> Outcome {
    let mut r = rng::keyed(4, Domain::Phantom, 0, 0);
    let mut masks = vec![
        TumorMask::zeros(32, 32),
        TumorMask::from_fn(32, 32, |_, _| true),
        TumorMask::from_fn(32, 32, |y, x| y == 13 && x == 20),
        TumorMask::from_fn(1, 1, |_, _| true),
    ];
    while masks.len() < 500 {
        let (h, w) = (r.random_range(1..=32), r.random_range(1..=32));
        let density = r.random_range(0.05..0.95);
        masks.push(TumorMask::from_fn(h, w, |_, _| r.random_bool(density)));
    }
    let mut mismatches = 0;
    for m in &masks {
        let fast = distance_map(m, 8.0).map_err(|e| e.to_string())?;
        if fast.data() != brute_distance(m, 8.0).as_slice() {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("{} masks, {} mismatches", masks.len(), mismatches))
}

fn gradient_check() -> Outcome {
    let spec = PhantomSpec::default();
    let pairs = phantoms::generate_dataset(&spec, 2).map_err(|e| e.to_string())?;
    let codec = Codec::new(CodecConfig::default(), 0).unwrap();
    let train = TrainConfig::default();
    let model = DenoiserConfig::default();
    let bridge_cfg = BridgeConfig::default();
    let data = trainer::prepare(&pairs, &codec, &train.boundary).map_err(|e| e.to_string())?;
    let ctx = Context {
        train: &train,
        denoiser: &model,
        bridge: &bridge_cfg,
        codec: &codec,
    };
    let batch: Vec<&PreparedPair> = data.iter().collect();
    let samples = trainer::draw_batch_samples(&ctx, &batch, 0).map_err(|e| e.to_string())?;

    // Move away from the zero-initialized output layer so every path carries gradient.
    let mut params = denoiser::init(&model, 0).unwrap();
    let mut r = rng::keyed(6, Domain::Init, 1, 1);
    for (_, t) in params.table.iter_mut() {
        for x in t.data_mut() {
            *x += 0.05 * rng::normal(&mut r);
        }
    }
    let total = |p: &tulabm_core::DenoiserParams| {
        let o = trainer::build_objective(&ctx, &batch, &samples, DriftSource::Network(p)).unwrap();
        o.report(0, 0.0)
    };
    let obj = trainer::build_objective(&ctx, &batch, &samples, DriftSource::Network(&params)).map_err(|e| e.to_string())?;
    let rep = obj.report(0, 0.0);
    if rep.boundary_loss <= 0.0 || rep.pixel_loss <= 0.0 || rep.latent_loss <= 0.0 {
        return Err("a loss term is inactive".into());
    }
    let grads = obj.gradients().unwrap();
    let names: Vec<String> = params.table.names().cloned().collect();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 30 {
        let name = &names[r.random_range(0..names.len())];
        let idx = r.random_range(0..params.table.get(name).unwrap().len());
        let g = grads[name].data()[idx];
        let mut plus = params.clone();
        plus.table.get_mut(name).unwrap().data_mut()[idx] += h;
        let mut minus = params.clone();
        minus.table.get_mut(name).unwrap().data_mut()[idx] -= h;
        let fd = (total(&plus).total_loss - total(&minus).total_loss) / (2.0 * h);
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
        worst = worst.max(rel);
        checked += 1;
    }
    check(worst <= 1e-3, format!("{} parameters, worst relative error {:.2e} (<= 1e-3)", checked, worst))
}

fn lcg(seed: u64, n: usize) -> Vec<f64> {
    let mut x = seed;
    (0..n)
        .map(|_| {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (x >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

fn metrics_oracles() -> Outcome {
    let zeros = Image::zeros(16, 16);
    let ones = Image::from_fn(16, 16, |_, _| 1.0);
    let tenth = Image::from_fn(16, 16, |_, _| 0.1);
    let p20 = (psnr(&zeros, &tenth, 1.0).unwrap() - 20.0).abs();
    let p0 = psnr(&zeros, &ones, 1.0).unwrap().abs();
    let noise = Image::from_vec(16, 16, lcg(9, 256)).unwrap();
    let same = (ssim(&noise, &noise, 1.0).unwrap() - 1.0).abs();
    let c1 = 1e-4;
    let closed = (ssim(&zeros, &ones, 1.0).unwrap() - c1 / (1.0 + c1)).abs();
    let a = Image::from_vec(32, 32, lcg(1, 1024)).unwrap();
    let nz = lcg(2, 1024);
    let b = Image::from_fn(32, 32, |r, c| (0.7 * a.get(r, c) + 0.3 * nz[r * 32 + c]).clamp(0.0, 1.0));
    let pinned = (ssim(&a, &b, 1.0).unwrap() - 0.8898396607334492).abs();
    check(
        p20 <= 1e-9 && p0 <= 1e-9 && same <= 1e-12 && closed <= 1e-9 && pinned <= 1e-6,
        format!(
            "psnr 20dB err {:.1e}, 0dB err {:.1e}, identical ssim err {:.1e}, constant ssim err {:.1e}, pinned ssim err {:.1e}",
            p20, p0, same, closed, pinned
        ),
    )
}

fn loss_composition() -> Outcome {
    let pairs = phantoms::generate_dataset(&PhantomSpec::default(), 16).map_err(|e| e.to_string())?;
    let codec = Codec::new(CodecConfig::default(), 0).unwrap();
    let model = DenoiserConfig::default();
    let bridge_cfg = BridgeConfig::default();
    let mut worst = 0.0f64;
    let mut count = 0;
    for ablation in Ablation::ALL {
        let train = TrainConfig {
            steps: 20,
            ablation,
            ..Default::default()
        };
        let data = trainer::prepare(&pairs, &codec, &train.boundary).unwrap();
        let ctx = Context {
            train: &train,
            denoiser: &model,
            bridge: &bridge_cfg,
            codec: &codec,
        };
        let (_, reports) = trainer::train(&data, &ctx, TrainState::fresh(&model, 0).unwrap(), |_, _| Ok(())).map_err(|e| e.to_string())?;
        for r in reports {
            worst = worst.max((r.total_loss - (r.latent_loss + 18.0 * r.pixel_loss + 14.0 * r.boundary_loss)).abs());
            count += 1;
        }
    }
    check(worst <= 1e-6, format!("{} reports, worst deviation {:.1e} (<= 1e-6)", count, worst))
}

fn reference_benchmark() -> Outcome {
    let settings = Settings::parse(REFERENCE).map_err(|e| e.to_string())?.with_seed(0);
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let summary = commands::cmd_ablate(&settings, None, dir.path(), &[0, 1, 2]).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    print!("{}", summary.table());
    for r in &summary.runs {
        println!(
            "    {:<15} seed {} loss(ma100) step 100 {:.4} -> final {:.4}, median tumor ssim {:.4}",
            r.ablation.to_string(),
            r.seed,
            r.early_total,
            r.final_total,
            {
                let mut v: Vec<f64> = r.report.records.iter().filter_map(|m| m.tumor_ssim).collect();
                v.sort_by(f64::total_cmp);
                v[v.len() / 2]
            }
        );
    }
    let decreasing = summary.runs.iter().all(|r| r.final_total < r.early_total);
    let full = summary.median_tumor_ssim(Ablation::Full).unwrap_or(f64::NAN);
    let no_bl = summary.median_tumor_ssim(Ablation::NoBl).unwrap_or(f64::NAN);
    let no_tubam = summary.median_tumor_ssim(Ablation::NoBlNoTubam).unwrap_or(f64::NAN);
    let gap = full - no_bl;
    let ok = decreasing && gap >= 0.01 && no_bl >= no_tubam - 0.005 && elapsed < Duration::from_secs(1800);
    check(
        ok,
        format!(
            "(a) loss decreasing in all runs: {}; (b) median tumor SSIM full {:.4}, no_bl {:.4}, no_bl_no_tubam {:.4}; full - no_bl = {:+.4} (>= 0.01), no_bl - no_bl_no_tubam = {:+.4} (>= -0.005); {:.0} s (< 1800)",
            decreasing,
            full,
            no_bl,
            no_tubam,
            gap,
            no_bl - no_tubam,
            elapsed.as_secs_f64()
        ),
    )
}

const SMALL: &str = "phantom.side = 32\nphantom.radius_min = 3\nphantom.radius_max = 6\nmodel.base_channels = 4\nmodel.time_embed_dim = 8\nmodel.head_dim = 4\ntrain.batch_size = 2\ntrain.lr = 0.001\ntrain.steps = 20\ntrain.checkpoint_every = 0\n";

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

fn inference_contract() -> Outcome {
    let settings = Settings::parse(SMALL).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    commands::cmd_phantoms(&settings, 4, &data).map_err(|e| e.to_string())?;
    let (_, pairs) = dataset::read_pairs(&data).map_err(|e| e.to_string())?;
    let codec = commands::load_codec(&settings, None).map_err(|e| e.to_string())?;
    let run = commands::train_run(&settings, &pairs, &codec, &dir.path().join("run"), None).map_err(|e| e.to_string())?;
    let infer = |out: &str| commands::cmd_infer(&settings, &run.final_checkpoint, &data, &dir.path().join(out), 0);
    let first = infer("a").map_err(|e| e.to_string())?;
    infer("b").map_err(|e| e.to_string())?;
    // Corrupt every mask: inference must neither fail nor change.
    for i in 0..4 {
        fs::write(dataset::mask_path(&data, i), b"not a tensor").unwrap();
    }
    infer("c").map_err(|e| e.to_string())?;
    let a = dir_bytes(&dir.path().join("a"));
    let deterministic = a == dir_bytes(&dir.path().join("b"));
    let mask_free = a == dir_bytes(&dir.path().join("c"));
    let max_evals = first.iter().map(|r| r.drift_evaluations).max().unwrap_or(0);
    let mean_time = first.iter().map(|r| r.wall_time_s).sum::<f64>() / first.len() as f64;
    check(
        max_evals <= 4 && deterministic && mask_free,
        format!(
            "drift evaluations {} (<= 4), byte-identical reruns {}, unchanged with corrupted masks {}, {:.4} s/image",
            max_evals, deterministic, mask_free, mean_time
        ),
    )
}

fn determinism() -> Outcome {
    let settings = Settings::parse(SMALL).map_err(|e| e.to_string())?.with_seed(5);
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    commands::cmd_phantoms(&settings, 4, &data).map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["one", "two"] {
        let out = dir.path().join(name);
        let settings = Settings {
            train: TrainConfig {
                checkpoint_every: 10,
                ..settings.train.clone()
            },
            ..settings.clone()
        };
        let run = commands::cmd_train(&settings, &data, None, &out, None).map_err(|e| e.to_string())?;
        let preds = out.join("preds");
        commands::cmd_infer(&settings, &run.final_checkpoint, &data, &preds, 5).map_err(|e| e.to_string())?;
        commands::cmd_eval(&preds, &data, &out.join("report")).map_err(|e| e.to_string())?;
        fs::remove_dir_all(&preds).unwrap();
        fs::remove_file(out.join(commands::TIMING_LOG)).unwrap();
        outputs.push(dir_bytes(&out));
    }
    let files = outputs[0].len();
    check(
        outputs[0] == outputs[1],
        format!("{} files (checkpoints, step log, reports) identical across runs: {}", files, outputs[0] == outputs[1]),
    )
}

fn main() {
    let criteria: Vec<(u32, &str, fn() -> Outcome, Option<Duration>)> = vec![
        (1, "bridge algebra", bridge_algebra, Some(Duration::from_secs(1))),
        (2, "oracle sampler", oracle_sampler, Some(Duration::from_secs(1))),
        (3, "noise law", noise_law, Some(Duration::from_secs(5))),
        (4, "tumor-biased attention", tubam, Some(Duration::from_secs(1))),
        (5, "distance transform", distance_transform, Some(Duration::from_secs(30))),
        (6, "gradient check", gradient_check, Some(Duration::from_secs(120))),
        (7, "metrics oracles", metrics_oracles, None),
        (8, "loss composition", loss_composition, None),
        (9, "training smoke and ablation ordering", reference_benchmark, Some(Duration::from_secs(1800))),
        (10, "inference contract", inference_contract, None),
        (11, "determinism", determinism, None),
    ];
    let only: Option<u32> = std::env::var("TULABM_ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut unexpected = Vec::new();
    let mut failed = Vec::new();
    for (id, name, f, budget) in criteria {
        if only.is_some_and(|o| o != id) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let over = budget.is_some_and(|b| elapsed > b);
        let (pass, detail) = match outcome {
            Ok(d) if !over => (true, d),
            Ok(d) => (false, format!("{}; over time budget", d)),
            Err(d) => (false, d),
        };
        println!(
            "[{}] criterion {:>2} {}: {} ({:.2} s{})",
            if pass { "PASS" } else { "FAIL" },
            id,
            name,
            detail,
            elapsed.as_secs_f64(),
            budget.map_or(String::new(), |b| format!(", budget {} s", b.as_secs()))
        );
        if !pass {
            failed.push(id);
            if !KNOWN_UNMET.contains(&id) {
                unexpected.push(id);
            }
        }
    }
    println!("acceptance: {} failed {:?}; not reproduced at desk scale {:?}", failed.len(), failed, KNOWN_UNMET);
    if !unexpected.is_empty() {
        std::process::exit(1);
    }
}
