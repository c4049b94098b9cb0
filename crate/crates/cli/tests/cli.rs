use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tulabm_cli::report::{parse_metrics_rows, parse_step_log};
use tulabm_cli::{Checkpoint, Settings};
use tulabm_core::denoiser;

const SMALL: &str = "\
phantom.side = 32
phantom.radius_min = 3
phantom.radius_max = 6
model.base_channels = 4
model.time_embed_dim = 8
model.head_dim = 4
train.batch_size = 2
train.lr = 0.001
train.checkpoint_every = 2
ablate.train_count = 4
ablate.eval_count = 2
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tulabm"));
    c.env("TULABM_LOG", "error");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{:?} failed: {}", args, String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

fn fixture(extra: &str, count: usize) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("small.cfg");
    fs::write(&config, format!("{}{}", SMALL, extra)).unwrap();
    let data = root.join("data");
    ok(&["phantoms", "--config", p(&config), "--seed", "7", "--count", &count.to_string(), "--out", p(&data)]);
    Fixture { _dir: dir, root, config, data }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (path.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&path).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn phantoms_are_byte_deterministic() {
    let f = fixture("", 4);
    let again = f.root.join("again");
    ok(&["phantoms", "--config", p(&f.config), "--seed", "7", "--count", "4", "--out", p(&again)]);
    assert_eq!(dir_bytes(&f.data), dir_bytes(&again));
    assert_eq!(dir_bytes(&f.data).len(), 13);
}

#[test]
fn zero_count_writes_manifest_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty");
    ok(&["phantoms", "--count", "0", "--out", p(&out)]);
    let files = dir_bytes(&out);
    assert_eq!(files.len(), 1);
    assert_eq!(files[0].0, "manifest.txt");
}

#[test]
fn malformed_flags_exit_2_with_usage() {
    let out = run(&["phantoms", "--count", "many", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("usage"));
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["infer", "--codec", "vae", "--checkpoint", "a", "--input", "b", "--out", "c"]).status.code(), Some(2));
}

#[test]
fn zero_steps_writes_init_checkpoint() {
    let f = fixture("", 3);
    let run_dir = f.root.join("run0");
    ok(&["train", "--config", p(&f.config), "--data", p(&f.data), "--steps", "0", "--out", p(&run_dir)]);
    let settings = Settings::load(&f.config).unwrap();
    let ck = Checkpoint::read(&run_dir.join("final.tlck"), Some(&settings.model_digest())).unwrap();
    assert_eq!(ck.step, 0);
    assert_eq!(ck.train_state(&settings.model).unwrap().params, denoiser::init(&settings.model, 0).unwrap());
}

#[test]
fn training_is_reproducible_and_resumable() {
    let f = fixture("", 5);
    let (a, b, c) = (f.root.join("a"), f.root.join("b"), f.root.join("c"));
    for d in [&a, &b] {
        ok(&["train", "--config", p(&f.config), "--data", p(&f.data), "--steps", "4", "--seed", "3", "--out", p(d)]);
    }
    let final_a = fs::read(a.join("final.tlck")).unwrap();
    assert_eq!(final_a, fs::read(b.join("final.tlck")).unwrap());
    assert_eq!(fs::read(a.join("steps.tsv")).unwrap(), fs::read(b.join("steps.tsv")).unwrap());
    assert!(a.join("step_0000002.tlck").exists());

    let mid = a.join("step_0000002.tlck");
    ok(&["train", "--config", p(&f.config), "--data", p(&f.data), "--steps", "4", "--seed", "3", "--resume", p(&mid), "--out", p(&c)]);
    assert_eq!(final_a, fs::read(c.join("final.tlck")).unwrap());
    let full = parse_step_log(&fs::read_to_string(a.join("steps.tsv")).unwrap()).unwrap();
    let tail = parse_step_log(&fs::read_to_string(c.join("steps.tsv")).unwrap()).unwrap();
    assert_eq!(tail.len(), 2);
    assert!(tail.iter().zip(&full[2..]).all(|(x, y)| x.same_losses(y)));
    for r in &full {
        assert!((r.total_loss - (r.latent_loss + 18.0 * r.pixel_loss + 14.0 * r.boundary_loss)).abs() <= 1e-6);
    }
}

#[test]
fn no_bl_logs_zero_boundary_loss() {
    let f = fixture("", 3);
    let out = f.root.join("nobl");
    ok(&["train", "--config", p(&f.config), "--data", p(&f.data), "--steps", "3", "--ablation", "no_bl", "--out", p(&out)]);
    let log = parse_step_log(&fs::read_to_string(out.join("steps.tsv")).unwrap()).unwrap();
    assert_eq!(log.len(), 3);
    assert!(log.iter().all(|r| r.boundary_loss == 0.0));
}

#[test]
fn non_finite_loss_exits_3() {
    let f = fixture("train.lr = 1e300\n", 3);
    let out = run(&["train", "--config", p(&f.config), "--data", p(&f.data), "--steps", "5", "--out", p(&f.root.join("nan"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn infer_is_deterministic_mask_free_and_digest_checked() {
    let f = fixture("", 3);
    let run_dir = f.root.join("run");
    ok(&["train", "--config", p(&f.config), "--data", p(&f.data), "--steps", "2", "--out", p(&run_dir)]);
    let ck = run_dir.join("final.tlck");
    let (o1, o2, o3) = (f.root.join("p1"), f.root.join("p2"), f.root.join("p3"));
    let stdout = ok(&["infer", "--config", p(&f.config), "--checkpoint", p(&ck), "--input", p(&f.data), "--out", p(&o1)]).stdout;
    let text = String::from_utf8(stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    for line in text.lines() {
        let evals: usize = line.split("drift_evaluations=").nth(1).unwrap().split('\t').next().unwrap().parse().unwrap();
        assert!(evals <= 4);
        assert!(line.contains("wall_time_s="));
    }
    ok(&["infer", "--config", p(&f.config), "--checkpoint", p(&ck), "--input", p(&f.data), "--out", p(&o2)]);
    assert_eq!(dir_bytes(&o1), dir_bytes(&o2));

    for i in 0..3 {
        fs::remove_file(f.data.join(format!("pair_{:05}_mask.tlbm", i))).unwrap();
    }
    ok(&["infer", "--config", p(&f.config), "--checkpoint", p(&ck), "--input", p(&f.data), "--out", p(&o3)]);
    assert_eq!(dir_bytes(&o1), dir_bytes(&o3));

    let single = f.root.join("one.tlbm");
    ok(&["infer", "--config", p(&f.config), "--checkpoint", p(&ck), "--input", p(&f.data.join("pair_00001_nc.tlbm")), "--out", p(&single)]);
    assert_eq!(fs::read(&single).unwrap(), fs::read(o1.join("pair_00001_pred.tlbm")).unwrap());
    assert!(f.root.join("one.pgm").exists());

    let other = f.root.join("other.cfg");
    fs::write(&other, format!("{}model.base_channels = 8\n", SMALL)).unwrap();
    let out = run(&["infer", "--config", p(&other), "--checkpoint", p(&ck), "--input", p(&f.data), "--out", p(&f.root.join("p4"))]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn eval_reports_and_count_checks() {
    let f = fixture("phantom.tumor_count_min = 0\nphantom.tumor_count_max = 1\n", 4);
    let preds = f.root.join("preds");
    fs::create_dir(&preds).unwrap();
    for i in 0..4 {
        fs::copy(f.data.join(format!("pair_{:05}_ce.tlbm", i)), preds.join(format!("pair_{:05}_pred.tlbm", i))).unwrap();
    }
    let report = f.root.join("report");
    ok(&["eval", "--pred", p(&preds), "--data", p(&f.data), "--out", p(&report)]);
    let text = fs::read_to_string(report.with_extension("txt")).unwrap();
    let rows = parse_metrics_rows(&text).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|(_, m)| m.ssim == 1.0 && m.psnr == 100.0));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.with_extension("json")).unwrap()).unwrap();
    assert!(json["report"]["ssim"]["mean"].as_f64().unwrap() == 1.0);

    fs::remove_file(preds.join("pair_00003_pred.tlbm")).unwrap();
    let out = run(&["eval", "--pred", p(&preds), "--data", p(&f.data), "--out", p(&report)]);
    assert_eq!(out.status.code(), Some(5));
}

#[test]
fn eval_marks_empty_masks_absent_and_means_match_rows() {
    let f = fixture("phantom.tumor_count_min = 0\nphantom.tumor_count_max = 0\n", 2);
    let run_dir = f.root.join("run");
    ok(&["train", "--config", p(&f.config), "--data", p(&f.data), "--steps", "1", "--out", p(&run_dir)]);
    let preds = f.root.join("preds");
    ok(&["infer", "--config", p(&f.config), "--checkpoint", p(&run_dir.join("final.tlck")), "--input", p(&f.data), "--out", p(&preds)]);
    let report = f.root.join("r");
    ok(&["eval", "--pred", p(&preds), "--data", p(&f.data), "--out", p(&report)]);
    let text = fs::read_to_string(report.with_extension("txt")).unwrap();
    let rows = parse_metrics_rows(&text).unwrap();
    assert!(rows.iter().all(|(_, m)| m.tumor_ssim.is_none() && m.tumor_psnr.is_none()));
    let mean_line: Vec<&str> = text.lines().find(|l| l.starts_with("mean")).unwrap().split_whitespace().collect();
    let recomputed = rows.iter().map(|(_, m)| m.psnr).sum::<f64>() / rows.len() as f64;
    assert!((mean_line[1].parse::<f64>().unwrap() - recomputed).abs() < 1e-5);
    assert_eq!(mean_line[3], "-");
}

#[test]
fn ablate_table_layout_and_shared_manifest() {
    let f = fixture("", 6);
    let out = f.root.join("abl");
    ok(&["ablate", "--config", p(&f.config), "--data", p(&f.data), "--steps", "2", "--seeds", "1", "--out", p(&out)]);
    let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
    let rows: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split_whitespace().count() == 5));
    let manifest = fs::read_to_string(f.data.join("manifest.txt")).unwrap();
    assert!(table.contains(&tulabm_cli::dataset::manifest_hash(&manifest)));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json["runs"].as_array().unwrap().len(), 3);
}

#[test]
fn learned_codec_pipeline() {
    let f = fixture("codec.mode = learned\ncodec.latent_channels = 2\n", 3);
    let ck = f.root.join("codec.tlck");
    let out = run(&["pretrain-codec", "--config", p(&f.config), "--codec", "pooled", "--data", p(&f.data), "--out", p(&ck)]);
    assert_eq!(out.status.code(), Some(2));
    ok(&["pretrain-codec", "--config", p(&f.config), "--data", p(&f.data), "--steps", "5", "--out", p(&ck)]);
    let run_dir = f.root.join("run");
    ok(&["train", "--config", p(&f.config), "--data", p(&f.data), "--steps", "2", "--codec-checkpoint", p(&ck), "--out", p(&run_dir)]);
    let settings = Settings::load(&f.config).unwrap();
    let codec_ck = Checkpoint::read(&ck, None).unwrap();
    let final_ck = Checkpoint::read(&run_dir.join("final.tlck"), None).unwrap();
    assert_eq!(codec_ck.codec(settings.codec).unwrap(), final_ck.codec(settings.codec).unwrap());
}
