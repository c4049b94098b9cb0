//! Text and JSON renderings of step logs, metrics reports and the ablation
//! table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use tulabm_core::metrics::{Aggregate, ImageMetrics};
use tulabm_core::{Ablation, MetricsReport, StepReport};

/// Tab-separated step log without wall time, so identical runs produce
/// identical bytes.
pub fn step_log(reports: &[StepReport]) -> String {
    let mut out = String::from("step\tlatent_loss\tpixel_loss\tboundary_loss\ttotal_loss\n");
    for r in reports {
        writeln!(out, "{}\t{}\t{}\t{}\t{}", r.step, r.latent_loss, r.pixel_loss, r.boundary_loss, r.total_loss).unwrap();
    }
    out
}

pub fn parse_step_log(text: &str) -> Result<Vec<StepReport>, String> {
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 5 {
                return Err(format!("expected 5 columns: {}", l));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{}: {}", s, e));
            Ok(StepReport {
                step: f[0].parse().map_err(|e| format!("{}: {}", f[0], e))?,
                latent_loss: num(f[1])?,
                pixel_loss: num(f[2])?,
                boundary_loss: num(f[3])?,
                total_loss: num(f[4])?,
                wall_time_s: 0.0,
            })
        })
        .collect()
}

pub fn timing_log(reports: &[StepReport]) -> String {
    let mut out = String::from("step\twall_time_s\n");
    for r in reports {
        writeln!(out, "{}\t{:.6}", r.step, r.wall_time_s).unwrap();
    }
    out
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.6}", x))
}

fn agg_cells(a: &Option<Aggregate>) -> (String, String) {
    match a {
        Some(a) => (format!("{:.6}", a.mean), format!("{:.6}", a.std)),
        None => ("-".into(), "-".into()),
    }
}

/// Line-oriented table: one row per image, then `mean` and `std` rows.
/// Absent tumor metrics print as `-`.
pub fn metrics_table(names: &[String], report: &MetricsReport) -> String {
    let mut out = format!("{:<16} {:>12} {:>10} {:>12} {:>10}\n", "image", "psnr", "ssim", "tumor_psnr", "tumor_ssim");
    for (name, r) in names.iter().zip(&report.records) {
        writeln!(
            out,
            "{:<16} {:>12} {:>10} {:>12} {:>10}",
            name,
            cell(Some(r.psnr)),
            cell(Some(r.ssim)),
            cell(r.tumor_psnr),
            cell(r.tumor_ssim)
        )
        .unwrap();
    }
    let cols = [&report.psnr, &report.ssim, &report.tumor_psnr, &report.tumor_ssim].map(agg_cells);
    writeln!(out, "{:<16} {:>12} {:>10} {:>12} {:>10}", "mean", cols[0].0, cols[1].0, cols[2].0, cols[3].0).unwrap();
    writeln!(out, "{:<16} {:>12} {:>10} {:>12} {:>10}", "std", cols[0].1, cols[1].1, cols[2].1, cols[3].1).unwrap();
    out
}

/// Per-image rows of a [`metrics_table`], as (name, metrics).
pub fn parse_metrics_rows(text: &str) -> Result<Vec<(String, ImageMetrics)>, String> {
    let opt = |s: &str| -> Result<Option<f64>, String> {
        if s == "-" {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|e| format!("{}: {}", s, e))
        }
    };
    text.lines()
        .skip(1)
        .filter(|l| !l.starts_with("mean") && !l.starts_with("std") && !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 5 {
                return Err(format!("expected 5 columns: {}", l));
            }
            Ok((
                f[0].to_string(),
                ImageMetrics {
                    psnr: opt(f[1])?.ok_or("psnr missing")?,
                    ssim: opt(f[2])?.ok_or("ssim missing")?,
                    tumor_psnr: opt(f[3])?,
                    tumor_ssim: opt(f[4])?,
                },
            ))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedReport {
    pub names: Vec<String>,
    pub report: MetricsReport,
}

/// Result of one ablation variant trained with one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub ablation: Ablation,
    pub seed: u64,
    pub report: MetricsReport,
    /// Trailing 100-step mean of the total loss at step 100 and at the end.
    pub early_total: f64,
    pub final_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub manifest_hash: String,
    pub train_count: usize,
    pub eval_count: usize,
    pub steps: u64,
    pub runs: Vec<VariantRun>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

impl AblationSummary {
    fn runs_of(&self, a: Ablation) -> impl Iterator<Item = &VariantRun> {
        self.runs.iter().filter(move |r| r.ablation == a)
    }

    /// Median over seeds of the per-run mean of a metric column.
    pub fn median_of(&self, a: Ablation, column: fn(&MetricsReport) -> Option<Aggregate>) -> Option<f64> {
        median(self.runs_of(a).filter_map(|r| column(&r.report).map(|x| x.mean)).collect())
    }

    /// Median over seeds of the per-run median tumor-region SSIM.
    pub fn median_tumor_ssim(&self, a: Ablation) -> Option<f64> {
        median(
            self.runs_of(a)
                .filter_map(|r| median(r.report.records.iter().filter_map(|m| m.tumor_ssim).collect()))
                .collect(),
        )
    }

    /// Three rows (one per variant), four metric columns, 3-seed medians.
    pub fn table(&self) -> String {
        let mut out = format!(
            "# dataset manifest sha256 {}\n# train pairs {}, held-out pairs {}, steps {}, seeds per variant {}\n",
            self.manifest_hash,
            self.train_count,
            self.eval_count,
            self.steps,
            self.runs_of(Ablation::Full).count()
        );
        writeln!(out, "{:<16} {:>10} {:>8} {:>12} {:>10}", "variant", "psnr", "ssim", "tumor_psnr", "tumor_ssim").unwrap();
        for a in Ablation::ALL {
            let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{:.*}", p, x));
            writeln!(
                out,
                "{:<16} {:>10} {:>8} {:>12} {:>10}",
                a.to_string(),
                f(self.median_of(a, |r| r.psnr), 3),
                f(self.median_of(a, |r| r.ssim), 4),
                f(self.median_of(a, |r| r.tumor_psnr), 3),
                f(self.median_of(a, |r| r.tumor_ssim), 4)
            )
            .unwrap();
        }
        out
    }
}
