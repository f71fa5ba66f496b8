//! Metrics CSV, run summaries and SVG learning curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use oavnn::model::Metrics;
use oavnn::{Error, Result};
use serde::{Deserialize, Serialize};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub accuracy: f64,
    pub loss: f64,
}

/// Summary of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: String,
    pub final_test_accuracy: Option<f64>,
    pub epochs_to_90: Option<usize>,
    pub epochs: usize,
    pub seed: u64,
    pub wall_time_secs: f64,
}

/// Summary of all runs of one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub runs: usize,
    /// Mean over runs.
    pub final_test_accuracy: f64,
    /// Mean over runs; `None` if some run never reached 90%.
    pub epochs_to_90: Option<f64>,
    pub epochs_to_90_per_run: Vec<Option<usize>>,
}

pub fn metrics_rows(metrics: &Metrics) -> Vec<MetricsRow> {
    let mut rows = Vec::with_capacity(2 * metrics.records.len());
    for r in &metrics.records {
        rows.push(MetricsRow {
            epoch: r.epoch,
            split: "train".into(),
            accuracy: r.train_accuracy,
            loss: r.train_loss,
        });
        rows.push(MetricsRow {
            epoch: r.epoch,
            split: "test".into(),
            accuracy: r.test_accuracy,
            loss: r.test_loss,
        });
    }
    rows
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_metrics_csv(path: &Path, metrics: &Metrics) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in metrics_rows(metrics) {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != ["epoch", "split", "accuracy", "loss"] {
        return Err(Error::Format(format!("{}: unexpected header {:?}", path.display(), header)));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// A run directory: its variant name and per-epoch train and test accuracy.
#[derive(Clone, Debug)]
pub struct RunCurves {
    pub dir: PathBuf,
    pub variant: String,
    pub train: Vec<(usize, f64)>,
    pub test: Vec<(usize, f64)>,
}

impl RunCurves {
    pub fn load(dir: &Path) -> Result<Self> {
        let rows = read_metrics_csv(&dir.join(METRICS_FILE))?;
        let variant = match std::fs::read_to_string(dir.join(SUMMARY_FILE)) {
            Ok(text) => serde_json::from_str::<serde_json::Value>(&text)
                .ok()
                .and_then(|v| v.get("variant").and_then(|s| s.as_str()).map(str::to_owned)),
            Err(_) => None,
        }
        .unwrap_or_else(|| dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
        let pick = |split: &str| -> Vec<(usize, f64)> {
            rows.iter()
                .filter(|r| r.split == split)
                .map(|r| (r.epoch, r.accuracy))
                .collect()
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            variant,
            train: pick("train"),
            test: pick("test"),
        })
    }

    pub fn epochs_to(&self, threshold: f64) -> Option<usize> {
        self.test.iter().find(|(_, a)| *a >= threshold).map(|(e, _)| *e)
    }
}

/// Every directory under `root` (including `root`) that holds a metrics CSV.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(METRICS_FILE).is_file() {
            found.push(dir.clone());
        }
        for entry in std::fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

pub fn summarize(runs: &[RunCurves]) -> Vec<VariantSummary> {
    let mut by_variant: BTreeMap<&str, Vec<&RunCurves>> = BTreeMap::new();
    for r in runs {
        by_variant.entry(&r.variant).or_default().push(r);
    }
    by_variant
        .into_iter()
        .map(|(variant, rs)| {
            let finals: Vec<f64> = rs.iter().filter_map(|r| r.test.last().map(|x| x.1)).collect();
            let per_run: Vec<Option<usize>> = rs.iter().map(|r| r.epochs_to(0.9)).collect();
            let reached: Option<Vec<usize>> = per_run.iter().copied().collect();
            VariantSummary {
                variant: variant.to_owned(),
                runs: rs.len(),
                final_test_accuracy: finals.iter().sum::<f64>() / finals.len().max(1) as f64,
                epochs_to_90: reached.map(|v| v.iter().sum::<usize>() as f64 / v.len() as f64),
                epochs_to_90_per_run: per_run,
            }
        })
        .collect()
}

/// Mean curve over runs, truncated to the shortest run.
fn mean_curve(curves: &[&[(usize, f64)]]) -> Vec<(usize, f64)> {
    let len = curves.iter().map(|c| c.len()).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let acc = curves.iter().map(|c| c[i].1).sum::<f64>() / curves.len() as f64;
            (curves[0][i].0, acc)
        })
        .collect()
}

fn color(variant: &str, index: usize) -> &'static str {
    match variant {
        "OAVNN" => "#c0392b",
        "VNN" => "#2c7fb8",
        "ShellOnly" => "#31a354",
        "ComplexOnly" => "#8856a7",
        _ => ["#636363", "#e6550d", "#17becf", "#bcbd22"][index % 4],
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Accuracy against epoch, one colour per variant, train solid and test dashed.
pub fn render_svg(runs: &[RunCurves]) -> String {
    const W: f64 = 720.0;
    const H: f64 = 440.0;
    const L: f64 = 60.0;
    const R: f64 = 170.0;
    const T: f64 = 30.0;
    const B: f64 = 50.0;

    let mut variants: Vec<&str> = runs.iter().map(|r| r.variant.as_str()).collect();
    variants.sort();
    variants.dedup();
    let max_epoch = runs
        .iter()
        .flat_map(|r| r.test.iter().chain(&r.train).map(|x| x.0))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let x = |e: f64| L + (W - L - R) * e / max_epoch;
    let y = |a: f64| T + (H - T - B) * (1.0 - a.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>"#
    );
    // Axes and grid.
    let _ = writeln!(
        s,
        r#"<g id="axes" stroke="black" stroke-width="1"><line x1="{L}" y1="{}" x2="{}" y2="{}"/><line x1="{L}" y1="{T}" x2="{L}" y2="{}"/></g>"#,
        H - B,
        W - R,
        H - B,
        H - B
    );
    for i in 0..=5 {
        let a = i as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{L}" y1="{yy:.2}" x2="{x2}" y2="{yy:.2}" stroke="#dddddd"/><text x="{tx}" y="{ty:.2}" text-anchor="end">{a:.1}</text>"##,
            yy = y(a),
            x2 = W - R,
            tx = L - 6.0,
            ty = y(a) + 4.0
        );
    }
    let step = ((max_epoch / 10.0).ceil() as usize).max(1);
    for e in (0..=max_epoch as usize).step_by(step) {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{e}</text>"#,
            x(e as f64),
            H - B + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{}" text-anchor="middle">epoch</text><text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">accuracy</text>"#,
        L + (W - L - R) / 2.0,
        H - 10.0,
        T + (H - T - B) / 2.0,
        T + (H - T - B) / 2.0
    );

    for (vi, v) in variants.iter().enumerate() {
        let rs: Vec<&RunCurves> = runs.iter().filter(|r| r.variant == *v).collect();
        let col = color(v, vi);
        let _ = writeln!(s, r#"<g id="curve-{}" fill="none" stroke="{col}" stroke-width="2">"#, escape(v));
        for (curve, dash) in [
            (mean_curve(&rs.iter().map(|r| r.train.as_slice()).collect::<Vec<_>>()), ""),
            (
                mean_curve(&rs.iter().map(|r| r.test.as_slice()).collect::<Vec<_>>()),
                r#" stroke-dasharray="6 4""#,
            ),
        ] {
            let pts: Vec<String> = curve
                .iter()
                .map(|&(e, a)| format!("{:.2},{:.2}", x(e as f64), y(a)))
                .collect();
            let _ = writeln!(s, r#"<polyline points="{}"{dash}/>"#, pts.join(" "));
        }
        let _ = writeln!(s, "</g>");
        let ly = T + 10.0 + 22.0 * vi as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{col}" stroke-width="3"/><text x="{}" y="{}">{} ({} run{})</text>"#,
            W - R + 15.0,
            W - R + 40.0,
            W - R + 46.0,
            ly + 4.0,
            escape(v),
            rs.len(),
            if rs.len() == 1 { "" } else { "s" }
        );
    }
    let ly = T + 10.0 + 22.0 * variants.len() as f64 + 10.0;
    let _ = writeln!(
        s,
        r##"<text x="{}" y="{ly}" fill="#444444">solid: train</text><text x="{}" y="{}" fill="#444444">dashed: test</text>"##,
        W - R + 15.0,
        W - R + 15.0,
        ly + 16.0
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(variant: &str, test: &[f64]) -> RunCurves {
        RunCurves {
            dir: PathBuf::new(),
            variant: variant.into(),
            train: test.iter().enumerate().map(|(i, &a)| (i + 1, a)).collect(),
            test: test.iter().enumerate().map(|(i, &a)| (i + 1, a)).collect(),
        }
    }

    #[test]
    fn summary_means_and_unreached_runs() {
        let runs = [
            run("A", &[0.5, 0.91, 0.95]),
            run("A", &[0.5, 0.6, 0.92]),
            run("B", &[0.5, 0.5, 0.5]),
        ];
        let s = summarize(&runs);
        assert_eq!(s[0].variant, "A");
        assert_eq!(s[0].epochs_to_90, Some(2.5));
        assert!((s[0].final_test_accuracy - 0.935).abs() < 1e-12);
        assert_eq!(s[1].epochs_to_90, None);
        assert_eq!(s[1].epochs_to_90_per_run, vec![None]);
    }

    #[test]
    fn mean_curve_truncates_to_shortest() {
        let a = [(1, 0.2), (2, 0.4), (3, 0.6)];
        let b = [(1, 0.4), (2, 0.6)];
        let m = mean_curve(&[&a, &b]);
        assert_eq!(m.len(), 2);
        assert!((m[1].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn svg_escapes_names() {
        let svg = render_svg(&[run("a<b", &[0.5, 0.7])]);
        assert!(svg.contains("a&lt;b"));
        assert!(!svg.contains("a<b"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(METRICS_FILE);
        let m = Metrics {
            records: vec![oavnn::model::EpochRecord {
                epoch: 1,
                train_accuracy: 0.1 + 0.2,
                train_loss: 1.0 / 3.0,
                test_accuracy: 0.7,
                test_loss: 2.0f64.sqrt(),
            }],
            wall_time_secs: 0.0,
        };
        write_metrics_csv(&p, &m).unwrap();
        assert_eq!(read_metrics_csv(&p).unwrap(), metrics_rows(&m));
    }
}
