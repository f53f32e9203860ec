//! The `report` stage: SVG plots and a markdown summary built from the metric CSVs.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Deserialize;

use crate::plot::{LineChart, Series};
use crate::run::Outputs;

#[derive(Debug, Deserialize)]
struct RobustnessRow {
    classifier: String,
    condition: String,
    attack_family: String,
    epsilon: Option<f64>,
    accuracy: f64,
}

#[derive(Debug, Deserialize)]
struct SummaryRow {
    condition: String,
    subset: String,
    adversarial_samples: usize,
    auc: Option<f64>,
    tau: f64,
    tpr_at_tau: Option<f64>,
    fpr_at_tau: f64,
}

#[derive(Debug, Deserialize)]
struct RocRow {
    condition: String,
    subset: String,
    fpr: f64,
    tpr: f64,
}

#[derive(Debug, Deserialize)]
struct DistanceRow {
    condition: String,
    block: usize,
    class_token: f64,
    patch_token: f64,
}

#[derive(Debug, Deserialize)]
struct HeadRow {
    condition: String,
    block: usize,
    accuracy: f64,
}

fn read_rows<T: for<'de> Deserialize<'de>>(dir: &Path, rel: &str) -> Result<Vec<T>> {
    let path = dir.join(rel);
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(&path)
        .with_context(|| format!("reading {}", path.display()))?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .with_context(|| format!("parsing {}", path.display()))
}

fn group<T, K: Ord, V>(rows: &[T], key: impl Fn(&T) -> K, value: impl Fn(&T) -> V) -> BTreeMap<K, Vec<V>> {
    let mut out: BTreeMap<K, Vec<V>> = BTreeMap::new();
    for r in rows {
        out.entry(key(r)).or_default().push(value(r));
    }
    out
}

pub(crate) fn write_report(dir: &Path, out: &mut Outputs) -> Result<()> {
    let robustness: Vec<RobustnessRow> = read_rows(dir, "reports/robustness.csv")?;
    let summary: Vec<SummaryRow> = read_rows(dir, "reports/detection_summary.csv")?;
    let roc: Vec<RocRow> = read_rows(dir, "reports/detection_roc.csv")?;
    let distance: Vec<DistanceRow> = read_rows(dir, "reports/token_distance.csv")?;
    let heads: Vec<HeadRow> = read_rows(dir, "reports/head_accuracy.csv")?;

    let clean: BTreeMap<&str, f64> = robustness
        .iter()
        .filter(|r| r.condition == "clean")
        .map(|r| (r.classifier.as_str(), r.accuracy))
        .collect();
    let mut series = Vec::new();
    let by_curve = group(
        &robustness,
        |r| (r.attack_family.clone(), r.classifier.clone()),
        |r| (r.epsilon, r.accuracy),
    );
    for ((family, classifier), points) in &by_curve {
        if family.is_empty() || family == "cw" {
            continue;
        }
        let mut pts: Vec<(f64, f64)> = points.iter().filter_map(|&(e, a)| e.map(|e| (e, a))).collect();
        if let Some(&c) = clean.get(classifier.as_str()) {
            pts.push((0.0, c));
        }
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        series.push(Series {
            name: format!("{classifier} {family}"),
            points: pts,
        });
    }
    let chart = LineChart {
        title: "Robust accuracy".into(),
        x_label: "epsilon".into(),
        y_label: "accuracy (%)".into(),
        series,
        y_range: Some((0.0, 100.0)),
        ..Default::default()
    };
    out.write("plots/robustness.svg", chart.to_svg().as_bytes())?;

    let mut series = Vec::new();
    for (condition, rows) in group(&distance, |r| r.condition.clone(), |r| (r.block, r.class_token, r.patch_token)) {
        series.push(Series {
            name: format!("{condition} class"),
            points: rows.iter().map(|&(b, c, _)| (b as f64, c)).collect(),
        });
        series.push(Series {
            name: format!("{condition} patch"),
            points: rows.iter().map(|&(b, _, p)| (b as f64, p)).collect(),
        });
    }
    let chart = LineChart {
        title: "Clean vs adversarial token distance".into(),
        x_label: "block".into(),
        y_label: "Euclidean distance".into(),
        series,
        ..Default::default()
    };
    out.write("plots/token_distance.svg", chart.to_svg().as_bytes())?;

    let series = group(&heads, |r| r.condition.clone(), |r| (r.block as f64, r.accuracy))
        .into_iter()
        .map(|(name, points)| Series { name, points })
        .collect();
    let chart = LineChart {
        title: "Per-block classifier accuracy".into(),
        x_label: "block".into(),
        y_label: "accuracy (%)".into(),
        series,
        y_range: Some((0.0, 100.0)),
        ..Default::default()
    };
    out.write("plots/head_accuracy.svg", chart.to_svg().as_bytes())?;

    for (condition, rows) in group(&roc, |r| r.condition.clone(), |r| (r.subset.clone(), r.fpr, r.tpr)) {
        let series = group(&rows, |r| r.0.clone(), |r| (r.1, r.2))
            .into_iter()
            .map(|(subset, mut points)| {
                points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
                Series { name: subset, points }
            })
            .collect();
        let chart = LineChart {
            title: format!("Detection ROC, {condition}"),
            x_label: "false positive rate".into(),
            y_label: "true positive rate".into(),
            series,
            x_range: Some((0.0, 1.0)),
            y_range: Some((0.0, 1.0)),
            diagonal: true,
        };
        out.write(&format!("plots/roc_{condition}.svg"), chart.to_svg().as_bytes())?;
    }

    let mut md = String::from("# Run summary\n\n## Accuracy (%)\n\n");
    let table = std::fs::read_to_string(dir.join("reports/robustness.txt")).unwrap_or_default();
    let _ = writeln!(md, "```\n{}```\n", table);
    md.push_str("## Detection\n\n| condition | subset | samples | AUC | TPR at tau | FPR at tau |\n|---|---|---|---|---|---|\n");
    for r in &summary {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {:.3} |",
            r.condition,
            r.subset,
            r.adversarial_samples,
            fmt(r.auc),
            fmt(r.tpr_at_tau),
            r.fpr_at_tau
        );
    }
    if let Some(r) = summary.first() {
        let _ = writeln!(md, "\nThreshold tau = {:.6}.", r.tau);
    }
    md.push_str("\nPlots are in `plots/`; all numbers come from the CSV files in `reports/`.\n");
    out.write("reports/summary.md", md.as_bytes())
}
