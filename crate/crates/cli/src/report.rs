//! Aggregation of run directories: mean and population standard deviation
//! per (label, metric) cell, a CSV table, a human-readable table and two
//! plots with a JSON legend sidecar.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::commands::Summary;
use crate::plot;
use crate::{CliError, CliResult};

/// Accuracy statistics for one experiment label.
#[derive(Debug, Clone, Serialize)]
pub struct AggregateMetrics {
    pub label: String,
    pub repeats: usize,
    /// metric name -> (mean, population std)
    pub cells: BTreeMap<String, (f64, f64)>,
}

pub fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

struct LoadedRun {
    summary: Summary,
    history: Vec<(f64, f64)>, // (epoch, total loss)
    name: String,
}

fn load_runs(dirs: &[PathBuf]) -> CliResult<Vec<LoadedRun>> {
    let mut runs = Vec::new();
    for dir in dirs {
        let mut found = 0usize;
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| CliError::runtime(format!("read '{}': {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for path in entries {
            let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
            if !(name.starts_with("summary") && name.ends_with(".json")) {
                continue;
            }
            let text = fs::read_to_string(&path)
                .map_err(|e| CliError::runtime(format!("read '{}': {e}", path.display())))?;
            let summary: Summary = serde_json::from_str(&text).map_err(|e| {
                CliError::runtime(format!("summary '{}': {e}", path.display()))
            })?;
            let history_name = name
                .replace("summary", "history")
                .replace(".json", ".jsonl");
            let history = read_history(&dir.join(history_name)).unwrap_or_default();
            runs.push(LoadedRun {
                summary,
                history,
                name: format!("{}/{name}", dir.file_name().unwrap_or_default().to_string_lossy()),
            });
            found += 1;
        }
        if found == 0 {
            return Err(CliError::runtime(format!(
                "aggregation error: no summary records in '{}'",
                dir.display()
            )));
        }
    }
    Ok(runs)
}

fn read_history(path: &Path) -> Option<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path).ok()?;
    let mut out = Vec::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).ok()?;
        out.push((v["epoch"].as_f64()?, v["total"].as_f64()?));
    }
    Some(out)
}

fn metrics_of(summary: &Summary) -> Vec<(String, f64)> {
    let a = &summary.accuracy;
    [
        ("train", a.train),
        ("test", a.test),
        ("source_before", a.source_before),
        ("target_before", a.target_before),
        ("source_after", a.source_after),
        ("target_after", a.target_after),
    ]
    .into_iter()
    .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
    .collect()
}

/// Aggregate every summary under the run directories and emit table.csv,
/// table.txt, loss_curves.png, accuracy_bars.png and report.json.
pub fn generate(dirs: &[PathBuf], out: &Path) -> CliResult<Vec<PathBuf>> {
    let runs = load_runs(dirs)?;
    let kinds: std::collections::BTreeSet<&str> =
        runs.iter().map(|r| r.summary.kind.as_str()).collect();
    if kinds.len() > 1 {
        return Err(CliError::runtime(format!(
            "aggregation error: mixed incompatible experiment kinds {:?}",
            kinds
        )));
    }

    // group metric values by label
    let mut grouped: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut group_sizes: BTreeMap<String, usize> = BTreeMap::new();
    for run in &runs {
        let label = run.summary.label.clone();
        *group_sizes.entry(label.clone()).or_insert(0) += 1;
        let by_metric = grouped.entry(label).or_default();
        for (metric, value) in metrics_of(&run.summary) {
            by_metric.entry(metric).or_default().push(value);
        }
    }
    let aggregates: Vec<AggregateMetrics> = grouped
        .into_iter()
        .map(|(label, by_metric)| AggregateMetrics {
            repeats: group_sizes[&label],
            label,
            cells: by_metric
                .into_iter()
                .map(|(metric, values)| {
                    let (mean, std) = mean_and_population_std(&values);
                    (metric, (mean, std))
                })
                .collect(),
        })
        .collect();

    let mut written = Vec::new();

    // csv table
    let csv_path = out.join("table.csv");
    {
        let mut w = csv::Writer::from_path(&csv_path)
            .map_err(|e| CliError::runtime(format!("write '{}': {e}", csv_path.display())))?;
        w.write_record(["label", "metric", "mean", "std", "repeats"])
            .map_err(|e| CliError::runtime(e.to_string()))?;
        for agg in &aggregates {
            for (metric, (mean, std)) in &agg.cells {
                w.write_record([
                    agg.label.as_str(),
                    metric.as_str(),
                    &format!("{mean:.6}"),
                    &format!("{std:.6}"),
                    &agg.repeats.to_string(),
                ])
                .map_err(|e| CliError::runtime(e.to_string()))?;
            }
        }
        w.flush().map_err(|e| CliError::runtime(e.to_string()))?;
    }
    written.push(csv_path);

    // human-readable table
    let txt_path = out.join("table.txt");
    {
        let mut text = String::new();
        text.push_str("accuracy per experiment, mean +/- std over repeats\n");
        text.push_str("(std is the population standard deviation)\n\n");
        let label_w = aggregates.iter().map(|a| a.label.len()).max().unwrap_or(5).max(5);
        let metric_w = aggregates
            .iter()
            .flat_map(|a| a.cells.keys().map(|m| m.len()))
            .max()
            .unwrap_or(6)
            .max(6);
        text.push_str(&format!(
            "{:<label_w$}  {:<metric_w$}  {:>8}  {:>8}  {:>7}\n",
            "label", "metric", "mean", "std", "repeats"
        ));
        for agg in &aggregates {
            for (metric, (mean, std)) in &agg.cells {
                text.push_str(&format!(
                    "{:<label_w$}  {:<metric_w$}  {:>8.4}  {:>8.4}  {:>7}\n",
                    agg.label, metric, mean, std, agg.repeats
                ));
            }
        }
        fs::write(&txt_path, text)
            .map_err(|e| CliError::runtime(format!("write '{}': {e}", txt_path.display())))?;
    }
    written.push(txt_path);

    // loss curves, one series per run
    let curves: Vec<(String, Vec<(f64, f64)>)> = runs
        .iter()
        .filter(|r| !r.history.is_empty())
        .map(|r| (r.name.clone(), r.history.clone()))
        .collect();
    let curves_path = out.join("loss_curves.png");
    let curve_legend = plot::line_chart(&curves, &curves_path)?;
    written.push(curves_path);

    // accuracy bars: group per label, one bar per metric mean
    let mut bars = Vec::new();
    for agg in &aggregates {
        for (metric, (mean, _)) in &agg.cells {
            bars.push((format!("{} :: {}", agg.label, metric), *mean));
        }
    }
    let bars_path = out.join("accuracy_bars.png");
    let bar_legend = plot::bar_chart(&bars, &bars_path)?;
    written.push(bars_path);

    // legend sidecar
    #[derive(Serialize)]
    struct Sidecar<'a> {
        format_version: u32,
        std_definition: &'a str,
        aggregates: &'a [AggregateMetrics],
        loss_curves_legend: &'a [plot::LegendEntry],
        accuracy_bars_legend: &'a [plot::LegendEntry],
    }
    let sidecar_path = out.join("report.json");
    let json = serde_json::to_string_pretty(&Sidecar {
        format_version: 1,
        std_definition: "population",
        aggregates: &aggregates,
        loss_curves_legend: &curve_legend,
        accuracy_bars_legend: &bar_legend,
    })
    .expect("sidecar serializes");
    fs::write(&sidecar_path, json)
        .map_err(|e| CliError::runtime(format!("write '{}': {e}", sidecar_path.display())))?;
    written.push(sidecar_path);

    Ok(written)
}
