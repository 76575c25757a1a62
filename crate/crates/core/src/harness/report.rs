//! Aggregation of persisted runs into a summary table and SVG charts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::record::{aggregate, read_rows, write_summary, Summary};
use super::svg::{line_chart, Series};
use crate::attack::AttackKind;
use crate::error::{CoreError, Result};
use crate::metrics::MetricReport;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub runs: usize,
    pub summary: Vec<Summary>,
    /// Written files, summary table first.
    pub files: Vec<PathBuf>,
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if dir.is_dir() {
        for entry in fs::read_dir(dir)? {
            let p = entry?.path();
            if p.extension().is_some_and(|e| e == ext) {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

fn metric(r: &MetricReport, k: usize) -> Option<f64> {
    r.values()[k]
}

/// Metric `k` of a summary; indices past the report columns select the
/// referring accuracies.
fn pick(s: &Summary, k: usize, attacked: bool) -> Option<f64> {
    let r = if attacked { &s.attacked } else { &s.clean };
    match k {
        k if k < MetricReport::COLUMNS.len() => metric(r, k),
        _ => Some(if attacked { s.attacked_refer_acc } else { s.clean_refer_acc }),
    }
}

fn metric_names() -> Vec<&'static str> {
    let mut v = MetricReport::COLUMNS.to_vec();
    v.push("refer_acc");
    v
}

/// One chart per metric with `x` as the abscissa, one attacked series per
/// `key` group and a clean reference per group.
fn axis_charts(
    dir: &Path,
    prefix: &str,
    x_label: &str,
    summary: &[Summary],
    x: fn(&Summary) -> usize,
    key: fn(&Summary) -> (AttackKind, usize),
    key_label: &str,
) -> Result<Vec<PathBuf>> {
    let mut groups: BTreeMap<(AttackKind, usize), Vec<&Summary>> = BTreeMap::new();
    for s in summary {
        groups.entry(key(s)).or_default().push(s);
    }
    if !groups.values().any(|g| g.len() >= 2) {
        return Ok(Vec::new());
    }
    let mut files = Vec::new();
    for (k, name) in metric_names().into_iter().enumerate() {
        let mut series = Vec::new();
        for ((kind, v), g) in &groups {
            if g.len() < 2 {
                continue;
            }
            for attacked in [false, true] {
                let points: Vec<(f64, f64)> =
                    g.iter().filter_map(|s| pick(s, k, attacked).map(|y| (x(s) as f64, y))).collect();
                if points.is_empty() || (!attacked && *kind == AttackKind::None) {
                    continue;
                }
                let side = if attacked { kind.name() } else { "clean" };
                series.push(Series { label: format!("{side} {key_label}={v}"), points });
            }
        }
        let path = dir.join(format!("{prefix}_{name}.svg"));
        fs::write(&path, line_chart(&format!("{name} vs {x_label}"), x_label, name, &series))?;
        files.push(path);
    }
    Ok(files)
}

/// Reads every run under `<out>/runs`, writes `summary.csv` and the charts
/// under `<out>/plots`. Rerunning overwrites the same files identically.
pub fn report(out: &Path) -> Result<ReportSummary> {
    let runs_dir = out.join("runs");
    let csvs = sorted_files(&runs_dir, "csv")?;
    let mut rows = Vec::new();
    for p in &csvs {
        rows.extend(read_rows(p)?);
    }
    if rows.is_empty() {
        return Err(CoreError::Invalid(format!("no run records under {}", runs_dir.display())));
    }
    let summary = aggregate(&rows);
    let mut files = vec![out.join("summary.csv")];
    write_summary(&files[0], &summary)?;

    let plots = out.join("plots");
    fs::create_dir_all(&plots)?;
    for p in sorted_files(&runs_dir, "trace")? {
        let text = fs::read_to_string(&p)?;
        let points: Vec<(f64, f64)> = text
            .lines()
            .skip(1)
            .filter_map(|l| {
                let (i, d) = l.split_once(',')?;
                Some((i.parse().ok()?, d.parse().ok()?))
            })
            .collect();
        if points.is_empty() {
            continue;
        }
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
        let path = plots.join(format!("trace_{stem}.svg"));
        let chart = line_chart(&format!("PGD loss {stem}"), "iteration", "loss", &[Series { label: "loss".into(), points }]);
        fs::write(&path, chart)?;
        files.push(path);
    }
    files.extend(axis_charts(&plots, "delta", "delta_attack", &summary, |s| s.delta_attack, |s| (s.attack_kind, s.buffer_t), "T")?);
    files.extend(axis_charts(&plots, "buffer", "buffer_T", &summary, |s| s.buffer_t, |s| (s.attack_kind, s.delta_attack), "delta")?);
    Ok(ReportSummary { runs: rows.len(), summary, files })
}
