//! Run records and their CSV form.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::attack::AttackKind;
use crate::error::{CoreError, Result};
use crate::metrics::MetricReport;

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub attack_kind: AttackKind,
    pub delta_attack: usize,
    pub buffer_t: usize,
    pub clean: MetricReport,
    pub attacked: MetricReport,
    /// Referring accuracy over the `T` frames after the window, 0–100.
    pub clean_refer_acc: f64,
    pub attacked_refer_acc: f64,
    /// PGD loss per iterate; empty for unattacked runs and rows read back
    /// from CSV.
    pub trace: Vec<f64>,
}

/// Means over the seeds of one (kind, Δ, T) group.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub config_hash: String,
    pub seeds: usize,
    pub attack_kind: AttackKind,
    pub delta_attack: usize,
    pub buffer_t: usize,
    pub clean: MetricReport,
    pub attacked: MetricReport,
    pub clean_refer_acc: f64,
    pub attacked_refer_acc: f64,
}

pub fn csv_header(key: &str) -> String {
    let mut cols = vec!["config_hash".to_string(), key.to_string(), "attack_kind".into(), "delta_attack".into(), "buffer_T".into()];
    for side in ["clean", "attacked"] {
        cols.extend(MetricReport::COLUMNS.iter().map(|c| format!("{side}_{c}")));
    }
    cols.push("clean_refer_acc".into());
    cols.push("attacked_refer_acc".into());
    cols.join(",")
}

/// Header of per-run CSV files.
pub static CSV_HEADER: std::sync::LazyLock<String> = std::sync::LazyLock::new(|| csv_header("seed"));

fn num(v: f64) -> String {
    format!("{v:.6}")
}

fn metric_fields(m: &MetricReport) -> impl Iterator<Item = String> {
    m.values().into_iter().map(|v| v.map(num).unwrap_or_default())
}

fn line(hash: &str, key: &str, kind: AttackKind, delta: usize, t: usize, c: &MetricReport, a: &MetricReport, acc: [f64; 2]) -> String {
    let mut f = vec![hash.to_string(), key.to_string(), kind.to_string(), delta.to_string(), t.to_string()];
    f.extend(metric_fields(c));
    f.extend(metric_fields(a));
    f.extend(acc.map(num));
    f.join(",")
}

impl RunRecord {
    pub fn csv_line(&self) -> String {
        line(
            &self.config_hash,
            &self.seed.to_string(),
            self.attack_kind,
            self.delta_attack,
            self.buffer_t,
            &self.clean,
            &self.attacked,
            [self.clean_refer_acc, self.attacked_refer_acc],
        )
    }

    pub fn parse_line(text: &str) -> Result<Self> {
        let bad = |m: String| CoreError::Invalid(format!("malformed run row {text:?}: {m}"));
        let f: Vec<&str> = text.split(',').collect();
        if f.len() != 5 + 16 + 2 {
            return Err(bad(format!("{} fields", f.len())));
        }
        let float = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
        let report = |v: &[&str]| -> Result<MetricReport> {
            Ok(MetricReport {
                idsw: float(v[0])?,
                idsw_im: if v[1].is_empty() { None } else { Some(float(v[1])?) },
                hota: float(v[2])?,
                assa: float(v[3])?,
                deta: float(v[4])?,
                idf1: float(v[5])?,
                idp: float(v[6])?,
                idr: float(v[7])?,
            })
        };
        Ok(RunRecord {
            config_hash: f[0].to_string(),
            seed: f[1].parse().map_err(|_| bad("seed".into()))?,
            attack_kind: f[2].parse()?,
            delta_attack: f[3].parse().map_err(|_| bad("delta_attack".into()))?,
            buffer_t: f[4].parse().map_err(|_| bad("buffer_T".into()))?,
            clean: report(&f[5..13])?,
            attacked: report(&f[13..21])?,
            clean_refer_acc: float(f[21])?,
            attacked_refer_acc: float(f[22])?,
            trace: Vec::new(),
        })
    }
}

impl Summary {
    pub fn csv_line(&self) -> String {
        line(
            &self.config_hash,
            &self.seeds.to_string(),
            self.attack_kind,
            self.delta_attack,
            self.buffer_t,
            &self.clean,
            &self.attacked,
            [self.clean_refer_acc, self.attacked_refer_acc],
        )
    }
}

pub fn write_rows(path: &Path, rows: &[RunRecord]) -> Result<()> {
    let mut text = CSV_HEADER.clone();
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn write_summary(path: &Path, rows: &[Summary]) -> Result<()> {
    let mut text = csv_header("seeds");
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<RunRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER.as_str()) {
        return Err(CoreError::Format { kind: "run csv", path: path.to_path_buf(), reason: "unexpected header".into() });
    }
    lines.filter(|l| !l.is_empty()).map(RunRecord::parse_line).collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

fn mean_report(rs: &[&MetricReport]) -> MetricReport {
    let m = |f: fn(&MetricReport) -> f64| mean(rs.iter().map(|r| f(r))).unwrap_or(0.0);
    MetricReport {
        idsw: m(|r| r.idsw),
        idsw_im: mean(rs.iter().filter_map(|r| r.idsw_im)),
        hota: m(|r| r.hota),
        assa: m(|r| r.assa),
        deta: m(|r| r.deta),
        idf1: m(|r| r.idf1),
        idp: m(|r| r.idp),
        idr: m(|r| r.idr),
    }
}

/// Groups rows by (kind, Δ, T) in ascending order and averages each group.
/// An absent IDSW_im is left out of its mean.
pub fn aggregate(rows: &[RunRecord]) -> Vec<Summary> {
    let mut groups: BTreeMap<(AttackKind, usize, usize), Vec<&RunRecord>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.attack_kind, r.delta_attack, r.buffer_t)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((kind, delta, t), g)| {
            let hash = if g.iter().all(|r| r.config_hash == g[0].config_hash) {
                g[0].config_hash.clone()
            } else {
                "mixed".to_string()
            };
            Summary {
                config_hash: hash,
                seeds: g.len(),
                attack_kind: kind,
                delta_attack: delta,
                buffer_t: t,
                clean: mean_report(&g.iter().map(|r| &r.clean).collect::<Vec<_>>()),
                attacked: mean_report(&g.iter().map(|r| &r.attacked).collect::<Vec<_>>()),
                clean_refer_acc: mean(g.iter().map(|r| r.clean_refer_acc)).unwrap_or(0.0),
                attacked_refer_acc: mean(g.iter().map(|r| r.attacked_refer_acc)).unwrap_or(0.0),
            }
        })
        .collect()
}
