//! Text formats shared by scene export and evaluation.
//!
//! Ground truth: `frame,id,cx,cy,w,h,color|direction|size,referent`.
//! Predictions:  `frame,track_id,cx,cy,w,h,score,1`.
//! Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{FrameRecord, GtBox, GroundTruth, TrackEntry};
use crate::error::{CoreError, Result};
use crate::geometry::BBox;
use crate::scenegen::Attributes;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtRow {
    pub frame: usize,
    pub id: u32,
    pub bbox: BBox,
    pub attributes: Attributes,
    pub referent: bool,
}

fn fields<'a>(line: &'a str, n: usize) -> std::result::Result<Vec<&'a str>, String> {
    let f: Vec<&str> = line.split(',').map(str::trim).collect();
    if f.len() != n {
        return Err(format!("expected {n} fields, found {}", f.len()));
    }
    Ok(f)
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("invalid {what} {s:?}"))
}

fn parse_lines<T>(
    path: &Path,
    kind: &'static str,
    mut row: impl FnMut(&str) -> std::result::Result<T, String>,
) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(row(line).map_err(|reason| CoreError::Format {
            kind,
            path: path.to_path_buf(),
            reason: format!("line {}: {reason}", n + 1),
        })?);
    }
    Ok(out)
}

fn bbox(f: &[&str]) -> std::result::Result<BBox, String> {
    Ok(BBox::new(parse(f[0], "cx")?, parse(f[1], "cy")?, parse(f[2], "w")?, parse(f[3], "h")?))
}

/// Reads a ground-truth file; the result holds only referent boxes, per frame.
pub fn read_ground_truth(path: &Path) -> Result<(GroundTruth, Vec<GtRow>)> {
    let rows = parse_lines(path, "ground-truth", |line| {
        let f = fields(line, 8)?;
        let referent = match f[7] {
            "0" => false,
            "1" => true,
            s => return Err(format!("invalid referent flag {s:?}")),
        };
        Ok(GtRow {
            frame: parse(f[0], "frame")?,
            id: parse(f[1], "id")?,
            bbox: bbox(&f[2..6])?,
            attributes: f[6].parse()?,
            referent,
        })
    })?;
    let len = rows.iter().map(|r| r.frame + 1).max().unwrap_or(0);
    let mut gt: GroundTruth = vec![Vec::new(); len];
    for r in rows.iter().filter(|r| r.referent) {
        gt[r.frame].push(GtBox { id: r.id, bbox: r.bbox });
    }
    Ok((gt, rows))
}

pub fn read_predictions(path: &Path, length: usize) -> Result<Vec<FrameRecord>> {
    let rows = parse_lines(path, "prediction", |line| {
        let f = fields(line, 8)?;
        let frame: usize = parse(f[0], "frame")?;
        let entry = TrackEntry {
            track_id: parse(f[1], "track_id")?,
            bbox: bbox(&f[2..6])?,
            score: parse(f[6], "score")?,
        };
        Ok((frame, entry))
    })?;
    let len = rows.iter().map(|(t, _)| t + 1).max().unwrap_or(0).max(length);
    let mut out = vec![Vec::new(); len];
    for (t, e) in rows {
        out[t].push(e);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, record: &[FrameRecord]) -> Result<()> {
    let mut s = String::from("# frame,track_id,cx,cy,w,h,score,1\n");
    for (t, frame) in record.iter().enumerate() {
        for e in frame {
            let b = e.bbox;
            writeln!(
                s,
                "{t},{},{:.17},{:.17},{:.17},{:.17},{:.17},1",
                e.track_id, b.cx, b.cy, b.w, b.h, e.score
            )
            .unwrap();
        }
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_ground_truth(path: &Path, rows: &[GtRow]) -> Result<()> {
    let mut s = String::from("# frame,id,cx,cy,w,h,attributes,referent\n");
    for r in rows {
        let b = r.bbox;
        writeln!(
            s,
            "{},{},{:.17},{:.17},{:.17},{:.17},{},{}",
            r.frame, r.id, b.cx, b.cy, b.w, b.h, r.attributes, r.referent as u8
        )
        .unwrap();
    }
    fs::write(path, s)?;
    Ok(())
}
