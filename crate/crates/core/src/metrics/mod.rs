//! Tracking metrics over the referred subset of ground-truth objects:
//! IDSW, IDSW_im, IDF1/IDP/IDR and HOTA/AssA/DetA.
//!
//! Every metric in a [`MetricReport`] is on a 0–100 scale.

mod io;

use std::collections::{BTreeMap, HashMap};

use crate::geometry::{iou, BBox};
use crate::scenegen::{ReferringQuery, SceneState};
use crate::trainer::hungarian;

pub use io::{read_ground_truth, read_predictions, write_ground_truth, write_predictions, GtRow};

/// Matching threshold for IDSW, IDSW_im and IDF1.
pub const CLEAR_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackEntry {
    pub track_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

pub type FrameRecord = Vec<TrackEntry>;
pub type TrackRecord = Vec<FrameRecord>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub id: u32,
    pub bbox: BBox,
}

/// Ground-truth boxes per frame.
pub type GroundTruth = Vec<Vec<GtBox>>;

/// Referent boxes of `scene` under `query`, per frame.
pub fn referent_ground_truth(scene: &SceneState, query: &ReferringQuery) -> GroundTruth {
    (0..scene.length)
        .map(|t| {
            scene
                .objects
                .iter()
                .filter(|o| query.referent_ids.contains(&o.object_id))
                .map(|o| GtBox { id: o.object_id, bbox: o.trajectory[t] })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub idsw: f64,
    /// Absent when no referent was matched just before the attack window.
    pub idsw_im: Option<f64>,
    pub hota: f64,
    pub assa: f64,
    pub deta: f64,
    pub idf1: f64,
    pub idp: f64,
    pub idr: f64,
}

impl MetricReport {
    pub const COLUMNS: [&'static str; 8] =
        ["idsw", "idsw_im", "hota", "assa", "deta", "idf1", "idp", "idr"];

    pub fn values(&self) -> [Option<f64>; 8] {
        [
            Some(self.idsw),
            self.idsw_im,
            Some(self.hota),
            Some(self.assa),
            Some(self.deta),
            Some(self.idf1),
            Some(self.idp),
            Some(self.idr),
        ]
    }
}

/// Window of attacked frames `[start, end)` plus the post-window horizon
/// inspected by IDSW_im.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttackWindow {
    pub start: usize,
    pub end: usize,
    pub horizon: usize,
}

pub fn evaluate(gt: &[Vec<GtBox>], pred: &[FrameRecord], window: Option<AttackWindow>) -> MetricReport {
    let h = hota(gt, pred);
    let f = idf1(gt, pred, CLEAR_THRESHOLD);
    MetricReport {
        idsw: idsw(gt, pred, CLEAR_THRESHOLD),
        idsw_im: window.and_then(|w| idsw_im(gt, pred, w)),
        hota: 100.0 * h.hota,
        assa: 100.0 * h.assa,
        deta: 100.0 * h.deta,
        idf1: 100.0 * f.idf1,
        idp: 100.0 * f.idp,
        idr: 100.0 * f.idr,
    }
}

/// Hungarian matching on `1 − IoU`. Pairs below `threshold` cost the
/// maximum of 1 and are dropped from the result.
pub fn match_frame(gt: &[GtBox], pred: &[TrackEntry], threshold: f64) -> Vec<(usize, usize)> {
    if gt.is_empty() || pred.is_empty() {
        return Vec::new();
    }
    let sims: Vec<Vec<f64>> =
        gt.iter().map(|g| pred.iter().map(|p| iou(&g.bbox, &p.bbox)).collect()).collect();
    let cost: Vec<Vec<f64>> = sims
        .iter()
        .map(|r| r.iter().map(|&s| if s >= threshold { 1.0 - s } else { 1.0 }).collect())
        .collect();
    hungarian(&cost)
        .expect("IoU costs are finite")
        .pairs
        .into_iter()
        .filter(|&(g, p)| sims[g][p] >= threshold)
        .collect()
}

/// Identity switches per 100 matched ground-truth frames.
pub fn idsw(gt: &[Vec<GtBox>], pred: &[FrameRecord], threshold: f64) -> f64 {
    let mut last: HashMap<u32, u64> = HashMap::new();
    let (mut switches, mut matched) = (0usize, 0usize);
    for (g, p) in gt.iter().zip(pred) {
        for (gi, pi) in match_frame(g, p, threshold) {
            matched += 1;
            let id = p[pi].track_id;
            if let Some(prev) = last.insert(g[gi].id, id) {
                switches += (prev != id) as usize;
            }
        }
    }
    if matched == 0 {
        0.0
    } else {
        100.0 * switches as f64 / matched as f64
    }
}

/// Percent of referents matched at `start − 1` whose first matched ID in
/// `[end, end + horizon)` differs from the pre-window ID, or which are never
/// matched there.
pub fn idsw_im(gt: &[Vec<GtBox>], pred: &[FrameRecord], w: AttackWindow) -> Option<f64> {
    if w.start == 0 || w.start > gt.len() || w.end < w.start {
        return None;
    }
    let ids_at = |t: usize| -> BTreeMap<u32, u64> {
        match (gt.get(t), pred.get(t)) {
            (Some(g), Some(p)) => match_frame(g, p, CLEAR_THRESHOLD)
                .into_iter()
                .map(|(gi, pi)| (g[gi].id, p[pi].track_id))
                .collect(),
            _ => BTreeMap::new(),
        }
    };
    let before = ids_at(w.start - 1);
    if before.is_empty() {
        return None;
    }
    let after: Vec<BTreeMap<u32, u64>> = (w.end..w.end + w.horizon).map(ids_at).collect();
    let switched = before
        .iter()
        .filter(|(gid, id0)| after.iter().find_map(|m| m.get(gid)) != Some(id0))
        .count();
    Some(100.0 * switched as f64 / before.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdScores {
    pub idf1: f64,
    pub idp: f64,
    pub idr: f64,
}

/// Identity F1 under the globally optimal one-to-one trajectory pairing.
pub fn idf1(gt: &[Vec<GtBox>], pred: &[FrameRecord], threshold: f64) -> IdScores {
    let (gt_ids, gt_len) = trajectory_lengths(gt.iter().map(|f| f.iter().map(|g| g.id as u64)));
    let (pr_ids, pr_len) = trajectory_lengths(pred.iter().map(|f| f.iter().map(|p| p.track_id)));
    let total_gt: usize = gt_len.iter().sum();
    let total_pr: usize = pr_len.iter().sum();
    if total_gt == 0 && total_pr == 0 {
        return IdScores { idf1: 1.0, idp: 1.0, idr: 1.0 };
    }
    let mut overlap = vec![vec![0usize; pr_ids.len()]; gt_ids.len()];
    for (g, p) in gt.iter().zip(pred) {
        for gb in g {
            for pe in p {
                if iou(&gb.bbox, &pe.bbox) >= threshold {
                    overlap[gt_ids[&(gb.id as u64)]][pr_ids[&pe.track_id]] += 1;
                }
            }
        }
    }
    let cost: Vec<Vec<f64>> = (0..gt_ids.len())
        .map(|i| {
            (0..pr_ids.len())
                .map(|j| (gt_len[i] + pr_len[j]) as f64 - 2.0 * overlap[i][j] as f64)
                .collect()
        })
        .collect();
    let idtp: usize = hungarian(&cost)
        .expect("finite costs")
        .pairs
        .iter()
        .map(|&(i, j)| overlap[i][j])
        .sum();
    let (idfn, idfp) = (total_gt - idtp, total_pr - idtp);
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    IdScores {
        idf1: ratio(2 * idtp, 2 * idtp + idfp + idfn),
        idp: ratio(idtp, idtp + idfp),
        idr: ratio(idtp, idtp + idfn),
    }
}

/// Dense indices and per-trajectory detection counts, in order of first appearance.
fn trajectory_lengths<I, F>(frames: I) -> (HashMap<u64, usize>, Vec<usize>)
where
    I: Iterator<Item = F>,
    F: Iterator<Item = u64>,
{
    let mut index = HashMap::new();
    let mut len = Vec::new();
    for frame in frames {
        for id in frame {
            let k = *index.entry(id).or_insert_with(|| {
                len.push(0);
                len.len() - 1
            });
            len[k] += 1;
        }
    }
    (index, len)
}

pub const HOTA_ALPHAS: usize = 19;

pub fn hota_alpha(k: usize) -> f64 {
    0.05 * (k + 1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct HotaScores {
    pub hota: f64,
    pub assa: f64,
    pub deta: f64,
    pub per_alpha: Vec<HotaAlpha>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HotaAlpha {
    pub alpha: f64,
    pub hota: f64,
    pub assa: f64,
    pub deta: f64,
}

/// HOTA averaged over α ∈ {0.05, …, 0.95}.
///
/// Each frame is matched once with Hungarian on IoU weighted by the global
/// alignment score of the (gt, track) pair; a matched pair counts as a TP at
/// every α its IoU reaches.
pub fn hota(gt: &[Vec<GtBox>], pred: &[FrameRecord]) -> HotaScores {
    let (gt_ids, gt_count) = trajectory_lengths(gt.iter().map(|f| f.iter().map(|g| g.id as u64)));
    let (pr_ids, pr_count) = trajectory_lengths(pred.iter().map(|f| f.iter().map(|p| p.track_id)));
    let n_gt: usize = gt_count.iter().sum();
    let n_pr: usize = pr_count.iter().sum();
    if n_gt == 0 && n_pr == 0 {
        let per_alpha = (0..HOTA_ALPHAS)
            .map(|k| HotaAlpha { alpha: hota_alpha(k), hota: 1.0, assa: 1.0, deta: 1.0 })
            .collect();
        return HotaScores { hota: 1.0, assa: 1.0, deta: 1.0, per_alpha };
    }

    let sims: Vec<Vec<Vec<f64>>> = gt
        .iter()
        .zip(pred)
        .map(|(g, p)| g.iter().map(|a| p.iter().map(|b| iou(&a.bbox, &b.bbox)).collect()).collect())
        .collect();

    let (ng, np) = (gt_count.len(), pr_count.len());
    let mut potential = vec![vec![0.0; np]; ng];
    for ((g, p), sim) in gt.iter().zip(pred).zip(&sims) {
        let row_sum: Vec<f64> = sim.iter().map(|r| r.iter().sum()).collect();
        let col_sum: Vec<f64> = (0..p.len()).map(|j| sim.iter().map(|r| r[j]).sum()).collect();
        for (i, gb) in g.iter().enumerate() {
            for (j, pe) in p.iter().enumerate() {
                let denom = row_sum[i] + col_sum[j] - sim[i][j];
                if denom > f64::EPSILON {
                    potential[gt_ids[&(gb.id as u64)]][pr_ids[&pe.track_id]] += sim[i][j] / denom;
                }
            }
        }
    }
    let alignment: Vec<Vec<f64>> = (0..ng)
        .map(|i| {
            (0..np)
                .map(|j| {
                    let denom = gt_count[i] as f64 + pr_count[j] as f64 - potential[i][j];
                    if denom > 0.0 {
                        potential[i][j] / denom
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let mut tp = [0usize; HOTA_ALPHAS];
    let mut matches = vec![vec![vec![0usize; np]; ng]; HOTA_ALPHAS];
    for ((g, p), sim) in gt.iter().zip(pred).zip(&sims) {
        if g.is_empty() || p.is_empty() {
            continue;
        }
        let gi: Vec<usize> = g.iter().map(|b| gt_ids[&(b.id as u64)]).collect();
        let pj: Vec<usize> = p.iter().map(|e| pr_ids[&e.track_id]).collect();
        let cost: Vec<Vec<f64>> = (0..g.len())
            .map(|i| (0..p.len()).map(|j| -alignment[gi[i]][pj[j]] * sim[i][j]).collect())
            .collect();
        for (i, j) in hungarian(&cost).expect("finite costs").pairs {
            for (k, m) in matches.iter_mut().enumerate() {
                if sim[i][j] >= hota_alpha(k) - f64::EPSILON {
                    tp[k] += 1;
                    m[gi[i]][pj[j]] += 1;
                }
            }
        }
    }

    let per_alpha: Vec<HotaAlpha> = (0..HOTA_ALPHAS)
        .map(|k| {
            let fn_ = n_gt - tp[k];
            let fp = n_pr - tp[k];
            let deta = tp[k] as f64 / (tp[k] + fn_ + fp).max(1) as f64;
            let mut ass_sum = 0.0;
            for i in 0..ng {
                for j in 0..np {
                    let c = matches[k][i][j];
                    if c > 0 {
                        let a = c as f64 / (gt_count[i] + pr_count[j] - c).max(1) as f64;
                        ass_sum += c as f64 * a;
                    }
                }
            }
            let assa = if tp[k] == 0 { 0.0 } else { ass_sum / tp[k] as f64 };
            HotaAlpha { alpha: hota_alpha(k), hota: (deta * assa).sqrt(), assa, deta }
        })
        .collect();
    let mean = |f: fn(&HotaAlpha) -> f64| per_alpha.iter().map(f).sum::<f64>() / HOTA_ALPHAS as f64;
    HotaScores {
        hota: mean(|a| a.hota),
        assa: mean(|a| a.assa),
        deta: mean(|a| a.deta),
        per_alpha,
    }
}

/// Fraction of scene objects whose referent status is predicted correctly,
/// averaged over `frames`. An object counts as predicted-referent when some
/// emitted track matches it at the CLEAR threshold.
pub fn referring_accuracy(
    scene: &SceneState,
    query: &ReferringQuery,
    pred: &[FrameRecord],
    frames: std::ops::Range<usize>,
) -> f64 {
    let mut acc = 0.0;
    let mut count = 0;
    for t in frames.filter(|&t| t < scene.length && t < pred.len()) {
        let all: Vec<GtBox> = scene
            .objects
            .iter()
            .map(|o| GtBox { id: o.object_id, bbox: o.trajectory[t] })
            .collect();
        let hit: Vec<bool> = {
            let mut h = vec![false; all.len()];
            for (gi, _) in match_frame(&all, &pred[t], CLEAR_THRESHOLD) {
                h[gi] = true;
            }
            h
        };
        let correct = all
            .iter()
            .zip(&hit)
            .filter(|(g, &h)| h == query.referent_ids.contains(&g.id))
            .count();
        acc += correct as f64 / all.len() as f64;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}
